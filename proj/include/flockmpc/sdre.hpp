// SPDX-License-Identifier: MIT
#pragma once

// State-dependent Riccati feedback for the alignment ensemble.
//
// Freezing the kernel weights at the current positions makes the velocity
// dynamics linear, vec(v)' = A_vel vec(v) + vec(u), with A_vel symmetric,
// zero block-row sums, and negative semidefinite. The consensus running cost
// is vec(v)' Q_vel vec(v) + vec(u)' R vec(u) with
//   Q_vel = (1/N)(I - C),   R = (gamma/N) I,
// C the per-coordinate averaging operator. The continuous-time algebraic
// Riccati equation A'P + PA - P R^{-1} P + Q = 0 (input matrix = I) is solved
// by Newton-Kleinman iteration, each step one symmetric Lyapunov solve; the
// feedback is u = -R^{-1} P vec(v), recomputed on a freeze/refresh schedule.
//
// All operators vanish on the consensus subspace range(C) (zero block-column
// sums), so the closed loop keeps an exact zero eigenvalue there and the
// stabilizing solution satisfies P C = 0. The Lyapunov solves shift that
// subspace by -mu C: the shifted equation is nonsingular and has the same
// solution because the right-hand side also vanishes on range(C).

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "flockmpc/ensemble.hpp"
#include "flockmpc/pmp.hpp"

namespace flockmpc {

// ── Semilinear operators ────────────────────────────────────────────────────

/// Per-coordinate averaging operator C = (1/N)(ones_{NxN} (x) I_d) in the
/// canonical agent-major layout; C^2 = C, symmetric.
inline Eigen::MatrixXd averaging_operator(int agents, int dim) {
  const int m = agents * dim;
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(m, m);
  for (int i = 0; i < agents; ++i)
    for (int j = 0; j < agents; ++j)
      for (int k = 0; k < dim; ++k)
        c(i * dim + k, j * dim + k) = 1.0 / agents;
  return c;
}

/// Frozen-kernel velocity coupling matrix: off-diagonal agent blocks
/// (a(|x_j - x_i|)/N) I_d, diagonal blocks -(1/N) sum_{k != i} a(|x_k - x_i|) I_d.
inline Eigen::MatrixXd build_A_vel(const EnsembleState& state,
                                   const SimParams& params) {
  const int n = state.agents();
  const int d = state.dim();
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n * d, n * d);
  for (int i = 0; i < n; ++i) {
    double row_sum = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double w =
          kernel_eval((state.positions.row(j) - state.positions.row(i)).norm(),
                      params) /
          n;
      row_sum += w;
      for (int k = 0; k < d; ++k) a(i * d + k, j * d + k) = w;
    }
    for (int k = 0; k < d; ++k) a(i * d + k, i * d + k) = -row_sum;
  }
  return a;
}

struct CostOperators {
  Eigen::MatrixXd Q_vel;  ///< (1/N)(I - C)
  Eigen::MatrixXd R;      ///< (gamma/N) I
};

inline CostOperators build_cost_operators(int agents, int dim, double gamma) {
  const int m = agents * dim;
  CostOperators ops;
  ops.Q_vel = (Eigen::MatrixXd::Identity(m, m) - averaging_operator(agents, dim)) /
              agents;
  ops.R = gamma / agents * Eigen::MatrixXd::Identity(m, m);
  return ops;
}

// ── Continuous-time algebraic Riccati equation ──────────────────────────────

struct CareSolution {
  Eigen::MatrixXd Pi;
  double residual_norm = 0.0;
  int iterations = 0;
};

struct CareOptions {
  double tol = 1e-9;
  int max_iters = 100;
  /// Optional stabilizing initial guess (must make A - R^{-1} Pi0 Hurwitz on
  /// the subspace orthogonal to `deflate`'s range).
  std::optional<Eigen::MatrixXd> initial_guess;
  /// Optional projector onto a cost-free invariant subspace (the consensus
  /// modes): Lyapunov solves are shifted by -mu * deflate there.
  std::optional<Eigen::MatrixXd> deflate;
};

namespace detail {

inline void require_symmetric(const Eigen::MatrixXd& m, const char* what) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw std::invalid_argument(std::string(what) + ": matrix must be symmetric");
}

/// Uniform diagonal coefficient of R, or throw; the symmetric Lyapunov
/// formulation below relies on R = r I.
inline double uniform_diagonal(const Eigen::MatrixXd& r) {
  const double v = r(0, 0);
  if (!(v > 0) ||
      (r - v * Eigen::MatrixXd::Identity(r.rows(), r.cols())).cwiseAbs().maxCoeff() >
          1e-12 * v)
    throw std::invalid_argument("solve_care: R must be a positive multiple of I");
  return v;
}

/// Solve A X + X A = -W for symmetric Hurwitz A via eigendecomposition.
inline Eigen::MatrixXd lyapunov_symmetric(const Eigen::MatrixXd& a,
                                          const Eigen::MatrixXd& w) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a);
  const Eigen::MatrixXd& u = eig.eigenvectors();
  const Eigen::VectorXd& lam = eig.eigenvalues();
  Eigen::MatrixXd wt = u.transpose() * w * u;
  for (int i = 0; i < wt.rows(); ++i)
    for (int j = 0; j < wt.cols(); ++j) wt(i, j) /= -(lam(i) + lam(j));
  return u * wt * u.transpose();
}

}  // namespace detail

/// Newton-Kleinman iteration for A'P + PA - P R^{-1} P + Q = 0 (input matrix
/// identity, A and Q symmetric, R = r I). Quadratically convergent from a
/// stabilizing guess; throws with the last residual if max_iters is exhausted.
inline CareSolution solve_care(const Eigen::MatrixXd& A, const Eigen::MatrixXd& Q,
                               const Eigen::MatrixXd& R,
                               const CareOptions& options = {}) {
  detail::require_symmetric(A, "solve_care A");
  detail::require_symmetric(Q, "solve_care Q");
  const double r = detail::uniform_diagonal(R);
  const int m = static_cast<int>(A.rows());
  const double shift = 1.0;

  Eigen::MatrixXd pi;
  if (options.initial_guess) {
    pi = *options.initial_guess;
  } else {
    const double lam_max =
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(A).eigenvalues().maxCoeff();
    pi = lam_max < -1e-12
             ? Eigen::MatrixXd::Zero(m, m)
             : Eigen::MatrixXd(r * (A + (lam_max + 1.0) *
                                            Eigen::MatrixXd::Identity(m, m)));
  }

  const auto residual = [&](const Eigen::MatrixXd& p) {
    return Eigen::MatrixXd(A * p + p * A - p * p / r + Q);
  };

  CareSolution sol;
  double res = residual(pi).norm();
  for (int iter = 0; iter < options.max_iters; ++iter) {
    if (res <= options.tol) {
      sol.Pi = pi;
      sol.residual_norm = res;
      sol.iterations = iter;
      return sol;
    }
    Eigen::MatrixXd a_cl = A - pi / r;
    if (options.deflate) a_cl -= shift * (*options.deflate);
    const Eigen::MatrixXd w = Q + pi * pi / r;
    pi = detail::lyapunov_symmetric(a_cl, w);
    pi = 0.5 * (pi + pi.transpose());
    res = residual(pi).norm();
  }
  throw std::runtime_error(
      "solve_care: no convergence within max_iters; last residual " +
      std::to_string(res));
}

/// CARE for the frozen velocity subsystem at the given state, deflating the
/// consensus subspace and starting from the kernel-averaged constant guess.
inline CareSolution solve_velocity_care(const EnsembleState& state,
                                        const SimParams& params,
                                        double tol = 1e-9) {
  const int n = state.agents();
  const int d = state.dim();
  const Eigen::MatrixXd a_vel = build_A_vel(state, params);
  const CostOperators cost = build_cost_operators(n, d, params.control_penalty);
  const Eigen::MatrixXd c = averaging_operator(n, d);

  double abar = 0.0;
  if (n > 1) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (j != i)
          abar += kernel_eval(
              (state.positions.row(j) - state.positions.row(i)).norm(), params);
    abar /= static_cast<double>(n) * (n - 1);
  }
  // Analytic stabilizing solution for the kernel-averaged constant coupling:
  // on the disagreement subspace the CARE is scalar with drift -abar and state
  // cost 1/N, giving pi = (gamma/N)(-abar + sqrt(abar^2 + 1/gamma)).
  const double gamma = params.control_penalty;
  const double pi0 =
      gamma / n * (-abar + std::sqrt(abar * abar + 1.0 / gamma));

  CareOptions options;
  options.tol = tol;
  options.initial_guess =
      pi0 * (Eigen::MatrixXd::Identity(n * d, n * d) - c);
  options.deflate = c;
  return solve_care(a_vel, cost.Q_vel, cost.R, options);
}

/// u = -R^{-1} Pi vec(v), reshaped to one row per agent.
inline ControlField sdre_feedback(const EnsembleState& state,
                                  const SimParams& params,
                                  const Eigen::MatrixXd& Pi) {
  const int n = state.agents();
  const Eigen::VectorXd v = flatten_rowmajor(state.velocities);
  const Eigen::VectorXd u = -(n / params.control_penalty) * (Pi * v);
  return unflatten_rowmajor(u, n, state.dim());
}

// ── Frozen-Riccati receding-horizon rollout ─────────────────────────────────

struct SdreRunResult {
  SimResult sim;
  int care_solves = 0;
};

/// Roll out the ensemble under frozen-Riccati feedback, re-solving the CARE at
/// the current state every `refresh_steps` steps (1 = every step).
inline SdreRunResult frozen_sdre_mpc(const EnsembleState& initial,
                                     const SimParams& params, int refresh_steps,
                                     double care_tol = 1e-9) {
  if (refresh_steps < 1)
    throw std::invalid_argument("frozen_sdre_mpc: refresh_steps must be >= 1");
  auto counter = std::make_shared<int>(0);
  auto solves = std::make_shared<int>(0);
  auto pi = std::make_shared<Eigen::MatrixXd>();
  FeedbackFn feedback = [=, &params](const EnsembleState& s) {
    if (*counter % refresh_steps == 0) {
      *pi = solve_velocity_care(s, params, care_tol).Pi;
      ++*solves;
    }
    ++*counter;
    return sdre_feedback(s, params, *pi);
  };
  SdreRunResult out;
  out.sim = simulate(initial, feedback, params);
  out.care_solves = *solves;
  return out;
}

/// Training label at one state: feedback control, quadratic value
/// V = vec(v)' Pi vec(v), and its state gradient (0, 2 Pi vec(v)) in the
/// canonical flat layout.
inline LabelSample sdre_sample(const EnsembleState& state,
                               const SimParams& params, double care_tol = 1e-9) {
  const CareSolution care = solve_velocity_care(state, params, care_tol);
  const Eigen::VectorXd v = flatten_rowmajor(state.velocities);
  LabelSample out;
  out.u0 = sdre_feedback(state, params, care.Pi);
  out.value = v.dot(care.Pi * v);
  out.value_gradient = Eigen::VectorXd::Zero(2 * v.size());
  out.value_gradient.tail(v.size()) = 2.0 * (care.Pi * v);
  return out;
}

}  // namespace flockmpc
