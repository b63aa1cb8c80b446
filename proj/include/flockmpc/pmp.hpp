// SPDX-License-Identifier: MIT
#pragma once

// Open-loop optimal control by forward-backward sweeps.
//
// The control sequence u^0..u^{H-1} is optimized for the Euler-discretized
// dynamics and left-rectangle cost. The backward sweep below is the exact
// discrete adjoint of that scheme, so the reduced gradient
//   dJ/du^h = dt * ( (2 gamma / N) u^h + q^{h+1} )
// matches finite differences of the rolled-out cost to round-off, and the
// costate pair converges to the continuous adjoint system as dt -> 0:
//   dp_i/dt = -(1/N) sum_j (a'(r_ij)/r_ij) (x_i - x_j) <q_j - q_i, v_j - v_i>
//   dq_i/dt = -p_i - (1/N) sum_j a(r_ij) (q_j - q_i) - (2/N)(v_i - vbar)
// with terminal condition p(T) = q(T) = 0.

#include <algorithm>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "flockmpc/ensemble.hpp"

namespace flockmpc {

struct AdjointState {
  Eigen::MatrixXd p;  ///< costate of positions, N x d
  Eigen::MatrixXd q;  ///< costate of velocities, N x d
};

struct GradientSolverConfig {
  int max_iters = 200;
  double grad_tolerance = 1e-6;  ///< on max-abs entry of the reduced gradient
  /// First Armijo trial step; <= 0 selects N / (2 gamma), which solves the
  /// control subproblem exactly when the adjoint is frozen.
  double initial_step = 0.0;
  double armijo_factor = 0.5;
  double armijo_slope = 1e-4;
};

struct OpenLoopSolution {
  std::vector<double> times;            ///< grid nodes 0..H
  std::vector<EnsembleState> states;    ///< forward pass at the returned control
  std::vector<ControlField> controls;   ///< steps 0..H-1
  std::vector<AdjointState> adjoints;   ///< grid nodes 0..H, zero at node H
  double cost = 0.0;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

/// Feedback adapter replaying a fixed control sequence step by step.
inline FeedbackFn sequence_feedback(const std::vector<ControlField>& sequence) {
  auto index = std::make_shared<std::size_t>(0);
  return [&sequence, index](const EnsembleState&) -> ControlField {
    if (*index >= sequence.size())
      throw std::logic_error("sequence_feedback: ran past end of sequence");
    return sequence[(*index)++];
  };
}

}  // namespace detail

/// Roll the dynamics forward under a fixed control sequence.
inline SimResult rollout_sequence(const EnsembleState& initial,
                                  const std::vector<ControlField>& controls,
                                  const SimParams& params) {
  if (static_cast<int>(controls.size()) != params.steps())
    throw std::invalid_argument("rollout_sequence: control count != steps");
  return simulate(initial, detail::sequence_feedback(controls), params);
}

/// Gradient of sum_k <q_k, alignment_k(x, v)> with respect to x_i.
inline Eigen::MatrixXd alignment_position_vjp(const Eigen::MatrixXd& positions,
                                              const Eigen::MatrixXd& velocities,
                                              const Eigen::MatrixXd& q,
                                              const SimParams& params) {
  const int n = static_cast<int>(positions.rows());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, positions.cols());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const Eigen::RowVectorXd dx = positions.row(i) - positions.row(j);
      const Eigen::RowVectorXd dv = velocities.row(j) - velocities.row(i);
      const Eigen::RowVectorXd dq = q.row(j) - q.row(i);
      out.row(i) -= kernel_slope_over_r(dx.norm(), params) * dq.dot(dv) * dx;
    }
  }
  return out / static_cast<double>(n);
}

/// Gradient of sum_k <q_k, alignment_k(x, v)> with respect to v_i;
/// same coupling structure as the alignment term itself, acting on q.
inline Eigen::MatrixXd alignment_velocity_vjp(const Eigen::MatrixXd& positions,
                                              const Eigen::MatrixXd& q,
                                              const SimParams& params) {
  return alignment_rate(positions, q, params);
}

/// Backward sweep of the discrete adjoint over a stored forward trajectory.
/// Returns costates on all H+1 grid nodes; node H is exactly zero.
inline std::vector<AdjointState> backward_sweep(const Trajectory& traj,
                                                const SimParams& params) {
  const std::size_t H = traj.controls.size();
  if (traj.states.size() != H + 1)
    throw std::invalid_argument("backward_sweep: need one more state than controls");
  const int n = traj.states.front().agents();
  const int d = traj.states.front().dim();
  const double dtn = params.dt;

  std::vector<AdjointState> adj(H + 1);
  adj[H] = AdjointState{Eigen::MatrixXd::Zero(n, d), Eigen::MatrixXd::Zero(n, d)};
  for (std::size_t h = H; h-- > 0;) {
    const EnsembleState& s = traj.states[h];
    const AdjointState& next = adj[h + 1];
    const Eigen::RowVectorXd vbar = s.velocities.colwise().mean();
    const Eigen::MatrixXd cost_v =
        2.0 / n * (s.velocities.rowwise() - vbar);
    adj[h].p = next.p + dtn * alignment_position_vjp(s.positions, s.velocities,
                                                     next.q, params);
    adj[h].q = next.q +
               dtn * (next.p +
                      alignment_velocity_vjp(s.positions, next.q, params) + cost_v);
  }
  return adj;
}

/// Reduced gradient (2 gamma / N) u^h + q^{h+1} per step. `adjoints` must hold
/// one more node than `controls`; the step-h gradient pairs with node h+1.
inline std::vector<Eigen::MatrixXd> control_gradient(
    const std::vector<ControlField>& controls,
    const std::vector<AdjointState>& adjoints, const SimParams& params) {
  if (adjoints.size() != controls.size() + 1)
    throw std::invalid_argument("control_gradient: need one more adjoint node");
  std::vector<Eigen::MatrixXd> grad(controls.size());
  for (std::size_t h = 0; h < controls.size(); ++h) {
    const double n = static_cast<double>(controls[h].rows());
    grad[h] = 2.0 * params.control_penalty / n * controls[h] + adjoints[h + 1].q;
  }
  return grad;
}

/// Projected gradient descent with Armijo backtracking from u = 0.
/// Accepted iterates have non-increasing cost; `converged` reports whether the
/// max-abs reduced gradient reached the tolerance within max_iters.
inline OpenLoopSolution solve_pmp(const EnsembleState& initial,
                                  const SimParams& params,
                                  const GradientSolverConfig& config = {}) {
  params.validate();
  initial.validate();
  const int H = params.steps();
  const int n = initial.agents();
  const int d = initial.dim();

  std::vector<ControlField> u(H, Eigen::MatrixXd::Zero(n, d));
  SimResult sim = rollout_sequence(initial, u, params);
  double cost = sim.trajectory.cost_accumulated;

  double trial_step = config.initial_step > 0
                          ? config.initial_step
                          : n / (2.0 * params.control_penalty);
  std::vector<AdjointState> adj;
  OpenLoopSolution sol;
  sol.iterations = 0;

  for (int iter = 0; iter < config.max_iters; ++iter) {
    adj = backward_sweep(sim.trajectory, params);
    const std::vector<Eigen::MatrixXd> grad = control_gradient(u, adj, params);

    double grad_inf = 0.0, grad_sq = 0.0;
    for (const Eigen::MatrixXd& g : grad) {
      grad_inf = std::max(grad_inf, g.cwiseAbs().maxCoeff());
      grad_sq += params.dt * g.squaredNorm();
    }
    if (grad_inf <= config.grad_tolerance) {
      sol.converged = true;
      break;
    }

    bool accepted = false;
    double t = trial_step;
    for (int back = 0; back < 60; ++back) {
      std::vector<ControlField> candidate(H);
      for (int h = 0; h < H; ++h) candidate[h] = u[h] - t * grad[h];
      SimResult trial = rollout_sequence(initial, candidate, params);
      if (trial.trajectory.cost_accumulated <=
          cost - config.armijo_slope * t * grad_sq) {
        u = std::move(candidate);
        sim = std::move(trial);
        cost = sim.trajectory.cost_accumulated;
        trial_step = 2.0 * t;  // optimistic warm start for the next iteration
        accepted = true;
        break;
      }
      t *= config.armijo_factor;
    }
    ++sol.iterations;
    if (!accepted) break;  // line search stalled; return best iterate so far
  }

  adj = backward_sweep(sim.trajectory, params);
  sol.states = std::move(sim.trajectory.states);
  sol.controls = std::move(u);
  sol.adjoints = std::move(adj);
  sol.cost = cost;
  sol.times.resize(H + 1);
  for (int h = 0; h <= H; ++h) sol.times[h] = h * params.dt;
  return sol;
}

/// Training label extracted at the initial node of an open-loop solution:
/// first control, accumulated cost, and the cost gradient with respect to the
/// initial state in the canonical flat layout.
struct LabelSample {
  ControlField u0;
  double value = 0.0;
  Eigen::VectorXd value_gradient;
};

inline LabelSample extract_sample(const OpenLoopSolution& sol) {
  if (sol.controls.empty() || sol.adjoints.empty())
    throw std::invalid_argument("extract_sample: empty solution");
  LabelSample out;
  out.u0 = sol.controls.front();
  out.value = sol.cost;
  const AdjointState& a0 = sol.adjoints.front();
  out.value_gradient.resize(2 * a0.p.size());
  out.value_gradient.head(a0.p.size()) = flatten_rowmajor(a0.p);
  out.value_gradient.tail(a0.q.size()) = flatten_rowmajor(a0.q);
  return out;
}

}  // namespace flockmpc
