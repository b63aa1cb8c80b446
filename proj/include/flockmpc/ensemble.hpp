// SPDX-License-Identifier: MIT
#pragma once

// Second-order velocity-alignment ensemble dynamics:
//
//   dx_i/dt = v_i
//   dv_i/dt = (1/N) sum_j a(|x_j - x_i|) (v_j - v_i) + u_i
//
// with communication kernel a(r) = K / (1 + r^2)^beta and running cost
//
//   (1/N) sum_j ( |vbar(t) - v_j(t)|^2 + gamma |u_j(t)|^2 ),
//
// where vbar is the instantaneous mean velocity. Explicit Euler on a uniform
// grid is the canonical integrator (RK4 available for refinement studies);
// the cost is accumulated with the left-rectangle rule on the same grid.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace flockmpc {

// ── Parameters and state ────────────────────────────────────────────────────

struct SimParams {
  double kernel_gain = 1.0;      ///< K in a(r) = K / (1 + r^2)^beta
  double kernel_exponent = 1.0;  ///< beta
  double control_penalty = 0.1;  ///< gamma weighting |u|^2 in the cost
  double horizon = 10.0;         ///< final time T
  double dt = 0.01;              ///< grid step
  /// Fixed reference velocity for moment traces and Riccati-type feedback.
  /// Empty means the zero vector of the ambient dimension.
  Eigen::VectorXd target_velocity;

  [[nodiscard]] int steps() const {
    return static_cast<int>(std::llround(horizon / dt));
  }

  void validate() const {
    if (!(kernel_gain > 0) || !(kernel_exponent > 0))
      throw std::invalid_argument("SimParams: kernel parameters must be positive");
    if (!(control_penalty > 0))
      throw std::invalid_argument("SimParams: control_penalty must be positive");
    if (!(dt > 0) || !(horizon > 0) || steps() < 1)
      throw std::invalid_argument("SimParams: need horizon >= dt > 0");
  }

  [[nodiscard]] Eigen::VectorXd target(int dim) const {
    if (target_velocity.size() == 0) return Eigen::VectorXd::Zero(dim);
    if (target_velocity.size() != dim)
      throw std::invalid_argument("SimParams: target_velocity has wrong dimension");
    return target_velocity;
  }
};

/// Positions and velocities are N x d (one agent per row).
struct EnsembleState {
  Eigen::MatrixXd positions;
  Eigen::MatrixXd velocities;
  double time = 0.0;

  [[nodiscard]] int agents() const { return static_cast<int>(positions.rows()); }
  [[nodiscard]] int dim() const { return static_cast<int>(positions.cols()); }

  void validate() const {
    if (positions.rows() != velocities.rows() ||
        positions.cols() != velocities.cols())
      throw std::invalid_argument("EnsembleState: position/velocity shape mismatch");
    if (positions.rows() < 1 || positions.cols() < 1)
      throw std::invalid_argument("EnsembleState: need at least one agent/dimension");
    if (!positions.allFinite() || !velocities.allFinite())
      throw std::invalid_argument("EnsembleState: non-finite entries");
  }
};

/// Per-agent control, same shape as velocities (N x d).
using ControlField = Eigen::MatrixXd;

/// Feedback law queried once per step at the step's start state
/// (zero-order hold over the step, also for RK4 stages).
using FeedbackFn = std::function<ControlField(const EnsembleState&)>;

struct MomentTrace {
  std::vector<double> times;
  std::vector<Eigen::VectorXd> mean_velocity;
  std::vector<double> variance;  ///< about the fixed target velocity
};

struct Trajectory {
  std::vector<EnsembleState> states;   ///< grid nodes 0..H
  std::vector<ControlField> controls;  ///< steps 0..H-1
  double cost_accumulated = 0.0;
};

struct SimResult {
  Trajectory trajectory;
  MomentTrace moments;
};

enum class Integrator { euler, rk4 };

// ── Kernel ──────────────────────────────────────────────────────────────────

/// Communication rate a(r) = K / (1 + r^2)^beta; positive, non-increasing.
inline double kernel_eval(double r, const SimParams& params) {
  if (!(r >= 0) || !std::isfinite(r))
    throw std::invalid_argument("kernel_eval: distance must be finite and >= 0");
  return params.kernel_gain * std::pow(1.0 + r * r, -params.kernel_exponent);
}

/// a'(r)/r = -2 beta K (1 + r^2)^(-beta-1); finite at r = 0, needed by the
/// adjoint equations where the kernel derivative always appears over r.
inline double kernel_slope_over_r(double r, const SimParams& params) {
  if (!(r >= 0) || !std::isfinite(r))
    throw std::invalid_argument("kernel_slope_over_r: distance must be finite and >= 0");
  return -2.0 * params.kernel_exponent * params.kernel_gain *
         std::pow(1.0 + r * r, -params.kernel_exponent - 1.0);
}

// ── Moments ─────────────────────────────────────────────────────────────────

inline Eigen::VectorXd mean_velocity(const EnsembleState& state) {
  return state.velocities.colwise().mean().transpose();
}

/// (1/N) sum_i |v_i - target|^2 about a fixed reference velocity.
inline double velocity_variance(const EnsembleState& state,
                                const Eigen::VectorXd& target) {
  const Eigen::MatrixXd dev =
      state.velocities.rowwise() - target.transpose();
  return dev.squaredNorm() / static_cast<double>(state.agents());
}

/// (1/N) sum_i |v_i - vbar|^2 about the instantaneous mean.
inline double velocity_variance_about_mean(const EnsembleState& state) {
  return velocity_variance(state, mean_velocity(state));
}

// ── Dynamics ────────────────────────────────────────────────────────────────

/// Alignment term (1/N) sum_j a(|x_j - x_i|)(v_j - v_i), row i per agent.
inline Eigen::MatrixXd alignment_rate(const Eigen::MatrixXd& positions,
                                      const Eigen::MatrixXd& velocities,
                                      const SimParams& params) {
  const int n = static_cast<int>(positions.rows());
  const int d = static_cast<int>(positions.cols());
  Eigen::MatrixXd rate = Eigen::MatrixXd::Zero(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double r = (positions.row(j) - positions.row(i)).norm();
      rate.row(i) += kernel_eval(r, params) *
                     (velocities.row(j) - velocities.row(i));
    }
  }
  return rate / static_cast<double>(n);
}

struct Drift {
  Eigen::MatrixXd position_rate;
  Eigen::MatrixXd velocity_rate;
};

inline Drift drift(const EnsembleState& state, const ControlField& control,
                   const SimParams& params) {
  if (control.rows() != state.positions.rows() ||
      control.cols() != state.positions.cols())
    throw std::invalid_argument("drift: control shape mismatch");
  return Drift{state.velocities,
               alignment_rate(state.positions, state.velocities, params) + control};
}

/// One step of the chosen integrator with the control held constant.
inline EnsembleState step(const EnsembleState& state, const ControlField& control,
                          const SimParams& params,
                          Integrator integrator = Integrator::euler) {
  const double h = params.dt;
  EnsembleState next = state;
  if (integrator == Integrator::euler) {
    const Drift k1 = drift(state, control, params);
    next.positions += h * k1.position_rate;
    next.velocities += h * k1.velocity_rate;
  } else {
    const auto stage = [&](const Drift& k, double scale) {
      EnsembleState s = state;
      s.positions += scale * k.position_rate;
      s.velocities += scale * k.velocity_rate;
      return s;
    };
    const Drift k1 = drift(state, control, params);
    const Drift k2 = drift(stage(k1, h / 2), control, params);
    const Drift k3 = drift(stage(k2, h / 2), control, params);
    const Drift k4 = drift(stage(k3, h), control, params);
    next.positions +=
        h / 6.0 * (k1.position_rate + 2 * k2.position_rate + 2 * k3.position_rate +
                   k4.position_rate);
    next.velocities +=
        h / 6.0 * (k1.velocity_rate + 2 * k2.velocity_rate + 2 * k3.velocity_rate +
                   k4.velocity_rate);
  }
  next.time = state.time + h;
  if (!next.positions.allFinite() || !next.velocities.allFinite())
    throw std::runtime_error("step: state became non-finite at t = " +
                             std::to_string(next.time));
  return next;
}

// ── Cost ────────────────────────────────────────────────────────────────────

/// Running cost (1/N) sum_j ( |vbar - v_j|^2 + gamma |u_j|^2 ),
/// vbar the instantaneous mean velocity.
inline double running_cost(const EnsembleState& state, const ControlField& control,
                           const SimParams& params) {
  return velocity_variance_about_mean(state) +
         params.control_penalty * control.squaredNorm() /
             static_cast<double>(state.agents());
}

/// Left-rectangle quadrature of the running cost over the stored grid.
inline double total_cost(const Trajectory& traj, const SimParams& params) {
  if (traj.states.size() != traj.controls.size() + 1)
    throw std::invalid_argument("total_cost: need one more state than controls");
  double cost = 0.0;
  for (std::size_t h = 0; h < traj.controls.size(); ++h)
    cost += params.dt * running_cost(traj.states[h], traj.controls[h], params);
  return cost;
}

// ── Simulation ──────────────────────────────────────────────────────────────

inline SimResult simulate(const EnsembleState& initial, const FeedbackFn& feedback,
                          const SimParams& params,
                          Integrator integrator = Integrator::euler) {
  params.validate();
  initial.validate();
  const int H = params.steps();
  const Eigen::VectorXd target = params.target(initial.dim());

  SimResult result;
  result.trajectory.states.reserve(H + 1);
  result.trajectory.controls.reserve(H);
  result.moments.times.reserve(H + 1);

  EnsembleState state = initial;
  const auto record_moments = [&](const EnsembleState& s) {
    result.moments.times.push_back(s.time);
    result.moments.mean_velocity.push_back(mean_velocity(s));
    result.moments.variance.push_back(velocity_variance(s, target));
  };

  result.trajectory.states.push_back(state);
  record_moments(state);
  for (int h = 0; h < H; ++h) {
    const ControlField u = feedback(state);
    result.trajectory.cost_accumulated +=
        params.dt * running_cost(state, u, params);
    state = step(state, u, params, integrator);
    result.trajectory.controls.push_back(u);
    result.trajectory.states.push_back(state);
    record_moments(state);
  }
  return result;
}

inline FeedbackFn zero_control() {
  return [](const EnsembleState& s) {
    return ControlField(Eigen::MatrixXd::Zero(s.agents(), s.dim()));
  };
}

// ── Flat state layout ───────────────────────────────────────────────────────
// Canonical vectorization s = (x_1^1..x_1^d, ..., x_N^1..x_N^d,
//                              v_1^1..v_1^d, ..., v_N^1..v_N^d):
// agent-major with coordinates contiguous per agent, positions before
// velocities. All operators on flat states (averaging, velocity couplings,
// surrogate inputs) share this layout.

inline Eigen::VectorXd flatten_rowmajor(const Eigen::MatrixXd& m) {
  Eigen::VectorXd out(m.size());
  for (int i = 0; i < m.rows(); ++i)
    out.segment(i * m.cols(), m.cols()) = m.row(i).transpose();
  return out;
}

inline Eigen::MatrixXd unflatten_rowmajor(const Eigen::VectorXd& v, int rows,
                                          int cols) {
  if (v.size() != static_cast<Eigen::Index>(rows) * cols)
    throw std::invalid_argument("unflatten_rowmajor: size mismatch");
  Eigen::MatrixXd out(rows, cols);
  for (int i = 0; i < rows; ++i)
    out.row(i) = v.segment(i * cols, cols).transpose();
  return out;
}

inline Eigen::VectorXd flatten_state(const EnsembleState& state) {
  Eigen::VectorXd out(2 * state.positions.size());
  out.head(state.positions.size()) = flatten_rowmajor(state.positions);
  out.tail(state.positions.size()) = flatten_rowmajor(state.velocities);
  return out;
}

inline EnsembleState unflatten_state(const Eigen::VectorXd& flat, int agents,
                                     int dim, double time = 0.0) {
  if (flat.size() != 2 * static_cast<Eigen::Index>(agents) * dim)
    throw std::invalid_argument("unflatten_state: size mismatch");
  EnsembleState s;
  s.positions = unflatten_rowmajor(flat.head(agents * dim), agents, dim);
  s.velocities = unflatten_rowmajor(flat.tail(agents * dim), agents, dim);
  s.time = time;
  return s;
}

/// Uniform random state: positions in [pos_lo, pos_hi]^d,
/// velocities in [vel_lo, vel_hi]^d, one fixed draw order.
inline EnsembleState random_state(int agents, int dim, double pos_lo, double pos_hi,
                                  double vel_lo, double vel_hi,
                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(pos_lo, pos_hi);
  std::uniform_real_distribution<double> vel(vel_lo, vel_hi);
  EnsembleState s;
  s.positions.resize(agents, dim);
  s.velocities.resize(agents, dim);
  for (int i = 0; i < agents; ++i)
    for (int k = 0; k < dim; ++k) s.positions(i, k) = pos(rng);
  for (int i = 0; i < agents; ++i)
    for (int k = 0; k < dim; ++k) s.velocities(i, k) = vel(rng);
  return s;
}

}  // namespace flockmpc
