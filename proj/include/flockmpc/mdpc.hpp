// SPDX-License-Identifier: MIT
#pragma once

// Moment-driven predictive control.
//
// A constant-kernel linear surrogate w' = P w + u with
//   P = pbar (ones_{NxN}/N - I)
// admits a finite-horizon LQR solution whose matrix gain K22(t) has only two
// distinct entries; the pair (kd, ko) obeys the coupled backward ODEs
//   -kd' = -2 pbar alpha(N) (kd - ko/N) - (1/nu)(kd^2 + (alpha(N)/N) ko^2) + 1
//   -ko' =  2 pbar (kd - ko/N) - (1/nu)(2 kd ko + alpha(N) ko^2 - ko^2/N)
// with alpha(N) = (N-1)/N and kd(T) = ko(T) = 0, integrated here with
// backward RK4. The expansion K22 = (kd/N) I + (ko/N^2)(ones - I) is the
// unique scaling for which the matrix Riccati ODE with state cost I/N and the
// per-agent feedback
//   u_i = -(1/gamma) [ (kd - ko/N) w_i + (ko/N) sum_j w_j ]
// are simultaneously consistent (certified against a full-matrix solve).
//
// Between feedback re-anchorings the velocity variance of the controlled
// kernel dynamics is sandwiched by Gronwall-type envelopes: with kernel slack
// 0 <= -alpha_low <= a(r) <= beta_up,
//   lower(t) = sigma^2(t0) e^{-2 beta (t-t0)} (1 - B+_beta)^2
//   upper(t) = sigma^2(t0) e^{+2 alpha (t-t0)} (1 + B-_alpha)^2
//   B+-_c    = (1/nu) int_0^{t-t0} eta(s) kd(t0+s) e^{+-c s} ds
//   eta(s)   = exp( -2 pbar s - (1/nu) int_0^s kd(t0+r) dr ),
// all quadratures trapezoidal on the simulation grid. The predicted gap
// upper - lower exceeding delta_tol triggers the next re-anchoring.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "flockmpc/ensemble.hpp"

namespace flockmpc {

// ── Reduced Riccati gains ───────────────────────────────────────────────────

struct ReducedGains {
  std::vector<double> times;  ///< uniform grid 0..T
  std::vector<double> kd;     ///< diagonal gain, kd(T) = 0
  std::vector<double> ko;     ///< off-diagonal gain, ko(T) = 0
  double pbar = 1.0;
  double nu = 0.1;

  [[nodiscard]] double dt() const { return times.size() > 1 ? times[1] : 0.0; }

  [[nodiscard]] std::size_t index_at(double t) const {
    if (times.empty()) throw std::logic_error("ReducedGains: empty grid");
    const auto idx = static_cast<std::ptrdiff_t>(std::llround(t / dt()));
    if (idx < 0 || idx >= static_cast<std::ptrdiff_t>(times.size()))
      throw std::out_of_range("ReducedGains: time outside grid");
    return static_cast<std::size_t>(idx);
  }
};

/// Constant-kernel coupling matrix P = pbar (ones/N - I).
inline Eigen::MatrixXd build_P(int agents, double pbar) {
  return pbar * (Eigen::MatrixXd::Constant(agents, agents, 1.0 / agents) -
                 Eigen::MatrixXd::Identity(agents, agents));
}

/// Backward RK4 integration of the coupled (kd, ko) ODEs on a uniform grid.
inline ReducedGains solve_reduced_riccati(double horizon, double dt, int agents,
                                          double pbar, double nu) {
  if (!(dt > 0) || !(horizon >= dt) || agents < 1 || !(nu > 0))
    throw std::invalid_argument("solve_reduced_riccati: bad arguments");
  const int H = static_cast<int>(std::llround(horizon / dt));
  const double alpha = (agents - 1.0) / agents;
  const double n = agents;

  // Rates in reverse time tau = T - t (both gains grow from zero).
  const auto rate_d = [&](double kd, double ko) {
    return -2.0 * pbar * alpha * (kd - ko / n) -
           (kd * kd + alpha / n * ko * ko) / nu + 1.0;
  };
  const auto rate_o = [&](double kd, double ko) {
    return 2.0 * pbar * (kd - ko / n) -
           (2.0 * kd * ko + alpha * ko * ko - ko * ko / n) / nu;
  };

  ReducedGains g;
  g.pbar = pbar;
  g.nu = nu;
  g.times.resize(H + 1);
  g.kd.assign(H + 1, 0.0);
  g.ko.assign(H + 1, 0.0);
  for (int i = 0; i <= H; ++i) g.times[i] = i * dt;

  double kd = 0.0, ko = 0.0;
  for (int j = H; j-- > 0;) {
    const double d1 = rate_d(kd, ko), o1 = rate_o(kd, ko);
    const double d2 = rate_d(kd + 0.5 * dt * d1, ko + 0.5 * dt * o1);
    const double o2 = rate_o(kd + 0.5 * dt * d1, ko + 0.5 * dt * o1);
    const double d3 = rate_d(kd + 0.5 * dt * d2, ko + 0.5 * dt * o2);
    const double o3 = rate_o(kd + 0.5 * dt * d2, ko + 0.5 * dt * o2);
    const double d4 = rate_d(kd + dt * d3, ko + dt * o3);
    const double o4 = rate_o(kd + dt * d3, ko + dt * o3);
    kd += dt / 6.0 * (d1 + 2 * d2 + 2 * d3 + d4);
    ko += dt / 6.0 * (o1 + 2 * o2 + 2 * o3 + o4);
    if (!std::isfinite(kd) || !std::isfinite(ko))
      throw std::runtime_error("solve_reduced_riccati: gains diverged");
    g.kd[j] = kd;
    g.ko[j] = ko;
  }
  return g;
}

/// Full-matrix gain K22(t) = (kd/N) I + (ko/N^2)(ones - I).
inline Eigen::MatrixXd expand_K22(const ReducedGains& gains, double t, int agents) {
  const std::size_t i = gains.index_at(t);
  const double n = agents;
  return gains.kd[i] / n * Eigen::MatrixXd::Identity(agents, agents) +
         gains.ko[i] / (n * n) *
             (Eigen::MatrixXd::Ones(agents, agents) -
              Eigen::MatrixXd::Identity(agents, agents));
}

/// u_i = -(1/gamma) [ (kd - ko/N) w_i + (ko/N) sum_j w_j ], w the velocity
/// deviations from the fixed target (one row per agent).
inline ControlField riccati_feedback(const ReducedGains& gains, double t,
                                     const Eigen::MatrixXd& deviations,
                                     double gamma) {
  const std::size_t i = gains.index_at(t);
  const double n = static_cast<double>(deviations.rows());
  const Eigen::RowVectorXd sum = deviations.colwise().sum();
  ControlField u =
      (gains.kd[i] - gains.ko[i] / n) * deviations;
  u.rowwise() += gains.ko[i] / n * sum;
  return -u / gamma;
}

// ── Variance envelopes and re-anchoring trigger ─────────────────────────────

struct BoundParams {
  double alpha_low = 0.0;  ///< lower kernel slack (a >= -alpha_low)
  double beta_up = 1.0;    ///< upper kernel bound (a <= beta_up)
};

namespace detail {

/// Incremental trapezoidal evaluation of the variance envelopes along the
/// gain grid, anchored at node `anchor` with measured variance sigma2.
class BoundScan {
 public:
  BoundScan(const ReducedGains& gains, std::size_t anchor, double sigma2,
            const BoundParams& bounds)
      : gains_(&gains), bounds_(bounds), anchor_(anchor), sigma2_(sigma2) {
    phi_plus_prev_ = phi(0.0, 0.0, +bounds_.beta_up);
    phi_minus_prev_ = phi(0.0, 0.0, -bounds_.alpha_low);
  }

  /// Advance one grid node past the current position and return
  /// (lower, upper) at that node. First call returns the bounds at anchor+1.
  std::pair<double, double> advance() {
    const double dt = gains_->dt();
    const std::size_t j = anchor_ + ++offset_;
    if (j >= gains_->times.size())
      throw std::out_of_range("BoundScan: advanced past end of grid");
    const double s = offset_ * dt;
    // integral of kd from the anchor, then the envelope integrands at s
    ikd_ += 0.5 * dt * (gains_->kd[j - 1] + gains_->kd[j]);
    const double phi_plus = phi(s, ikd_, +bounds_.beta_up);
    const double phi_minus = phi(s, ikd_, -bounds_.alpha_low);
    bplus_ += 0.5 * dt * (phi_plus_prev_ + phi_plus) / gains_->nu;
    bminus_ += 0.5 * dt * (phi_minus_prev_ + phi_minus) / gains_->nu;
    phi_plus_prev_ = phi_plus;
    phi_minus_prev_ = phi_minus;

    const double shrink = std::max(0.0, 1.0 - bplus_);
    const double lower =
        sigma2_ * std::exp(-2.0 * bounds_.beta_up * s) * shrink * shrink;
    const double upper = sigma2_ * std::exp(2.0 * bounds_.alpha_low * s) *
                         (1.0 + bminus_) * (1.0 + bminus_);
    return {lower, upper};
  }

  [[nodiscard]] std::size_t position() const { return anchor_ + offset_; }

 private:
  [[nodiscard]] double phi(double s, double ikd, double c) const {
    // Standard-deviation decay of the linear shadow under its own feedback:
    // alignment contracts at rate pbar, the control at rate kd/nu. With
    // beta_up == pbar this makes B+ -> 1 and the lower envelope exactly the
    // worst-case-alignment times shadow-control variance decay.
    const double eta = std::exp(-gains_->pbar * s - ikd / gains_->nu);
    return eta * gains_->kd[anchor_ + offset_] * std::exp(c * s);
  }

  const ReducedGains* gains_;
  BoundParams bounds_;
  std::size_t anchor_;
  double sigma2_;
  std::size_t offset_ = 0;
  double ikd_ = 0.0;
  double bplus_ = 0.0;
  double bminus_ = 0.0;
  double phi_plus_prev_ = 0.0;
  double phi_minus_prev_ = 0.0;
};

}  // namespace detail

/// One-shot variance envelope (lower, upper) at grid time t, anchored at grid
/// time t0 with variance sigma2_t0. t = t0 returns (sigma2, sigma2).
inline std::pair<double, double> variance_bounds(double t0, double t,
                                                 double sigma2_t0,
                                                 const ReducedGains& gains,
                                                 const BoundParams& bounds) {
  const std::size_t i0 = gains.index_at(t0);
  const std::size_t i1 = gains.index_at(t);
  if (i1 < i0) throw std::invalid_argument("variance_bounds: t < t0");
  if (i1 == i0) return {sigma2_t0, sigma2_t0};
  detail::BoundScan scan(gains, i0, sigma2_t0, bounds);
  std::pair<double, double> lu{sigma2_t0, sigma2_t0};
  for (std::size_t j = i0; j < i1; ++j) lu = scan.advance();
  return lu;
}

/// Predicted spread upper - lower of the variance envelope; the trigger
/// quantity for re-anchoring. Zero at t = t0, nonnegative.
inline double variance_gap(double t0, double t, double sigma2_t0,
                           const ReducedGains& gains, const BoundParams& bounds) {
  const auto [lower, upper] = variance_bounds(t0, t, sigma2_t0, gains, bounds);
  return upper - lower;
}

// ── Event-triggered rollout ─────────────────────────────────────────────────

struct MdpcConfig {
  SimParams params;
  double delta_tol = 1.0;
  double pbar = 1.0;  ///< constant kernel weight of the linear surrogate, a(0)
};

struct UpdateLog {
  std::vector<double> update_times;  ///< strictly increasing, in (0, T]
  double delta_tol = 0.0;
  int step_count = 0;
};

struct BoundRow {
  double t = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double sigma2 = 0.0;  ///< empirical variance of the nonlinear ensemble
};

struct MdpcResult {
  Trajectory trajectory;
  MomentTrace moments;
  UpdateLog updates;
  std::vector<BoundRow> bounds;
};

/// Predictive rollout: the Riccati gains are solved once over [0, T]; a linear
/// shadow model w' = P w + u supplies the feedback; the same control drives
/// the nonlinear ensemble. Re-anchorings happen at the grid times where the
/// envelope gap, seeded with the measured nonlinear variance at the previous
/// anchor, first exceeds delta_tol; the shadow velocities are then reset to
/// the measured ones.
inline MdpcResult run_mdpc(const EnsembleState& initial, const MdpcConfig& config,
                           const BoundParams& bounds = {}) {
  const SimParams& params = config.params;
  params.validate();
  initial.validate();
  if (!(config.delta_tol > 0))
    throw std::invalid_argument("run_mdpc: delta_tol must be positive");

  const int H = params.steps();
  const int n = initial.agents();
  const Eigen::VectorXd target = params.target(initial.dim());
  // The LQR weight nu of the reduced problem coincides with the control
  // penalty gamma of the running cost.
  const ReducedGains gains = solve_reduced_riccati(params.horizon, params.dt, n,
                                                   config.pbar,
                                                   params.control_penalty);
  const Eigen::MatrixXd P = build_P(n, config.pbar);

  MdpcResult result;
  result.updates.delta_tol = config.delta_tol;
  result.updates.step_count = H;

  EnsembleState state = initial;
  Eigen::MatrixXd shadow = state.velocities.rowwise() - target.transpose();
  std::size_t anchor = 0;
  double sigma_anchor = velocity_variance(state, target);

  // Predict the next re-anchoring instant from the current anchor.
  const auto scan_trigger = [&](std::size_t from, double sigma2) -> std::size_t {
    detail::BoundScan scan(gains, from, sigma2, bounds);
    for (std::size_t j = from + 1; j <= static_cast<std::size_t>(H); ++j) {
      const auto [lower, upper] = scan.advance();
      if (upper - lower > config.delta_tol) return j;
    }
    return static_cast<std::size_t>(H) + 1;  // never
  };
  std::size_t next_update = scan_trigger(anchor, sigma_anchor);

  detail::BoundScan row_scan(gains, anchor, sigma_anchor, bounds);
  const auto record = [&](const EnsembleState& s, double lower, double upper) {
    result.moments.times.push_back(s.time);
    result.moments.mean_velocity.push_back(mean_velocity(s));
    result.moments.variance.push_back(velocity_variance(s, target));
    result.bounds.push_back(
        BoundRow{s.time, lower, upper, velocity_variance(s, target)});
  };

  result.trajectory.states.push_back(state);
  record(state, sigma_anchor, sigma_anchor);
  for (int h = 0; h < H; ++h) {
    const ControlField u =
        riccati_feedback(gains, gains.times[h], shadow, params.control_penalty);
    result.trajectory.cost_accumulated +=
        params.dt * running_cost(state, u, params);
    state = step(state, u, params);
    shadow += params.dt * (P * shadow + u);
    result.trajectory.controls.push_back(u);
    result.trajectory.states.push_back(state);

    const std::size_t node = static_cast<std::size_t>(h) + 1;
    if (node == next_update) {
      shadow = state.velocities.rowwise() - target.transpose();
      sigma_anchor = velocity_variance(state, target);
      anchor = node;
      result.updates.update_times.push_back(state.time);
      next_update = scan_trigger(anchor, sigma_anchor);
      row_scan = detail::BoundScan(gains, anchor, sigma_anchor, bounds);
      record(state, sigma_anchor, sigma_anchor);
    } else {
      const auto [lower, upper] = row_scan.advance();
      record(state, lower, upper);
    }
  }
  return result;
}

}  // namespace flockmpc
