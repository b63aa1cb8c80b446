// SPDX-License-Identifier: MIT
// Tests for the moment-driven predictive controller: the reduced backward
// Riccati flow against closed forms and an independent full-matrix integrator,
// the variance envelopes, and the event-triggered rollout.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "flockmpc/mdpc.hpp"
#include "flockmpc/rng.hpp"

using namespace flockmpc;

namespace {

// Independent oracle: integrate the full N x N symmetric gain matrix backward,
// -dK/dt = K P + P K - (N/nu) K^2 + I/N with K(T) = 0, by RK4 on the same
// grid, written in forward time tau = T - t.
std::vector<Eigen::MatrixXd> matrix_riccati_oracle(double horizon, double dt,
                                                   int agents, double pbar,
                                                   double nu) {
  const int H = static_cast<int>(std::llround(horizon / dt));
  const Eigen::MatrixXd P = build_P(agents, pbar);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(agents, agents);
  const auto rate = [&](const Eigen::MatrixXd& k) {
    return Eigen::MatrixXd(k * P + P * k - (agents / nu) * k * k + I / agents);
  };
  std::vector<Eigen::MatrixXd> grid(H + 1);
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(agents, agents);
  grid[H] = k;
  for (int j = H; j > 0; --j) {
    const Eigen::MatrixXd k1 = rate(k);
    const Eigen::MatrixXd k2 = rate(k + 0.5 * dt * k1);
    const Eigen::MatrixXd k3 = rate(k + 0.5 * dt * k2);
    const Eigen::MatrixXd k4 = rate(k + dt * k3);
    k += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    grid[j - 1] = k;
  }
  return grid;
}

SimParams box_params(double horizon, double dt) {
  SimParams p;
  p.control_penalty = 0.1;
  p.horizon = horizon;
  p.dt = dt;
  return p;
}

}  // namespace

TEST_CASE("single-agent gain matches the hyperbolic-tangent closed form") {
  const double nu = 0.1, T = 3.0, dt = 1e-3;
  const ReducedGains gains = solve_reduced_riccati(T, dt, 1, 1.0, nu);
  const double root = std::sqrt(nu);
  double worst = 0.0;
  for (std::size_t j = 0; j < gains.times.size(); ++j) {
    const double exact = root * std::tanh((T - gains.times[j]) / root);
    worst = std::max(worst, std::abs(gains.kd[j] - exact));
  }
  REQUIRE(worst <= 1e-10);
  REQUIRE(gains.kd.back() == 0.0);
  REQUIRE(gains.ko.back() == 0.0);
}

TEST_CASE("two-scalar gains expand to the full matrix Riccati solution") {
  const double nu = 0.1, T = 2.0, dt = 1e-3;
  const int n = 3;
  const ReducedGains gains = solve_reduced_riccati(T, dt, n, 1.0, nu);
  const auto oracle = matrix_riccati_oracle(T, dt, n, 1.0, nu);

  double worst = 0.0;
  for (std::size_t j = 0; j < gains.times.size(); ++j) {
    const Eigen::MatrixXd expanded = expand_K22(gains, gains.times[j], n);
    worst = std::max(worst, (expanded - oracle[j]).cwiseAbs().maxCoeff());
  }
  REQUIRE(worst <= 1e-8);
}

TEST_CASE("reduced gain grid bookkeeping") {
  const ReducedGains gains = solve_reduced_riccati(1.0, 0.01, 4, 1.0, 0.1);
  REQUIRE(gains.times.size() == 101);
  REQUIRE(gains.times.front() == 0.0);
  REQUIRE(std::abs(gains.times.back() - 1.0) <= 1e-12);
  for (std::size_t j = 0; j + 1 < gains.kd.size(); ++j) REQUIRE(gains.kd[j] > 0.0);

  REQUIRE_THROWS_AS(solve_reduced_riccati(1.0, -0.1, 4, 1.0, 0.1),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(solve_reduced_riccati(1.0, 0.01, 4, 1.0, 0.0),
                    std::invalid_argument);
}

TEST_CASE("mean-interaction matrix couples agents to the average") {
  const Eigen::MatrixXd P = build_P(4, 2.0);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      const double expect = i == j ? 2.0 * (0.25 - 1.0) : 2.0 * 0.25;
      REQUIRE(std::abs(P(i, j) - expect) <= 1e-15);
    }
  }
  // Consensus directions are invariant: P annihilates constant vectors.
  REQUIRE((P * Eigen::VectorXd::Ones(4)).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("feedback equals the expanded-gain linear law") {
  const int n = 5, d = 2;
  const double nu = 0.1;
  const ReducedGains gains = solve_reduced_riccati(2.0, 0.01, n, 1.0, nu);
  const EnsembleState s = random_state(n, d, 0.0, 1.0, -1.0, 1.0, 52);
  const Eigen::MatrixXd w = s.velocities;

  for (double t : {0.0, 0.5, 1.75}) {
    const ControlField u = riccati_feedback(gains, t, w, nu);
    const Eigen::MatrixXd expect = -(n / nu) * expand_K22(gains, t, n) * w;
    REQUIRE((u - expect).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("variance envelopes anchor exactly and widen monotonically") {
  const ReducedGains gains = solve_reduced_riccati(5.0, 0.01, 8, 1.0, 0.1);
  const BoundParams bp;
  const double t0 = 1.0, sigma2 = 0.7;

  const auto at_anchor = variance_bounds(t0, t0, sigma2, gains, bp);
  REQUIRE(at_anchor.first == sigma2);
  REQUIRE(at_anchor.second == sigma2);

  double prev_gap = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double t = t0 + 0.01 * k;
    const auto [lower, upper] = variance_bounds(t0, t, sigma2, gains, bp);
    REQUIRE(lower >= 0.0);
    REQUIRE(lower <= upper);
    const double gap = upper - lower;
    REQUIRE(gap >= prev_gap - 1e-12);
    prev_gap = gap;
    REQUIRE(std::abs(variance_gap(t0, t, sigma2, gains, bp) - gap) <= 1e-15);
  }

  // Envelopes are homogeneous in the anchored variance.
  const auto one = variance_bounds(t0, t0 + 0.5, sigma2, gains, bp);
  const auto two = variance_bounds(t0, t0 + 0.5, 2.0 * sigma2, gains, bp);
  REQUIRE(std::abs(two.first - 2.0 * one.first) <= 1e-12);
  REQUIRE(std::abs(two.second - 2.0 * one.second) <= 1e-12);
}

TEST_CASE("event-triggered rollout bookkeeping and tolerance response") {
  const SimParams p = box_params(4.0, 0.01);
  const EnsembleState initial = random_state(8, 2, 0.0, 1.0, -1.0, 1.0, 96);

  MdpcConfig loose;
  loose.params = p;
  loose.delta_tol = 5.0;
  MdpcConfig tight;
  tight.params = p;
  tight.delta_tol = 0.25;

  const MdpcResult a = run_mdpc(initial, loose);
  const MdpcResult b = run_mdpc(initial, tight);
  const int H = p.steps();

  for (const MdpcResult* r : {&a, &b}) {
    REQUIRE(r->updates.step_count == H);
    REQUIRE(static_cast<int>(r->moments.times.size()) == H + 1);
    REQUIRE(r->bounds.size() == r->moments.times.size());
    REQUIRE(static_cast<int>(r->trajectory.controls.size()) == H);

    double prev = 0.0;
    for (double t : r->updates.update_times) {
      REQUIRE(t > prev);
      REQUIRE(t <= p.horizon + 1e-12);
      prev = t;
    }

    // Anchor rows coincide with the measured variance on both sides.
    REQUIRE(r->bounds.front().lower == r->bounds.front().sigma2);
    REQUIRE(r->bounds.front().upper == r->bounds.front().sigma2);
    for (double t : r->updates.update_times) {
      const auto row = std::find_if(
          r->bounds.begin(), r->bounds.end(),
          [&](const BoundRow& x) { return std::abs(x.t - t) < 1e-12; });
      REQUIRE(row != r->bounds.end());
      REQUIRE(row->lower == row->sigma2);
      REQUIRE(row->upper == row->sigma2);
    }

    // Between anchors the measured variance respects the envelopes (the
    // small-ensemble gap between the shadow model and the nonlinear flow is
    // absorbed by a 10% slack).
    for (const BoundRow& row : r->bounds) {
      REQUIRE(row.sigma2 >= 0.9 * row.lower - 1e-9);
      REQUIRE(row.sigma2 <= 1.1 * row.upper + 1e-9);
    }
  }

  REQUIRE(b.updates.update_times.size() >= a.updates.update_times.size());
  REQUIRE(!b.updates.update_times.empty());

  // The controller contracts the spread vs the free flow.
  const SimResult free_flow = simulate(initial, zero_control(), p);
  REQUIRE(b.moments.variance.back() < 0.5 * free_flow.moments.variance.back());

  // An enormous tolerance never re-anchors.
  MdpcConfig never;
  never.params = p;
  never.delta_tol = 1e9;
  REQUIRE(run_mdpc(initial, never).updates.update_times.empty());

  MdpcConfig bad;
  bad.params = p;
  bad.delta_tol = 0.0;
  REQUIRE_THROWS_AS(run_mdpc(initial, bad), std::invalid_argument);
}
