// SPDX-License-Identifier: MIT
#pragma once

// Offline supervised surrogates of the feedback laws.
//
// A fully connected network l_M ∘ ... ∘ l_1 (hidden layers with tanh or
// logistic activation, linear output) is fit to control labels u(s) or to
// value labels V(s) with their state gradients. Losses over a batch of B
// samples with input dimension n0:
//   L0 = (1/B) sum_b |y_b - yhat_b|^2
//   L1 = L0 + mu (1/B) sum_b |g_b - ghat_b|^2 / n0
// where ghat is the network's input gradient (scalar outputs only). All
// parameter gradients — including those of the gradient penalty, which need
// one differentiation of the backward pass itself — are hand-derived
// reverse-mode accumulations; optimization is mini-batch Adam. Every random
// choice (Glorot init, shuffling, state sampling) derives from one seed, so
// training is bitwise reproducible.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "flockmpc/ensemble.hpp"
#include "flockmpc/pmp.hpp"
#include "flockmpc/rng.hpp"
#include "flockmpc/sdre.hpp"

namespace flockmpc {

// ── Network ─────────────────────────────────────────────────────────────────

enum class Activation { tanh_fn, sigmoid_fn };

inline std::string activation_name(Activation a) {
  return a == Activation::tanh_fn ? "tanh" : "sigmoid";
}

inline Activation activation_from_name(const std::string& name) {
  if (name == "tanh") return Activation::tanh_fn;
  if (name == "sigmoid") return Activation::sigmoid_fn;
  throw std::invalid_argument("unknown activation: " + name);
}

struct NetworkSpec {
  int input_dim = 0;
  std::vector<int> hidden_widths;
  int output_dim = 0;
  Activation activation = Activation::tanh_fn;

  void validate() const {
    if (input_dim < 1 || output_dim < 1)
      throw std::invalid_argument("NetworkSpec: need positive dimensions");
    for (int w : hidden_widths)
      if (w < 1) throw std::invalid_argument("NetworkSpec: bad hidden width");
  }
};

namespace detail {

inline Eigen::MatrixXd activate(const Eigen::MatrixXd& s, Activation a) {
  if (a == Activation::tanh_fn) return s.array().tanh();
  return (1.0 / (1.0 + (-s.array()).exp())).matrix();
}

/// sigma'(s) expressed through z = sigma(s).
inline Eigen::MatrixXd prime_from_value(const Eigen::MatrixXd& z, Activation a) {
  if (a == Activation::tanh_fn) return (1.0 - z.array().square()).matrix();
  return (z.array() * (1.0 - z.array())).matrix();
}

/// sigma''(s) expressed through z = sigma(s).
inline Eigen::MatrixXd second_from_value(const Eigen::MatrixXd& z, Activation a) {
  if (a == Activation::tanh_fn)
    return (-2.0 * z.array() * (1.0 - z.array().square())).matrix();
  return (z.array() * (1.0 - z.array()) * (1.0 - 2.0 * z.array())).matrix();
}

}  // namespace detail

struct Network {
  NetworkSpec spec;
  std::vector<Eigen::MatrixXd> weights;  ///< layer l: (n_{l+1} x n_l)
  std::vector<Eigen::VectorXd> biases;

  [[nodiscard]] int layers() const { return static_cast<int>(weights.size()); }

  /// Batched forward pass, one sample per row; optionally keeps the hidden
  /// activations (cache[0] = input, cache[l] = layer-l activation).
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& x,
                                std::vector<Eigen::MatrixXd>* cache = nullptr) const {
    if (x.cols() != spec.input_dim)
      throw std::invalid_argument("forward: wrong input dimension");
    const int L = static_cast<int>(spec.hidden_widths.size());
    Eigen::MatrixXd z = x;
    if (cache) {
      cache->clear();
      cache->push_back(z);
    }
    for (int l = 0; l < L; ++l) {
      z = detail::activate(
          (z * weights[l].transpose()).rowwise() + biases[l].transpose(),
          spec.activation);
      if (cache) cache->push_back(z);
    }
    return (z * weights[L].transpose()).rowwise() + biases[L].transpose();
  }

  [[nodiscard]] Eigen::VectorXd forward(const Eigen::VectorXd& x) const {
    return forward_batch(x.transpose()).row(0).transpose();
  }

  /// Gradient of the (scalar) output with respect to the input.
  [[nodiscard]] Eigen::VectorXd input_gradient(const Eigen::VectorXd& x) const {
    if (spec.output_dim != 1)
      throw std::invalid_argument("input_gradient: scalar output required");
    return jacobian(x).row(0).transpose();
  }

  /// Full output-by-input Jacobian via one reverse sweep per output row.
  [[nodiscard]] Eigen::MatrixXd jacobian(const Eigen::VectorXd& x) const {
    const int L = static_cast<int>(spec.hidden_widths.size());
    std::vector<Eigen::MatrixXd> cache;
    forward_batch(x.transpose(), &cache);
    Eigen::MatrixXd v = weights[L];  // output_dim x n_L
    for (int l = L - 1; l >= 0; --l) {
      const Eigen::MatrixXd prime =
          detail::prime_from_value(cache[l + 1], spec.activation);
      v = (v.array().rowwise() * prime.row(0).array()).matrix() * weights[l];
    }
    return v;
  }
};

/// Glorot-uniform initialization, biases zero, one seeded draw order.
inline Network init_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Network net;
  net.spec = spec;
  std::mt19937_64 rng = make_rng(seed);
  std::vector<int> widths;
  widths.push_back(spec.input_dim);
  for (int w : spec.hidden_widths) widths.push_back(w);
  widths.push_back(spec.output_dim);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fan_in = widths[l], fan_out = widths[l + 1];
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> uni(-limit, limit);
    Eigen::MatrixXd w(fan_out, fan_in);
    for (int r = 0; r < fan_out; ++r)
      for (int c = 0; c < fan_in; ++c) w(r, c) = uni(rng);
    net.weights.push_back(std::move(w));
    net.biases.emplace_back(Eigen::VectorXd::Zero(fan_out));
  }
  return net;
}

// ── Loss and gradients ──────────────────────────────────────────────────────

struct ParamGrads {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;

  static ParamGrads zeros_like(const Network& net) {
    ParamGrads g;
    for (const Eigen::MatrixXd& w : net.weights)
      g.weights.emplace_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
    for (const Eigen::VectorXd& b : net.biases)
      g.biases.emplace_back(Eigen::VectorXd::Zero(b.size()));
    return g;
  }
};

/// Batch loss L0 (+ mu gradient penalty when grad_labels is non-null); fills
/// `grads` with the parameter gradient when non-null. The gradient penalty
/// requires a scalar output: its parameter gradient differentiates the
/// input-gradient computation a second time (sigma'' terms).
inline double loss_and_gradients(const Network& net, const Eigen::MatrixXd& x,
                                 const Eigen::MatrixXd& y,
                                 const Eigen::MatrixXd* grad_labels, double mu,
                                 ParamGrads* grads) {
  const int L = static_cast<int>(net.spec.hidden_widths.size());
  const double batch = static_cast<double>(x.rows());
  const Activation act = net.spec.activation;
  const bool penalize = grad_labels != nullptr && mu > 0.0;
  if (penalize && net.spec.output_dim != 1)
    throw std::invalid_argument("gradient penalty requires a scalar output");

  std::vector<Eigen::MatrixXd> z;  // z[0] = x, z[1..L] hidden activations
  const Eigen::MatrixXd yhat = net.forward_batch(x, &z);
  const Eigen::MatrixXd err = yhat - y;
  double loss = err.squaredNorm() / batch;

  // Reverse sequence of the batched input gradient: v[L] spans the output
  // layer row, u[l] = sigma'(s_{l+1}) .* v[l+1], v[l] = u[l] W_l, g = v[0].
  std::vector<Eigen::MatrixXd> u(L), v(L + 1);
  Eigen::MatrixXd seed;  // d(penalty)/d(g), one row per sample
  if (penalize) {
    const double n0 = static_cast<double>(net.spec.input_dim);
    v[L] = Eigen::MatrixXd::Ones(x.rows(), 1) * net.weights[L];
    for (int l = L - 1; l >= 0; --l) {
      u[l] = detail::prime_from_value(z[l + 1], act).cwiseProduct(v[l + 1]);
      v[l] = u[l] * net.weights[l];
    }
    const Eigen::MatrixXd gerr = v[0] - *grad_labels;
    loss += mu * gerr.squaredNorm() / (batch * n0);
    seed = 2.0 * mu / (batch * n0) * gerr;
  }

  if (!grads) return loss;
  *grads = ParamGrads::zeros_like(net);

  // Direct s-gradients injected by differentiating the reverse sequence.
  std::vector<Eigen::MatrixXd> s_extra(L + 1);
  if (penalize) {
    Eigen::MatrixXd vbar = seed;  // adjoint of v[l], starting at v[0] = g
    for (int l = 0; l < L; ++l) {
      const Eigen::MatrixXd ubar = vbar * net.weights[l].transpose();
      grads->weights[l] += u[l].transpose() * vbar;
      s_extra[l + 1] = detail::second_from_value(z[l + 1], act)
                           .cwiseProduct(v[l + 1])
                           .cwiseProduct(ubar);
      vbar = detail::prime_from_value(z[l + 1], act).cwiseProduct(ubar);
    }
    grads->weights[L] += vbar.colwise().sum();
  }

  // Standard reverse pass; the injected s-gradients ride along.
  const Eigen::MatrixXd dy = 2.0 / batch * err;
  grads->weights[L] += dy.transpose() * z[L];
  grads->biases[L] += dy.colwise().sum().transpose();
  Eigen::MatrixXd zbar = dy * net.weights[L];
  for (int l = L - 1; l >= 0; --l) {
    Eigen::MatrixXd delta =
        detail::prime_from_value(z[l + 1], act).cwiseProduct(zbar);
    if (s_extra[l + 1].size() > 0) delta += s_extra[l + 1];
    grads->weights[l] += delta.transpose() * z[l];
    grads->biases[l] += delta.colwise().sum().transpose();
    zbar = delta * net.weights[l];
  }
  return loss;
}

inline double evaluate_loss(const Network& net, const Eigen::MatrixXd& x,
                            const Eigen::MatrixXd& y,
                            const Eigen::MatrixXd* grad_labels = nullptr,
                            double mu = 0.0) {
  return loss_and_gradients(net, x, y, grad_labels, mu, nullptr);
}

// ── Training ────────────────────────────────────────────────────────────────

struct TrainConfig {
  int epochs = 100;
  int batch_size = 200;
  double learning_rate = 1e-3;
  double mu = 0.0;  ///< gradient-penalty weight (scalar-output models)
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct TrainResult {
  Network net;
  std::vector<double> epoch_loss;  ///< mean training loss per epoch
};

/// Mini-batch Adam on the given inputs/labels (grad_labels only for
/// gradient-penalized scalar models). Deterministic for a fixed config.
inline TrainResult train(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                         const Eigen::MatrixXd* grad_labels,
                         const NetworkSpec& spec, const TrainConfig& config) {
  if (x.rows() != y.rows() || x.rows() < 1)
    throw std::invalid_argument("train: input/label row mismatch");
  if (y.cols() != spec.output_dim)
    throw std::invalid_argument("train: label dimension != output_dim");
  if (grad_labels && grad_labels->rows() != x.rows())
    throw std::invalid_argument("train: gradient label row mismatch");

  TrainResult result;
  result.net = init_network(spec, derive_seed(config.seed, 11));
  Network& net = result.net;

  ParamGrads m = ParamGrads::zeros_like(net);
  ParamGrads s2 = ParamGrads::zeros_like(net);
  ParamGrads g;
  long step = 0;

  const auto adam_update = [&](Eigen::MatrixXd& param, Eigen::MatrixXd& mm,
                               Eigen::MatrixXd& vv, const Eigen::MatrixXd& gg) {
    mm = config.beta1 * mm + (1.0 - config.beta1) * gg;
    vv = config.beta2 * vv + (1.0 - config.beta2) * gg.cwiseProduct(gg);
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
    param -= (config.learning_rate / c1) *
             (mm.array() / ((vv.array() / c2).sqrt() + config.adam_eps)).matrix();
  };

  const int total = static_cast<int>(x.rows());
  std::vector<int> order(total);
  for (int i = 0; i < total; ++i) order[i] = i;
  std::mt19937_64 shuffle_rng = make_rng(derive_seed(config.seed, 13));

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_sum = 0.0;
    for (int start = 0; start < total; start += config.batch_size) {
      const int b = std::min(config.batch_size, total - start);
      Eigen::MatrixXd xb(b, x.cols()), yb(b, y.cols()), gb;
      if (grad_labels) gb.resize(b, grad_labels->cols());
      for (int i = 0; i < b; ++i) {
        xb.row(i) = x.row(order[start + i]);
        yb.row(i) = y.row(order[start + i]);
        if (grad_labels) gb.row(i) = grad_labels->row(order[start + i]);
      }
      const double batch_loss = loss_and_gradients(
          net, xb, yb, grad_labels ? &gb : nullptr, config.mu, &g);
      epoch_sum += batch_loss * b;
      ++step;
      for (int l = 0; l < net.layers(); ++l) {
        adam_update(net.weights[l], m.weights[l], s2.weights[l], g.weights[l]);
        Eigen::MatrixXd bias = net.biases[l], mb = m.biases[l], vb = s2.biases[l],
                        gbias = g.biases[l];
        adam_update(bias, mb, vb, gbias);
        net.biases[l] = bias;
        m.biases[l] = mb;
        s2.biases[l] = vb;
      }
    }
    result.epoch_loss.push_back(epoch_sum / total);
  }
  return result;
}

/// 100 * RMSE(predictions vs labels) / RMS(labels), componentwise means.
inline double prmse(const Eigen::MatrixXd& predictions,
                    const Eigen::MatrixXd& labels) {
  if (predictions.rows() != labels.rows() || predictions.cols() != labels.cols())
    throw std::invalid_argument("prmse: shape mismatch");
  const double rms = std::sqrt(labels.squaredNorm() /
                               static_cast<double>(labels.size()));
  if (!(rms > 0)) throw std::invalid_argument("prmse: labels are all zero");
  const double rmse = std::sqrt((predictions - labels).squaredNorm() /
                                static_cast<double>(labels.size()));
  return 100.0 * rmse / rms;
}

// ── Dataset generation ──────────────────────────────────────────────────────

struct TrainingSample {
  Eigen::VectorXd state;           ///< flat layout, 2 d N
  Eigen::VectorXd control;         ///< flat layout, d N
  double value = 0.0;
  Eigen::VectorXd value_gradient;  ///< flat layout, 2 d N
};

struct SampleBox {
  double pos_lo = 0.0, pos_hi = 1.0;
  double vel_lo = -1.0, vel_hi = 1.0;
};

struct Dataset {
  std::vector<TrainingSample> samples;
  int agents = 0;
  int dim = 0;
  int dropped = 0;  ///< states whose labeling solve failed
};

inline std::vector<EnsembleState> sample_states(int count, int agents, int dim,
                                                const SampleBox& box,
                                                std::uint64_t seed) {
  std::vector<EnsembleState> states;
  states.reserve(count);
  for (int i = 0; i < count; ++i)
    states.push_back(random_state(agents, dim, box.pos_lo, box.pos_hi, box.vel_lo,
                                  box.vel_hi, derive_seed(seed, 7, i)));
  return states;
}

enum class Labeler { pmp, sdre };

/// Label each state with the chosen synthesizer. Parallel across samples
/// (results keep index order, so the output is scheduling-independent);
/// failed solves are dropped and counted.
inline Dataset generate_dataset(const std::vector<EnsembleState>& states,
                                Labeler labeler, const SimParams& params,
                                const GradientSolverConfig& pmp_config = {},
                                int threads = 1) {
  Dataset out;
  if (states.empty()) return out;
  out.agents = states.front().agents();
  out.dim = states.front().dim();

  std::vector<std::optional<TrainingSample>> slots(states.size());
  const auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < states.size(); i += stride) {
      try {
        states[i].validate();
        LabelSample label =
            labeler == Labeler::pmp
                ? extract_sample(solve_pmp(states[i], params, pmp_config))
                : sdre_sample(states[i], params);
        TrainingSample ts;
        ts.state = flatten_state(states[i]);
        ts.control = flatten_rowmajor(label.u0);
        ts.value = label.value;
        ts.value_gradient = std::move(label.value_gradient);
        slots[i] = std::move(ts);
      } catch (const std::exception&) {
        // leave the slot empty; counted below
      }
    }
  };

  const int workers = std::max(1, threads);
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
      pool.emplace_back(work, static_cast<std::size_t>(w),
                        static_cast<std::size_t>(workers));
    for (std::thread& t : pool) t.join();
  }

  for (std::optional<TrainingSample>& slot : slots) {
    if (slot)
      out.samples.push_back(std::move(*slot));
    else
      ++out.dropped;
  }
  return out;
}

inline Eigen::MatrixXd dataset_inputs(const Dataset& ds) {
  Eigen::MatrixXd x(ds.samples.size(), 2 * ds.agents * ds.dim);
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    x.row(i) = ds.samples[i].state.transpose();
  return x;
}

inline Eigen::MatrixXd dataset_controls(const Dataset& ds) {
  Eigen::MatrixXd y(ds.samples.size(), ds.agents * ds.dim);
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    y.row(i) = ds.samples[i].control.transpose();
  return y;
}

inline Eigen::MatrixXd dataset_values(const Dataset& ds) {
  Eigen::MatrixXd y(ds.samples.size(), 1);
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    y(i, 0) = ds.samples[i].value;
  return y;
}

inline Eigen::MatrixXd dataset_value_gradients(const Dataset& ds) {
  Eigen::MatrixXd g(ds.samples.size(), 2 * ds.agents * ds.dim);
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    g.row(i) = ds.samples[i].value_gradient.transpose();
  return g;
}

// ── Learned feedback ────────────────────────────────────────────────────────

enum class ModelKind { control, value };

/// u = -(N / (2 gamma)) * (velocity block of grad V), the feedback layer
/// stacked on a value surrogate.
inline ControlField control_from_value_model(const Network& net,
                                             const EnsembleState& state,
                                             const SimParams& params) {
  const int n = state.agents(), d = state.dim();
  const Eigen::VectorXd grad = net.input_gradient(flatten_state(state));
  if (grad.size() != 2 * n * d)
    throw std::invalid_argument("control_from_value_model: dimension mismatch");
  return unflatten_rowmajor(
      -n / (2.0 * params.control_penalty) * grad.tail(n * d), n, d);
}

inline FeedbackFn learned_feedback(const Network& net, ModelKind kind,
                                   const SimParams& params) {
  if (kind == ModelKind::control)
    return [&net](const EnsembleState& s) {
      return unflatten_rowmajor(net.forward(flatten_state(s)), s.agents(),
                                s.dim());
    };
  return [&net, &params](const EnsembleState& s) {
    return control_from_value_model(net, s, params);
  };
}

struct LearnedRollout {
  SimResult sim;
  double seconds = 0.0;
};

inline LearnedRollout rollout_learned(const EnsembleState& initial,
                                      const Network& net, ModelKind kind,
                                      const SimParams& params) {
  LearnedRollout out;
  const auto t0 = std::chrono::steady_clock::now();
  out.sim = simulate(initial, learned_feedback(net, kind, params), params);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                    .count();
  return out;
}

// ── Model serialization ─────────────────────────────────────────────────────

inline nlohmann::json network_to_json(const Network& net,
                                      const nlohmann::json& metadata = {}) {
  nlohmann::json j;
  j["spec"] = {{"input_dim", net.spec.input_dim},
               {"hidden_widths", net.spec.hidden_widths},
               {"output_dim", net.spec.output_dim},
               {"activation", activation_name(net.spec.activation)}};
  j["weights"] = nlohmann::json::array();
  j["biases"] = nlohmann::json::array();
  for (const Eigen::MatrixXd& w : net.weights) {
    std::vector<double> flat(w.size());
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) flat[r * w.cols() + c] = w(r, c);
    j["weights"].push_back(flat);
  }
  for (const Eigen::VectorXd& b : net.biases)
    j["biases"].push_back(std::vector<double>(b.data(), b.data() + b.size()));
  j["metadata"] = metadata;
  return j;
}

inline Network network_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  spec.input_dim = j.at("spec").at("input_dim").get<int>();
  spec.hidden_widths = j.at("spec").at("hidden_widths").get<std::vector<int>>();
  spec.output_dim = j.at("spec").at("output_dim").get<int>();
  spec.activation =
      activation_from_name(j.at("spec").at("activation").get<std::string>());
  spec.validate();

  Network net;
  net.spec = spec;
  std::vector<int> widths;
  widths.push_back(spec.input_dim);
  for (int w : spec.hidden_widths) widths.push_back(w);
  widths.push_back(spec.output_dim);
  const auto& jw = j.at("weights");
  const auto& jb = j.at("biases");
  if (jw.size() + 1 != widths.size() || jb.size() + 1 != widths.size())
    throw std::invalid_argument("model file: layer count mismatch");
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::vector<double> flat = jw[l].get<std::vector<double>>();
    const std::vector<double> bias = jb[l].get<std::vector<double>>();
    const int rows = widths[l + 1], cols = widths[l];
    if (static_cast<int>(flat.size()) != rows * cols ||
        static_cast<int>(bias.size()) != rows)
      throw std::invalid_argument("model file: shape mismatch in layer " +
                                  std::to_string(l));
    Eigen::MatrixXd w(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) w(r, c) = flat[r * cols + c];
    net.weights.push_back(std::move(w));
    net.biases.emplace_back(
        Eigen::Map<const Eigen::VectorXd>(bias.data(), rows));
  }
  return net;
}

inline void save_network(const Network& net, const std::string& path,
                         const nlohmann::json& metadata = {}) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_network: cannot open " + path);
  out << network_to_json(net, metadata).dump(2) << "\n";
}

inline Network load_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_network: cannot open " + path);
  nlohmann::json j;
  in >> j;
  return network_from_json(j);
}

}  // namespace flockmpc
