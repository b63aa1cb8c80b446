// SPDX-License-Identifier: MIT
#pragma once

// Experiment harness: configuration files, method dispatch, the two
// reproduction pipelines, benchmarking, and artifact emission.
//
// Config files are INI-style ([section], key = value, '#'/';' comments);
// flat keys "section.key" can be overridden programmatically (the CLI maps
// flags onto them). Every run is deterministic in (config, seed): initial
// states and all derived randomness come from one master seed per run.
// Reports carry a wall-clock phase decomposition whose sum matches the
// run total by construction.

#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "flockmpc/csv.hpp"
#include "flockmpc/ensemble.hpp"
#include "flockmpc/mdpc.hpp"
#include "flockmpc/pmp.hpp"
#include "flockmpc/rng.hpp"
#include "flockmpc/sdre.hpp"
#include "flockmpc/surrogate.hpp"

namespace flockmpc {

// ── Config files ────────────────────────────────────────────────────────────

class ConfigMap {
 public:
  static ConfigMap parse_string(const std::string& text) {
    ConfigMap cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string s = trim(strip_comment(line));
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']')
          throw std::invalid_argument("config line " + std::to_string(lineno) +
                                      ": unterminated section header");
        section = trim(s.substr(1, s.size() - 2));
        continue;
      }
      const std::size_t eq = s.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": expected key = value");
      std::string key = trim(s.substr(0, eq));
      if (key.empty())
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": empty key");
      if (!section.empty()) key = section + "." + key;
      cfg.values_[key] = trim(s.substr(eq + 1));
    }
    return cfg;
  }

  static ConfigMap from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str());
  }

  void set(const std::string& key, const std::string& value) {
    values_[key] = value;
  }

  [[nodiscard]] bool has(const std::string& key) const {
    return values_.count(key) > 0;
  }

  [[nodiscard]] std::string get(const std::string& key,
                                const std::string& fallback = "") const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  [[nodiscard]] double get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stod(it->second);
  }

  [[nodiscard]] int get_int(const std::string& key, int fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stoi(it->second);
  }

  [[nodiscard]] std::vector<std::uint64_t> get_seed_list(
      const std::string& key, std::vector<std::uint64_t> fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<std::uint64_t> out;
    for (const std::string& tok : split_list(it->second))
      out.push_back(std::stoull(tok));
    if (out.empty()) throw std::invalid_argument("empty list for " + key);
    return out;
  }

  [[nodiscard]] std::vector<int> get_int_list(const std::string& key,
                                              std::vector<int> fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<int> out;
    for (const std::string& tok : split_list(it->second))
      out.push_back(std::stoi(tok));
    return out;
  }

  [[nodiscard]] std::vector<double> get_double_list(
      const std::string& key, std::vector<double> fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    for (const std::string& tok : split_list(it->second))
      out.push_back(std::stod(tok));
    return out;
  }

  [[nodiscard]] const std::map<std::string, std::string>& items() const {
    return values_;
  }

 private:
  static std::string strip_comment(const std::string& s) {
    const std::size_t pos = s.find_first_of("#;");
    return pos == std::string::npos ? s : s.substr(0, pos);
  }
  static std::string trim(const std::string& s) {
    const char* ws = " \t\r\n";
    const std::size_t a = s.find_first_not_of(ws);
    if (a == std::string::npos) return "";
    const std::size_t b = s.find_last_not_of(ws);
    return s.substr(a, b - a + 1);
  }
  static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, ',')) {
      const std::string t = trim(cur);
      if (!t.empty()) out.push_back(t);
    }
    return out;
  }

  std::map<std::string, std::string> values_;
};

// ── Experiment configuration ────────────────────────────────────────────────

enum class Method { uncontrolled, pmp, sdre_mpc, mdpc, learned_u, learned_v };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::uncontrolled: return "uncontrolled";
    case Method::pmp: return "pmp";
    case Method::sdre_mpc: return "sdre-mpc";
    case Method::mdpc: return "mdpc";
    case Method::learned_u: return "learned-u";
    case Method::learned_v: return "learned-v";
  }
  throw std::logic_error("unreachable");
}

inline Method method_from_name(std::string name) {
  for (char& c : name)
    if (c == '_') c = '-';
  if (name == "uncontrolled") return Method::uncontrolled;
  if (name == "pmp") return Method::pmp;
  if (name == "sdre-mpc" || name == "sdre") return Method::sdre_mpc;
  if (name == "mdpc") return Method::mdpc;
  if (name == "learned-u") return Method::learned_u;
  if (name == "learned-v") return Method::learned_v;
  throw std::invalid_argument("unknown method: " + name);
}

struct ExperimentConfig {
  Method method = Method::uncontrolled;
  SimParams params;
  int agents = 50;
  int dim = 2;
  SampleBox box;  ///< initial-condition box (positions and velocities)
  std::vector<std::uint64_t> seeds{1};
  double delta_tol = 1.0;   // mdpc
  double pbar = 1.0;        // mdpc
  int refresh_steps = 10;   // sdre-mpc
  double care_tol = 1e-9;   // sdre-mpc
  std::string model_path;   // learned-*
  GradientSolverConfig pmp_options;
  std::string out_dir = "out";
  bool write_trajectory = true;

  [[nodiscard]] nlohmann::json echo() const {
    return {{"method", method_name(method)},
            {"agents", agents},
            {"dim", dim},
            {"kernel_gain", params.kernel_gain},
            {"kernel_exponent", params.kernel_exponent},
            {"gamma", params.control_penalty},
            {"horizon", params.horizon},
            {"dt", params.dt},
            {"pos_box", {box.pos_lo, box.pos_hi}},
            {"vel_box", {box.vel_lo, box.vel_hi}},
            {"delta_tol", delta_tol},
            {"pbar", pbar},
            {"refresh_steps", refresh_steps},
            {"model_path", model_path}};
  }
};

inline SimParams sim_params_from_config(const ConfigMap& c) {
  SimParams p;
  p.kernel_gain = c.get_double("sim.kernel_gain", 1.0);
  p.kernel_exponent = c.get_double("sim.kernel_exponent", 1.0);
  p.control_penalty = c.get_double("sim.gamma", 0.1);
  p.horizon = c.get_double("sim.horizon", 10.0);
  p.dt = c.get_double("sim.dt", 0.01);
  const std::vector<double> target = c.get_double_list("sim.target", {});
  if (!target.empty())
    p.target_velocity =
        Eigen::Map<const Eigen::VectorXd>(target.data(), target.size());
  return p;
}

inline SampleBox box_from_config(const ConfigMap& c, const SampleBox& d = {}) {
  SampleBox b;
  b.pos_lo = c.get_double("init.pos_lo", d.pos_lo);
  b.pos_hi = c.get_double("init.pos_hi", d.pos_hi);
  b.vel_lo = c.get_double("init.vel_lo", d.vel_lo);
  b.vel_hi = c.get_double("init.vel_hi", d.vel_hi);
  return b;
}

inline ExperimentConfig experiment_from_config(const ConfigMap& c) {
  ExperimentConfig e;
  e.method = method_from_name(c.get("experiment.method", "uncontrolled"));
  e.agents = c.get_int("experiment.agents", 50);
  e.dim = c.get_int("experiment.dim", 2);
  e.seeds = c.get_seed_list("experiment.seeds", {1});
  e.out_dir = c.get("experiment.out_dir", "out");
  e.write_trajectory = c.get_int("experiment.write_trajectory", 1) != 0;
  e.params = sim_params_from_config(c);
  e.box = box_from_config(c);
  e.delta_tol = c.get_double("mdpc.delta_tol", 1.0);
  e.pbar = c.get_double("mdpc.pbar", 1.0);
  e.refresh_steps = c.get_int("sdre.refresh_steps", 10);
  e.care_tol = c.get_double("sdre.care_tol", 1e-9);
  e.model_path = c.get("model.path", "");
  e.pmp_options.max_iters = c.get_int("pmp.max_iters", 200);
  e.pmp_options.grad_tolerance = c.get_double("pmp.grad_tol", 1e-6);
  return e;
}

// ── Reports ─────────────────────────────────────────────────────────────────

struct PhaseTime {
  std::string name;
  double seconds = 0.0;
};

struct RunReport {
  std::string method;
  std::uint64_t seed = 0;
  nlohmann::json config_echo;
  std::vector<PhaseTime> phases;
  double total_seconds = 0.0;
  double final_cost = 0.0;
  double final_variance = 0.0;
  std::vector<double> update_times;
  std::vector<std::string> output_files;
  nlohmann::json extra;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json jp = nlohmann::json::array();
    for (const PhaseTime& p : phases)
      jp.push_back({{"name", p.name}, {"seconds", p.seconds}});
    return {{"method", method},          {"seed", seed},
            {"config", config_echo},     {"phases", jp},
            {"total_seconds", total_seconds},
            {"final_cost", final_cost},  {"final_variance", final_variance},
            {"update_times", update_times},
            {"outputs", output_files},   {"extra", extra}};
  }
};

inline void write_report(const RunReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report: " + path);
  out << report.to_json().dump(2) << "\n";
}

/// Sequential phase stopwatch; the leftover between the phase sum and the
/// run total is reported as its own phase so the decomposition always sums
/// to the total.
class PhaseTimer {
 public:
  void finish_phase(const std::string& name) {
    const auto now = Clock::now();
    phases_.push_back({name, std::chrono::duration<double>(now - mark_).count()});
    mark_ = now;
  }

  [[nodiscard]] std::pair<std::vector<PhaseTime>, double> harvest() const {
    const double total =
        std::chrono::duration<double>(Clock::now() - origin_).count();
    std::vector<PhaseTime> phases = phases_;
    double covered = 0.0;
    for (const PhaseTime& p : phases) covered += p.seconds;
    if (total - covered > 0.0) phases.push_back({"other", total - covered});
    return {phases, total};
  }

 private:
  using Clock = std::chrono::steady_clock;
  Clock::time_point origin_ = Clock::now();
  Clock::time_point mark_ = Clock::now();
  std::vector<PhaseTime> phases_;
};

// ── Shared helpers ──────────────────────────────────────────────────────────

namespace detail {

inline void parallel_for(std::size_t count, int threads,
                         const std::function<void(std::size_t)>& body) {
  int workers = threads <= 0
                    ? static_cast<int>(std::thread::hardware_concurrency())
                    : threads;
  if (workers < 1) workers = 1;
  if (workers == 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = static_cast<std::size_t>(w); i < count;
             i += static_cast<std::size_t>(workers))
          body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Compact number for file names ("1", "0.1").
inline std::string short_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

}  // namespace detail

inline MomentTrace trajectory_moments(const Trajectory& traj,
                                      const SimParams& params) {
  if (traj.states.empty())
    throw std::invalid_argument("trajectory_moments: empty trajectory");
  MomentTrace m;
  const Eigen::VectorXd target = params.target(traj.states.front().dim());
  for (const EnsembleState& s : traj.states) {
    m.times.push_back(s.time);
    m.mean_velocity.push_back(mean_velocity(s));
    m.variance.push_back(velocity_variance(s, target));
  }
  return m;
}

// ── Single-experiment dispatch ──────────────────────────────────────────────

inline RunReport run_experiment_single(const ExperimentConfig& cfg,
                                       std::uint64_t seed) {
  namespace fs = std::filesystem;
  cfg.params.validate();
  fs::create_directories(cfg.out_dir);
  const std::string base =
      (fs::path(cfg.out_dir) /
       (method_name(cfg.method) + "_seed" + std::to_string(seed)))
          .string();

  PhaseTimer timer;
  RunReport report;
  report.method = method_name(cfg.method);
  report.seed = seed;
  report.config_echo = cfg.echo();

  const EnsembleState initial =
      random_state(cfg.agents, cfg.dim, cfg.box.pos_lo, cfg.box.pos_hi,
                   cfg.box.vel_lo, cfg.box.vel_hi, derive_seed(seed, 1));
  timer.finish_phase("setup");

  Trajectory traj;
  MomentTrace moments;
  std::vector<BoundRow> bounds;
  try {
    switch (cfg.method) {
      case Method::uncontrolled: {
        SimResult r = simulate(initial, zero_control(), cfg.params);
        traj = std::move(r.trajectory);
        moments = std::move(r.moments);
        break;
      }
      case Method::pmp: {
        OpenLoopSolution sol = solve_pmp(initial, cfg.params, cfg.pmp_options);
        traj.states = std::move(sol.states);
        traj.controls = std::move(sol.controls);
        traj.cost_accumulated = sol.cost;
        moments = trajectory_moments(traj, cfg.params);
        report.extra["iterations"] = sol.iterations;
        report.extra["converged"] = sol.converged;
        const std::string side = base + "_solution.json";
        std::ofstream out(side);
        out << nlohmann::json({{"cost", sol.cost},
                               {"iterations", sol.iterations},
                               {"converged", sol.converged}})
                   .dump(2)
            << "\n";
        report.output_files.push_back(side);
        break;
      }
      case Method::sdre_mpc: {
        SdreRunResult r =
            frozen_sdre_mpc(initial, cfg.params, cfg.refresh_steps, cfg.care_tol);
        traj = std::move(r.sim.trajectory);
        moments = std::move(r.sim.moments);
        report.extra["care_solves"] = r.care_solves;
        break;
      }
      case Method::mdpc: {
        MdpcConfig mc;
        mc.params = cfg.params;
        mc.delta_tol = cfg.delta_tol;
        mc.pbar = cfg.pbar;
        MdpcResult r = run_mdpc(initial, mc);
        traj = std::move(r.trajectory);
        moments = std::move(r.moments);
        bounds = std::move(r.bounds);
        report.update_times = r.updates.update_times;
        report.extra["update_count"] = report.update_times.size();
        report.extra["delta_tol"] = cfg.delta_tol;
        break;
      }
      case Method::learned_u:
      case Method::learned_v: {
        if (cfg.model_path.empty())
          throw std::invalid_argument("learned method requires model.path");
        const Network net = load_network(cfg.model_path);
        const ModelKind kind = cfg.method == Method::learned_u
                                   ? ModelKind::control
                                   : ModelKind::value;
        LearnedRollout r = rollout_learned(initial, net, kind, cfg.params);
        traj = std::move(r.sim.trajectory);
        moments = std::move(r.sim.moments);
        report.extra["rollout_seconds"] = r.seconds;
        break;
      }
    }
  } catch (const std::exception& e) {
    throw std::runtime_error("method " + method_name(cfg.method) + " (seed " +
                             std::to_string(seed) + "): " + e.what());
  }
  timer.finish_phase("solve");

  report.final_cost = total_cost(traj, cfg.params);
  report.final_variance = moments.variance.back();

  if (cfg.write_trajectory) {
    const std::string tpath = base + "_trajectory.csv";
    write_trajectory_csv(tpath, traj);
    report.output_files.push_back(tpath);
  }
  const std::string mpath = base + "_moments.csv";
  write_moments_csv(mpath, moments);
  report.output_files.push_back(mpath);
  if (!bounds.empty()) {
    const std::string bpath = base + "_bounds.csv";
    write_bounds_csv(bpath, bounds);
    report.output_files.push_back(bpath);
  }
  timer.finish_phase("io");

  auto [phases, total] = timer.harvest();
  report.phases = std::move(phases);
  report.total_seconds = total;
  return report;
}

/// Runs the configured method for every seed (parallel pool), writing one
/// report JSON per run next to its CSVs.
inline std::vector<RunReport> run_experiment(const ExperimentConfig& cfg,
                                             int threads = 0) {
  std::vector<RunReport> reports(cfg.seeds.size());
  detail::parallel_for(cfg.seeds.size(), threads, [&](std::size_t i) {
    reports[i] = run_experiment_single(cfg, cfg.seeds[i]);
  });
  for (RunReport& r : reports) {
    const std::string path =
        (std::filesystem::path(cfg.out_dir) /
         (r.method + "_seed" + std::to_string(r.seed) + "_report.json"))
            .string();
    write_report(r, path);
    r.output_files.push_back(path);
  }
  return reports;
}

// ── Benchmark (learned feedback vs online-Riccati feedback) ────────────────

struct BenchResult {
  double sdre_seconds = 0.0;
  double learned_seconds = 0.0;
  double speedup = 0.0;
  int care_solves = 0;
  double sdre_final_variance = 0.0;
  double learned_final_variance = 0.0;
};

inline BenchResult run_bench(const EnsembleState& initial, const Network& net,
                             ModelKind kind, const SimParams& params,
                             int refresh_steps = 1) {
  BenchResult bench;
  const auto t0 = std::chrono::steady_clock::now();
  SdreRunResult sdre = frozen_sdre_mpc(initial, params, refresh_steps);
  bench.sdre_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  bench.care_solves = sdre.care_solves;
  bench.sdre_final_variance = sdre.sim.moments.variance.back();

  LearnedRollout learned = rollout_learned(initial, net, kind, params);
  bench.learned_seconds = learned.seconds;
  bench.learned_final_variance = learned.sim.moments.variance.back();
  bench.speedup = bench.sdre_seconds / std::max(bench.learned_seconds, 1e-12);
  return bench;
}

// ── Test-1 pipeline: datasets → four surrogate variants → rollouts ─────────

struct ModelVariant {
  std::string name;
  Labeler labeler = Labeler::sdre;
  ModelKind kind = ModelKind::control;
  std::vector<int> hidden;
  Activation activation = Activation::tanh_fn;
  double mu = 0.0;
};

struct Test1Options {
  SimParams params;
  int agents = 50;
  int dim = 2;
  SampleBox box{0.0, 1.0, 0.0, 1.0};  ///< training/rollout box
  int sdre_samples = 10000;
  int pmp_samples = 1000;       ///< reduced: open-loop labels are costly
  int sdre_test_samples = 2000;
  int pmp_test_samples = 200;
  int epochs = 150;
  int batch_size = 200;
  double learning_rate = 1e-3;
  // Control models map 2nd states to nd controls of near-full rank, so their
  // narrowest hidden layer must be at least nd wide (128 covers n=50, d=2).
  std::vector<int> u_sdre_hidden{128};
  std::vector<int> u_pmp_hidden{128, 128};
  std::vector<int> v_sdre_hidden{32, 16};
  std::vector<int> v_pmp_hidden{64, 64};
  std::vector<std::uint64_t> rollout_seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::uint64_t master_seed = 2024;
  int threads = 0;
  int refresh_steps = 10;
  GradientSolverConfig pmp_label_options{30, 1e-4, 0.0, 0.5, 1e-4};
  std::string out_dir = "test1_out";

  [[nodiscard]] std::vector<ModelVariant> variants() const {
    return {{"u_sdre", Labeler::sdre, ModelKind::control, u_sdre_hidden,
             Activation::tanh_fn, 0.0},
            {"u_pmp", Labeler::pmp, ModelKind::control, u_pmp_hidden,
             Activation::sigmoid_fn, 0.0},
            {"v_sdre", Labeler::sdre, ModelKind::value, v_sdre_hidden,
             Activation::sigmoid_fn, 0.07},
            {"v_pmp", Labeler::pmp, ModelKind::value, v_pmp_hidden,
             Activation::sigmoid_fn, 0.1}};
  }
};

inline Test1Options test1_options_from_config(const ConfigMap& c) {
  Test1Options o;
  o.params = sim_params_from_config(c);
  o.agents = c.get_int("experiment.agents", o.agents);
  o.dim = c.get_int("experiment.dim", o.dim);
  o.box = box_from_config(c, o.box);
  o.sdre_samples = c.get_int("test1.sdre_samples", o.sdre_samples);
  o.pmp_samples = c.get_int("test1.pmp_samples", o.pmp_samples);
  o.sdre_test_samples = c.get_int("test1.sdre_test_samples", o.sdre_test_samples);
  o.pmp_test_samples = c.get_int("test1.pmp_test_samples", o.pmp_test_samples);
  o.epochs = c.get_int("test1.epochs", o.epochs);
  o.batch_size = c.get_int("test1.batch_size", o.batch_size);
  o.learning_rate = c.get_double("test1.learning_rate", o.learning_rate);
  o.u_sdre_hidden = c.get_int_list("test1.u_sdre_hidden", o.u_sdre_hidden);
  o.u_pmp_hidden = c.get_int_list("test1.u_pmp_hidden", o.u_pmp_hidden);
  o.v_sdre_hidden = c.get_int_list("test1.v_sdre_hidden", o.v_sdre_hidden);
  o.v_pmp_hidden = c.get_int_list("test1.v_pmp_hidden", o.v_pmp_hidden);
  o.rollout_seeds = c.get_seed_list("test1.seeds", o.rollout_seeds);
  o.master_seed = c.get_seed_list("test1.master_seed", {o.master_seed})[0];
  o.threads = c.get_int("test1.threads", o.threads);
  o.refresh_steps = c.get_int("sdre.refresh_steps", o.refresh_steps);
  o.pmp_label_options.max_iters =
      c.get_int("pmp.max_iters", o.pmp_label_options.max_iters);
  o.pmp_label_options.grad_tolerance =
      c.get_double("pmp.grad_tol", o.pmp_label_options.grad_tolerance);
  o.out_dir = c.get("experiment.out_dir", o.out_dir);
  o.out_dir = c.get("test1.out_dir", o.out_dir);
  return o;
}

struct TrainedVariant {
  ModelVariant variant;
  Network net;
  double prmse_control = 0.0;  ///< feedback output vs held-out labels
  double final_train_loss = 0.0;
  std::string model_path;
};

struct Test1Result {
  std::vector<TrainedVariant> models;
  std::vector<RunReport> rollouts;
  nlohmann::json summary;
};

namespace detail {

template <typename Fn>
void run_phase(const char* pipeline, const char* name, PhaseTimer& timer,
               Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string(pipeline) + " phase '" + name +
                             "': " + e.what());
  }
  timer.finish_phase(name);
}

}  // namespace detail

inline Test1Result run_pipeline_test1(const Test1Options& opt) {
  namespace fs = std::filesystem;
  opt.params.validate();
  fs::create_directories(opt.out_dir);
  const auto path_of = [&](const std::string& name) {
    return (fs::path(opt.out_dir) / name).string();
  };

  Test1Result result;
  nlohmann::json& summary = result.summary;
  PhaseTimer timer;

  // Datasets: one training and one held-out set per labeler.
  Dataset train_sdre, train_pmp, test_sdre, test_pmp;
  detail::run_phase("test1", "datasets", timer, [&] {
    const auto make = [&](int count, Labeler lab, std::uint64_t stream) {
      const std::vector<EnsembleState> states = sample_states(
          count, opt.agents, opt.dim, opt.box, derive_seed(opt.master_seed, stream));
      return generate_dataset(states, lab, opt.params, opt.pmp_label_options,
                              opt.threads);
    };
    train_sdre = make(opt.sdre_samples, Labeler::sdre, 21);
    train_pmp = make(opt.pmp_samples, Labeler::pmp, 22);
    test_sdre = make(opt.sdre_test_samples, Labeler::sdre, 23);
    test_pmp = make(opt.pmp_test_samples, Labeler::pmp, 24);
    write_dataset_csv(path_of("dataset_sdre.csv"), train_sdre);
    write_dataset_csv(path_of("dataset_pmp.csv"), train_pmp);
    summary["datasets"] = {
        {"sdre", {{"samples", train_sdre.samples.size()}, {"dropped", train_sdre.dropped}}},
        {"pmp", {{"samples", train_pmp.samples.size()}, {"dropped", train_pmp.dropped}}},
        {"sdre_test", {{"samples", test_sdre.samples.size()}, {"dropped", test_sdre.dropped}}},
        {"pmp_test", {{"samples", test_pmp.samples.size()}, {"dropped", test_pmp.dropped}}}};
  });

  // Train the four variants; score each on its labeler's held-out controls.
  detail::run_phase("test1", "training", timer, [&] {
    summary["models"] = nlohmann::json::array();
    int variant_index = 0;
    for (const ModelVariant& var : opt.variants()) {
      const Dataset& train_ds =
          var.labeler == Labeler::sdre ? train_sdre : train_pmp;
      const Dataset& test_ds = var.labeler == Labeler::sdre ? test_sdre : test_pmp;
      if (train_ds.samples.empty())
        throw std::runtime_error("variant " + var.name + ": empty dataset");

      NetworkSpec spec;
      spec.input_dim = 2 * opt.agents * opt.dim;
      spec.hidden_widths = var.hidden;
      spec.output_dim =
          var.kind == ModelKind::control ? opt.agents * opt.dim : 1;
      spec.activation = var.activation;

      TrainConfig tc;
      tc.epochs = opt.epochs;
      tc.batch_size = opt.batch_size;
      tc.learning_rate = opt.learning_rate;
      tc.mu = var.kind == ModelKind::value ? var.mu : 0.0;
      tc.seed = derive_seed(opt.master_seed, 31, variant_index);

      const Eigen::MatrixXd x = dataset_inputs(train_ds);
      Eigen::MatrixXd y;
      Eigen::MatrixXd g;
      const Eigen::MatrixXd* gptr = nullptr;
      if (var.kind == ModelKind::control) {
        y = dataset_controls(train_ds);
      } else {
        y = dataset_values(train_ds);
        g = dataset_value_gradients(train_ds);
        gptr = &g;
      }
      TrainResult tr = train(x, y, gptr, spec, tc);

      // Held-out feedback accuracy: compare emitted controls to labels.
      const Eigen::MatrixXd xt = dataset_inputs(test_ds);
      const Eigen::MatrixXd ut = dataset_controls(test_ds);
      Eigen::MatrixXd pred(xt.rows(), ut.cols());
      if (var.kind == ModelKind::control) {
        pred = tr.net.forward_batch(xt);
      } else {
        for (int i = 0; i < xt.rows(); ++i) {
          const EnsembleState s =
              unflatten_state(xt.row(i).transpose(), opt.agents, opt.dim);
          pred.row(i) =
              flatten_rowmajor(control_from_value_model(tr.net, s, opt.params))
                  .transpose();
        }
      }
      TrainedVariant trained;
      trained.variant = var;
      trained.prmse_control = prmse(pred, ut);
      trained.final_train_loss = tr.epoch_loss.back();
      trained.model_path = path_of("model_" + var.name + ".json");
      save_network(tr.net, trained.model_path,
                   {{"variant", var.name},
                    {"labeler", var.labeler == Labeler::sdre ? "sdre" : "pmp"},
                    {"kind", var.kind == ModelKind::control ? "u" : "V"},
                    {"mu", tc.mu},
                    {"epochs", tc.epochs},
                    {"train_samples", train_ds.samples.size()},
                    {"prmse_control", trained.prmse_control}});
      trained.net = std::move(tr.net);
      summary["models"].push_back({{"name", var.name},
                                   {"hidden", var.hidden},
                                   {"activation", activation_name(var.activation)},
                                   {"mu", tc.mu},
                                   {"prmse_control", trained.prmse_control},
                                   {"final_train_loss", trained.final_train_loss},
                                   {"path", trained.model_path}});
      result.models.push_back(std::move(trained));
      ++variant_index;
    }
  });

  // Rollouts from a common seed set, all methods.
  std::vector<std::string> methods{"uncontrolled", "pmp", "sdre-mpc"};
  for (const TrainedVariant& tv : result.models) methods.push_back(tv.variant.name);
  const std::size_t n_seeds = opt.rollout_seeds.size();
  std::vector<std::vector<std::vector<double>>> variance(
      methods.size(), std::vector<std::vector<double>>(n_seeds));
  result.rollouts.resize(methods.size() * n_seeds);

  detail::run_phase("test1", "rollouts", timer, [&] {
    detail::parallel_for(methods.size() * n_seeds, opt.threads, [&](std::size_t idx) {
      const std::size_t mi = idx / n_seeds;
      const std::size_t si = idx % n_seeds;
      const std::uint64_t seed = opt.rollout_seeds[si];
      const EnsembleState initial =
          random_state(opt.agents, opt.dim, opt.box.pos_lo, opt.box.pos_hi,
                       opt.box.vel_lo, opt.box.vel_hi, derive_seed(seed, 1));
      PhaseTimer rt;
      RunReport rep;
      rep.method = methods[mi];
      rep.seed = seed;
      rt.finish_phase("setup");

      Trajectory traj;
      MomentTrace moments;
      nlohmann::json extra;
      if (methods[mi] == "uncontrolled") {
        SimResult r = simulate(initial, zero_control(), opt.params);
        traj = std::move(r.trajectory);
        moments = std::move(r.moments);
      } else if (methods[mi] == "pmp") {
        OpenLoopSolution sol = solve_pmp(initial, opt.params, opt.pmp_label_options);
        traj.states = std::move(sol.states);
        traj.controls = std::move(sol.controls);
        traj.cost_accumulated = sol.cost;
        moments = trajectory_moments(traj, opt.params);
        extra["iterations"] = sol.iterations;
      } else if (methods[mi] == "sdre-mpc") {
        SdreRunResult r = frozen_sdre_mpc(initial, opt.params, opt.refresh_steps);
        traj = std::move(r.sim.trajectory);
        moments = std::move(r.sim.moments);
        extra["care_solves"] = r.care_solves;
      } else {
        const TrainedVariant& tv = result.models[mi - 3];
        LearnedRollout r =
            rollout_learned(initial, tv.net, tv.variant.kind, opt.params);
        traj = std::move(r.sim.trajectory);
        moments = std::move(r.sim.moments);
        extra["rollout_seconds"] = r.seconds;
      }
      rt.finish_phase("solve");

      const std::string mpath = path_of("rollout_" + methods[mi] + "_seed" +
                                        std::to_string(seed) + "_moments.csv");
      write_moments_csv(mpath, moments);
      rt.finish_phase("io");

      rep.final_cost = total_cost(traj, opt.params);
      rep.final_variance = moments.variance.back();
      rep.output_files.push_back(mpath);
      rep.extra = std::move(extra);
      auto [phases, total] = rt.harvest();
      rep.phases = std::move(phases);
      rep.total_seconds = total;
      variance[mi][si] = std::move(moments.variance);
      result.rollouts[idx] = std::move(rep);
    });
  });

  // Comparison table: mean distance-to-target (sigma^2) per method over seeds.
  detail::run_phase("test1", "comparison", timer, [&] {
    const std::size_t rows = variance[0][0].size();
    for (const auto& per_method : variance)
      for (const auto& curve : per_method)
        if (curve.size() != rows)
          throw std::runtime_error("comparison: inconsistent trace lengths");
    std::ofstream out(path_of("comparison.csv"));
    if (!out) throw std::runtime_error("cannot write comparison.csv");
    out << "t";
    for (const std::string& m : methods) out << "," << m;
    out << "\n";
    for (std::size_t r = 0; r < rows; ++r) {
      out << format_double(static_cast<double>(r) * opt.params.dt);
      for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        double acc = 0.0;
        for (std::size_t si = 0; si < n_seeds; ++si) acc += variance[mi][si][r];
        out << "," << format_double(acc / static_cast<double>(n_seeds));
      }
      out << "\n";
    }
    nlohmann::json mean_final;
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      double acc = 0.0;
      for (std::size_t si = 0; si < n_seeds; ++si)
        acc += variance[mi][si].back();
      mean_final[methods[mi]] = acc / static_cast<double>(n_seeds);
    }
    summary["mean_final_variance"] = mean_final;
    summary["methods"] = methods;
  });

  auto [phases, total] = timer.harvest();
  nlohmann::json jp = nlohmann::json::array();
  for (const PhaseTime& p : phases)
    jp.push_back({{"name", p.name}, {"seconds", p.seconds}});
  summary["phases"] = jp;
  summary["total_seconds"] = total;
  std::ofstream out(path_of("test1_summary.json"));
  out << summary.dump(2) << "\n";
  return result;
}

// ── Test-2 pipeline: MdPC tolerance study ───────────────────────────────────

struct Test2Options {
  SimParams params;
  int agents = 50;
  int dim = 2;
  SampleBox box{0.0, 1.0, -1.0, 1.0};
  std::vector<double> tolerances{1.0, 0.1};
  double pbar = 1.0;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  int threads = 0;
  std::string out_dir = "test2_out";
};

inline Test2Options test2_options_from_config(const ConfigMap& c) {
  Test2Options o;
  o.params = sim_params_from_config(c);
  o.agents = c.get_int("experiment.agents", o.agents);
  o.dim = c.get_int("experiment.dim", o.dim);
  o.box = box_from_config(c, o.box);
  o.tolerances = c.get_double_list("test2.tolerances", o.tolerances);
  o.pbar = c.get_double("mdpc.pbar", o.pbar);
  o.seeds = c.get_seed_list("test2.seeds", o.seeds);
  o.threads = c.get_int("test2.threads", o.threads);
  o.out_dir = c.get("experiment.out_dir", o.out_dir);
  o.out_dir = c.get("test2.out_dir", o.out_dir);
  return o;
}

struct Test2Result {
  std::vector<RunReport> runs;  ///< seed-major: uncontrolled, then tolerances
  nlohmann::json summary;
};

inline Test2Result run_pipeline_test2(const Test2Options& opt) {
  namespace fs = std::filesystem;
  opt.params.validate();
  fs::create_directories(opt.out_dir);
  const auto path_of = [&](const std::string& name) {
    return (fs::path(opt.out_dir) / name).string();
  };

  Test2Result result;
  PhaseTimer timer;
  const std::size_t arms = 1 + opt.tolerances.size();
  result.runs.resize(opt.seeds.size() * arms);

  detail::run_phase("test2", "runs", timer, [&] {
    detail::parallel_for(result.runs.size(), opt.threads, [&](std::size_t idx) {
      const std::size_t si = idx / arms;
      const std::size_t ai = idx % arms;
      const std::uint64_t seed = opt.seeds[si];
      const EnsembleState initial =
          random_state(opt.agents, opt.dim, opt.box.pos_lo, opt.box.pos_hi,
                       opt.box.vel_lo, opt.box.vel_hi, derive_seed(seed, 1));
      PhaseTimer rt;
      RunReport rep;
      rep.seed = seed;
      rt.finish_phase("setup");

      if (ai == 0) {
        rep.method = "uncontrolled";
        SimResult r = simulate(initial, zero_control(), opt.params);
        rt.finish_phase("solve");
        const std::string mpath = path_of("uncontrolled_seed" +
                                          std::to_string(seed) + "_moments.csv");
        write_moments_csv(mpath, r.moments);
        rep.final_cost = total_cost(r.trajectory, opt.params);
        rep.final_variance = r.moments.variance.back();
        rep.output_files.push_back(mpath);
      } else {
        const double tol = opt.tolerances[ai - 1];
        rep.method = "mdpc_tol" + detail::short_double(tol);
        MdpcConfig mc;
        mc.params = opt.params;
        mc.delta_tol = tol;
        mc.pbar = opt.pbar;
        MdpcResult r = run_mdpc(initial, mc);
        rt.finish_phase("solve");
        const std::string stem = rep.method + "_seed" + std::to_string(seed);
        const std::string mpath = path_of(stem + "_moments.csv");
        const std::string bpath = path_of(stem + "_bounds.csv");
        const std::string upath = path_of(stem + "_updates.json");
        write_moments_csv(mpath, r.moments);
        write_bounds_csv(bpath, r.bounds);
        std::ofstream uj(upath);
        uj << nlohmann::json({{"delta_tol", tol},
                              {"seed", seed},
                              {"update_times", r.updates.update_times},
                              {"update_count", r.updates.update_times.size()},
                              {"step_count", r.updates.step_count}})
                  .dump(2)
           << "\n";
        rep.final_cost = total_cost(r.trajectory, opt.params);
        rep.final_variance = r.moments.variance.back();
        rep.update_times = r.updates.update_times;
        rep.extra["update_count"] = r.updates.update_times.size();
        rep.extra["delta_tol"] = tol;
        rep.output_files = {mpath, bpath, upath};
      }
      rt.finish_phase("io");
      auto [phases, total] = rt.harvest();
      rep.phases = std::move(phases);
      rep.total_seconds = total;
      result.runs[idx] = std::move(rep);
    });
  });

  nlohmann::json& summary = result.summary;
  detail::run_phase("test2", "summary", timer, [&] {
    nlohmann::json arms_json = nlohmann::json::array();
    for (std::size_t ai = 0; ai < arms; ++ai) {
      double mean_final = 0.0;
      nlohmann::json counts = nlohmann::json::array();
      for (std::size_t si = 0; si < opt.seeds.size(); ++si) {
        const RunReport& r = result.runs[si * arms + ai];
        mean_final += r.final_variance;
        if (ai > 0) counts.push_back(r.update_times.size());
      }
      mean_final /= static_cast<double>(opt.seeds.size());
      nlohmann::json arm = {{"method", result.runs[ai].method},
                            {"mean_final_variance", mean_final}};
      if (ai > 0) {
        arm["delta_tol"] = opt.tolerances[ai - 1];
        arm["update_counts"] = counts;
      }
      arms_json.push_back(arm);
    }
    summary["arms"] = arms_json;
    summary["seeds"] = opt.seeds;
  });

  auto [phases, total] = timer.harvest();
  nlohmann::json jp = nlohmann::json::array();
  for (const PhaseTime& p : phases)
    jp.push_back({{"name", p.name}, {"seconds", p.seconds}});
  summary["phases"] = jp;
  summary["total_seconds"] = total;
  std::ofstream out(path_of("test2_summary.json"));
  out << summary.dump(2) << "\n";
  return result;
}

}  // namespace flockmpc
