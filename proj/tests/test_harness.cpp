// SPDX-License-Identifier: MIT
// Tests for the experiment harness: INI-style configuration parsing, the
// per-seed experiment runner with its reports and CSV artifacts, the
// feedback-latency benchmark, and the two end-to-end desk-scale pipelines.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "flockmpc/csv.hpp"
#include "flockmpc/harness.hpp"

using namespace flockmpc;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "flockmpc_harness_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

SimParams tiny_params(double horizon = 0.3, double dt = 0.05) {
  SimParams p;
  p.control_penalty = 0.1;
  p.horizon = horizon;
  p.dt = dt;
  return p;
}

double phase_sum(const RunReport& r) {
  double s = 0.0;
  for (const PhaseTime& p : r.phases) s += p.seconds;
  return s;
}

}  // namespace

TEST_CASE("configuration text parses sections, comments, and lists") {
  const std::string text =
      "# experiment sweep\n"
      "[sim]\n"
      "gamma = 0.2   ; inline note\n"
      "horizon=2.5\n"
      "target = 0.1, -0.3\n"
      "\n"
      "[experiment]\n"
      "method = sdre_mpc\n"
      "seeds = 4, 5, 6\n"
      "agents = 7\n";
  const ConfigMap c = ConfigMap::parse_string(text);

  REQUIRE(c.has("sim.gamma"));
  REQUIRE(c.get_double("sim.gamma", 0.0) == 0.2);
  REQUIRE(c.get_double("sim.horizon", 0.0) == 2.5);
  REQUIRE(c.get("experiment.method", "") == "sdre_mpc");
  REQUIRE(c.get_int("experiment.agents", 0) == 7);
  REQUIRE(c.get_seed_list("experiment.seeds", {}) ==
          std::vector<std::uint64_t>{4, 5, 6});
  REQUIRE(c.get_double_list("sim.target", {}) == std::vector<double>{0.1, -0.3});
  REQUIRE(c.get_int("absent.key", 42) == 42);

  ConfigMap copy = c;
  copy.set("sim.gamma", "0.5");
  REQUIRE(copy.get_double("sim.gamma", 0.0) == 0.5);

  REQUIRE_THROWS(ConfigMap::parse_string("[sim]\nno_equals_here\n"));
  REQUIRE_THROWS(ConfigMap::from_file("/definitely/not/a/file.ini"));

  const SimParams p = sim_params_from_config(c);
  REQUIRE(p.control_penalty == 0.2);
  REQUIRE(p.horizon == 2.5);
  REQUIRE(p.target_velocity.size() == 2);

  const ExperimentConfig e = experiment_from_config(c);
  REQUIRE(e.method == Method::sdre_mpc);
  REQUIRE(e.agents == 7);
  REQUIRE(e.seeds.size() == 3);
}

TEST_CASE("method names map both spellings") {
  REQUIRE(method_from_name("uncontrolled") == Method::uncontrolled);
  REQUIRE(method_from_name("sdre-mpc") == Method::sdre_mpc);
  REQUIRE(method_from_name("sdre_mpc") == Method::sdre_mpc);
  REQUIRE(method_from_name("learned_u") == Method::learned_u);
  REQUIRE(method_name(Method::learned_v) == "learned-v");
  REQUIRE_THROWS(method_from_name("banzai"));
}

TEST_CASE("experiment runs are reproducible and fully reported") {
  ExperimentConfig cfg;
  cfg.method = Method::uncontrolled;
  cfg.params = tiny_params();
  cfg.agents = 4;
  cfg.dim = 2;
  cfg.seeds = {1, 2};

  const fs::path d1 = fresh_dir("repro_a");
  const fs::path d2 = fresh_dir("repro_b");
  cfg.out_dir = d1.string();
  const auto runs1 = run_experiment(cfg, 2);
  cfg.out_dir = d2.string();
  const auto runs2 = run_experiment(cfg, 2);

  REQUIRE(runs1.size() == 2);
  for (const std::string name :
       {"uncontrolled_seed1_moments.csv", "uncontrolled_seed2_moments.csv",
        "uncontrolled_seed1_trajectory.csv"}) {
    REQUIRE(fs::exists(d1 / name));
    REQUIRE(slurp(d1 / name) == slurp(d2 / name));
  }
  REQUIRE(fs::exists(d1 / "uncontrolled_seed1_report.json"));

  for (const RunReport& r : runs1) {
    REQUIRE(r.method == "uncontrolled");
    REQUIRE(r.total_seconds > 0.0);
    // The harvested phases account for the whole wall-clock time.
    REQUIRE(std::abs(phase_sum(r) - r.total_seconds) <=
            0.05 * r.total_seconds + 1e-9);
    const MomentTrace trace =
        read_moments_csv((d1 / ("uncontrolled_seed" + std::to_string(r.seed) +
                                "_moments.csv"))
                             .string());
    REQUIRE(trace.variance.back() == r.final_variance);
    const nlohmann::json j = nlohmann::json::parse(
        slurp(d1 / ("uncontrolled_seed" + std::to_string(r.seed) +
                    "_report.json")));
    REQUIRE(j.at("method") == "uncontrolled");
    REQUIRE(j.at("final_variance").get<double>() == r.final_variance);
  }
}

TEST_CASE("predictive-controller experiments emit envelope artifacts") {
  ExperimentConfig cfg;
  cfg.method = Method::mdpc;
  cfg.params = tiny_params(0.5, 0.05);
  cfg.agents = 5;
  cfg.dim = 2;
  cfg.seeds = {3};
  cfg.delta_tol = 0.05;
  cfg.out_dir = fresh_dir("mdpc_run").string();

  const auto runs = run_experiment(cfg, 1);
  REQUIRE(runs.size() == 1);
  REQUIRE(runs[0].extra.at("update_count").get<std::size_t>() ==
          runs[0].update_times.size());
  const fs::path bounds = fs::path(cfg.out_dir) / "mdpc_seed3_bounds.csv";
  REQUIRE(fs::exists(bounds));
  REQUIRE(read_bounds_csv(bounds.string()).size() ==
          static_cast<std::size_t>(cfg.params.steps() + 1));
}

TEST_CASE("open-loop experiments write a solver sidecar") {
  ExperimentConfig cfg;
  cfg.method = Method::pmp;
  cfg.params = tiny_params(0.4, 0.05);
  cfg.agents = 3;
  cfg.dim = 2;
  cfg.seeds = {4};
  cfg.pmp_options.max_iters = 25;
  cfg.out_dir = fresh_dir("pmp_run").string();

  const auto runs = run_experiment(cfg, 1);
  const fs::path side = fs::path(cfg.out_dir) / "pmp_seed4_solution.json";
  REQUIRE(fs::exists(side));
  const nlohmann::json j = nlohmann::json::parse(slurp(side));
  REQUIRE(j.contains("cost"));
  REQUIRE(j.contains("iterations"));
  REQUIRE(j.contains("converged"));
  REQUIRE(j.at("cost").get<double>() == runs[0].final_cost);
}

TEST_CASE("learned-feedback experiments load models from disk") {
  const fs::path dir = fresh_dir("learned_run");

  // A zero network commands nothing, so the rollout equals the free flow.
  NetworkSpec spec;
  spec.input_dim = 16;
  spec.hidden_widths = {3};
  spec.output_dim = 8;
  Network net = init_network(spec, 5);
  for (Eigen::MatrixXd& w : net.weights) w.setZero();
  const std::string model_path = (dir / "zero_model.json").string();
  save_network(net, model_path);

  ExperimentConfig cfg;
  cfg.params = tiny_params();
  cfg.agents = 4;
  cfg.dim = 2;
  cfg.seeds = {6};
  cfg.out_dir = dir.string();
  cfg.method = Method::learned_u;
  cfg.model_path = model_path;
  const auto learned = run_experiment(cfg, 1);

  cfg.method = Method::uncontrolled;
  const auto baseline = run_experiment(cfg, 1);
  REQUIRE(learned[0].final_variance == baseline[0].final_variance);

  cfg.method = Method::learned_v;
  cfg.model_path.clear();
  REQUIRE_THROWS(run_experiment(cfg, 1));
}

TEST_CASE("latency benchmark compares the two feedback paths") {
  const SimParams p = tiny_params(0.5, 0.05);
  NetworkSpec spec;
  spec.input_dim = 16;
  spec.hidden_widths = {4};
  spec.output_dim = 8;
  Network net = init_network(spec, 9);
  for (Eigen::MatrixXd& w : net.weights) w.setZero();

  const EnsembleState initial = random_state(4, 2, 0.0, 1.0, -1.0, 1.0, 10);
  const BenchResult bench = run_bench(initial, net, ModelKind::control, p, 1);
  REQUIRE(bench.care_solves == p.steps());
  REQUIRE(bench.sdre_seconds > 0.0);
  REQUIRE(bench.learned_seconds > 0.0);
  REQUIRE(bench.speedup == bench.sdre_seconds / bench.learned_seconds);
  REQUIRE(bench.sdre_final_variance <= bench.learned_final_variance + 1e-12);
}

TEST_CASE("surrogate-study pipeline produces models, rollouts, and a table") {
  Test1Options opt;
  opt.params = tiny_params(0.4, 0.05);
  opt.agents = 4;
  opt.dim = 2;
  opt.sdre_samples = 24;
  opt.pmp_samples = 8;
  opt.sdre_test_samples = 10;
  opt.pmp_test_samples = 4;
  opt.epochs = 3;
  opt.batch_size = 8;
  opt.u_sdre_hidden = {8};
  opt.u_pmp_hidden = {6};
  opt.v_sdre_hidden = {6};
  opt.v_pmp_hidden = {6};
  opt.rollout_seeds = {1, 2};
  opt.master_seed = 7;
  opt.threads = 2;
  opt.refresh_steps = 4;
  opt.pmp_label_options = {8, 1e-4, 0.0, 0.5, 1e-4};
  opt.out_dir = fresh_dir("pipeline_small").string();

  const Test1Result result = run_pipeline_test1(opt);

  REQUIRE(result.models.size() == 4);
  for (const TrainedVariant& tv : result.models) {
    REQUIRE(fs::exists(tv.model_path));
    const Network back = load_network(tv.model_path);
    REQUIRE(back.spec.input_dim == 16);
    REQUIRE(tv.prmse_control >= 0.0);
  }
  REQUIRE(result.models[0].variant.name == "u_sdre");
  REQUIRE(result.models[3].variant.kind == ModelKind::value);

  REQUIRE(result.rollouts.size() == 7 * 2);
  REQUIRE(fs::exists(fs::path(opt.out_dir) / "rollout_uncontrolled_seed1_moments.csv"));
  REQUIRE(fs::exists(fs::path(opt.out_dir) / "rollout_u_sdre_seed2_moments.csv"));
  REQUIRE(fs::exists(fs::path(opt.out_dir) / "dataset_sdre.csv"));
  REQUIRE(fs::exists(fs::path(opt.out_dir) / "test1_summary.json"));

  // Comparison table: header plus one row per grid node, eight columns.
  const std::string table = slurp(fs::path(opt.out_dir) / "comparison.csv");
  std::istringstream lines(table);
  std::string header;
  std::getline(lines, header);
  REQUIRE(header == "t,uncontrolled,pmp,sdre-mpc,u_sdre,u_pmp,v_sdre,v_pmp");
  int rows = 0;
  for (std::string line; std::getline(lines, line);)
    if (!line.empty()) ++rows;
  REQUIRE(rows == opt.params.steps() + 1);

  REQUIRE(result.summary.at("mean_final_variance").size() == 7);
  REQUIRE(result.summary.at("datasets").at("sdre").at("samples").get<int>() == 24);
}

TEST_CASE("tolerance-study pipeline orders update counts") {
  Test2Options opt;
  opt.params = tiny_params(0.5, 0.05);
  opt.agents = 5;
  opt.dim = 2;
  opt.tolerances = {5.0, 0.05};
  opt.seeds = {1, 2};
  opt.threads = 2;
  opt.out_dir = fresh_dir("pipeline_tolerance").string();

  const Test2Result result = run_pipeline_test2(opt);
  REQUIRE(result.runs.size() == 6);  // (uncontrolled + 2 tolerances) x 2 seeds

  for (std::size_t si = 0; si < 2; ++si) {
    const RunReport& base = result.runs[si * 3];
    const RunReport& loose = result.runs[si * 3 + 1];
    const RunReport& tight = result.runs[si * 3 + 2];
    REQUIRE(base.method == "uncontrolled");
    REQUIRE(loose.method == "mdpc_tol5");
    REQUIRE(tight.method == "mdpc_tol0.05");
    REQUIRE(tight.update_times.size() >= loose.update_times.size());
  }

  REQUIRE(fs::exists(fs::path(opt.out_dir) / "mdpc_tol0.05_seed1_bounds.csv"));
  REQUIRE(fs::exists(fs::path(opt.out_dir) / "mdpc_tol5_seed2_updates.json"));
  REQUIRE(fs::exists(fs::path(opt.out_dir) / "test2_summary.json"));

  REQUIRE(result.summary.at("arms").size() == 3);
  REQUIRE(result.summary.at("arms")[0].at("method") == "uncontrolled");
  REQUIRE(result.summary.at("arms")[2].at("update_counts").size() == 2);
}
