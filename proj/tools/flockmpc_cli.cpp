// SPDX-License-Identifier: MIT
//
// flockmpc command line: simulation, the three feedback synthesizers,
// surrogate data/training/rollout, the two reproduction pipelines, and a
// feedback-evaluation benchmark. Values come from an INI-style config file
// (--config) with flag overrides; every run is deterministic per seed.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flockmpc/harness.hpp"

namespace {

using namespace flockmpc;

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::vector<std::uint64_t> seeds;
  int agents = -1;
  int dim = -1;
  double gamma = -1.0;
  double horizon = -1.0;
  double dt = -1.0;
  int threads = 0;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "INI-style config file");
  cmd->add_option("--seed", f.seeds, "run seed(s)");
  cmd->add_option("--out", f.out_dir, "output directory");
  cmd->add_option("--n", f.agents, "number of agents");
  cmd->add_option("--dim", f.dim, "space dimension");
  cmd->add_option("--gamma", f.gamma, "control penalty");
  cmd->add_option("--horizon", f.horizon, "time horizon T");
  cmd->add_option("--dt", f.dt, "integration step");
  cmd->add_option("--threads", f.threads, "worker threads (0 = hardware)");
}

ConfigMap load_config(const CommonFlags& f) {
  ConfigMap c = f.config_path.empty() ? ConfigMap{}
                                      : ConfigMap::from_file(f.config_path);
  if (!f.seeds.empty()) {
    std::ostringstream joined;
    for (std::size_t i = 0; i < f.seeds.size(); ++i) {
      if (i) joined << ",";
      joined << f.seeds[i];
    }
    c.set("experiment.seeds", joined.str());
    c.set("test1.seeds", joined.str());
    c.set("test2.seeds", joined.str());
  }
  if (f.agents > 0) c.set("experiment.agents", std::to_string(f.agents));
  if (f.dim > 0) c.set("experiment.dim", std::to_string(f.dim));
  if (f.gamma > 0) c.set("sim.gamma", format_double(f.gamma));
  if (f.horizon > 0) c.set("sim.horizon", format_double(f.horizon));
  if (f.dt > 0) c.set("sim.dt", format_double(f.dt));
  if (!f.out_dir.empty()) c.set("experiment.out_dir", f.out_dir);
  if (f.threads > 0) {
    c.set("test1.threads", std::to_string(f.threads));
    c.set("test2.threads", std::to_string(f.threads));
  }
  return c;
}

void print_reports(const std::vector<RunReport>& reports) {
  for (const RunReport& r : reports) {
    std::cout << r.method << " seed=" << r.seed
              << " cost=" << r.final_cost
              << " final_sigma2=" << r.final_variance;
    if (!r.update_times.empty())
      std::cout << " updates=" << r.update_times.size();
    std::cout << " wall=" << r.total_seconds << "s\n";
  }
}

void run_method(Method method, const CommonFlags& f, ConfigMap c) {
  ExperimentConfig cfg = experiment_from_config(c);
  cfg.method = method;
  print_reports(run_experiment(cfg, f.threads));
  std::cout << "outputs in " << cfg.out_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feedback-control synthesizers for second-order consensus dynamics"};
  app.require_subcommand(1);

  CommonFlags f;

  auto* simulate_cmd =
      app.add_subcommand("simulate", "uncontrolled ensemble simulation");
  add_common(simulate_cmd, f);
  simulate_cmd->callback([&] { run_method(Method::uncontrolled, f, load_config(f)); });

  auto* pmp_cmd =
      app.add_subcommand("pmp", "open-loop optimal control via adjoint sweeps");
  add_common(pmp_cmd, f);
  int pmp_iters = -1;
  pmp_cmd->add_option("--max-iters", pmp_iters, "gradient iterations cap");
  pmp_cmd->callback([&] {
    ConfigMap c = load_config(f);
    if (pmp_iters > 0) c.set("pmp.max_iters", std::to_string(pmp_iters));
    run_method(Method::pmp, f, c);
  });

  auto* sdre_cmd = app.add_subcommand(
      "sdre-mpc", "receding-horizon feedback from frozen Riccati solves");
  add_common(sdre_cmd, f);
  int refresh = -1;
  sdre_cmd->add_option("--refresh-steps", refresh, "steps between Riccati refreshes");
  sdre_cmd->callback([&] {
    ConfigMap c = load_config(f);
    if (refresh > 0) c.set("sdre.refresh_steps", std::to_string(refresh));
    run_method(Method::sdre_mpc, f, c);
  });

  auto* mdpc_cmd = app.add_subcommand(
      "mdpc", "moment-driven predictive control with variance triggers");
  add_common(mdpc_cmd, f);
  double delta_tol = -1.0;
  mdpc_cmd->add_option("--delta-tol", delta_tol, "variance-gap tolerance");
  mdpc_cmd->callback([&] {
    ConfigMap c = load_config(f);
    if (delta_tol > 0) c.set("mdpc.delta_tol", format_double(delta_tol));
    run_method(Method::mdpc, f, c);
  });

  auto* gen_cmd = app.add_subcommand("gen-data", "label sampled states for training");
  add_common(gen_cmd, f);
  std::string labeler = "sdre", data_out;
  int samples = 1000;
  gen_cmd->add_option("--labeler", labeler, "labeling solver")
      ->check(CLI::IsMember({"pmp", "sdre"}));
  gen_cmd->add_option("--samples", samples, "number of sampled states");
  gen_cmd->add_option("--out-file", data_out, "dataset CSV path");
  gen_cmd->callback([&] {
    ConfigMap c = load_config(f);
    const SimParams params = sim_params_from_config(c);
    const int agents = c.get_int("experiment.agents", 50);
    const int dim = c.get_int("experiment.dim", 2);
    const SampleBox box = box_from_config(c, SampleBox{0.0, 1.0, 0.0, 1.0});
    const std::uint64_t seed = f.seeds.empty() ? 2024 : f.seeds[0];
    GradientSolverConfig pmp_cfg;
    pmp_cfg.max_iters = c.get_int("pmp.max_iters", 100);
    pmp_cfg.grad_tolerance = c.get_double("pmp.grad_tol", 1e-5);
    const std::vector<EnsembleState> states =
        sample_states(samples, agents, dim, box, seed);
    const Dataset ds = generate_dataset(
        states, labeler == "pmp" ? Labeler::pmp : Labeler::sdre, params,
        pmp_cfg, f.threads);
    const std::string out_dir = c.get("experiment.out_dir", "out");
    std::filesystem::create_directories(out_dir);
    const std::string path =
        data_out.empty()
            ? (std::filesystem::path(out_dir) / ("dataset_" + labeler + ".csv"))
                  .string()
            : data_out;
    write_dataset_csv(path, ds);
    std::cout << "labeled " << ds.samples.size() << " states (dropped "
              << ds.dropped << ") -> " << path << "\n";
  });

  auto* train_cmd = app.add_subcommand("train", "fit a feedback surrogate");
  add_common(train_cmd, f);
  std::string data_path, target = "u", activation = "tanh", model_out, eval_path;
  std::vector<int> hidden{64};
  double mu = 0.0, lr = 1e-3;
  int epochs = 40, batch = 200;
  train_cmd->add_option("--data", data_path, "training dataset CSV")->required();
  train_cmd->add_option("--target", target, "label target")
      ->check(CLI::IsMember({"u", "v"}));
  train_cmd->add_option("--hidden", hidden, "hidden layer widths");
  train_cmd->add_option("--activation", activation, "hidden activation")
      ->check(CLI::IsMember({"tanh", "sigmoid"}));
  train_cmd->add_option("--mu", mu, "gradient-penalty weight (value models)");
  train_cmd->add_option("--epochs", epochs, "training epochs");
  train_cmd->add_option("--batch", batch, "mini-batch size");
  train_cmd->add_option("--lr", lr, "Adam learning rate");
  train_cmd->add_option("--model-out", model_out, "model JSON path");
  train_cmd->add_option("--eval-data", eval_path, "held-out dataset CSV");
  train_cmd->callback([&] {
    ConfigMap c = load_config(f);
    const int agents = c.get_int("experiment.agents", 50);
    const int dim = c.get_int("experiment.dim", 2);
    const Dataset ds = read_dataset_csv(data_path, agents, dim);
    const Eigen::MatrixXd x = dataset_inputs(ds);
    const bool value_model = target == "v";
    const Eigen::MatrixXd y =
        value_model ? dataset_values(ds) : dataset_controls(ds);
    Eigen::MatrixXd g;
    const Eigen::MatrixXd* gptr = nullptr;
    if (value_model && mu > 0) {
      g = dataset_value_gradients(ds);
      gptr = &g;
    }
    NetworkSpec spec;
    spec.input_dim = 2 * agents * dim;
    spec.hidden_widths = hidden;
    spec.output_dim = value_model ? 1 : agents * dim;
    spec.activation = activation_from_name(activation);
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = batch;
    tc.learning_rate = lr;
    tc.mu = value_model ? mu : 0.0;
    tc.seed = f.seeds.empty() ? 2024 : f.seeds[0];
    const TrainResult tr = train(x, y, gptr, spec, tc);
    const std::string out_dir = c.get("experiment.out_dir", "out");
    std::filesystem::create_directories(out_dir);
    const std::string path =
        model_out.empty()
            ? (std::filesystem::path(out_dir) / "model.json").string()
            : model_out;
    save_network(tr.net, path,
                 {{"target", target},
                  {"mu", tc.mu},
                  {"epochs", epochs},
                  {"train_samples", ds.samples.size()},
                  {"final_train_loss", tr.epoch_loss.back()}});
    std::cout << "final training loss " << tr.epoch_loss.back() << " -> "
              << path << "\n";
    if (!eval_path.empty()) {
      const Dataset ev = read_dataset_csv(eval_path, agents, dim);
      const Eigen::MatrixXd xe = dataset_inputs(ev);
      const Eigen::MatrixXd ye =
          value_model ? dataset_values(ev) : dataset_controls(ev);
      std::cout << "held-out PRMSE "
                << prmse(tr.net.forward_batch(xe), ye) << "%\n";
    }
  });

  auto* rollout_cmd =
      app.add_subcommand("rollout", "simulate under a learned feedback");
  add_common(rollout_cmd, f);
  std::string model_path, model_kind = "u";
  rollout_cmd->add_option("--model", model_path, "model JSON path")->required();
  rollout_cmd->add_option("--kind", model_kind, "model output: control or value")
      ->check(CLI::IsMember({"u", "v"}));
  rollout_cmd->callback([&] {
    ConfigMap c = load_config(f);
    c.set("model.path", model_path);
    run_method(model_kind == "u" ? Method::learned_u : Method::learned_v, f, c);
  });

  auto* test1_cmd = app.add_subcommand(
      "test1", "dataset -> four surrogate variants -> rollout comparison");
  add_common(test1_cmd, f);
  test1_cmd->callback([&] {
    const Test1Options opt = test1_options_from_config(load_config(f));
    const Test1Result res = run_pipeline_test1(opt);
    for (const TrainedVariant& m : res.models)
      std::cout << m.variant.name << ": held-out control PRMSE "
                << m.prmse_control << "%\n";
    std::cout << "mean final sigma^2 per method: "
              << res.summary["mean_final_variance"].dump() << "\n"
              << "outputs in " << opt.out_dir << "\n";
  });

  auto* test2_cmd =
      app.add_subcommand("test2", "variance-triggered control tolerance study");
  add_common(test2_cmd, f);
  test2_cmd->callback([&] {
    const Test2Options opt = test2_options_from_config(load_config(f));
    const Test2Result res = run_pipeline_test2(opt);
    for (const auto& arm : res.summary["arms"]) {
      std::cout << arm["method"].get<std::string>() << ": mean final sigma^2 "
                << arm["mean_final_variance"].get<double>();
      if (arm.contains("update_counts"))
        std::cout << " update counts " << arm["update_counts"].dump();
      std::cout << "\n";
    }
    std::cout << "outputs in " << opt.out_dir << "\n";
  });

  auto* bench_cmd = app.add_subcommand(
      "bench", "learned feedback vs online-Riccati feedback wall-clock");
  add_common(bench_cmd, f);
  std::string bench_model, bench_kind = "u";
  int bench_refresh = 1;
  bench_cmd->add_option("--model", bench_model, "model JSON path")->required();
  bench_cmd->add_option("--kind", bench_kind, "model output: control or value")
      ->check(CLI::IsMember({"u", "v"}));
  bench_cmd->add_option("--refresh-steps", bench_refresh,
                        "Riccati refresh cadence for the baseline");
  bench_cmd->callback([&] {
    ConfigMap c = load_config(f);
    const SimParams params = sim_params_from_config(c);
    const int agents = c.get_int("experiment.agents", 50);
    const int dim = c.get_int("experiment.dim", 2);
    const SampleBox box = box_from_config(c);
    const std::uint64_t seed = f.seeds.empty() ? 1 : f.seeds[0];
    const EnsembleState initial =
        random_state(agents, dim, box.pos_lo, box.pos_hi, box.vel_lo,
                     box.vel_hi, derive_seed(seed, 1));
    const Network net = load_network(bench_model);
    const BenchResult b = run_bench(
        initial, net,
        bench_kind == "u" ? ModelKind::control : ModelKind::value, params,
        bench_refresh);
    std::cout << "riccati rollout " << b.sdre_seconds << "s ("
              << b.care_solves << " solves), learned rollout "
              << b.learned_seconds << "s, speedup " << b.speedup << "x\n";
    const std::string out_dir = c.get("experiment.out_dir", "out");
    std::filesystem::create_directories(out_dir);
    std::ofstream bj((std::filesystem::path(out_dir) / "bench.json").string());
    bj << nlohmann::json({{"sdre_seconds", b.sdre_seconds},
                          {"learned_seconds", b.learned_seconds},
                          {"speedup", b.speedup},
                          {"care_solves", b.care_solves},
                          {"sdre_final_variance", b.sdre_final_variance},
                          {"learned_final_variance", b.learned_final_variance}})
              .dump(2)
       << "\n";
  });

  try {
    CLI11_PARSE(app, argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
