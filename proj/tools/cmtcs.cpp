#include "cmtcs/experiment.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <iostream>
#include <map>
#include <string>

using namespace cmtcs;

namespace {

struct RunArgs {
  std::string config;
  std::string manifest;
  std::string out = "cmtcs_out";
  bool quiet = false;
  std::map<std::string, std::string> overrides;
};

int do_run(RunArgs& args) {
  ExperimentSpec spec;
  if (!args.manifest.empty()) spec = spec_from_manifest(args.manifest);
  if (!args.config.empty()) apply_config(spec, read_config_file(args.config));
  ConfigMap cli;
  for (const auto& [k, v] : args.overrides)
    if (!v.empty()) cli[k] = v;
  apply_config(spec, cli);
  run_experiment(spec, args.out, args.quiet ? nullptr : &std::cerr);
  std::cerr << "wrote " << args.out << "/results.csv, iterations.csv, manifest.json\n";
  return 0;
}

struct SimulateArgs {
  SimConfig sim;
  std::string scaling = "unitary";
  std::string out = "sim.bin";
};

int do_simulate(SimulateArgs& args) {
  args.sim.scaling = parse_scaling(args.scaling);
  const auto data = generate(args.sim);
  save_sim_data(data, args.out, &args.sim);
  std::cerr << "wrote " << data.tasks() << " tasks to " << args.out << '\n';
  return 0;
}

struct FitArgs {
  std::string data;
  std::string method = "cofem";
  ModelConfig model;
};

int do_fit(FitArgs& args) {
  const auto data = load_sim_data(args.data);
  const auto tasks = data.as_tasks();
  Inference method;
  if (args.method == "em") method = Inference::exact_em;
  else if (args.method == "cofem") method = Inference::cofem;
  else throw ConfigError("unknown method '" + args.method + "' (expected em or cofem)");
  const auto result = fit(tasks, args.model, method, data.true_signals);
  nlohmann::json out{{"method", args.method},
                     {"normalized_error", normalized_error(data.true_signals, result.reconstructions)},
                     {"assignment_accuracy", assignment_accuracy(result.assignments, data.group_labels)},
                     {"assignments", result.assignments}};
  for (const auto& h : result.history) {
    out["iteration_seconds"].push_back(h.seconds);
    out["iteration_errors"].push_back(*h.normalized_error);
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

struct MemoryArgs {
  std::string algorithm = "cofem";
  std::uint64_t dim = 1000, tasks = 1, clusters = 1, probes = 15, steps = 50;
};

int do_memory(const MemoryArgs& args) {
  Inference kind;
  if (args.algorithm == "em") kind = Inference::exact_em;
  else if (args.algorithm == "cofem") kind = Inference::cofem;
  else throw ConfigError("unknown algorithm '" + args.algorithm + "' (expected em or cofem)");
  std::cout << memory_estimate(kind, args.dim, args.tasks, args.clusters, args.probes, args.steps) << '\n';
  return 0;
}

void add_model_flags(CLI::App* app, ModelConfig& m) {
  app->add_option("--clusters", m.clusters, "Number of clusters C");
  app->add_option("--beta", m.beta, "Noise precision 1/sigma^2");
  app->add_option("--iterations", m.iterations, "EM iterations");
  app->add_option("--num-probes", m.probes, "Rademacher probes K");
  app->add_option("--cg-steps", m.cg_steps, "CG step cap U");
  app->add_option("--cg-tol", m.cg_tol, "CG relative residual tolerance (0 runs all steps)");
  app->add_option("--alpha-max", m.alpha_max, "Cap on alpha");
  app->add_option("--dense-limit", m.dense_limit, "Largest D the exact path will densify");
  app->add_option("--seed", m.seed, "Root seed");
  app->add_option("--workers", m.workers, "Worker threads");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clustered multi-task compressive sensing with exact EM and CoFEM"};
  app.set_version_flag("--version", std::string(version));
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Run an experiment scenario and write CSV + manifest");
  run_cmd->add_option("--config", run.config, "Flat key = value config file")->check(CLI::ExistingFile);
  run_cmd->add_option("--manifest", run.manifest, "Re-run from a manifest.json")->check(CLI::ExistingFile);
  run_cmd->add_option("--out", run.out, "Output directory")->capture_default_str();
  run_cmd->add_flag("--quiet", run.quiet, "No per-run progress lines");
  for (const auto& key : config_keys()) run_cmd->add_option("--" + key, run.overrides[key], "Override '" + key + "'");

  SimulateArgs sim;
  auto* sim_cmd = app.add_subcommand("simulate", "Generate a synthetic benchmark data set");
  sim_cmd->add_option("--dim", sim.sim.dim, "Signal dimension D")->capture_default_str();
  sim_cmd->add_option("--tasks", sim.sim.tasks, "Tasks T")->capture_default_str();
  sim_cmd->add_option("--groups", sim.sim.groups, "Planted groups")->capture_default_str();
  sim_cmd->add_option("--sparsity", sim.sim.sparsity, "Fraction of nonzeros")->capture_default_str();
  sim_cmd->add_option("--undersampling", sim.sim.undersampling, "Fourier rows / D")->capture_default_str();
  sim_cmd->add_option("--sigma", sim.sim.sigma, "Noise std per real component")->capture_default_str();
  sim_cmd->add_option("--overlap", sim.sim.overlap, "Support disagreement f")->capture_default_str();
  sim_cmd->add_option("--scaling", sim.scaling, "unitary or unnormalized")->capture_default_str();
  sim_cmd->add_option("--seed", sim.sim.seed, "Seed")->capture_default_str();
  sim_cmd->add_option("--out", sim.out, "Output file")->capture_default_str();

  FitArgs fit_args;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a saved data set and print a JSON summary");
  fit_cmd->add_option("--data", fit_args.data, "Simulation file")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--method", fit_args.method, "em or cofem")->capture_default_str();
  add_model_flags(fit_cmd, fit_args.model);

  MemoryArgs mem;
  auto* mem_cmd = app.add_subcommand("memory", "Print the analytic buffer estimate in bytes");
  mem_cmd->add_option("--algorithm", mem.algorithm, "em or cofem")->capture_default_str();
  mem_cmd->add_option("--dim", mem.dim, "D")->capture_default_str();
  mem_cmd->add_option("--tasks", mem.tasks, "T")->capture_default_str();
  mem_cmd->add_option("--clusters", mem.clusters, "C")->capture_default_str();
  mem_cmd->add_option("--num-probes", mem.probes, "K")->capture_default_str();
  mem_cmd->add_option("--cg-steps", mem.steps, "U")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run_cmd) return do_run(run);
    if (*sim_cmd) return do_simulate(sim);
    if (*fit_cmd) return do_fit(fit_args);
    if (*mem_cmd) return do_memory(mem);
  } catch (const std::exception& e) {
    std::cerr << "cmtcs: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
