#pragma once

#include "cmtcs/metrics.hpp"
#include "cmtcs/model.hpp"
#include "cmtcs/rng.hpp"
#include "cmtcs/simulate.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#ifndef CMTCS_VERSION_STRING
#define CMTCS_VERSION_STRING "0.0.0"
#endif

namespace cmtcs {

inline constexpr const char* version = CMTCS_VERSION_STRING;

enum class Scenario { overlap_sweep, dim_scaling, convergence, task_scaling, cluster_scaling };
enum class Algorithm { single_task, multi_task, clustered_em, clustered_cofem };

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline const std::vector<std::pair<Scenario, const char*>>& scenario_names() {
  static const std::vector<std::pair<Scenario, const char*>> v{{Scenario::overlap_sweep, "overlap_sweep"},
                                                                {Scenario::dim_scaling, "dim_scaling"},
                                                                {Scenario::convergence, "convergence"},
                                                                {Scenario::task_scaling, "task_scaling"},
                                                                {Scenario::cluster_scaling, "cluster_scaling"}};
  return v;
}

inline const std::vector<std::pair<Algorithm, const char*>>& algorithm_names() {
  static const std::vector<std::pair<Algorithm, const char*>> v{{Algorithm::single_task, "single_task"},
                                                                 {Algorithm::multi_task, "multi_task"},
                                                                 {Algorithm::clustered_em, "clustered_em"},
                                                                 {Algorithm::clustered_cofem, "clustered_cofem"}};
  return v;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

inline std::string to_string(Scenario s) {
  for (const auto& [v, n] : detail::scenario_names())
    if (v == s) return n;
  throw std::logic_error("unknown scenario");
}

inline std::string to_string(Algorithm a) {
  for (const auto& [v, n] : detail::algorithm_names())
    if (v == a) return n;
  throw std::logic_error("unknown algorithm");
}

inline Scenario parse_scenario(const std::string& name) {
  for (const auto& [v, n] : detail::scenario_names())
    if (name == n) return v;
  throw ConfigError("unknown scenario '" + name + "'");
}

inline Algorithm parse_algorithm(const std::string& name) {
  for (const auto& [v, n] : detail::algorithm_names())
    if (name == n) return v;
  throw ConfigError("unknown algorithm '" + name + "'");
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

/// Analytic bytes of the major numeric buffers, 8 bytes per real.
/// EM: T Gram matrices and TC dense covariances plus mean/variance vectors.
/// CoFEM: TC sets of K+1 solver vectors and K transcripts of U (gamma, xi) pairs.
inline std::uint64_t memory_estimate(Inference kind, std::uint64_t D, std::uint64_t T, std::uint64_t C,
                                     std::uint64_t K, std::uint64_t U) {
  if (D == 0 || T == 0 || C == 0 || K == 0 || U == 0) throw std::invalid_argument("memory_estimate: arguments must be positive");
  if (kind == Inference::exact_em) return 8 * (T * D * D + T * C * (D * D + 2 * D) + T * D);
  return 8 * T * C * ((K + 1) * D + 2 * K * U);
}

struct ExperimentSpec {
  Scenario scenario = Scenario::overlap_sweep;
  std::vector<Algorithm> algorithms;  ///< empty selects the scenario default
  SimConfig sim;
  ModelConfig model;
  std::vector<double> f_grid{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<std::size_t> dim_grid{512, 1024, 2048, 4096};
  std::vector<std::size_t> task_grid{4, 8, 16};
  std::vector<std::size_t> cluster_grid{1, 2, 3, 4};
  std::size_t repeats = 1;
  bool timing = true;

  std::vector<Algorithm> resolved_algorithms() const {
    if (!algorithms.empty()) return algorithms;
    if (scenario == Scenario::overlap_sweep) return {Algorithm::single_task, Algorithm::multi_task, Algorithm::clustered_cofem};
    return {Algorithm::clustered_em, Algorithm::clustered_cofem};
  }

  void validate() const;
};

/// One (algorithm, parameter point, repeat) result.
struct RunRecord {
  std::string scenario;
  std::string algorithm;
  std::size_t D = 0, T = 0, C = 0, K = 0, U = 0;
  double f = 0.0;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  double total_seconds = 0.0;
  std::uint64_t peak_bytes = 0;
  double normalized_error = 0.0;
  double assignment_accuracy = 0.0;
  std::vector<double> iteration_seconds;
  std::vector<double> iteration_errors;
};

/// A parameter point: the simulation and model settings for one sweep value.
struct ParameterPoint {
  SimConfig sim;
  std::size_t clusters = 2;
};

inline std::vector<ParameterPoint> parameter_points(const ExperimentSpec& spec) {
  std::vector<ParameterPoint> out;
  auto base = [&] { return ParameterPoint{spec.sim, spec.model.clusters}; };
  switch (spec.scenario) {
    case Scenario::overlap_sweep:
      for (double f : spec.f_grid) {
        auto p = base();
        p.sim.overlap = f;
        out.push_back(p);
      }
      break;
    case Scenario::dim_scaling:
      for (std::size_t d : spec.dim_grid) {
        auto p = base();
        p.sim.dim = d;
        out.push_back(p);
      }
      break;
    case Scenario::convergence:
      out.push_back(base());
      break;
    case Scenario::task_scaling:
      for (std::size_t t : spec.task_grid) {
        auto p = base();
        p.sim.tasks = t;
        out.push_back(p);
      }
      break;
    case Scenario::cluster_scaling:
      for (std::size_t c : spec.cluster_grid) {
        auto p = base();
        p.clusters = c;
        out.push_back(p);
      }
      break;
  }
  return out;
}

inline void ExperimentSpec::validate() const {
  if (repeats < 1) throw ConfigError("repeats must be >= 1");
  const auto algs = resolved_algorithms();
  for (Algorithm a : algs) {
    const bool baseline = a == Algorithm::single_task || a == Algorithm::multi_task;
    if (baseline && scenario != Scenario::overlap_sweep) {
      throw ConfigError("algorithm " + to_string(a) + " is only valid for the overlap_sweep scenario");
    }
  }
  auto grid_empty = [&](bool empty, const char* key) {
    if (empty) throw ConfigError(std::string(key) + " must list at least one value");
  };
  if (scenario == Scenario::overlap_sweep) grid_empty(f_grid.empty(), "f-grid");
  if (scenario == Scenario::dim_scaling) grid_empty(dim_grid.empty(), "dim-grid");
  if (scenario == Scenario::task_scaling) grid_empty(task_grid.empty(), "task-grid");
  if (scenario == Scenario::cluster_scaling) grid_empty(cluster_grid.empty(), "cluster-grid");
  model.validate();
  for (const auto& p : parameter_points(*this)) {
    p.sim.validate();
    plant_supports(p.sim);
    ModelConfig m = model;
    m.clusters = p.clusters;
    m.priors.clear();
    m.validate();
    for (Algorithm a : algs) {
      if (a == Algorithm::clustered_em && p.sim.dim > model.dense_limit) {
        throw DenseLimitError("clustered_em at D = " + std::to_string(p.sim.dim) + " exceeds dense-limit " +
                              std::to_string(model.dense_limit) +
                              " (dense covariances would be out of memory); drop clustered_em or raise dense-limit");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Flat key = value configuration
//
//   # comment
//   key = value
//
// One pair per line, blank lines ignored, lists comma-separated. Keys:
//   scenario, algorithms, dim, tasks, groups, clusters, sparsity,
//   undersampling, sigma, overlap, scaling, f-grid, dim-grid, task-grid,
//   cluster-grid, iterations, num-probes, cg-steps, cg-tol, alpha-max,
//   dense-limit, beta, repeats, seed, workers, timing
// ---------------------------------------------------------------------------

using ConfigMap = std::map<std::string, std::string>;

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "scenario",  "algorithms", "dim",          "tasks",      "groups",    "clusters", "sparsity",
      "undersampling", "sigma",  "overlap",      "scaling",    "f-grid",    "dim-grid", "task-grid",
      "cluster-grid", "iterations", "num-probes", "cg-steps",  "cg-tol",    "alpha-max", "dense-limit",
      "beta",      "repeats",    "seed",         "workers",    "timing"};
  return keys;
}

inline ConfigMap parse_config_text(const std::string& text, const std::string& origin = "config") {
  ConfigMap out;
  std::stringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    if (std::find(config_keys().begin(), config_keys().end(), key) == config_keys().end()) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    out[key] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

inline ConfigMap read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.string());
}

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, value);
  if (r.ec != std::errc{} || r.ptr != end) throw ConfigError("bad value for " + key + ": '" + text + "'");
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "on" || text == "true" || text == "1") return true;
  if (text == "off" || text == "false" || text == "0") return false;
  throw ConfigError("bad value for " + key + ": '" + text + "' (expected on/off)");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) out.push_back(parse_number<T>(key, item));
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<T>) s += format_double(v[i]);
    else s += std::to_string(v[i]);
  }
  return s;
}

}  // namespace detail

/// Applies the pairs in `cfg` on top of `spec`.
inline void apply_config(ExperimentSpec& spec, const ConfigMap& cfg) {
  using detail::parse_number;
  for (const auto& [key, v] : cfg) {
    if (key == "scenario") spec.scenario = parse_scenario(v);
    else if (key == "algorithms") {
      spec.algorithms.clear();
      for (const auto& a : detail::split_list(v)) spec.algorithms.push_back(parse_algorithm(a));
    }
    else if (key == "dim") spec.sim.dim = parse_number<std::size_t>(key, v);
    else if (key == "tasks") spec.sim.tasks = parse_number<std::size_t>(key, v);
    else if (key == "groups") spec.sim.groups = parse_number<std::size_t>(key, v);
    else if (key == "clusters") spec.model.clusters = parse_number<std::size_t>(key, v);
    else if (key == "sparsity") spec.sim.sparsity = parse_number<double>(key, v);
    else if (key == "undersampling") spec.sim.undersampling = parse_number<double>(key, v);
    else if (key == "sigma") spec.sim.sigma = parse_number<double>(key, v);
    else if (key == "overlap") spec.sim.overlap = parse_number<double>(key, v);
    else if (key == "scaling") {
      try {
        spec.sim.scaling = parse_scaling(v);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    else if (key == "f-grid") spec.f_grid = detail::parse_list<double>(key, v);
    else if (key == "dim-grid") spec.dim_grid = detail::parse_list<std::size_t>(key, v);
    else if (key == "task-grid") spec.task_grid = detail::parse_list<std::size_t>(key, v);
    else if (key == "cluster-grid") spec.cluster_grid = detail::parse_list<std::size_t>(key, v);
    else if (key == "iterations") spec.model.iterations = parse_number<std::size_t>(key, v);
    else if (key == "num-probes") spec.model.probes = parse_number<std::size_t>(key, v);
    else if (key == "cg-steps") spec.model.cg_steps = parse_number<std::size_t>(key, v);
    else if (key == "cg-tol") spec.model.cg_tol = parse_number<double>(key, v);
    else if (key == "alpha-max") spec.model.alpha_max = parse_number<double>(key, v);
    else if (key == "dense-limit") spec.model.dense_limit = parse_number<std::size_t>(key, v);
    else if (key == "beta") spec.model.beta = parse_number<double>(key, v);
    else if (key == "repeats") spec.repeats = parse_number<std::size_t>(key, v);
    else if (key == "seed") spec.model.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "workers") spec.model.workers = parse_number<unsigned>(key, v);
    else if (key == "timing") spec.timing = detail::parse_bool(key, v);
    else throw ConfigError("unknown key '" + key + "'");
  }
}

/// The fully resolved configuration as key = value pairs.
inline ConfigMap to_config_map(const ExperimentSpec& spec) {
  std::vector<std::string> algs;
  for (Algorithm a : spec.resolved_algorithms()) algs.push_back(to_string(a));
  std::string alg_list;
  for (std::size_t i = 0; i < algs.size(); ++i) alg_list += (i ? "," : "") + algs[i];
  return {{"scenario", to_string(spec.scenario)},
          {"algorithms", alg_list},
          {"dim", std::to_string(spec.sim.dim)},
          {"tasks", std::to_string(spec.sim.tasks)},
          {"groups", std::to_string(spec.sim.groups)},
          {"clusters", std::to_string(spec.model.clusters)},
          {"sparsity", format_double(spec.sim.sparsity)},
          {"undersampling", format_double(spec.sim.undersampling)},
          {"sigma", format_double(spec.sim.sigma)},
          {"overlap", format_double(spec.sim.overlap)},
          {"scaling", scaling_name(spec.sim.scaling)},
          {"f-grid", detail::join(spec.f_grid)},
          {"dim-grid", detail::join(spec.dim_grid)},
          {"task-grid", detail::join(spec.task_grid)},
          {"cluster-grid", detail::join(spec.cluster_grid)},
          {"iterations", std::to_string(spec.model.iterations)},
          {"num-probes", std::to_string(spec.model.probes)},
          {"cg-steps", std::to_string(spec.model.cg_steps)},
          {"cg-tol", format_double(spec.model.cg_tol)},
          {"alpha-max", format_double(spec.model.alpha_max)},
          {"dense-limit", std::to_string(spec.model.dense_limit)},
          {"beta", format_double(spec.model.beta)},
          {"repeats", std::to_string(spec.repeats)},
          {"seed", std::to_string(spec.model.seed)},
          {"workers", std::to_string(spec.model.workers)},
          {"timing", spec.timing ? "on" : "off"}};
}

inline nlohmann::json manifest_json(const ExperimentSpec& spec) {
  nlohmann::json config = nlohmann::json::object();
  for (const auto& [k, v] : to_config_map(spec)) config[k] = v;
  return {{"cmtcs_version", version},
          {"config", config},
          {"outputs", {{"results", "results.csv"}, {"iterations", "iterations.csv"}}}};
}

/// Reads the "config" object of a manifest written by run_experiment.
inline ExperimentSpec spec_from_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!j.contains("config") || !j["config"].is_object()) throw ConfigError(path.string() + ": manifest lacks config");
  ConfigMap cfg;
  for (const auto& [k, v] : j["config"].items()) {
    if (std::find(config_keys().begin(), config_keys().end(), k) == config_keys().end()) {
      throw ConfigError(path.string() + ": unknown key '" + k + "'");
    }
    cfg[k] = v.get<std::string>();
  }
  ExperimentSpec spec;
  apply_config(spec, cfg);
  return spec;
}

/// Data and model seed of repeat r.
inline std::uint64_t repeat_seed(std::uint64_t root, std::size_t repeat) {
  return derive_seed(root, Stream::repeat, repeat);
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline RunRecord run_point(const ExperimentSpec& spec, const ParameterPoint& point, Algorithm algorithm,
                           std::size_t repeat) {
  const std::uint64_t seed = repeat_seed(spec.model.seed, repeat);
  SimConfig sim = point.sim;
  sim.seed = seed;
  const SimData data = generate(sim);
  const auto tasks = data.as_tasks();

  ModelConfig cfg = spec.model;
  cfg.seed = seed;
  cfg.priors.clear();
  cfg.clusters = algorithm == Algorithm::single_task || algorithm == Algorithm::multi_task ? 1 : point.clusters;

  RunRecord rec;
  rec.scenario = to_string(spec.scenario);
  rec.algorithm = to_string(algorithm);
  rec.D = sim.dim;
  rec.T = sim.tasks;
  rec.C = cfg.clusters;
  rec.K = cfg.probes;
  rec.U = cfg.cg_steps;
  rec.f = sim.overlap;
  rec.repeat = repeat;
  rec.seed = seed;

  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> assignments;
  std::vector<Vector> recon;
  if (algorithm == Algorithm::single_task) {
    // Independent C = 1 model per task; per-iteration error pools the tasks.
    rec.iteration_seconds.assign(cfg.iterations, 0.0);
    std::vector<double> sq(cfg.iterations, 0.0);
    double truth_sq = 0.0;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const std::span<const Task> one(&tasks[t], 1);
      const std::span<const Vector> z(&data.true_signals[t], 1);
      const FitResult r = run_cofem(one, cfg, z);
      const double zz = data.true_signals[t].squaredNorm();
      truth_sq += zz;
      for (std::size_t it = 0; it < r.history.size(); ++it) {
        rec.iteration_seconds[it] += r.history[it].seconds;
        sq[it] += std::pow(*r.history[it].normalized_error, 2) * zz;
      }
      assignments.push_back(t);
      recon.push_back(r.reconstructions[0]);
    }
    for (double s : sq) rec.iteration_errors.push_back(std::sqrt(s / truth_sq));
    rec.peak_bytes = memory_estimate(Inference::cofem, rec.D, 1, 1, rec.K, rec.U);
  } else {
    const bool exact = algorithm == Algorithm::clustered_em;
    const FitResult r = fit(tasks, cfg, exact ? Inference::exact_em : Inference::cofem, data.true_signals);
    for (const auto& h : r.history) {
      rec.iteration_seconds.push_back(h.seconds);
      rec.iteration_errors.push_back(*h.normalized_error);
    }
    assignments = r.assignments;
    recon = r.reconstructions;
    rec.peak_bytes = memory_estimate(exact ? Inference::exact_em : Inference::cofem, rec.D, rec.T, rec.C,
                                     rec.K, rec.U);
  }
  rec.total_seconds = seconds_since(start);
  rec.normalized_error = normalized_error(data.true_signals, recon);
  rec.assignment_accuracy = assignment_accuracy(assignments, data.group_labels);
  if (!spec.timing) {
    rec.total_seconds = 0.0;
    for (double& s : rec.iteration_seconds) s = 0.0;
  }
  return rec;
}

}  // namespace detail

inline const char* results_header =
    "scenario,algorithm,D,T,C,K,U,f,repeat,seed,total_seconds,peak_bytes,normalized_error,assignment_accuracy";
inline const char* iterations_header = "scenario,algorithm,D,T,C,f,repeat,seed,iteration,seconds,normalized_error";

inline std::string results_row(const RunRecord& r) {
  std::ostringstream out;
  out << r.scenario << ',' << r.algorithm << ',' << r.D << ',' << r.T << ',' << r.C << ',' << r.K << ',' << r.U
      << ',' << format_double(r.f) << ',' << r.repeat << ',' << r.seed << ',' << format_double(r.total_seconds)
      << ',' << r.peak_bytes << ',' << format_double(r.normalized_error) << ','
      << format_double(r.assignment_accuracy);
  return out.str();
}

inline std::string iteration_rows(const RunRecord& r) {
  std::ostringstream out;
  for (std::size_t it = 0; it < r.iteration_errors.size(); ++it) {
    out << r.scenario << ',' << r.algorithm << ',' << r.D << ',' << r.T << ',' << r.C << ','
        << format_double(r.f) << ',' << r.repeat << ',' << r.seed << ',' << it + 1 << ','
        << format_double(r.iteration_seconds[it]) << ',' << format_double(r.iteration_errors[it]) << '\n';
  }
  return out.str();
}

/// Runs every (parameter point, algorithm, repeat) in that order. If out_dir
/// is non-empty, writes results.csv, iterations.csv and manifest.json there.
/// A failed run is reported on `log` and the remaining runs continue; the
/// first failure is rethrown at the end.
inline std::vector<RunRecord> run_experiment(const ExperimentSpec& spec, const std::filesystem::path& out_dir = {},
                                             std::ostream* log = nullptr) {
  spec.validate();
  std::vector<RunRecord> records;
  std::exception_ptr first_failure;
  const auto points = parameter_points(spec);
  const auto algs = spec.resolved_algorithms();
  for (const auto& point : points) {
    for (Algorithm a : algs) {
      for (std::size_t r = 0; r < spec.repeats; ++r) {
        try {
          records.push_back(detail::run_point(spec, point, a, r));
          if (log) {
            const auto& rec = records.back();
            *log << rec.algorithm << " D=" << rec.D << " T=" << rec.T << " C=" << rec.C << " f=" << rec.f
                 << " repeat=" << r << " error=" << rec.normalized_error << " accuracy=" << rec.assignment_accuracy
                 << " seconds=" << rec.total_seconds << '\n';
          }
        } catch (const std::exception& e) {
          if (log) *log << "run failed: " << to_string(a) << " D=" << point.sim.dim << " repeat=" << r << ": " << e.what() << '\n';
          if (!first_failure) first_failure = std::current_exception();
        }
      }
    }
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream results(out_dir / "results.csv", std::ios::binary);
    std::ofstream iterations(out_dir / "iterations.csv", std::ios::binary);
    std::ofstream manifest(out_dir / "manifest.json", std::ios::binary);
    if (!results || !iterations || !manifest) throw std::runtime_error("cannot write outputs in " + out_dir.string());
    results << results_header << '\n';
    iterations << iterations_header << '\n';
    for (const auto& rec : records) {
      results << results_row(rec) << '\n';
      iterations << iteration_rows(rec);
    }
    manifest << manifest_json(spec).dump(2) << '\n';
  }
  if (first_failure) std::rethrow_exception(first_failure);
  return records;
}

}  // namespace cmtcs
