#pragma once

#include "cmtcs/metrics.hpp"
#include "cmtcs/model.hpp"
#include "cmtcs/operators.hpp"
#include "cmtcs/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmtcs {

struct SimConfig {
  std::size_t dim = 512;
  std::size_t tasks = 8;
  std::size_t groups = 2;
  double sparsity = 0.05;
  double undersampling = 0.25;
  double sigma = 0.05;
  double overlap = 0.0;  ///< f: fraction of the support on which groups disagree
  std::uint64_t seed = 0;
  FourierScaling scaling = FourierScaling::unitary;

  std::size_t tasks_per_group() const { return tasks / groups; }

  void validate() const {
    if (dim == 0 || tasks == 0 || groups == 0) throw std::invalid_argument("SimConfig: sizes must be positive");
    if (tasks % groups != 0) throw std::invalid_argument("SimConfig: groups must divide tasks");
    if (!(overlap >= 0.0 && overlap <= 1.0)) throw std::invalid_argument("SimConfig: overlap must be in [0, 1]");
    if (!(sparsity > 0.0 && sparsity < 1.0)) throw std::invalid_argument("SimConfig: sparsity must be in (0, 1)");
    if (!(undersampling > 0.0 && undersampling <= 1.0)) {
      throw std::invalid_argument("SimConfig: undersampling must be in (0, 1]");
    }
    if (!(sigma >= 0.0)) throw std::invalid_argument("SimConfig: sigma must be nonnegative");
  }
};

/// Round half up.
inline std::size_t round_count(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

struct SimData {
  std::vector<Vector> true_signals;
  std::vector<std::shared_ptr<const SensingOperator>> operators;
  std::vector<Vector> measurements;
  std::vector<std::size_t> group_labels;

  std::size_t tasks() const noexcept { return true_signals.size(); }

  std::vector<Task> as_tasks() const {
    std::vector<Task> out;
    out.reserve(tasks());
    for (std::size_t t = 0; t < tasks(); ++t) out.push_back({measurements[t], operators[t]});
    return out;
  }
};

namespace detail {
/// First `count` entries of a uniformly random permutation of `pool`.
inline std::vector<std::size_t> draw_without_replacement(std::vector<std::size_t> pool, std::size_t count,
                                                         Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}
}  // namespace detail

/// Support sets (sorted) for each planted group: a shared core of
/// round((1-f) s) indices plus s - |core| private indices per group, disjoint
/// across groups, where s = round(sparsity D).
inline std::vector<std::vector<std::size_t>> plant_supports(const SimConfig& cfg) {
  cfg.validate();
  const std::size_t s = round_count(cfg.sparsity * static_cast<double>(cfg.dim));
  const std::size_t core = round_count((1.0 - cfg.overlap) * static_cast<double>(s));
  const std::size_t priv = s - core;
  if (s == 0) throw std::invalid_argument("plant_supports: sparsity * D rounds to zero nonzeros");
  if (core + cfg.groups * priv > cfg.dim) {
    throw std::invalid_argument("plant_supports: " + std::to_string(cfg.groups) + " groups with " +
                                std::to_string(priv) + " private indices each do not fit in D = " +
                                std::to_string(cfg.dim));
  }
  Rng rng(derive_seed(cfg.seed, Stream::supports));
  std::vector<std::size_t> all(cfg.dim);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto picked = detail::draw_without_replacement(std::move(all), core + cfg.groups * priv, rng);

  std::vector<std::vector<std::size_t>> supports(cfg.groups);
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    auto& sup = supports[g];
    sup.assign(picked.begin(), picked.begin() + static_cast<std::ptrdiff_t>(core));
    const auto first = picked.begin() + static_cast<std::ptrdiff_t>(core + g * priv);
    sup.insert(sup.end(), first, first + static_cast<std::ptrdiff_t>(priv));
    std::sort(sup.begin(), sup.end());
  }
  return supports;
}

/// Tasks are labeled by group in blocks: tasks [g * T/G, (g+1) * T/G) belong to
/// group g. Each task draws its own N(0,1) values on the group support, its own
/// Fourier row mask of size round(undersampling D), and i.i.d. N(0, sigma^2)
/// noise on each of the 2N real measurement components.
inline SimData generate(const SimConfig& cfg) {
  const auto supports = plant_supports(cfg);
  const std::size_t n_rows = std::max<std::size_t>(1, round_count(cfg.undersampling * static_cast<double>(cfg.dim)));

  SimData data;
  data.true_signals.reserve(cfg.tasks);
  data.operators.reserve(cfg.tasks);
  data.measurements.reserve(cfg.tasks);
  data.group_labels.reserve(cfg.tasks);
  std::vector<std::size_t> rows(cfg.dim);
  std::iota(rows.begin(), rows.end(), std::size_t{0});

  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    const std::size_t g = t / cfg.tasks_per_group();
    Rng rng(derive_seed(cfg.seed, Stream::task, t));

    Vector z = Vector::Zero(static_cast<Eigen::Index>(cfg.dim));
    for (std::size_t d : supports[g]) z[static_cast<Eigen::Index>(d)] = standard_normal(rng);

    auto mask = detail::draw_without_replacement(rows, n_rows, rng);
    std::sort(mask.begin(), mask.end());
    auto phi = std::make_shared<const SensingOperator>(SensingOperator::partial_fourier(cfg.dim, std::move(mask), cfg.scaling));

    Vector y = phi->apply(z);
    for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += cfg.sigma * standard_normal(rng);

    data.true_signals.push_back(std::move(z));
    data.operators.push_back(std::move(phi));
    data.measurements.push_back(std::move(y));
    data.group_labels.push_back(g);
  }
  return data;
}

// ---------------------------------------------------------------------------
// File format
//
//   bytes 0..7    magic "CMTCSIM1"
//   bytes 8..15   header length H (uint64, little endian)
//   next H bytes  UTF-8 JSON header
//   remainder     column blocks, little endian, at the offsets the header lists
//
// Header fields: "version", "dim", "tasks", "operator" ("partial_fourier" or
// "dense"), "rows" (per-task apply() output length), "measurements" (per-task
// N), "scaling" (Fourier only), "config" (SimConfig, informational) and "columns": a list of
// {"name", "dtype" ("f64" | "u64"), "shape", "offset"} with offsets relative to
// the first byte after the header. Columns:
//   true_signals  f64 [T, D]
//   measurements  f64 [T, rows]
//   group_labels  u64 [T]
//   masks         u64 [T, N]         (partial_fourier)
//   matrices      f64 [T, rows, D]   (dense, row-major)
// ---------------------------------------------------------------------------

inline constexpr char sim_magic[9] = "CMTCSIM1";

namespace detail {
static_assert(std::endian::native == std::endian::little, "simulation files assume a little-endian host");

inline void write_block(std::ostream& out, const void* p, std::size_t bytes) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(bytes));
}
inline void read_block(std::istream& in, void* p, std::size_t bytes) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(bytes));
  if (!in) throw std::runtime_error("simulation file truncated");
}
}  // namespace detail

inline const char* scaling_name(FourierScaling s) {
  return s == FourierScaling::unitary ? "unitary" : "unnormalized";
}

inline FourierScaling parse_scaling(const std::string& name) {
  if (name == "unitary") return FourierScaling::unitary;
  if (name == "unnormalized") return FourierScaling::unnormalized;
  throw std::invalid_argument("unknown Fourier scaling '" + name + "' (expected unitary or unnormalized)");
}

inline nlohmann::json to_json(const SimConfig& c) {
  return {{"dim", c.dim},         {"tasks", c.tasks},         {"groups", c.groups},
          {"sparsity", c.sparsity}, {"undersampling", c.undersampling}, {"sigma", c.sigma},
          {"overlap", c.overlap}, {"seed", c.seed},           {"scaling", scaling_name(c.scaling)}};
}

inline void save_sim_data(const SimData& data, const std::filesystem::path& path, const SimConfig* cfg = nullptr) {
  const std::size_t T = data.tasks();
  if (T == 0) throw std::invalid_argument("save_sim_data: empty data set");
  const auto& op0 = *data.operators.front();
  const bool fourier = op0.is_fourier();
  const std::size_t D = op0.cols(), R = op0.rows(), N = op0.measurements();
  for (const auto& op : data.operators) {
    if (op->is_fourier() != fourier || op->cols() != D || op->rows() != R) {
      throw std::invalid_argument("save_sim_data: all operators must share kind and shape");
    }
  }

  nlohmann::json header{{"version", 1},          {"dim", D},      {"tasks", T},
                        {"operator", fourier ? "partial_fourier" : "dense"},
                        {"rows", R},             {"measurements", N}};
  if (fourier) header["scaling"] = scaling_name(op0.scaling());
  if (cfg) header["config"] = to_json(*cfg);
  std::size_t offset = 0;
  auto column = [&](const char* name, const char* dtype, std::vector<std::size_t> shape) {
    std::size_t count = 1;
    for (auto s : shape) count *= s;
    header["columns"].push_back({{"name", name}, {"dtype", dtype}, {"shape", shape}, {"offset", offset}});
    offset += 8 * count;
  };
  column("true_signals", "f64", {T, D});
  column("measurements", "f64", {T, R});
  column("group_labels", "u64", {T});
  if (fourier) column("masks", "u64", {T, N});
  else column("matrices", "f64", {T, R, D});

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string text = header.dump();
  const std::uint64_t len = text.size();
  detail::write_block(out, sim_magic, 8);
  detail::write_block(out, &len, 8);
  detail::write_block(out, text.data(), text.size());
  for (const auto& z : data.true_signals) detail::write_block(out, z.data(), 8 * D);
  for (const auto& y : data.measurements) detail::write_block(out, y.data(), 8 * R);
  for (std::size_t g : data.group_labels) {
    const std::uint64_t v = g;
    detail::write_block(out, &v, 8);
  }
  for (const auto& op : data.operators) {
    if (fourier) {
      for (std::size_t m : op->mask()) {
        const std::uint64_t v = m;
        detail::write_block(out, &v, 8);
      }
    } else {
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = op->matrix();
      detail::write_block(out, rm.data(), 8 * R * D);
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline SimData load_sim_data(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  detail::read_block(in, magic, 8);
  if (std::memcmp(magic, sim_magic, 8) != 0) throw std::runtime_error(path.string() + ": not a simulation file");
  std::uint64_t len = 0;
  detail::read_block(in, &len, 8);
  std::string text(len, '\0');
  detail::read_block(in, text.data(), len);
  const auto header = nlohmann::json::parse(text);
  if (header.at("version").get<int>() != 1) throw std::runtime_error("unsupported simulation file version");

  const auto D = header.at("dim").get<std::size_t>();
  const auto T = header.at("tasks").get<std::size_t>();
  const auto R = header.at("rows").get<std::size_t>();
  const auto N = header.at("measurements").get<std::size_t>();
  const bool fourier = header.at("operator").get<std::string>() == "partial_fourier";
  const FourierScaling scaling = parse_scaling(header.value("scaling", std::string("unitary")));
  const auto base = in.tellg();
  auto seek = [&](const char* name) {
    for (const auto& col : header.at("columns")) {
      if (col.at("name") == name) {
        in.seekg(base + static_cast<std::streamoff>(col.at("offset").get<std::size_t>()));
        return;
      }
    }
    throw std::runtime_error(std::string("simulation file lacks column ") + name);
  };

  SimData data;
  seek("true_signals");
  for (std::size_t t = 0; t < T; ++t) {
    Vector z(static_cast<Eigen::Index>(D));
    detail::read_block(in, z.data(), 8 * D);
    data.true_signals.push_back(std::move(z));
  }
  seek("measurements");
  for (std::size_t t = 0; t < T; ++t) {
    Vector y(static_cast<Eigen::Index>(R));
    detail::read_block(in, y.data(), 8 * R);
    data.measurements.push_back(std::move(y));
  }
  seek("group_labels");
  for (std::size_t t = 0; t < T; ++t) {
    std::uint64_t g = 0;
    detail::read_block(in, &g, 8);
    data.group_labels.push_back(static_cast<std::size_t>(g));
  }
  seek(fourier ? "masks" : "matrices");
  for (std::size_t t = 0; t < T; ++t) {
    if (fourier) {
      std::vector<std::uint64_t> raw(N);
      detail::read_block(in, raw.data(), 8 * N);
      data.operators.push_back(std::make_shared<const SensingOperator>(
          SensingOperator::partial_fourier(D, std::vector<std::size_t>(raw.begin(), raw.end()), scaling)));
    } else {
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(
          static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(D));
      detail::read_block(in, rm.data(), 8 * R * D);
      data.operators.push_back(std::make_shared<const SensingOperator>(SensingOperator::dense(Matrix(rm))));
    }
  }
  return data;
}

}  // namespace cmtcs
