#pragma once

#include "cmtcs/estimators.hpp"
#include "cmtcs/metrics.hpp"
#include "cmtcs/operators.hpp"
#include "cmtcs/parallel.hpp"
#include "cmtcs/rng.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmtcs {

/// One compressive sensing problem: measurements y = Phi z + noise.
struct Task {
  Vector y;
  std::shared_ptr<const SensingOperator> phi;
};

struct ModelConfig {
  std::size_t clusters = 2;
  double beta = 400.0;          ///< noise precision 1/sigma^2, fixed
  std::vector<double> priors;   ///< cluster weights; empty means uniform
  std::size_t iterations = 50;
  std::size_t probes = 15;      ///< K
  std::size_t cg_steps = 50;    ///< U
  double cg_tol = 0.0;
  double alpha_max = 1e12;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  std::size_t dense_limit = 5000;  ///< largest D the exact path will densify
  double alpha_rel_tol = 0.0;      ///< early stop on max relative alpha change; 0 disables

  std::vector<double> resolved_priors() const {
    if (priors.empty()) return std::vector<double>(clusters, 1.0 / static_cast<double>(clusters));
    return priors;
  }

  void validate() const {
    if (clusters < 1) throw std::invalid_argument("ModelConfig: clusters must be >= 1");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("ModelConfig: beta must be positive");
    if (iterations < 1) throw std::invalid_argument("ModelConfig: iterations must be >= 1");
    if (probes < 1) throw std::invalid_argument("ModelConfig: probes must be >= 1");
    if (cg_steps < 1) throw std::invalid_argument("ModelConfig: cg_steps must be >= 1");
    if (!(alpha_max > 0.0)) throw std::invalid_argument("ModelConfig: alpha_max must be positive");
    if (!priors.empty()) {
      if (priors.size() != clusters) throw std::invalid_argument("ModelConfig: need one prior per cluster");
      double sum = 0.0;
      for (double p : priors) {
        if (!(p >= 0.0)) throw std::invalid_argument("ModelConfig: priors must be nonnegative");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("ModelConfig: priors must sum to 1");
    }
  }
};

struct ClusterParams {
  std::vector<Vector> alpha;  ///< one D-vector per cluster

  std::size_t clusters() const noexcept { return alpha.size(); }
  std::size_t dim() const { return alpha.empty() ? 0 : static_cast<std::size_t>(alpha.front().size()); }
};

/// Per (task, cluster) posterior quantities, stored task-major.
struct PosteriorSummary {
  std::size_t tasks = 0;
  std::size_t clusters = 0;
  std::vector<Vector> mu;
  std::vector<Vector> var_diag;
  std::vector<double> logdet;
  std::vector<double> ell;
  std::vector<double> resp;

  PosteriorSummary() = default;
  PosteriorSummary(std::size_t t, std::size_t c)
      : tasks(t), clusters(c), mu(t * c), var_diag(t * c), logdet(t * c), ell(t * c), resp(t * c) {}

  std::size_t index(std::size_t t, std::size_t c) const noexcept { return t * clusters + c; }
  double q(std::size_t t, std::size_t c) const { return resp[index(t, c)]; }
};

struct IterationRecord {
  double seconds = 0.0;
  std::optional<double> normalized_error;
};

struct FitResult {
  ClusterParams params;
  std::vector<std::size_t> assignments;
  std::vector<Vector> reconstructions;
  std::vector<IterationRecord> history;
  PosteriorSummary posterior;  ///< from the final E-step
};

class DenseLimitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::size_t validate_tasks(std::span<const Task> tasks) {
  if (tasks.empty()) throw std::invalid_argument("model: no tasks");
  const std::size_t dim = tasks.front().phi ? tasks.front().phi->cols() : 0;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (!tasks[t].phi) throw std::invalid_argument("model: task " + std::to_string(t) + " has no operator");
    if (tasks[t].phi->cols() != dim) throw DimensionError("model: tasks disagree on signal dimension");
    require_length("model: measurements", tasks[t].y.size(), tasks[t].phi->rows());
  }
  return dim;
}

inline std::runtime_error annotate(std::size_t t, std::size_t c, const std::exception& e) {
  return std::runtime_error("task " + std::to_string(t) + ", cluster " + std::to_string(c) + ": " + e.what());
}

/// l = log det Sigma + sum_d log alpha_d + beta (Phi^T y)^T mu
inline double evidence_term(double logdet, const Vector& alpha, double beta, const Vector& phi_t_y,
                            const Vector& mu) {
  return logdet + alpha.array().log().sum() + beta * phi_t_y.dot(mu);
}

}  // namespace detail

/// alpha drawn i.i.d. from Uniform(0, 1), one independent stream per cluster.
inline ClusterParams init_params(std::size_t clusters, std::size_t dim, std::uint64_t seed) {
  ClusterParams p;
  p.alpha.reserve(clusters);
  for (std::size_t c = 0; c < clusters; ++c) {
    Rng rng(derive_seed(seed, Stream::init, c));
    Vector a(static_cast<Eigen::Index>(dim));
    for (Eigen::Index d = 0; d < a.size(); ++d) a[d] = uniform_open(rng);
    p.alpha.push_back(std::move(a));
  }
  return p;
}

/// softmax(l_c / 2 + log pi_c), with max subtraction.
inline std::vector<double> responsibilities(std::span<const double> ell, std::span<const double> priors) {
  if (ell.size() != priors.size() || ell.empty()) {
    throw DimensionError("responsibilities: need one prior per cluster");
  }
  std::vector<double> z(ell.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < ell.size(); ++c) {
    if (std::isnan(ell[c]) || ell[c] == std::numeric_limits<double>::infinity()) {
      throw std::domain_error("responsibilities: non-finite evidence term for cluster " + std::to_string(c));
    }
    z[c] = 0.5 * ell[c] + std::log(priors[c]);
    top = std::max(top, z[c]);
  }
  if (top == -std::numeric_limits<double>::infinity()) {
    throw std::domain_error("responsibilities: every cluster has zero weight");
  }
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - top);
    sum += v;
  }
  for (double& v : z) v /= sum;
  return z;
}

/// Fills resp from ell for every task.
inline void assign_responsibilities(PosteriorSummary& post, std::span<const double> priors) {
  for (std::size_t t = 0; t < post.tasks; ++t) {
    const auto q = responsibilities(std::span(post.ell).subspan(t * post.clusters, post.clusters), priors);
    std::copy(q.begin(), q.end(), post.resp.begin() + static_cast<std::ptrdiff_t>(t * post.clusters));
  }
}

/// Floor applied to variance estimates before the M-step divide.
inline constexpr double variance_floor = 1e-12;
/// Clusters with total responsibility below this keep their previous alpha.
inline constexpr double empty_cluster_weight = 1e-10;

/// alpha_d = sum_t q / sum_t q ((mu_d)^2 + Sigma_dd), clipped to (0, alpha_max].
/// Sums over tasks run in task order.
inline ClusterParams m_step_update(const PosteriorSummary& post, const ClusterParams& previous,
                                   const ModelConfig& cfg) {
  if (previous.clusters() != post.clusters) throw DimensionError("m_step_update: cluster count mismatch");
  const auto dim = static_cast<Eigen::Index>(previous.dim());
  // Lower clip mirrors alpha_max; only reachable if a posterior mean overflows.
  const double alpha_min = 1.0 / cfg.alpha_max;
  ClusterParams next;
  next.alpha.resize(post.clusters);
  for (std::size_t c = 0; c < post.clusters; ++c) {
    double weight = 0.0;
    Vector denom = Vector::Zero(dim);
    for (std::size_t t = 0; t < post.tasks; ++t) {
      const std::size_t i = post.index(t, c);
      const double q = post.resp[i];
      weight += q;
      denom += q * (post.mu[i].array().square() + post.var_diag[i].array().max(variance_floor)).matrix();
    }
    if (weight < empty_cluster_weight) {
      next.alpha[c] = previous.alpha[c];
      continue;
    }
    Vector a(dim);
    for (Eigen::Index d = 0; d < dim; ++d) a[d] = std::clamp(weight / denom[d], alpha_min, cfg.alpha_max);
    next.alpha[c] = std::move(a);
  }
  return next;
}

/// Densified per-task quantities for the exact path: Phi^T Phi and Phi^T y.
class DenseTaskCache {
 public:
  DenseTaskCache(std::span<const Task> tasks, const ModelConfig& cfg) {
    const std::size_t dim = detail::validate_tasks(tasks);
    if (dim > cfg.dense_limit) {
      throw DenseLimitError("exact EM needs dense " + std::to_string(dim) + "x" + std::to_string(dim) +
                            " covariances; D exceeds dense_limit " + std::to_string(cfg.dense_limit) +
                            " (out of memory regime)");
    }
    grams_.resize(tasks.size());
    rhs_.resize(tasks.size());
    parallel_for(tasks.size(), cfg.workers, [&](std::size_t t) {
      grams_[t] = tasks[t].phi->gram();
      rhs_[t] = tasks[t].phi->adjoint(tasks[t].y);
    });
  }

  const Matrix& gram(std::size_t t) const { return grams_[t]; }
  const Vector& phi_t_y(std::size_t t) const { return rhs_[t]; }
  std::size_t tasks() const noexcept { return grams_.size(); }

 private:
  std::vector<Matrix> grams_;
  std::vector<Vector> rhs_;
};

/// Exact E-step: Cholesky of A = beta G + diag(alpha) per (task, cluster);
/// diag(Sigma) from the columns of L^{-1}; log det Sigma = -2 sum log L_ii.
inline PosteriorSummary exact_e_step(const DenseTaskCache& cache, const ClusterParams& params,
                                     const ModelConfig& cfg) {
  const std::size_t T = cache.tasks();
  const std::size_t C = params.clusters();
  PosteriorSummary post(T, C);
  parallel_for(T * C, cfg.workers, [&](std::size_t i) {
    const std::size_t t = i / C;
    const std::size_t c = i % C;
    const Vector& alpha = params.alpha[c];
    Matrix a = cfg.beta * cache.gram(t);
    a.diagonal() += alpha;
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error("task " + std::to_string(t) + ", cluster " + std::to_string(c) +
                               ": Cholesky factorization failed (posterior precision not positive definite)");
    }
    const auto n = a.rows();
    Matrix l_inv = Matrix::Identity(n, n);
    llt.matrixL().solveInPlace(l_inv);
    post.var_diag[i] = l_inv.colwise().squaredNorm().transpose();
    post.mu[i] = llt.solve(cfg.beta * cache.phi_t_y(t));
    post.logdet[i] = -2.0 * llt.matrixLLT().diagonal().array().log().sum();
    post.ell[i] = detail::evidence_term(post.logdet[i], alpha, cfg.beta, cache.phi_t_y(t), post.mu[i]);
  });
  assign_responsibilities(post, cfg.resolved_priors());
  return post;
}

inline PosteriorSummary exact_e_step(std::span<const Task> tasks, const ClusterParams& params,
                                     const ModelConfig& cfg) {
  return exact_e_step(DenseTaskCache(tasks, cfg), params, cfg);
}

/// Matrix-free E-step. For each (task, cluster): K+1 CG solves against
/// A = beta Phi^T Phi + diag(alpha) give the mean, the diagonal estimate and
/// the stochastic Lanczos log-det estimate. Probes for (iteration, t, c) come
/// from their own derived stream.
inline PosteriorSummary cofem_e_step(std::span<const Task> tasks, std::span<const Vector> phi_t_y,
                                     const ClusterParams& params, const ModelConfig& cfg,
                                     std::size_t iteration) {
  const std::size_t T = tasks.size();
  const std::size_t C = params.clusters();
  const std::size_t dim = params.dim();
  PosteriorSummary post(T, C);
  const CgConfig cg{cfg.cg_steps, cfg.cg_tol};
  parallel_for(T * C, cfg.workers, [&](std::size_t i) {
    const std::size_t t = i / C;
    const std::size_t c = i % C;
    try {
      const NormalOperator a(cfg.beta, *tasks[t].phi, params.alpha[c]);
      const ProbeSet probes = sample_probes(dim, cfg.probes, derive_seed(cfg.seed, Stream::probes, iteration, t, c));
      PosteriorEstimate est = solve_posterior_systems(a, cfg.beta * phi_t_y[t], probes, cg);
      post.mu[i] = std::move(est.mean);
      post.var_diag[i] = std::move(est.variance.s);
      post.logdet[i] = est.logdet.nu_bar;
      post.ell[i] = detail::evidence_term(post.logdet[i], params.alpha[c], cfg.beta, phi_t_y[t], post.mu[i]);
    } catch (const std::exception& e) {
      throw detail::annotate(t, c, e);
    }
  });
  assign_responsibilities(post, cfg.resolved_priors());
  return post;
}

inline PosteriorSummary cofem_e_step(std::span<const Task> tasks, const ClusterParams& params,
                                     const ModelConfig& cfg, std::size_t iteration) {
  detail::validate_tasks(tasks);
  std::vector<Vector> rhs;
  rhs.reserve(tasks.size());
  for (const Task& task : tasks) rhs.push_back(task.phi->adjoint(task.y));
  return cofem_e_step(tasks, rhs, params, cfg, iteration);
}

/// argmax_c q(t, c), ties to the lowest index.
inline std::vector<std::size_t> assign_clusters(const PosteriorSummary& post) {
  std::vector<std::size_t> a(post.tasks, 0);
  for (std::size_t t = 0; t < post.tasks; ++t) {
    for (std::size_t c = 1; c < post.clusters; ++c) {
      if (post.q(t, c) > post.q(t, a[t])) a[t] = c;
    }
  }
  return a;
}

inline std::vector<Vector> readout(const PosteriorSummary& post, std::span<const std::size_t> assignments) {
  std::vector<Vector> out;
  out.reserve(post.tasks);
  for (std::size_t t = 0; t < post.tasks; ++t) out.push_back(post.mu[post.index(t, assignments[t])]);
  return out;
}

enum class Inference { exact_em, cofem };

/// Runs cfg.iterations E/M cycles from init_params(cfg.seed). Assignments and
/// reconstructions come from the last E-step. If truth is non-empty, each
/// history entry carries the normalized error of that iteration's readout.
inline FitResult fit(std::span<const Task> tasks, const ModelConfig& cfg, Inference method,
                     std::span<const Vector> truth = {}) {
  cfg.validate();
  const std::size_t dim = detail::validate_tasks(tasks);
  if (!truth.empty() && truth.size() != tasks.size()) throw DimensionError("fit: truth/task count mismatch");

  std::optional<DenseTaskCache> cache;
  std::vector<Vector> rhs;
  if (method == Inference::exact_em) {
    cache.emplace(tasks, cfg);
  } else {
    rhs.reserve(tasks.size());
    for (const Task& task : tasks) rhs.push_back(task.phi->adjoint(task.y));
  }

  FitResult result;
  result.params = init_params(cfg.clusters, dim, cfg.seed);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    result.posterior = method == Inference::exact_em ? exact_e_step(*cache, result.params, cfg)
                                                     : cofem_e_step(tasks, rhs, result.params, cfg, it);
    ClusterParams next = m_step_update(result.posterior, result.params, cfg);
    IterationRecord rec;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    double change = 0.0;
    for (std::size_t c = 0; c < next.clusters(); ++c) {
      change = std::max(change, ((next.alpha[c] - result.params.alpha[c]).array().abs() /
                                 result.params.alpha[c].array()).maxCoeff());
    }
    result.params = std::move(next);

    if (!truth.empty()) {
      const auto a = assign_clusters(result.posterior);
      rec.normalized_error = normalized_error(truth, readout(result.posterior, a));
    }
    result.history.push_back(rec);
    if (cfg.alpha_rel_tol > 0.0 && change < cfg.alpha_rel_tol) break;
  }
  result.assignments = assign_clusters(result.posterior);
  result.reconstructions = readout(result.posterior, result.assignments);
  return result;
}

inline FitResult run_em(std::span<const Task> tasks, const ModelConfig& cfg, std::span<const Vector> truth = {}) {
  return fit(tasks, cfg, Inference::exact_em, truth);
}

inline FitResult run_cofem(std::span<const Task> tasks, const ModelConfig& cfg,
                           std::span<const Vector> truth = {}) {
  return fit(tasks, cfg, Inference::cofem, truth);
}

}  // namespace cmtcs
