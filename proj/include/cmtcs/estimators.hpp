#pragma once

#include "cmtcs/krylov.hpp"
#include "cmtcs/rng.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmtcs {

/// K Rademacher vectors. Probe k is drawn from the stream derive_seed(seed, k).
struct ProbeSet {
  std::vector<Vector> probes;
  std::uint64_t seed = 0;

  std::size_t count() const noexcept { return probes.size(); }
};

inline ProbeSet sample_probes(std::size_t dim, std::size_t count, std::uint64_t seed) {
  if (dim == 0 || count == 0) throw std::invalid_argument("sample_probes: dim and count must be >= 1");
  ProbeSet set;
  set.seed = seed;
  set.probes.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    Rng rng(derive_seed(seed, k));
    Vector p(static_cast<Eigen::Index>(dim));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < dim; ++i) {
      if (i % 64 == 0) bits = rng();
      p[static_cast<Eigen::Index>(i)] = (bits & 1U) ? 1.0 : -1.0;
      bits >>= 1;
    }
    set.probes.push_back(std::move(p));
  }
  return set;
}

/// Monte Carlo estimate of diag(A^{-1}); entries may be negative.
struct DiagonalEstimate {
  Vector s;
};

/// s = (1/K) sum_k p_k .* x_k where x_k solves A x_k = p_k.
inline DiagonalEstimate estimate_diagonal(const ProbeSet& probes, std::span<const Vector> solutions) {
  if (probes.count() == 0) throw std::invalid_argument("estimate_diagonal: empty probe set");
  if (solutions.size() != probes.count()) {
    throw DimensionError("estimate_diagonal: " + std::to_string(solutions.size()) + " solutions for " +
                         std::to_string(probes.count()) + " probes");
  }
  const auto dim = probes.probes.front().size();
  DiagonalEstimate out{Vector::Zero(dim)};
  for (std::size_t k = 0; k < probes.count(); ++k) {
    detail::require_length("estimate_diagonal", solutions[k].size(), static_cast<std::size_t>(dim));
    out.s += probes.probes[k].cwiseProduct(solutions[k]);
  }
  out.s /= static_cast<double>(probes.count());
  return out;
}

/// Lanczos quadrature for p^T log(A) p given the spectrum of the CG tridiagonal
/// and ||p||^2 (= D for a Rademacher probe):
///   ||p||^2 * sum_u S(u,1)^2 log(lambda_u).
inline double quadrature_logdet_term(const TridiagonalSpectrum& spec, std::size_t squared_norm) {
  if (spec.eigenvalues.size() != spec.first_components.size()) {
    throw std::invalid_argument("quadrature_logdet_term: malformed spectrum");
  }
  double acc = 0.0;
  for (std::size_t u = 0; u < spec.eigenvalues.size(); ++u) {
    const double lambda = spec.eigenvalues[u];
    if (!(lambda > 0.0)) {
      throw std::domain_error("quadrature_logdet_term: non-positive Ritz value " + std::to_string(lambda) +
                              " (operator lost positive definiteness)");
    }
    const double w = spec.first_components[u];
    acc += w * w * std::log(lambda);
  }
  return static_cast<double>(squared_norm) * acc;
}

struct LogDetEstimate {
  double nu_bar = 0.0;
};

/// Hutchinson estimate of log det(A^{-1}) = -tr(log A) from per-probe
/// quadrature terms.
inline LogDetEstimate estimate_logdet(std::span<const double> terms) {
  if (terms.empty()) throw std::invalid_argument("estimate_logdet: need at least one term");
  double acc = 0.0;
  for (double v : terms) acc += v;
  return {-acc / static_cast<double>(terms.size())};
}

/// Mean, variance diagonal and log-determinant estimates for A^{-1}, all
/// from one batch of K+1 CG solves.
struct PosteriorEstimate {
  Vector mean;
  DiagonalEstimate variance;
  LogDetEstimate logdet;
};

/// Solves A mu = rhs and A x_k = p_k by CG, then forms the diagonal and
/// log-det estimators from the probe solutions and their transcripts.
template <LinearOperator Op>
PosteriorEstimate solve_posterior_systems(const Op& a, const Vector& rhs, const ProbeSet& probes,
                                          const CgConfig& cg) {
  PosteriorEstimate out;
  out.mean = conjugate_gradient(a, rhs, cg).solution;

  std::vector<Vector> solutions;
  solutions.reserve(probes.count());
  std::vector<double> terms;
  terms.reserve(probes.count());
  for (const Vector& p : probes.probes) {
    CgTranscript t = conjugate_gradient(a, p, cg);
    terms.push_back(quadrature_logdet_term(tridiag_eigen(assemble_tridiagonal(t)),
                                           static_cast<std::size_t>(p.size())));
    solutions.push_back(std::move(t.solution));
  }
  out.variance = estimate_diagonal(probes, solutions);
  out.logdet = estimate_logdet(terms);
  return out;
}

}  // namespace cmtcs
