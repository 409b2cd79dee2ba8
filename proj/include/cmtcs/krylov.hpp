#pragma once

#include "cmtcs/operators.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmtcs {

struct CgConfig {
  std::size_t max_steps = 50;
  /// Stop once ||b - Ax|| / ||b|| <= rel_tol. Zero runs exactly max_steps
  /// (unless the residual vanishes exactly).
  double rel_tol = 0.0;
};

/// CG output plus the step-size sequences that define the implicit Lanczos
/// tridiagonal matrix. gammas[u] and xis[u] are recorded for every step taken,
/// including the last xi, which no further search direction uses.
struct CgTranscript {
  Vector solution;
  std::vector<double> gammas;
  std::vector<double> xis;
  std::size_t steps_taken = 0;
  double final_rel_residual = 0.0;
};

/// d^T A d <= 0 during CG: A is not positive definite, or arithmetic failed.
class CgBreakdown : public std::runtime_error {
 public:
  CgBreakdown(std::size_t step, double curvature)
      : std::runtime_error("conjugate gradient breakdown at step " + std::to_string(step) +
                           " (d^T A d = " + std::to_string(curvature) + ")"),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Unpreconditioned CG from the zero initial iterate, so the first residual is
/// b itself. A zero right-hand side returns x = 0 and an empty transcript.
template <LinearOperator Op>
CgTranscript conjugate_gradient(const Op& a, const Vector& b, const CgConfig& cfg) {
  if (cfg.max_steps < 1) throw std::invalid_argument("conjugate_gradient: max_steps must be >= 1");
  if (cfg.rel_tol < 0.0) throw std::invalid_argument("conjugate_gradient: rel_tol must be >= 0");
  detail::require_length("conjugate_gradient", b.size(), a.dim());
  if (!b.allFinite()) throw std::invalid_argument("conjugate_gradient: right-hand side is not finite");

  CgTranscript t;
  t.solution = Vector::Zero(b.size());
  const double b_norm = b.norm();
  if (b_norm == 0.0) return t;

  t.gammas.reserve(cfg.max_steps);
  t.xis.reserve(cfg.max_steps);

  Vector r = b;
  Vector d = r;
  double rr = r.squaredNorm();
  for (std::size_t u = 1; u <= cfg.max_steps; ++u) {
    const Vector ad = a.apply(d);
    const double curvature = d.dot(ad);
    if (!(curvature > 0.0)) throw CgBreakdown(u, curvature);
    const double gamma = rr / curvature;
    t.solution += gamma * d;
    r -= gamma * ad;
    const double rr_next = r.squaredNorm();
    const double xi = rr_next / rr;
    t.gammas.push_back(gamma);
    t.xis.push_back(xi);
    t.steps_taken = u;
    rr = rr_next;
    t.final_rel_residual = std::sqrt(rr) / b_norm;
    if (rr == 0.0 || t.final_rel_residual <= cfg.rel_tol) break;
    d = r + xi * d;
  }
  return t;
}

/// Symmetric tridiagonal matrix: n diagonal entries, n-1 off-diagonal entries.
struct SymmetricTridiagonal {
  std::vector<double> diagonal;
  std::vector<double> off_diagonal;

  std::size_t size() const noexcept { return diagonal.size(); }

  Matrix to_dense() const {
    const auto n = static_cast<Eigen::Index>(diagonal.size());
    Matrix m = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) m(i, i) = diagonal[static_cast<std::size_t>(i)];
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
      m(i + 1, i) = m(i, i + 1) = off_diagonal[static_cast<std::size_t>(i)];
    }
    return m;
  }
};

/// Lanczos matrix implied by a CG run:
///   T(1,1) = 1/g1,  T(u,u) = 1/g_u + x_{u-1}/g_{u-1},  T(u,u-1) = sqrt(x_{u-1})/g_{u-1}.
inline SymmetricTridiagonal assemble_tridiagonal(const CgTranscript& t) {
  const std::size_t n = t.steps_taken;
  if (n == 0) throw std::invalid_argument("assemble_tridiagonal: empty transcript");
  if (t.gammas.size() < n || t.xis.size() < n) {
    throw std::invalid_argument("assemble_tridiagonal: transcript shorter than steps_taken");
  }
  SymmetricTridiagonal m;
  m.diagonal.resize(n);
  m.off_diagonal.resize(n - 1);
  for (std::size_t u = 0; u < n; ++u) {
    if (!(t.gammas[u] > 0.0)) {
      throw std::invalid_argument("assemble_tridiagonal: non-positive step size at step " +
                                  std::to_string(u + 1));
    }
    if (t.xis[u] < 0.0) throw std::invalid_argument("assemble_tridiagonal: negative xi");
  }
  m.diagonal[0] = 1.0 / t.gammas[0];
  for (std::size_t u = 1; u < n; ++u) {
    m.diagonal[u] = 1.0 / t.gammas[u] + t.xis[u - 1] / t.gammas[u - 1];
    m.off_diagonal[u - 1] = std::sqrt(t.xis[u - 1]) / t.gammas[u - 1];
  }
  return m;
}

/// Eigenvalues in ascending order, each paired with the first component of its
/// unit eigenvector.
struct TridiagonalSpectrum {
  std::vector<double> eigenvalues;
  std::vector<double> first_components;
};

class EigenConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Implicit-shift QL iteration (EISPACK tql2 lineage) on a symmetric
/// tridiagonal matrix, accumulating the full eigenvector matrix.
inline TridiagonalSpectrum tridiag_eigen(const SymmetricTridiagonal& tri, int max_sweeps = 60) {
  const std::size_t n = tri.size();
  if (n == 0) return {};
  if (tri.off_diagonal.size() + 1 != n) {
    throw std::invalid_argument("tridiag_eigen: off-diagonal must have n-1 entries");
  }
  for (double v : tri.diagonal) {
    if (!std::isfinite(v)) throw std::invalid_argument("tridiag_eigen: non-finite entry");
  }
  for (double v : tri.off_diagonal) {
    if (!std::isfinite(v)) throw std::invalid_argument("tridiag_eigen: non-finite entry");
  }

  std::vector<double> d = tri.diagonal;
  std::vector<double> e(n, 0.0);
  std::copy(tri.off_diagonal.begin(), tri.off_diagonal.end(), e.begin());
  Matrix z = Matrix::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));

  const double eps = std::numeric_limits<double>::epsilon();
  double f = 0.0;
  double tst1 = 0.0;
  for (std::size_t l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
    std::size_t m = l;
    while (m < n - 1 && std::abs(e[m]) > eps * tst1) ++m;

    if (m > l) {
      int sweeps = 0;
      do {
        if (++sweeps > max_sweeps) {
          throw EigenConvergenceError("tridiag_eigen: QL iteration did not converge for eigenvalue " +
                                      std::to_string(l));
        }
        // Wilkinson-style shift from the leading 2x2 block.
        double g = d[l];
        double p = (d[l + 1] - g) / (2.0 * e[l]);
        double r = std::hypot(p, 1.0);
        if (p < 0) r = -r;
        d[l] = e[l] / (p + r);
        d[l + 1] = e[l] * (p + r);
        const double dl1 = d[l + 1];
        double h = g - d[l];
        for (std::size_t i = l + 2; i < n; ++i) d[i] -= h;
        f += h;

        p = d[m];
        double c = 1.0, c2 = 1.0, c3 = 1.0;
        const double el1 = e[l + 1];
        double s = 0.0, s2 = 0.0;
        for (std::size_t ii = m; ii-- > l;) {
          c3 = c2;
          c2 = c;
          s2 = s;
          g = c * e[ii];
          h = c * p;
          r = std::hypot(p, e[ii]);
          e[ii + 1] = s * r;
          s = e[ii] / r;
          c = p / r;
          p = c * d[ii] - s * g;
          d[ii + 1] = h + s * (c * g + s * d[ii]);
          const auto i0 = static_cast<Eigen::Index>(ii);
          for (Eigen::Index k = 0; k < z.rows(); ++k) {
            h = z(k, i0 + 1);
            z(k, i0 + 1) = s * z(k, i0) + c * h;
            z(k, i0) = c * z(k, i0) - s * h;
          }
        }
        p = -s * s2 * c3 * el1 * e[l] / dl1;
        e[l] = s * p;
        d[l] = c * p;
      } while (std::abs(e[l]) > eps * tst1);
    }
    d[l] += f;
    e[l] = 0.0;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });

  TridiagonalSpectrum spec;
  spec.eigenvalues.reserve(n);
  spec.first_components.reserve(n);
  for (std::size_t j : order) {
    spec.eigenvalues.push_back(d[j]);
    spec.first_components.push_back(z(0, static_cast<Eigen::Index>(j)));
  }
  return spec;
}

}  // namespace cmtcs
