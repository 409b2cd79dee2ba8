#pragma once

#include "cmtcs/fft.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <concepts>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace cmtcs {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
inline void require_length(const char* where, Eigen::Index got, std::size_t want) {
  if (static_cast<std::size_t>(got) != want) {
    throw DimensionError(std::string(where) + ": expected length " + std::to_string(want) +
                         ", got " + std::to_string(got));
  }
}

/// Per-thread half-spectrum buffer for the Fourier operator.
inline std::vector<std::complex<double>>& spectrum_scratch(std::size_t size) {
  thread_local std::vector<std::complex<double>> buf;
  buf.resize(size);
  return buf;
}
}  // namespace detail

/// Normalization of the partial-Fourier rows: unitary scales by 1/sqrt(D),
/// unnormalized uses the raw exp(-2 pi i jk / D) kernel.
enum class FourierScaling { unitary, unnormalized };

/// Anything CG can iterate against: a square map v -> Av on R^dim.
template <class Op>
concept LinearOperator = requires(const Op& op, const Vector& v) {
  { op.dim() } -> std::convertible_to<std::size_t>;
  { op.apply(v) } -> std::convertible_to<Vector>;
};

/// Implicit sensing map Phi: R^D -> R^rows.
///
/// Two kinds are supported:
///  - dense: an explicit N x D matrix;
///  - partial Fourier: N selected rows of the unitary DFT (scale 1/sqrt(D)),
///    embedded as a real operator R^D -> R^{2N} whose output stacks the real
///    parts of the selected coefficients followed by their imaginary parts.
///
/// With the real embedding, adjoint() is the exact real transpose of apply(),
/// so Phi^T Phi is real symmetric PSD. Instances are immutable and may be
/// shared across threads.
class SensingOperator {
 public:
  static SensingOperator dense(Matrix m) {
    if (m.rows() == 0 || m.cols() == 0) throw DimensionError("SensingOperator: empty matrix");
    if (m.rows() > m.cols()) {
      throw DimensionError("SensingOperator: more measurements than signal dimensions");
    }
    return SensingOperator(Dense{std::move(m)});
  }

  static SensingOperator partial_fourier(std::size_t dim, std::vector<std::size_t> mask,
                                         FourierScaling scaling = FourierScaling::unitary) {
    if (dim == 0) throw DimensionError("SensingOperator: dimension must be positive");
    if (mask.empty() || mask.size() > dim) {
      throw DimensionError("SensingOperator: mask must select between 1 and D rows");
    }
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] >= dim) throw DimensionError("SensingOperator: mask index out of range");
      if (i > 0 && mask[i] <= mask[i - 1]) {
        throw std::invalid_argument("SensingOperator: mask must be strictly increasing");
      }
    }
    const double scale =
        scaling == FourierScaling::unitary ? 1.0 / std::sqrt(static_cast<double>(dim)) : 1.0;
    return SensingOperator(Fourier{dim, std::move(mask), scale, scaling, fft_plan(dim)});
  }

  /// Length of apply()'s output (2N for partial Fourier).
  std::size_t rows() const {
    if (auto* d = std::get_if<Dense>(&kind_)) return static_cast<std::size_t>(d->m.rows());
    return 2 * std::get<Fourier>(kind_).mask.size();
  }

  std::size_t cols() const {
    if (auto* d = std::get_if<Dense>(&kind_)) return static_cast<std::size_t>(d->m.cols());
    return std::get<Fourier>(kind_).dim;
  }

  /// Number of measurements before real embedding (selected Fourier rows).
  std::size_t measurements() const {
    if (auto* d = std::get_if<Dense>(&kind_)) return static_cast<std::size_t>(d->m.rows());
    return std::get<Fourier>(kind_).mask.size();
  }

  bool is_fourier() const noexcept { return std::holds_alternative<Fourier>(kind_); }

  const std::vector<std::size_t>& mask() const { return std::get<Fourier>(kind_).mask; }
  FourierScaling scaling() const { return std::get<Fourier>(kind_).scaling; }
  const Matrix& matrix() const { return std::get<Dense>(kind_).m; }

  Vector apply(const Vector& v) const {
    detail::require_length("SensingOperator::apply", v.size(), cols());
    if (auto* d = std::get_if<Dense>(&kind_)) return d->m * v;

    const auto& f = std::get<Fourier>(kind_);
    auto& spec = detail::spectrum_scratch(f.plan->spectrum_size());
    f.plan->forward(v.data(), spec.data());
    const auto n = static_cast<Eigen::Index>(f.mask.size());
    Vector result(2 * n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const std::size_t k = f.mask[static_cast<std::size_t>(i)];
      // Coefficients above n/2 are conjugates of the stored half-spectrum.
      const auto c = (k < spec.size() ? spec[k] : std::conj(spec[f.dim - k])) * f.scale;
      result[i] = c.real();
      result[n + i] = c.imag();
    }
    return result;
  }

  Vector adjoint(const Vector& w) const {
    detail::require_length("SensingOperator::adjoint", w.size(), rows());
    if (auto* d = std::get_if<Dense>(&kind_)) return d->m.transpose() * w;

    // Re(F^H Omega^T (a + ib)) for w = [a; b], evaluated by a c2r transform of
    // the Hermitian part h[k] = (c[k] + conj(c[D-k])) / 2 of the scattered c.
    const auto& f = std::get<Fourier>(kind_);
    auto& spec = detail::spectrum_scratch(f.plan->spectrum_size());
    std::fill(spec.begin(), spec.end(), std::complex<double>{});
    const auto n = static_cast<Eigen::Index>(f.mask.size());
    for (Eigen::Index i = 0; i < n; ++i) {
      const std::size_t k = f.mask[static_cast<std::size_t>(i)];
      const std::complex<double> c{0.5 * w[i], 0.5 * w[n + i]};
      if (k < spec.size()) spec[k] += c;
      const std::size_t mirror = (f.dim - k) % f.dim;
      if (mirror < spec.size()) spec[mirror] += std::conj(c);
    }
    Vector result(static_cast<Eigen::Index>(f.dim));
    f.plan->backward(spec.data(), result.data());
    result *= f.scale;
    return result;
  }

  /// Explicit rows x D matrix. Costs D applies; for the dense EM path and tests.
  Matrix to_dense() const {
    if (auto* d = std::get_if<Dense>(&kind_)) return d->m;
    const auto D = static_cast<Eigen::Index>(cols());
    Matrix m(static_cast<Eigen::Index>(rows()), D);
    for (Eigen::Index j = 0; j < D; ++j) m.col(j) = apply(Vector::Unit(D, j));
    return m;
  }

  /// Phi^T Phi as an explicit D x D matrix.
  Matrix gram() const {
    if (auto* d = std::get_if<Dense>(&kind_)) return d->m.transpose() * d->m;
    const auto D = static_cast<Eigen::Index>(cols());
    Matrix g(D, D);
    for (Eigen::Index j = 0; j < D; ++j) g.col(j) = adjoint(apply(Vector::Unit(D, j)));
    // Symmetrize away FFT roundoff so Cholesky sees an exactly symmetric matrix.
    return 0.5 * (g + g.transpose());
  }

 private:
  struct Dense {
    Matrix m;
  };
  struct Fourier {
    std::size_t dim;
    std::vector<std::size_t> mask;
    double scale;
    FourierScaling scaling;
    std::shared_ptr<const FftPlan> plan;
  };

  explicit SensingOperator(std::variant<Dense, Fourier> kind) : kind_(std::move(kind)) {}

  std::variant<Dense, Fourier> kind_;
};

/// A = beta Phi^T Phi + diag(alpha): the posterior precision, applied
/// matrix-free. Holds a non-owning reference to the sensing operator, which
/// must outlive it.
class NormalOperator {
 public:
  NormalOperator(double beta, const SensingOperator& phi, Vector alpha)
      : beta_(beta), phi_(&phi), alpha_(std::move(alpha)) {
    if (!(beta_ > 0.0) || !std::isfinite(beta_)) {
      throw std::invalid_argument("NormalOperator: beta must be positive and finite");
    }
    detail::require_length("NormalOperator: alpha", alpha_.size(), phi.cols());
    for (Eigen::Index d = 0; d < alpha_.size(); ++d) {
      if (!(alpha_[d] > 0.0) || !std::isfinite(alpha_[d])) {
        throw std::invalid_argument("NormalOperator: alpha entries must be positive and finite (index " +
                                    std::to_string(d) + ")");
      }
    }
  }

  std::size_t dim() const { return phi_->cols(); }
  double beta() const noexcept { return beta_; }
  const Vector& alpha() const noexcept { return alpha_; }
  const SensingOperator& sensing() const noexcept { return *phi_; }

  Vector apply(const Vector& v) const {
    detail::require_length("NormalOperator::apply", v.size(), dim());
    Vector out = phi_->adjoint(phi_->apply(v));
    out *= beta_;
    out += alpha_.cwiseProduct(v);
    return out;
  }

  Matrix to_dense() const {
    Matrix a = beta_ * phi_->gram();
    a.diagonal() += alpha_;
    return a;
  }

 private:
  double beta_;
  const SensingOperator* phi_;
  Vector alpha_;
};

/// Explicit symmetric matrix viewed as a LinearOperator.
class MatrixOperator {
 public:
  explicit MatrixOperator(Matrix a) : a_(std::move(a)) {
    if (a_.rows() != a_.cols()) throw DimensionError("MatrixOperator: matrix must be square");
  }
  std::size_t dim() const { return static_cast<std::size_t>(a_.rows()); }
  Vector apply(const Vector& v) const {
    detail::require_length("MatrixOperator::apply", v.size(), dim());
    return a_ * v;
  }
  const Matrix& matrix() const noexcept { return a_; }

 private:
  Matrix a_;
};

static_assert(LinearOperator<NormalOperator>);
static_assert(LinearOperator<MatrixOperator>);

}  // namespace cmtcs
