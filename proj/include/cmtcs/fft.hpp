#pragma once

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <vector>

namespace cmtcs {

namespace detail {
// FFTW planning and plan destruction are not thread-safe; execution is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Unnormalized real DFT of one fixed length n: forward maps n reals to the
/// n/2+1 non-redundant coefficients, backward maps a Hermitian half-spectrum
/// back to n reals. Plans are created with FFTW_UNALIGNED so any buffer
/// alignment takes the same code path, which keeps results bitwise reproducible.
class FftPlan {
 public:
  explicit FftPlan(std::size_t n) : n_(n) {
    if (n == 0) throw std::invalid_argument("FftPlan: length must be positive");
    std::lock_guard lock(detail::fftw_planner_mutex());
    auto* real = fftw_alloc_real(n);
    auto* spec = fftw_alloc_complex(n / 2 + 1);
    const int len = static_cast<int>(n);
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    forward_ = fftw_plan_dft_r2c_1d(len, real, spec, flags);
    backward_ = fftw_plan_dft_c2r_1d(len, spec, real, flags);
    fftw_free(real);
    fftw_free(spec);
    if (!forward_ || !backward_) throw std::runtime_error("FftPlan: FFTW planning failed");
  }

  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;

  ~FftPlan() {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(backward_);
  }

  std::size_t size() const noexcept { return n_; }
  std::size_t spectrum_size() const noexcept { return n_ / 2 + 1; }

  /// out[k] = sum_j in[j] exp(-2 pi i jk / n), k = 0..n/2
  void forward(const double* in, std::complex<double>* out) const {
    fftw_execute_dft_r2c(forward_, const_cast<double*>(in), reinterpret_cast<fftw_complex*>(out));
  }

  /// out[j] = sum_k h[k] exp(+2 pi i jk / n) over the Hermitian extension of
  /// h[0..n/2]. Overwrites `in`.
  void backward(std::complex<double>* in, double* out) const {
    fftw_execute_dft_c2r(backward_, reinterpret_cast<fftw_complex*>(in), out);
  }

 private:
  std::size_t n_;
  fftw_plan forward_{};
  fftw_plan backward_{};
};

/// Process-wide plan cache keyed by length.
inline std::shared_ptr<const FftPlan> fft_plan(std::size_t n) {
  // The planner mutex must outlive the cache: cached plans lock it on destruction.
  detail::fftw_planner_mutex();
  static std::mutex cache_mutex;
  static std::map<std::size_t, std::shared_ptr<const FftPlan>> cache;
  std::lock_guard lock(cache_mutex);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  auto plan = std::make_shared<const FftPlan>(n);
  cache.emplace(n, plan);
  return plan;
}

}  // namespace cmtcs
