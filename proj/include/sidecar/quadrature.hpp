#pragma once

// Uniform-grid quadrature: composite trapezoid and Romberg extrapolation.
// Inputs are plain sample arrays, never tensors, so integrals cannot end up
// inside a gradient graph.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sidecar::quadrature {

class QuadratureError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Per-thread count of Romberg evaluations. Training runs own their thread,
/// so a run can assert how many integrals it performed.
inline std::uint64_t& evaluation_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

inline std::uint64_t evaluation_count() { return evaluation_counter(); }
inline void reset_evaluation_count() { evaluation_counter() = 0; }

/// Evaluations made while this is alive are not added to the counter.
/// Used for setup and metric evaluation outside the training objective.
class UncountedScope {
 public:
  UncountedScope() : saved_(evaluation_counter()) {}
  ~UncountedScope() { evaluation_counter() = saved_; }
  UncountedScope(const UncountedScope&) = delete;
  UncountedScope& operator=(const UncountedScope&) = delete;

 private:
  std::uint64_t saved_;
};

/// [a, b] sampled at 2^level + 1 equally spaced points.
struct QuadratureGrid {
  double a = 0.0;
  double b = 1.0;
  int level = 9;

  QuadratureGrid() = default;
  QuadratureGrid(double lo, double hi, int k) : a(lo), b(hi), level(k) {
    if (!(a < b)) throw QuadratureError("quadrature interval must satisfy a < b");
    if (k < 1 || k > 30) throw QuadratureError("quadrature level must be in [1, 30]");
  }

  std::size_t size() const { return (std::size_t{1} << level) + 1; }
  double spacing() const { return (b - a) / static_cast<double>(std::size_t{1} << level); }
  double point(std::size_t i) const {
    return i + 1 == size() ? b : a + static_cast<double>(i) * spacing();
  }
  std::vector<double> points() const {
    std::vector<double> x(size());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = point(i);
    return x;
  }
};

namespace detail {

inline void require_finite(std::span<const double> f) {
  for (double v : f) {
    if (!std::isfinite(v)) throw QuadratureError("non-finite integrand sample");
  }
}

inline int level_of(std::size_t n) {
  if (n < 3) return -1;
  const std::size_t m = n - 1;
  if ((m & (m - 1)) != 0) return -1;
  int k = 0;
  while ((std::size_t{1} << k) < m) ++k;
  return k;
}

}  // namespace detail

inline double trapezoid(std::span<const double> f, double h) {
  if (f.size() < 2) throw QuadratureError("trapezoid needs at least 2 samples");
  detail::require_finite(f);
  double s = 0.5 * (f.front() + f.back());
  for (std::size_t i = 1; i + 1 < f.size(); ++i) s += f[i];
  return s * h;
}

/// Romberg estimate R(k, k) on [a, b] from 2^k + 1 samples: row j of the
/// table starts from the trapezoid sum with stride 2^(k-j) and is refined by
/// Richardson extrapolation.
inline double romberg(std::span<const double> f, double a, double b) {
  const int k = detail::level_of(f.size());
  if (k < 1) {
    throw QuadratureError("romberg needs 2^k + 1 samples (k >= 1), got " + std::to_string(f.size()));
  }
  detail::require_finite(f);
  ++evaluation_counter();

  const double width = b - a;
  std::vector<double> prev(static_cast<std::size_t>(k) + 1);
  std::vector<double> cur(static_cast<std::size_t>(k) + 1);
  prev[0] = 0.5 * width * (f.front() + f.back());
  for (int j = 1; j <= k; ++j) {
    const std::size_t stride = std::size_t{1} << (k - j);
    const double h = width / static_cast<double>(std::size_t{1} << j);
    double mid = 0.0;
    for (std::size_t i = stride; i < f.size(); i += 2 * stride) mid += f[i];
    cur[0] = 0.5 * prev[0] + h * mid;
    double factor = 1.0;
    for (int m = 1; m <= j; ++m) {
      factor *= 4.0;
      cur[m] = cur[m - 1] + (cur[m - 1] - prev[m - 1]) / (factor - 1.0);
    }
    std::swap(prev, cur);
  }
  return prev[static_cast<std::size_t>(k)];
}

inline double romberg(std::span<const double> f, const QuadratureGrid& grid) {
  if (f.size() != grid.size()) throw QuadratureError("sample count does not match quadrature grid");
  return romberg(f, grid.a, grid.b);
}

}  // namespace sidecar::quadrature
