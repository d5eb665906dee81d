#pragma once

// Benchmark PDEs (1D nonlinear Schroedinger, 1D Allen-Cahn), their residual
// operators, and the integral kernels of their preserved quantities in the
// R-factored form used by the structure loss.

#include "sidecar/diffcore.hpp"
#include "sidecar/models.hpp"
#include "sidecar/quadrature.hpp"

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sidecar::problems {

using diff::Matrix;
using diff::Tensor;

enum class ProblemId { Nls1d, Ac1d };

inline std::string to_string(ProblemId id) { return id == ProblemId::Nls1d ? "nls1d" : "ac1d"; }

inline ProblemId problem_from_string(const std::string& s) {
  if (s == "nls1d") return ProblemId::Nls1d;
  if (s == "ac1d") return ProblemId::Ac1d;
  throw std::invalid_argument("unknown problem '" + s + "' (expected nls1d or ac1d)");
}

/// One benchmark instance. Both benchmarks use periodic boundary conditions
/// on the value and the first spatial derivative.
struct ProblemSpec {
  ProblemId id = ProblemId::Nls1d;
  double x_min = -15.0;
  double x_max = 15.0;
  double horizon = std::numbers::pi / 2.0;
  double epsilon = 0.0;   // AC interface width
  double reaction = 0.0;  // AC reaction coefficient c in c (u - u^3)

  /// -i u_t = 1/2 u_xx + |u|^2 u on [-15, 15] x (0, pi/2], u0 = sech(x) e^{-2ix}.
  static ProblemSpec nls1d() { return {ProblemId::Nls1d, -15.0, 15.0, std::numbers::pi / 2.0, 0.0, 0.0}; }

  /// u_t = eps^2 u_xx + 5 (u - u^3) on [-1, 1] x [0, 1], u0 = x^2 cos(pi x), eps = 0.01.
  static ProblemSpec ac1d() { return {ProblemId::Ac1d, -1.0, 1.0, 1.0, 0.01, 5.0}; }

  int channels() const { return id == ProblemId::Nls1d ? 2 : 1; }
  double length() const { return x_max - x_min; }

  /// u0 at the given abscissae, (N x channels).
  Matrix initial_condition(std::span<const double> x) const {
    Matrix out(static_cast<Eigen::Index>(x.size()), channels());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      if (id == ProblemId::Nls1d) {
        const double a = 1.0 / std::cosh(x[i]);
        out(r, 0) = a * std::cos(2.0 * x[i]);
        out(r, 1) = -a * std::sin(2.0 * x[i]);
      } else {
        out(r, 0) = x[i] * x[i] * std::cos(std::numbers::pi * x[i]);
      }
    }
    return out;
  }

  /// d u0 / dx at the given abscissae.
  Matrix initial_condition_dx(std::span<const double> x) const {
    Matrix out(static_cast<Eigen::Index>(x.size()), channels());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const double xi = x[i];
      if (id == ProblemId::Nls1d) {
        // d/dx [sech(x) e^{-2ix}] = (-sech tanh - 2i sech) e^{-2ix}
        const double s = 1.0 / std::cosh(xi);
        const std::complex<double> d =
            std::complex<double>(-s * std::tanh(xi), -2.0 * s) * std::polar(1.0, -2.0 * xi);
        out(r, 0) = d.real();
        out(r, 1) = d.imag();
      } else {
        const double pi = std::numbers::pi;
        out(r, 0) = 2.0 * xi * std::cos(pi * xi) - pi * xi * xi * std::sin(pi * xi);
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Residual operators on combined-output jets

inline void require_channels(const models::Jet& u, int channels, const char* who) {
  if (!u.value.defined() || !u.dt.defined() || !u.dxx.defined()) {
    throw std::invalid_argument(std::string(who) + ": jet lacks value, u_t or u_xx");
  }
  if (u.value.cols() != channels) {
    throw diff::ShapeError(std::string(who) + ": expected " + std::to_string(channels) + " channels");
  }
}

/// Real form of -i u_t = 1/2 u_xx + |u|^2 u with u = a + i b:
///   r_re =  b_t - 1/2 a_xx - (a^2 + b^2) a
///   r_im = -a_t - 1/2 b_xx - (a^2 + b^2) b
/// Returns (N x 2).
inline Tensor nls_residual(const models::Jet& u) {
  require_channels(u, 2, "nls_residual");
  using namespace diff;
  const Tensor a = slice_cols(u.value, 0, 1);
  const Tensor b = slice_cols(u.value, 1, 1);
  const Tensor a_t = slice_cols(u.dt, 0, 1);
  const Tensor b_t = slice_cols(u.dt, 1, 1);
  const Tensor a_xx = slice_cols(u.dxx, 0, 1);
  const Tensor b_xx = slice_cols(u.dxx, 1, 1);
  const Tensor mod2 = add(square(a), square(b));
  const Tensor r_re = sub(sub(b_t, scale(a_xx, 0.5)), mul(mod2, a));
  const Tensor r_im = sub(sub(scale(a_t, -1.0), scale(b_xx, 0.5)), mul(mod2, b));
  return concat_cols({r_re, r_im});
}

/// u_t - eps^2 u_xx - c (u - u^3), (N x 1).
inline Tensor ac_residual(const models::Jet& u, double epsilon, double reaction) {
  require_channels(u, 1, "ac_residual");
  using namespace diff;
  const Tensor cubic = mul(square(u.value), u.value);
  const Tensor reaction_term = scale(sub(u.value, cubic), reaction);
  return sub(sub(u.dt, scale(u.dxx, epsilon * epsilon)), reaction_term);
}

/// Per-thread count of residual-operator evaluations (see training
/// instrumentation: fit-only runs must never touch the PDE operator).
inline std::uint64_t& residual_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

inline Tensor residual(const ProblemSpec& p, const models::Jet& u) {
  ++residual_counter();
  return p.id == ProblemId::Nls1d ? nls_residual(u) : ac_residual(u, p.epsilon, p.reaction);
}

/// The same NLS system written in the renormalized variables (R, v), scaled so
/// that it equals (-2 r_re, -2 r_im):
///   -2R Im v_t - 2R_t Im v + R Re v_xx + 2R^3 |v|^2 Re v
///    2R Re v_t + 2R_t Re v + R Im v_xx + 2R^3 |v|^2 Im v
/// Plain values; used to cross-check the product-rule path.
inline Matrix nls_residual_renormalized(const Matrix& v, const Matrix& v_t, const Matrix& v_xx,
                                        const Matrix& r, const Matrix& r_t) {
  Matrix out(v.rows(), 2);
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double R = r(i, 0);
    const double Rt = r_t(i, 0);
    const double re = v(i, 0);
    const double im = v(i, 1);
    const double mod2 = re * re + im * im;
    out(i, 0) = -2.0 * R * v_t(i, 1) - 2.0 * Rt * im + R * v_xx(i, 0) + 2.0 * R * R * R * mod2 * re;
    out(i, 1) = 2.0 * R * v_t(i, 0) + 2.0 * Rt * re + R * v_xx(i, 1) + 2.0 * R * R * R * mod2 * im;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structure laws

enum class LawId { NlsMass, NlsMomentum, AcEnergy };
enum class LawKind { Conservative, Dissipative };

inline std::string to_string(LawId id) {
  switch (id) {
    case LawId::NlsMass: return "mass";
    case LawId::NlsMomentum: return "momentum";
    case LawId::AcEnergy: return "energy";
  }
  return "?";
}

inline LawId law_from_string(const std::string& s) {
  if (s == "mass") return LawId::NlsMass;
  if (s == "momentum") return LawId::NlsMomentum;
  if (s == "energy") return LawId::AcEnergy;
  throw std::invalid_argument("unknown structure law '" + s + "' (expected mass, momentum or energy)");
}

inline ProblemId problem_of(LawId id) { return id == LawId::AcEnergy ? ProblemId::Ac1d : ProblemId::Nls1d; }

/// Values of a (detached) field on a quadrature grid at one time. Each member
/// is (grid points x channels); members not needed by a law may be empty.
struct GridSlice {
  Matrix value;
  Matrix dx;
  Matrix dt;
};

struct NlsIntegrals {
  double mass = 0.0;      // I1 = int |v|^2
  double momentum = 0.0;  // I2 = int (Re v Im v_x - Im v Re v_x)
};

struct AcEnergyParts {
  double quartic = 0.0;    // I_Q1 = int c/4 v^4            (multiplies R^4)
  double quadratic = 0.0;  // I_Q2 = int eps^2/2 v_x^2 - c/2 v^2  (multiplies R^2)
};

struct AcDissipationParts {
  double rate_sq = 0.0;  // J_a = -int v^2        (multiplies R_t^2)
  double value_sq = 0.0; // J_b = -int v_t^2      (multiplies R^2)
  double cross = 0.0;    // J_c = -int 2 v v_t    (multiplies R R_t)
};

namespace detail {

inline void require_grid(const Matrix& m, const quadrature::QuadratureGrid& grid, int channels,
                         const char* what) {
  if (m.rows() != static_cast<Eigen::Index>(grid.size()) || m.cols() != channels) {
    throw quadrature::QuadratureError(std::string(what) + " is not sampled on the quadrature grid");
  }
}

template <class F>
double integrate(const quadrature::QuadratureGrid& grid, F&& kernel) {
  std::vector<double> f(grid.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = kernel(static_cast<Eigen::Index>(i));
  return quadrature::romberg(f, grid);
}

}  // namespace detail

inline double nls_mass_integral(const Matrix& v, const quadrature::QuadratureGrid& grid) {
  detail::require_grid(v, grid, 2, "v");
  return detail::integrate(grid, [&](Eigen::Index i) { return v(i, 0) * v(i, 0) + v(i, 1) * v(i, 1); });
}

inline double nls_momentum_integral(const Matrix& v, const Matrix& v_x,
                                    const quadrature::QuadratureGrid& grid) {
  detail::require_grid(v, grid, 2, "v");
  detail::require_grid(v_x, grid, 2, "v_x");
  return detail::integrate(grid, [&](Eigen::Index i) { return v(i, 0) * v_x(i, 1) - v(i, 1) * v_x(i, 0); });
}

inline NlsIntegrals nls_invariant_integrals(const GridSlice& s, const quadrature::QuadratureGrid& grid) {
  return {nls_mass_integral(s.value, grid), nls_momentum_integral(s.value, s.dx, grid)};
}

inline AcEnergyParts ac_energy_parts(const GridSlice& s, double epsilon, double reaction,
                                     const quadrature::QuadratureGrid& grid) {
  detail::require_grid(s.value, grid, 1, "v");
  detail::require_grid(s.dx, grid, 1, "v_x");
  AcEnergyParts p;
  p.quartic = detail::integrate(grid, [&](Eigen::Index i) {
    const double v2 = s.value(i, 0) * s.value(i, 0);
    return 0.25 * reaction * v2 * v2;
  });
  p.quadratic = detail::integrate(grid, [&](Eigen::Index i) {
    const double vx = s.dx(i, 0);
    const double v = s.value(i, 0);
    return 0.5 * epsilon * epsilon * vx * vx - 0.5 * reaction * v * v;
  });
  return p;
}

inline AcDissipationParts ac_dissipation_parts(const GridSlice& s, const quadrature::QuadratureGrid& grid) {
  detail::require_grid(s.value, grid, 1, "v");
  detail::require_grid(s.dt, grid, 1, "v_t");
  AcDissipationParts p;
  p.rate_sq = -detail::integrate(grid, [&](Eigen::Index i) { return s.value(i, 0) * s.value(i, 0); });
  p.value_sq = -detail::integrate(grid, [&](Eigen::Index i) { return s.dt(i, 0) * s.dt(i, 0); });
  p.cross = -detail::integrate(grid, [&](Eigen::Index i) { return 2.0 * s.value(i, 0) * s.dt(i, 0); });
  return p;
}

/// Constant dropped from the factored AC energy: int c/4 dx.
inline double ac_energy_offset(const ProblemSpec& p) { return 0.25 * p.reaction * p.length(); }

/// A preserved quantity dQ/dt = S with Q(0) = c0. `offset` is the part of Q
/// that does not scale with R (nonzero only for the AC energy); the factored
/// structure ODE targets c0 - offset.
struct StructureLaw {
  LawId id = LawId::NlsMass;
  LawKind kind = LawKind::Conservative;
  double c0 = 0.0;
  double offset = 0.0;

  double factored_target() const { return c0 - offset; }

  /// Which derivative channels of v a grid slice must carry for this law.
  diff::JetLayout required_layout() const {
    switch (id) {
      case LawId::NlsMass: return {0, false, false, false};
      case LawId::NlsMomentum: return {0, true, false, false};
      case LawId::AcEnergy: return {0, true, false, true};
    }
    return {};
  }
};

inline LawKind kind_of(LawId id) { return id == LawId::AcEnergy ? LawKind::Dissipative : LawKind::Conservative; }

/// Q of a field slice, including any constant part.
inline double quantity(LawId id, const ProblemSpec& p, const GridSlice& s,
                       const quadrature::QuadratureGrid& grid) {
  switch (id) {
    case LawId::NlsMass: return nls_mass_integral(s.value, grid);
    case LawId::NlsMomentum: return nls_momentum_integral(s.value, s.dx, grid);
    case LawId::AcEnergy: {
      const auto parts = ac_energy_parts(s, p.epsilon, p.reaction, grid);
      return parts.quartic + parts.quadratic + ac_energy_offset(p);
    }
  }
  return 0.0;
}

/// Builds a law with c0 = Q applied to the initial condition.
inline StructureLaw make_law(LawId id, const ProblemSpec& p, int quad_level = 9) {
  if (problem_of(id) != p.id) {
    throw std::invalid_argument("structure law '" + to_string(id) + "' does not apply to problem " +
                                to_string(p.id));
  }
  const quadrature::QuadratureGrid grid(p.x_min, p.x_max, quad_level);
  const auto x = grid.points();
  GridSlice s{p.initial_condition(x), p.initial_condition_dx(x), Matrix()};
  StructureLaw law;
  law.id = id;
  law.kind = kind_of(id);
  law.c0 = quantity(id, p, s, grid);
  law.offset = id == LawId::AcEnergy ? ac_energy_offset(p) : 0.0;
  return law;
}

/// Q[u](t_n) for a solution sampled on the quadrature grid at each time.
inline std::vector<double> quantity_of_solution(const StructureLaw& law, const ProblemSpec& p,
                                                std::span<const GridSlice> slices,
                                                const quadrature::QuadratureGrid& grid) {
  std::vector<double> q;
  q.reserve(slices.size());
  for (const auto& s : slices) q.push_back(quantity(law.id, p, s, grid));
  return q;
}

}  // namespace sidecar::problems
