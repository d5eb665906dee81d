#pragma once

// Ground truth for the benchmarks and the evaluation metrics:
//   - the closed-form moving NLS soliton with exact derivatives,
//   - a semi-implicit finite-difference solver for 1D Allen-Cahn,
//   - relative L2 error and structure L-infinity error.

#include "sidecar/binary_io.hpp"
#include "sidecar/diffcore.hpp"
#include "sidecar/problems.hpp"
#include "sidecar/quadrature.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sidecar::reference {

using diff::Matrix;

// ---------------------------------------------------------------------------
// NLS soliton u(x, t) = sech(x + 2t) exp(-i (2x + 3t/2))

struct SolitonJet {
  Matrix value;  // (N x 2): Re u, Im u
  Matrix dx;
  Matrix dxx;
  Matrix dt;
};

inline SolitonJet soliton_eval(const Matrix& points) {
  if (points.cols() != 2) throw diff::ShapeError("soliton_eval expects (x, t) rows");
  const auto n = points.rows();
  SolitonJet j{Matrix(n, 2), Matrix(n, 2), Matrix(n, 2), Matrix(n, 2)};
  using C = std::complex<double>;
  const C I(0.0, 1.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = points(i, 0);
    const double t = points(i, 1);
    const double s = x + 2.0 * t;
    const double sech = 1.0 / std::cosh(s);
    const double th = std::tanh(s);
    const double a = sech;
    const double a1 = -sech * th;                      // d sech / ds
    const double a2 = sech * (1.0 - 2.0 * sech * sech);  // d2 sech / ds2
    const C phase = std::polar(1.0, -(2.0 * x + 1.5 * t));
    const C u = a * phase;
    const C ux = (a1 - 2.0 * I * a) * phase;
    const C uxx = (a2 - 4.0 * I * a1 - 4.0 * a) * phase;
    const C ut = (2.0 * a1 - 1.5 * I * a) * phase;
    j.value(i, 0) = u.real();
    j.value(i, 1) = u.imag();
    j.dx(i, 0) = ux.real();
    j.dx(i, 1) = ux.imag();
    j.dxx(i, 0) = uxx.real();
    j.dxx(i, 1) = uxx.imag();
    j.dt(i, 0) = ut.real();
    j.dt(i, 1) = ut.imag();
  }
  return j;
}

// ---------------------------------------------------------------------------
// Periodic tridiagonal solver for (1 + 2r) u_i - r (u_{i-1} + u_{i+1}) = f_i

class PeriodicDiffusionSolver {
 public:
  PeriodicDiffusionSolver(std::size_t n, double r) : n_(n), r_(r) {
    if (n < 3) throw std::invalid_argument("periodic solver needs at least 3 unknowns");
    const double b = 1.0 + 2.0 * r;
    const double off = -r;
    // Sherman-Morrison: A = T + u v^T with u = (gamma, 0, ..., 0, off),
    // v = (1, 0, ..., 0, off / gamma).
    gamma_ = -b;
    diag_.assign(n, b);
    diag_[0] = b - gamma_;
    diag_[n - 1] = b - off * off / gamma_;
    // Thomas factorization of T.
    cprime_.resize(n);
    denom_.resize(n);
    denom_[0] = diag_[0];
    check_pivot(denom_[0]);
    cprime_[0] = off / denom_[0];
    for (std::size_t i = 1; i < n; ++i) {
      denom_[i] = diag_[i] - off * cprime_[i - 1];
      check_pivot(denom_[i]);
      cprime_[i] = off / denom_[i];
    }
    std::vector<double> u(n, 0.0);
    u[0] = gamma_;
    u[n - 1] = off;
    z_ = thomas(u);
    zfactor_ = 1.0 + z_[0] + off * z_[n - 1] / gamma_;
    check_pivot(zfactor_);
  }

  std::vector<double> solve(const std::vector<double>& rhs) const {
    std::vector<double> x = thomas(rhs);
    const double off = -r_;
    const double f = (x[0] + off * x[n_ - 1] / gamma_) / zfactor_;
    for (std::size_t i = 0; i < n_; ++i) x[i] -= f * z_[i];
    return x;
  }

 private:
  static void check_pivot(double p) {
    if (!std::isfinite(p) || std::abs(p) < 1e-300) {
      throw std::runtime_error("periodic diffusion solve: singular system");
    }
  }

  std::vector<double> thomas(const std::vector<double>& rhs) const {
    const double off = -r_;
    std::vector<double> d(n_);
    d[0] = rhs[0] / denom_[0];
    for (std::size_t i = 1; i < n_; ++i) d[i] = (rhs[i] - off * d[i - 1]) / denom_[i];
    for (std::size_t i = n_ - 1; i-- > 0;) d[i] -= cprime_[i] * d[i + 1];
    return d;
  }

  std::size_t n_;
  double r_;
  double gamma_;
  double zfactor_ = 1.0;
  std::vector<double> diag_, cprime_, denom_, z_;
};

// ---------------------------------------------------------------------------
// Finite-difference reference field

/// Snapshots of a periodic 1D field on x_i = x_min + i h, i = 0..nx-1.
struct ReferenceField {
  std::string scheme;      // provenance: "analytic" or the FD scheme id
  problems::ProblemSpec problem;
  int nx = 0;
  int nt = 0;
  int snapshot_every = 1;
  double dx = 0.0;
  double dt = 0.0;
  std::vector<double> x;
  std::vector<double> times;
  Matrix values;                  // (times x nx)
  std::vector<double> step_energy;  // discrete energy after each of the nt steps (size nt + 1)

  /// Periodic cubic (4-point Lagrange) interpolation in x, linear in t.
  double sample(double xq, double tq) const {
    if (times.empty()) throw std::logic_error("empty reference field");
    const double tt = std::clamp(tq, times.front(), times.back());
    const double tpos = (tt - times.front()) / (dt * snapshot_every);
    auto k = static_cast<std::size_t>(std::floor(tpos));
    if (k + 1 >= times.size()) k = times.size() - 2;
    const double w = tpos - static_cast<double>(k);
    const double a = sample_snapshot(k, xq);
    const double b = sample_snapshot(k + 1, xq);
    return (1.0 - w) * a + w * b;
  }

  Matrix sample(const Matrix& points) const {
    Matrix out(points.rows(), 1);
    for (Eigen::Index i = 0; i < points.rows(); ++i) out(i, 0) = sample(points(i, 0), points(i, 1));
    return out;
  }

  double sample_snapshot(std::size_t k, double xq) const {
    const double L = problem.length();
    double s = (xq - problem.x_min) / dx;
    s -= std::floor(s / nx) * nx;
    auto i = static_cast<long>(std::floor(s));
    const double f = s - static_cast<double>(i);
    auto at = [&](long j) {
      j %= nx;
      if (j < 0) j += nx;
      return values(static_cast<Eigen::Index>(k), j);
    };
    (void)L;
    const double p0 = at(i - 1), p1 = at(i), p2 = at(i + 1), p3 = at(i + 2);
    // Lagrange weights for nodes -1, 0, 1, 2 at offset f.
    const double w0 = -f * (f - 1.0) * (f - 2.0) / 6.0;
    const double w1 = (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0;
    const double w2 = -(f + 1.0) * f * (f - 2.0) / 2.0;
    const double w3 = (f + 1.0) * f * (f - 1.0) / 6.0;
    return w0 * p0 + w1 * p1 + w2 * p2 + w3 * p3;
  }
};

/// h sum_i [ eps^2/2 ((u_{i+1} - u_i)/h)^2 + c/4 (u_i^2 - 1)^2 ] on a periodic grid.
inline double discrete_ac_energy(std::span<const double> u, double h, double epsilon, double reaction) {
  const std::size_t n = u.size();
  double e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = (u[(i + 1) % n] - u[i]) / h;
    const double w = u[i] * u[i] - 1.0;
    e += 0.5 * epsilon * epsilon * g * g + 0.25 * reaction * w * w;
  }
  return e * h;
}

inline constexpr char kAcScheme[] = "ac1d-semi-implicit-be-diffusion-explicit-reaction";

/// Semi-implicit scheme on a periodic grid:
///   (I - dt eps^2 D2) u^{n+1} = u^n + dt c (u^n - (u^n)^3)
/// with the standard 3-point Laplacian D2. Snapshots are kept every
/// `snapshot_every` steps (the last step is always kept when nt is a multiple).
inline ReferenceField ac_fd_solve(const problems::ProblemSpec& p, int nx, int nt, int snapshot_every = 0) {
  if (p.id != problems::ProblemId::Ac1d) throw std::invalid_argument("ac_fd_solve requires the AC problem");
  if (nx < 8 || nt < 1) throw std::invalid_argument("ac_fd_solve: resolution too small");
  if (snapshot_every <= 0) snapshot_every = std::max(1, nt / 500);
  if (nt % snapshot_every != 0) throw std::invalid_argument("nt must be a multiple of snapshot_every");

  ReferenceField f;
  f.scheme = kAcScheme;
  f.problem = p;
  f.nx = nx;
  f.nt = nt;
  f.snapshot_every = snapshot_every;
  f.dx = p.length() / nx;
  f.dt = p.horizon / nt;
  f.x.resize(static_cast<std::size_t>(nx));
  for (int i = 0; i < nx; ++i) f.x[static_cast<std::size_t>(i)] = p.x_min + i * f.dx;

  std::vector<double> u = [&] {
    const Matrix u0 = p.initial_condition(f.x);
    std::vector<double> v(static_cast<std::size_t>(nx));
    for (int i = 0; i < nx; ++i) v[static_cast<std::size_t>(i)] = u0(i, 0);
    return v;
  }();

  const int snaps = nt / snapshot_every + 1;
  f.values.resize(snaps, nx);
  f.times.reserve(static_cast<std::size_t>(snaps));
  auto store = [&](int k, int step) {
    for (int i = 0; i < nx; ++i) f.values(k, i) = u[static_cast<std::size_t>(i)];
    f.times.push_back(step == nt ? p.horizon : step * f.dt);
  };
  store(0, 0);
  f.step_energy.reserve(static_cast<std::size_t>(nt) + 1);
  f.step_energy.push_back(discrete_ac_energy(u, f.dx, p.epsilon, p.reaction));

  const PeriodicDiffusionSolver solver(static_cast<std::size_t>(nx), f.dt * p.epsilon * p.epsilon / (f.dx * f.dx));
  std::vector<double> rhs(static_cast<std::size_t>(nx));
  for (int n = 1; n <= nt; ++n) {
    for (std::size_t i = 0; i < rhs.size(); ++i) {
      rhs[i] = u[i] + f.dt * p.reaction * (u[i] - u[i] * u[i] * u[i]);
    }
    u = solver.solve(rhs);
    for (double v : u) {
      if (!std::isfinite(v) || std::abs(v) > 1e3) {
        throw std::runtime_error("ac_fd_solve: instability detected at step " + std::to_string(n));
      }
    }
    f.step_energy.push_back(discrete_ac_energy(u, f.dx, p.epsilon, p.reaction));
    if (n % snapshot_every == 0) store(n / snapshot_every, n);
  }
  return f;
}

// Cached reference file (container layout in binary_io.hpp). Payload:
//   string scheme; f64 x_min, x_max, horizon, epsilon, reaction;
//   u64 nx, nt, snapshot_every; doubles x; doubles times; matrix values;
//   doubles step_energy
inline constexpr char kReferenceMagic[] = "SIDECREF";
inline constexpr std::uint32_t kReferenceVersion = 1;

inline void save_reference(const ReferenceField& f, const std::string& path) {
  io::Writer w(std::string_view(kReferenceMagic, 8), kReferenceVersion);
  w.put_string(f.scheme);
  w.put_f64(f.problem.x_min);
  w.put_f64(f.problem.x_max);
  w.put_f64(f.problem.horizon);
  w.put_f64(f.problem.epsilon);
  w.put_f64(f.problem.reaction);
  w.put_u64(static_cast<std::uint64_t>(f.nx));
  w.put_u64(static_cast<std::uint64_t>(f.nt));
  w.put_u64(static_cast<std::uint64_t>(f.snapshot_every));
  w.put_doubles(f.x);
  w.put_doubles(f.times);
  w.put_matrix(f.values);
  w.put_doubles(f.step_energy);
  w.save(path);
}

inline ReferenceField load_reference(const std::string& path) {
  io::Reader r(path, std::string_view(kReferenceMagic, 8), kReferenceVersion);
  ReferenceField f;
  f.scheme = r.get_string();
  f.problem = problems::ProblemSpec::ac1d();
  f.problem.x_min = r.get_f64();
  f.problem.x_max = r.get_f64();
  f.problem.horizon = r.get_f64();
  f.problem.epsilon = r.get_f64();
  f.problem.reaction = r.get_f64();
  f.nx = static_cast<int>(r.get_u64());
  f.nt = static_cast<int>(r.get_u64());
  f.snapshot_every = static_cast<int>(r.get_u64());
  f.x = r.get_doubles();
  f.times = r.get_doubles();
  f.values = r.get_matrix();
  f.step_energy = r.get_doubles();
  if (!r.at_end()) throw io::FormatError(path + ": trailing bytes");
  f.dx = f.problem.length() / f.nx;
  f.dt = f.problem.horizon / f.nt;
  return f;
}

inline std::string reference_cache_name(const problems::ProblemSpec& p, int nx, int nt) {
  (void)p;
  return "ac1d_nx" + std::to_string(nx) + "_nt" + std::to_string(nt) + ".ref";
}

/// Loads `dir/<key>.ref` when its scheme parameters match, otherwise solves
/// and (if `dir` is nonempty) writes the cache.
inline ReferenceField cached_ac_reference(const problems::ProblemSpec& p, int nx, int nt,
                                         const std::string& dir) {
  if (!dir.empty()) {
    const auto path = std::filesystem::path(dir) / reference_cache_name(p, nx, nt);
    if (std::filesystem::exists(path)) {
      try {
        auto f = load_reference(path.string());
        if (f.scheme == kAcScheme && f.nx == nx && f.nt == nt && f.problem.x_min == p.x_min &&
            f.problem.x_max == p.x_max && f.problem.horizon == p.horizon &&
            f.problem.epsilon == p.epsilon && f.problem.reaction == p.reaction) {
          return f;
        }
      } catch (const std::exception&) {
        // Stale or damaged cache: fall through and rebuild it.
      }
    }
    auto f = ac_fd_solve(p, nx, nt);
    std::filesystem::create_directories(dir);
    save_reference(f, path.string());
    return f;
  }
  return ac_fd_solve(p, nx, nt);
}

// ---------------------------------------------------------------------------
// Unified access for metrics

/// Exact (NLS) or finite-difference (AC) ground truth.
class Reference {
 public:
  static Reference nls(const problems::ProblemSpec& p) { return Reference(p, std::nullopt); }
  static Reference ac(const problems::ProblemSpec& p, ReferenceField field) {
    return Reference(p, std::move(field));
  }

  const problems::ProblemSpec& problem() const { return problem_; }

  Matrix values(const Matrix& points) const {
    if (field_) return field_->sample(points);
    return soliton_eval(points).value;
  }

  /// Q[u](t) of the ground truth at each time, on the given quadrature grid.
  std::vector<double> quantity(const problems::StructureLaw& law, std::span<const double> times,
                               const quadrature::QuadratureGrid& grid) const {
    std::vector<double> q;
    const auto xs = grid.points();
    const auto m = static_cast<Eigen::Index>(xs.size());
    for (double t : times) {
      problems::GridSlice s;
      if (!field_) {
        Matrix pts(m, 2);
        for (Eigen::Index i = 0; i < m; ++i) {
          pts(i, 0) = xs[static_cast<std::size_t>(i)];
          pts(i, 1) = t;
        }
        auto j = soliton_eval(pts);
        s.value = std::move(j.value);
        s.dx = std::move(j.dx);
      } else {
        s.value.resize(m, 1);
        s.dx.resize(m, 1);
        const double h = field_->dx;
        for (Eigen::Index i = 0; i < m; ++i) {
          const double x = xs[static_cast<std::size_t>(i)];
          s.value(i, 0) = field_->sample(x, t);
          // Fourth-order central difference of the interpolant.
          s.dx(i, 0) = (8.0 * (field_->sample(x + h, t) - field_->sample(x - h, t)) -
                        (field_->sample(x + 2 * h, t) - field_->sample(x - 2 * h, t))) /
                       (12.0 * h);
        }
      }
      q.push_back(problems::quantity(law.id, problem_, s, grid));
    }
    return q;
  }

  const std::optional<ReferenceField>& field() const { return field_; }

 private:
  Reference(problems::ProblemSpec p, std::optional<ReferenceField> f)
      : problem_(p), field_(std::move(f)) {}

  problems::ProblemSpec problem_;
  std::optional<ReferenceField> field_;
};

// ---------------------------------------------------------------------------
// Metrics

/// ||pred - ref||_2 / ||ref||_2 over all points and channels.
inline double rel_l2_error(const Matrix& prediction, const Matrix& reference) {
  if (prediction.rows() != reference.rows() || prediction.cols() != reference.cols()) {
    throw diff::ShapeError("rel_l2_error: grids are not aligned");
  }
  double num = 0.0, den = 0.0;
  for (Eigen::Index i = 0; i < reference.size(); ++i) {
    const double d = prediction.data()[i] - reference.data()[i];
    num += d * d;
    den += reference.data()[i] * reference.data()[i];
  }
  if (den == 0.0) throw std::invalid_argument("rel_l2_error: reference has zero norm");
  return std::sqrt(num / den);
}

/// max_n |Q_pred(t_n) - Q_true(t_n)|.
inline double structure_linf_error(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("structure_linf_error: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) m = std::max(m, std::abs(predicted[i] - truth[i]));
  return m;
}

}  // namespace sidecar::reference
