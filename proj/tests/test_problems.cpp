#include "sidecar/problems.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <complex>
#include <numbers>

using namespace sidecar;
using namespace sidecar::problems;
using diff::Matrix;
using diff::Tensor;
using quadrature::QuadratureGrid;
using cplx = std::complex<double>;

namespace {

constexpr double pi = std::numbers::pi;

struct SolitonPoint {
  cplx u, ux, uxx, ut;
};

// sech(x + 2t) e^{-i(2x + 3t/2)} and its derivatives, written out by hand.
SolitonPoint soliton(double x, double t) {
  const double xi = x + 2.0 * t;
  const double s = 1.0 / std::cosh(xi);
  const double tau = std::tanh(xi);
  const cplx phase = std::polar(1.0, -(2.0 * x + 1.5 * t));
  const cplx i(0.0, 1.0);
  return {s * phase, (-s * tau - 2.0 * i * s) * phase,
          (s * tau * tau - s * s * s - 4.0 * s + 4.0 * i * s * tau) * phase, (-2.0 * s * tau - 1.5 * i * s) * phase};
}

models::Jet constant_jet(Matrix value) {
  const auto n = value.rows();
  const auto c = value.cols();
  return {Tensor(std::move(value)), Tensor(Matrix::Zero(n, c)), Tensor(Matrix::Zero(n, c)),
          Tensor(Matrix::Zero(n, c))};
}

Matrix to_channels(const std::vector<cplx>& z) {
  Matrix m(static_cast<Eigen::Index>(z.size()), 2);
  for (std::size_t i = 0; i < z.size(); ++i) {
    m(static_cast<Eigen::Index>(i), 0) = z[i].real();
    m(static_cast<Eigen::Index>(i), 1) = z[i].imag();
  }
  return m;
}

GridSlice soliton_slice(const QuadratureGrid& g, double t) {
  std::vector<cplx> u, ux;
  for (double x : g.points()) {
    const auto s = soliton(x, t);
    u.push_back(s.u);
    ux.push_back(s.ux);
  }
  return {to_channels(u), to_channels(ux), Matrix()};
}

GridSlice scalar_slice(const QuadratureGrid& g, const std::function<double(double)>& v,
                       const std::function<double(double)>& vx, const std::function<double(double)>& vt) {
  GridSlice s{Matrix(g.size(), 1), Matrix(g.size(), 1), Matrix(g.size(), 1)};
  const auto x = g.points();
  for (std::size_t i = 0; i < x.size(); ++i) {
    s.value(i, 0) = v(x[i]);
    s.dx(i, 0) = vx(x[i]);
    s.dt(i, 0) = vt(x[i]);
  }
  return s;
}

// Composite trapezoid with n intervals.
double brute_force(const std::function<double(double)>& f, double a, double b, int n = 1000000) {
  const double h = (b - a) / n;
  double s = 0.5 * (f(a) + f(b));
  for (int i = 1; i < n; ++i) s += f(a + i * h);
  return s * h;
}

}  // namespace

TEST(Spec, BenchmarkDomains) {
  const auto nls = ProblemSpec::nls1d();
  EXPECT_EQ(nls.x_min, -15.0);
  EXPECT_EQ(nls.x_max, 15.0);
  EXPECT_DOUBLE_EQ(nls.horizon, pi / 2.0);
  EXPECT_EQ(nls.channels(), 2);
  const auto ac = ProblemSpec::ac1d();
  EXPECT_EQ(ac.x_min, -1.0);
  EXPECT_EQ(ac.horizon, 1.0);
  EXPECT_EQ(ac.epsilon, 0.01);
  EXPECT_EQ(ac.reaction, 5.0);
  EXPECT_EQ(ac.channels(), 1);
  EXPECT_EQ(problem_from_string("ac1d"), ProblemId::Ac1d);
  EXPECT_THROW(problem_from_string("burgers"), std::invalid_argument);
}

TEST(Spec, InitialConditions) {
  const std::vector<double> x{-1.0, 0.0, 0.3, 2.0};
  const auto u0 = ProblemSpec::nls1d().initial_condition(x);
  const auto du0 = ProblemSpec::nls1d().initial_condition_dx(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto s = soliton(x[i], 0.0);
    EXPECT_NEAR(u0(i, 0), s.u.real(), 1e-15);
    EXPECT_NEAR(u0(i, 1), s.u.imag(), 1e-15);
    EXPECT_NEAR(du0(i, 0), s.ux.real(), 1e-15);
    EXPECT_NEAR(du0(i, 1), s.ux.imag(), 1e-15);
  }
  const auto a0 = ProblemSpec::ac1d().initial_condition(x);
  const auto da0 = ProblemSpec::ac1d().initial_condition_dx(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(a0(i, 0), x[i] * x[i] * std::cos(pi * x[i]), 1e-15);
    const double h = 1e-6;
    const double fd = ((x[i] + h) * (x[i] + h) * std::cos(pi * (x[i] + h)) -
                       (x[i] - h) * (x[i] - h) * std::cos(pi * (x[i] - h))) / (2 * h);
    EXPECT_NEAR(da0(i, 0), fd, 1e-8);
  }
}

TEST(NlsResidual, ZeroField) {
  const auto r = nls_residual(constant_jet(Matrix::Zero(4, 2)));
  EXPECT_TRUE(r.value().isZero(0.0));
}

TEST(NlsResidual, RealConstant) {
  const double c = 0.7;
  Matrix v(3, 2);
  v.col(0).setConstant(c);
  v.col(1).setZero();
  const auto r = nls_residual(constant_jet(v));
  for (Eigen::Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(r(i, 0), -c * c * c, 1e-15);
    EXPECT_EQ(r(i, 1), 0.0);
  }
}

TEST(NlsResidual, ExactSolitonOnRefinedGrid) {
  std::vector<cplx> u, ux, uxx, ut;
  for (int j = 0; j < 65; ++j) {
    const double t = (pi / 2.0) * j / 64.0;
    for (int i = 0; i < 513; ++i) {
      const auto s = soliton(-15.0 + 30.0 * i / 512.0, t);
      u.push_back(s.u);
      ux.push_back(s.ux);
      uxx.push_back(s.uxx);
      ut.push_back(s.ut);
    }
  }
  const models::Jet jet{Tensor(to_channels(u)), Tensor(to_channels(ux)), Tensor(to_channels(uxx)),
                        Tensor(to_channels(ut))};
  EXPECT_LT(nls_residual(jet).value().cwiseAbs().maxCoeff(), 1e-8);
}

TEST(NlsResidual, MissingChannelsAreErrors) {
  models::Jet j;
  j.value = Tensor(Matrix::Zero(2, 2));
  EXPECT_THROW(nls_residual(j), std::invalid_argument);
  EXPECT_THROW(nls_residual(constant_jet(Matrix::Zero(2, 1))), diff::ShapeError);
}

TEST(NlsResidual, RenormalizedFormAgrees) {
  std::mt19937_64 rng(5);
  const int n = 20;
  const Matrix v = testutil::random_matrix(rng, n, 2);
  const Matrix vt = testutil::random_matrix(rng, n, 2);
  const Matrix vxx = testutil::random_matrix(rng, n, 2);
  const Matrix r = testutil::random_matrix(rng, n, 1, 0.5, 1.5);
  const Matrix rt = testutil::random_matrix(rng, n, 1);
  Matrix u(n, 2), ut(n, 2), uxx(n, 2);
  for (int i = 0; i < n; ++i) {
    u.row(i) = r(i, 0) * v.row(i);
    uxx.row(i) = r(i, 0) * vxx.row(i);
    ut.row(i) = rt(i, 0) * v.row(i) + r(i, 0) * vt.row(i);
  }
  const models::Jet jet{Tensor(u), Tensor(Matrix::Zero(n, 2)), Tensor(uxx), Tensor(ut)};
  const Matrix direct = nls_residual(jet).value();
  const Matrix renorm = nls_residual_renormalized(v, vt, vxx, r, rt);
  EXPECT_LT((renorm + 2.0 * direct).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(AcResidual, EquilibriaAndSpaceConstantDecay) {
  const auto p = ProblemSpec::ac1d();
  EXPECT_TRUE(ac_residual(constant_jet(Matrix::Ones(3, 1)), p.epsilon, p.reaction).value().isZero(0.0));
  EXPECT_TRUE(ac_residual(constant_jet(Matrix::Zero(3, 1)), p.epsilon, p.reaction).value().isZero(0.0));
  Matrix value(4, 1), dt(4, 1);
  for (int i = 0; i < 4; ++i) {
    const double t = 0.25 * i;
    value(i, 0) = std::exp(-t);
    dt(i, 0) = -std::exp(-t);
  }
  const models::Jet j{Tensor(value), Tensor(Matrix::Zero(4, 1)), Tensor(Matrix::Zero(4, 1)), Tensor(dt)};
  const auto r = ac_residual(j, p.epsilon, p.reaction);
  for (int i = 0; i < 4; ++i) {
    const double t = 0.25 * i;
    EXPECT_NEAR(r(i, 0), -std::exp(-t) - 5.0 * (std::exp(-t) - std::exp(-3.0 * t)), 1e-14);
  }
}

TEST(AcResidual, CountsEvaluations) {
  const auto before = residual_counter();
  residual(ProblemSpec::ac1d(), constant_jet(Matrix::Ones(2, 1)));
  residual(ProblemSpec::nls1d(), constant_jet(Matrix::Ones(2, 2)));
  EXPECT_EQ(residual_counter(), before + 2);
}

TEST(NlsIntegrals, ZeroField) {
  const QuadratureGrid g(-15.0, 15.0, 6);
  const GridSlice s{Matrix::Zero(g.size(), 2), Matrix::Zero(g.size(), 2), Matrix()};
  const auto i = nls_invariant_integrals(s, g);
  EXPECT_EQ(i.mass, 0.0);
  EXPECT_EQ(i.momentum, 0.0);
}

TEST(NlsIntegrals, SolitonValuesAndConservation) {
  const QuadratureGrid g(-15.0, 15.0, 9);
  const double t15 = std::tanh(15.0);
  for (double t : {0.0, 0.3, 0.8, 1.5}) {
    const auto i = nls_invariant_integrals(soliton_slice(g, t), g);
    EXPECT_NEAR(i.mass, 2.0 * t15, 1e-8) << t;
    EXPECT_NEAR(i.momentum, -4.0 * t15, 1e-8) << t;
  }
  const auto i0 = nls_invariant_integrals(soliton_slice(g, 0.0), g);
  EXPECT_NEAR(i0.mass, 2.0 * t15, 1e-8);
  EXPECT_NEAR(i0.momentum, -4.0 * t15, 1e-8);
}

TEST(NlsIntegrals, MomentumFormsAgree) {
  // Im int u_x conj(u) against int (Re u Im u_x - Im u Re u_x) on random fields.
  std::mt19937_64 rng(9);
  const QuadratureGrid g(-2.0, 2.0, 8);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    const double a = d(rng), b = d(rng), c = d(rng), k = 3.0 * d(rng);
    auto u = [&](double x) { return cplx(a + b * x, c * x * x) * std::polar(1.0, k * x); };
    auto ux = [&](double x) {
      return (cplx(b, 2.0 * c * x) + cplx(0.0, k) * cplx(a + b * x, c * x * x)) * std::polar(1.0, k * x);
    };
    std::vector<cplx> us, uxs;
    std::vector<double> im_form;
    for (double x : g.points()) {
      us.push_back(u(x));
      uxs.push_back(ux(x));
      im_form.push_back((ux(x) * std::conj(u(x))).imag());
    }
    const double real_form = nls_momentum_integral(to_channels(us), to_channels(uxs), g);
    EXPECT_NEAR(real_form, quadrature::romberg(im_form, g), 1e-12);
  }
}

TEST(AcEnergy, ConstantOne) {
  const auto p = ProblemSpec::ac1d();
  const QuadratureGrid g(-1.0, 1.0, 6);
  const auto s = scalar_slice(g, [](double) { return 1.0; }, [](double) { return 0.0; }, [](double) { return 0.0; });
  const auto e = ac_energy_parts(s, p.epsilon, p.reaction, g);
  EXPECT_NEAR(e.quartic, 2.5, 1e-14);
  EXPECT_NEAR(e.quadratic, -5.0, 1e-14);
  EXPECT_NEAR(e.quartic + e.quadratic, -2.5, 1e-14);
  EXPECT_NEAR(quantity(LawId::AcEnergy, p, s, g), 0.0, 1e-14);
  const auto j = ac_dissipation_parts(s, g);
  EXPECT_NEAR(j.rate_sq, -2.0, 1e-14);
  EXPECT_EQ(j.value_sq, 0.0);
  EXPECT_EQ(j.cross, 0.0);
}

TEST(AcEnergy, ZeroField) {
  const QuadratureGrid g(-1.0, 1.0, 5);
  const auto s = scalar_slice(g, [](double) { return 0.0; }, [](double) { return 0.0; }, [](double) { return 0.0; });
  const auto e = ac_energy_parts(s, 0.01, 5.0, g);
  EXPECT_EQ(e.quartic, 0.0);
  EXPECT_EQ(e.quadratic, 0.0);
  const auto j = ac_dissipation_parts(s, g);
  EXPECT_EQ(j.rate_sq, 0.0);
  EXPECT_EQ(j.value_sq, 0.0);
  EXPECT_EQ(j.cross, 0.0);
}

TEST(AcEnergy, CosineAgainstBruteForce) {
  const double eps = 0.01, c = 5.0;
  const QuadratureGrid g(-1.0, 1.0, 9);
  const auto s = scalar_slice(
      g, [](double x) { return std::cos(pi * x); }, [](double x) { return -pi * std::sin(pi * x); },
      [](double) { return 0.0; });
  const auto e = ac_energy_parts(s, eps, c, g);
  const double q1 = brute_force([&](double x) { return 0.25 * c * std::pow(std::cos(pi * x), 4); }, -1.0, 1.0);
  const double q2 = brute_force(
      [&](double x) {
        const double v = std::cos(pi * x), vx = -pi * std::sin(pi * x);
        return 0.5 * eps * eps * vx * vx - 0.5 * c * v * v;
      },
      -1.0, 1.0);
  EXPECT_NEAR(e.quartic, q1, 1e-9);
  EXPECT_NEAR(e.quadratic, q2, 1e-9);
}

TEST(AcEnergy, FactorizationAndDissipationIdentities) {
  // E[R v] = R^4 I_Q1 + R^2 I_Q2 + c L / 4 and -int (d/dt (R v))^2 = Rt^2 J_a + R^2 J_b + R Rt J_c.
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  const auto p = ProblemSpec::ac1d();
  const QuadratureGrid g(-1.0, 1.0, 9);
  for (int trial = 0; trial < 20; ++trial) {
    const double a1 = d(rng), a2 = d(rng), k = 1.0 + 2.0 * std::abs(d(rng)), b1 = d(rng), b2 = d(rng);
    const double R = 0.5 + std::abs(d(rng)), Rt = d(rng);
    auto v = [&](double x) { return a1 * std::cos(pi * x) + a2 * std::sin(k * pi * x); };
    auto vx = [&](double x) { return -a1 * pi * std::sin(pi * x) + a2 * k * pi * std::cos(k * pi * x); };
    auto vt = [&](double x) { return b1 * std::cos(2.0 * pi * x) + b2; };
    const auto s = scalar_slice(g, v, vx, vt);
    const auto e = ac_energy_parts(s, p.epsilon, p.reaction, g);
    const double energy = brute_force(
        [&](double x) {
          const double u = R * v(x), ux = R * vx(x);
          return 0.5 * p.epsilon * p.epsilon * ux * ux + 0.25 * p.reaction * (u * u - 1.0) * (u * u - 1.0);
        },
        -1.0, 1.0, 200000);
    EXPECT_NEAR(std::pow(R, 4) * e.quartic + R * R * e.quadratic + ac_energy_offset(p), energy, 1e-9);
    const auto j = ac_dissipation_parts(s, g);
    const double speed = brute_force(
        [&](double x) {
          const double ut = Rt * v(x) + R * vt(x);
          return -ut * ut;
        },
        -1.0, 1.0, 200000);
    EXPECT_NEAR(Rt * Rt * j.rate_sq + R * R * j.value_sq + R * Rt * j.cross, speed, 1e-9);
  }
}

TEST(Integrals, GridMismatchIsError) {
  const QuadratureGrid g(-1.0, 1.0, 4);
  EXPECT_THROW(nls_mass_integral(Matrix::Zero(10, 2), g), quadrature::QuadratureError);
  GridSlice s{Matrix::Zero(g.size(), 1), Matrix(), Matrix()};
  EXPECT_THROW(ac_energy_parts(s, 0.01, 5.0, g), quadrature::QuadratureError);
}

TEST(Laws, InitialValuesAndKinds) {
  const auto nls = ProblemSpec::nls1d();
  const double t15 = std::tanh(15.0);
  const auto mass = make_law(LawId::NlsMass, nls);
  EXPECT_EQ(mass.kind, LawKind::Conservative);
  EXPECT_NEAR(mass.c0, 2.0 * t15, 1e-8);
  EXPECT_EQ(mass.factored_target(), mass.c0);
  const auto momentum = make_law(LawId::NlsMomentum, nls);
  EXPECT_NEAR(momentum.c0, -4.0 * t15, 1e-8);
  const auto ac = ProblemSpec::ac1d();
  const auto energy = make_law(LawId::AcEnergy, ac);
  EXPECT_EQ(energy.kind, LawKind::Dissipative);
  EXPECT_NEAR(energy.offset, 2.5, 1e-15);
  const double e0 = brute_force(
      [](double x) {
        const double u = x * x * std::cos(pi * x);
        const double ux = 2.0 * x * std::cos(pi * x) - pi * x * x * std::sin(pi * x);
        return 0.5e-4 * ux * ux + 1.25 * (u * u - 1.0) * (u * u - 1.0);
      },
      -1.0, 1.0);
  EXPECT_NEAR(energy.c0, e0, 1e-9);
  EXPECT_THROW(make_law(LawId::AcEnergy, nls), std::invalid_argument);
  EXPECT_EQ(law_from_string("mass"), LawId::NlsMass);
}

TEST(Laws, QuantityOfSoliton) {
  const auto nls = ProblemSpec::nls1d();
  const QuadratureGrid g(-15.0, 15.0, 10);
  const auto law = make_law(LawId::NlsMass, nls, 10);
  std::vector<GridSlice> slices;
  for (double t : {0.0, 0.01, 0.02, 0.05}) slices.push_back(soliton_slice(g, t));
  for (double q : quantity_of_solution(law, nls, slices, g)) EXPECT_NEAR(q, 2.0 * std::tanh(15.0), 1e-9);
}
