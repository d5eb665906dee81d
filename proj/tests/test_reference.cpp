#include "sidecar/reference.hpp"
#include "sidecar/training.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numbers>

using namespace sidecar;
using namespace sidecar::reference;
using diff::Matrix;
using problems::ProblemSpec;

namespace {

Matrix points(std::initializer_list<std::pair<double, double>> xt) {
  Matrix m(static_cast<Eigen::Index>(xt.size()), 2);
  Eigen::Index i = 0;
  for (auto [x, t] : xt) {
    m(i, 0) = x;
    m(i, 1) = t;
    ++i;
  }
  return m;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("sidecar_ref_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST(Soliton, InitialValueAndModulus) {
  const auto j = soliton_eval(points({{0.0, 0.0}}));
  EXPECT_NEAR(j.value(0, 0), 1.0, 1e-16);
  EXPECT_NEAR(j.value(0, 1), 0.0, 1e-16);
  std::mt19937_64 rng(1);
  const Matrix pts = testutil::random_matrix(rng, 50, 2, -3.0, 3.0);
  const auto k = soliton_eval(pts);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    EXPECT_NEAR(std::hypot(k.value(i, 0), k.value(i, 1)), 1.0 / std::cosh(pts(i, 0) + 2.0 * pts(i, 1)), 1e-15);
  }
}

TEST(Soliton, MatchesInitialCondition) {
  const auto p = ProblemSpec::nls1d();
  const std::vector<double> x{-14.0, -2.5, 0.0, 0.7, 9.0};
  Matrix pts(5, 2);
  for (int i = 0; i < 5; ++i) pts.row(i) << x[static_cast<std::size_t>(i)], 0.0;
  const auto j = soliton_eval(pts);
  EXPECT_LT((j.value - p.initial_condition(x)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((j.dx - p.initial_condition_dx(x)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Soliton, DerivativesMatchFiniteDifferences) {
  std::mt19937_64 rng(2);
  const Matrix pts = testutil::random_matrix(rng, 20, 2, -2.0, 2.0);
  const auto j = soliton_eval(pts);
  const double h = 1e-4;
  Matrix xp = pts, xm = pts, tp = pts, tm = pts;
  xp.col(0).array() += h;
  xm.col(0).array() -= h;
  tp.col(1).array() += h;
  tm.col(1).array() -= h;
  const auto jxp = soliton_eval(xp), jxm = soliton_eval(xm), jtp = soliton_eval(tp), jtm = soliton_eval(tm);
  EXPECT_LT(((jxp.value - jxm.value) / (2 * h) - j.dx).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_LT(((jxp.value - 2.0 * j.value + jxm.value) / (h * h) - j.dxx).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_LT(((jtp.value - jtm.value) / (2 * h) - j.dt).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(PeriodicSolver, ConstantAndRandomSystems) {
  const std::size_t n = 12;
  const double r = 0.37;
  const PeriodicDiffusionSolver s(n, r);
  for (double v : s.solve(std::vector<double>(n, 2.5))) EXPECT_NEAR(v, 2.5, 1e-14);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> f(n);
  for (double& v : f) v = d(rng);
  const auto x = s.solve(f);
  Matrix a = Matrix::Zero(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    a(i, i) = 1.0 + 2.0 * r;
    a(i, (i + 1) % n) -= r;
    a(i, (i + n - 1) % n) -= r;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) row += a(i, j) * x[j];
    EXPECT_NEAR(row, f[i], 1e-13);
  }
  EXPECT_THROW(PeriodicDiffusionSolver(2, 0.1), std::invalid_argument);
}

TEST(AcEnergy, DiscreteEnergyOfConstants) {
  std::vector<double> ones(40, 1.0), zeros(40, 0.0);
  EXPECT_EQ(discrete_ac_energy(ones, 0.05, 0.01, 5.0), 0.0);
  EXPECT_NEAR(discrete_ac_energy(zeros, 0.05, 0.01, 5.0), 2.5, 1e-14);
}

TEST(AcSolve, FirstStepMatchesDenseSolve) {
  const auto p = ProblemSpec::ac1d();
  const int nx = 32, nt = 10;
  const auto f = ac_fd_solve(p, nx, nt, 1);
  ASSERT_EQ(f.values.rows(), nt + 1);
  const double h = 2.0 / nx, dt = 0.1;
  const double r = dt * p.epsilon * p.epsilon / (h * h);
  Matrix a = Matrix::Zero(nx, nx);
  Eigen::VectorXd rhs(nx);
  for (int i = 0; i < nx; ++i) {
    a(i, i) = 1.0 + 2.0 * r;
    a(i, (i + 1) % nx) -= r;
    a(i, (i + nx - 1) % nx) -= r;
    const double x = -1.0 + i * h;
    const double u0 = x * x * std::cos(std::numbers::pi * x);
    EXPECT_NEAR(f.values(0, i), u0, 1e-15);
    rhs(i) = u0 + dt * 5.0 * (u0 - u0 * u0 * u0);
  }
  const Eigen::VectorXd u1 = a.fullPivLu().solve(rhs);
  for (int i = 0; i < nx; ++i) EXPECT_NEAR(f.values(1, i), u1(i), 1e-13);
  EXPECT_EQ(f.times.back(), 1.0);
}

TEST(AcSolve, EnergyDecaysAndFieldStaysBoundedAndEven) {
  const auto p = ProblemSpec::ac1d();
  const int nx = 256;
  const auto f = ac_fd_solve(p, nx, 2000);
  ASSERT_EQ(f.step_energy.size(), 2001u);
  for (std::size_t n = 1; n < f.step_energy.size(); ++n) {
    EXPECT_LE(f.step_energy[n], f.step_energy[n - 1] + 1e-12) << n;
  }
  EXPECT_LE(f.values.cwiseAbs().maxCoeff(), 1.0 + 1e-12);
  for (Eigen::Index k = 0; k < f.values.rows(); ++k) {
    for (int i = 1; i < nx; ++i) EXPECT_NEAR(f.values(k, i), f.values(k, nx - i), 1e-12);
  }
}

TEST(AcSolve, SelfConvergence) {
  const auto p = ProblemSpec::ac1d();
  const auto coarse = ac_fd_solve(p, 256, 1000, 10);
  const auto fine = ac_fd_solve(p, 512, 4000, 40);
  const auto medium = ac_fd_solve(p, 512, 2000, 20);
  const Matrix pts = points({{-0.9, 1.0}, {-0.5, 1.0}, {0.0, 1.0}, {0.3, 0.5}, {0.77, 0.25}});
  const double e_coarse = (coarse.sample(pts) - fine.sample(pts)).cwiseAbs().maxCoeff();
  const double e_medium = (medium.sample(pts) - fine.sample(pts)).cwiseAbs().maxCoeff();
  EXPECT_LT(e_medium, e_coarse);
  EXPECT_LT(e_medium, 5e-3);
}

TEST(AcSolve, Validation) {
  EXPECT_THROW(ac_fd_solve(ProblemSpec::nls1d(), 64, 10), std::invalid_argument);
  EXPECT_THROW(ac_fd_solve(ProblemSpec::ac1d(), 4, 10), std::invalid_argument);
  EXPECT_THROW(ac_fd_solve(ProblemSpec::ac1d(), 64, 10, 3), std::invalid_argument);
}

TEST(ReferenceField, CubicInterpolationAndLinearTime) {
  ReferenceField f;
  f.problem = ProblemSpec::ac1d();
  f.nx = 40;
  f.nt = 2;
  f.snapshot_every = 1;
  f.dx = 2.0 / 40;
  f.dt = 0.5;
  f.times = {0.0, 0.5, 1.0};
  f.values.resize(3, 40);
  auto cubic = [](double x) { return 0.3 - x + 0.5 * x * x + 0.8 * x * x * x; };
  for (int k = 0; k < 3; ++k) {
    for (int i = 0; i < 40; ++i) {
      const double x = -1.0 + i * f.dx;
      f.values(k, i) = (1.0 + k) * cubic(x);
    }
  }
  for (double x : {-0.83, -0.2, 0.01, 0.44, 0.86}) {
    EXPECT_NEAR(f.sample(x, 0.0), cubic(x), 1e-13);
    EXPECT_NEAR(f.sample(x, 0.25), 1.5 * cubic(x), 1e-13);
    EXPECT_NEAR(f.sample(x, 1.0), 3.0 * cubic(x), 1e-13);
  }
  EXPECT_NEAR(f.sample(-1.0 + 7 * f.dx, 0.5), 2.0 * cubic(-1.0 + 7 * f.dx), 1e-14);
}

TEST(ReferenceCache, RoundTripAndCorruption) {
  const auto dir = temp_dir("cache");
  const auto p = ProblemSpec::ac1d();
  const auto a = cached_ac_reference(p, 64, 100, dir.string());
  const auto path = dir / reference_cache_name(p, 64, 100);
  ASSERT_TRUE(std::filesystem::exists(path));
  const auto b = load_reference(path.string());
  EXPECT_EQ(b.scheme, a.scheme);
  EXPECT_TRUE(testutil::bitwise_equal(a.values, b.values));
  EXPECT_EQ(a.step_energy, b.step_energy);
  EXPECT_EQ(a.times, b.times);
  const auto c = cached_ac_reference(p, 64, 100, dir.string());
  EXPECT_TRUE(testutil::bitwise_equal(a.values, c.values));

  {
    std::fstream s(path, std::ios::in | std::ios::out | std::ios::binary);
    s.seekp(200);
    s.put('\x7f');
  }
  EXPECT_THROW(load_reference(path.string()), io::FormatError);
  const auto rebuilt = cached_ac_reference(p, 64, 100, dir.string());
  EXPECT_TRUE(testutil::bitwise_equal(a.values, rebuilt.values));
  EXPECT_NO_THROW(load_reference(path.string()));
  std::filesystem::remove_all(dir);
}

TEST(Metrics, RelativeL2) {
  std::mt19937_64 rng(6);
  const Matrix ref = testutil::random_matrix(rng, 30, 2);
  EXPECT_NEAR(rel_l2_error(2.0 * ref, ref), 1.0, 1e-15);
  EXPECT_EQ(rel_l2_error(ref, ref), 0.0);
  EXPECT_THROW(rel_l2_error(ref, Matrix::Zero(30, 2)), std::invalid_argument);
  EXPECT_THROW(rel_l2_error(ref, Matrix::Zero(30, 1)), diff::ShapeError);
}

TEST(Metrics, StructureLinf) {
  const std::vector<double> truth{1.0, 2.0, 3.0};
  const std::vector<double> shifted{1.1, 2.1, 3.1};
  EXPECT_NEAR(structure_linf_error(shifted, truth), 0.1, 1e-15);
  const std::vector<double> spike{1.0, 2.5, 3.0};
  EXPECT_EQ(structure_linf_error(spike, truth), 0.5);
  EXPECT_THROW(structure_linf_error(std::vector<double>{1.0}, truth), std::invalid_argument);
}

TEST(Reference, NlsQuantityIsConserved) {
  const auto p = ProblemSpec::nls1d();
  const auto law = problems::make_law(problems::LawId::NlsMass, p, 10);
  const auto ref = Reference::nls(p);
  const std::vector<double> times{0.0, 0.5, 1.5};
  for (double q : ref.quantity(law, times, quadrature::QuadratureGrid(-15.0, 15.0, 10))) {
    EXPECT_NEAR(q, law.c0, 1e-10);
  }
}

TEST(EvalGrid, IsTwiceAsFineAsCollocation) {
  const auto p = ProblemSpec::nls1d();
  const losses::CollocationSizes sizes{4, 3, 5, 2};
  const auto g = training::make_eval_grid(p, sizes, nullptr, Reference::nls(p), 6);
  EXPECT_EQ(g.times.size(), 5u);
  EXPECT_EQ(g.points.rows(), 8 * 5);
  EXPECT_DOUBLE_EQ(g.points(0, 0), -15.0 + 30.0 / 16.0);
  EXPECT_EQ(g.points(39, 1), p.horizon);
  EXPECT_LT((g.truth - soliton_eval(g.points).value).cwiseAbs().maxCoeff(), 1e-15);
}
