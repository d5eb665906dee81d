#include "sidecar/models.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace sidecar;
using namespace sidecar::models;
using diff::JetLayout;
using diff::Matrix;
using diff::Tensor;
using testutil::random_matrix;

namespace {

Matrix points(std::mt19937_64& rng, int n) {
  Matrix p = random_matrix(rng, n, 2, -1.5, 1.5);
  return p;
}

// Values of a constant network at shifted inputs.
Matrix values_at(const BoundMlp& net, Matrix pts) {
  return forward_jet(net, pts, JetLayout::value_only(0)).value.value();
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("sidecar_models_" + name)).string();
}

}  // namespace

TEST(Init, SameSeedIsBitwiseIdentical) {
  const MlpArch arch{2, 2, 12, 3};
  const auto a = init_params(arch, 42);
  const auto b = init_params(arch, 42);
  for (std::size_t i = 0; i < a.weights.size(); ++i) {
    EXPECT_TRUE(testutil::bitwise_equal(a.weights[i], b.weights[i]));
    EXPECT_TRUE(testutil::bitwise_equal(a.biases[i], b.biases[i]));
  }
}

TEST(Init, DifferentSeedsDiffer) {
  const MlpArch arch{2, 2, 12, 3};
  EXPECT_FALSE(testutil::bitwise_equal(init_params(arch, 1).weights[1], init_params(arch, 2).weights[1]));
}

TEST(Init, GlorotBoundAndZeroBiases) {
  EXPECT_NEAR(glorot_bound(50, 50), std::sqrt(6.0 / 100.0), 1e-15);
  EXPECT_NEAR(glorot_bound(50, 50), 0.2449, 1e-4);
  const auto p = init_params(MlpArch{2, 1, 50, 3}, 9);
  const double bound = std::sqrt(6.0 / 100.0);
  EXPECT_LE(p.weights[1].cwiseAbs().maxCoeff(), bound);
  EXPECT_GT(p.weights[1].cwiseAbs().maxCoeff(), 0.9 * bound);
  for (const auto& b : p.biases) EXPECT_TRUE(b.isZero(0.0));
}

TEST(Init, ShapesChainAndCountsMatch) {
  const MlpArch arch{2, 2, 7, 4};
  const auto p = init_params(arch, 0);
  ASSERT_EQ(p.weights.size(), 5u);
  EXPECT_EQ(p.weights[0].rows(), 7);
  EXPECT_EQ(p.weights[0].cols(), 2);
  for (int l = 1; l < 4; ++l) {
    EXPECT_EQ(p.weights[l].rows(), 7);
    EXPECT_EQ(p.weights[l].cols(), 7);
  }
  EXPECT_EQ(p.weights[4].rows(), 2);
  EXPECT_EQ(p.parameter_count(), parameter_count(arch));
}

TEST(Init, RejectsNonPositiveDimensions) {
  EXPECT_THROW(init_params(MlpArch{2, 1, 0, 3}, 0), std::invalid_argument);
  EXPECT_THROW(init_params(MlpArch{2, 1, 5, 0}, 0), std::invalid_argument);
  EXPECT_THROW(init_params(MlpArch{0, 1, 5, 2}, 0), std::invalid_argument);
}

TEST(ForwardJet, ZeroWeightsGiveOutputBias) {
  auto p = init_params(MlpArch{2, 2, 6, 3}, 0);
  for (auto& w : p.weights) w.setZero();
  p.biases.back() << 0.25, -1.5;
  std::mt19937_64 rng(1);
  const auto j = forward_jet(constants(p), points(rng, 10), JetLayout::full(0));
  for (Eigen::Index i = 0; i < 10; ++i) {
    EXPECT_EQ(j.value(i, 0), 0.25);
    EXPECT_EQ(j.value(i, 1), -1.5);
  }
  EXPECT_TRUE(j.dx.value().isZero(0.0));
  EXPECT_TRUE(j.dxx.value().isZero(0.0));
  EXPECT_TRUE(j.dt.value().isZero(0.0));
}

TEST(ForwardJet, SingleNeuronClosedForm) {
  MlpParams p;
  p.arch = {2, 1, 1, 1};
  const double wx = 0.8, wt = -1.3, b = 0.2, a = 1.7;
  p.weights = {Matrix{{wx, wt}}, Matrix{{a}}};
  p.biases = {Matrix{{b}}, Matrix{{0.0}}};
  std::mt19937_64 rng(2);
  const Matrix pts = points(rng, 25);
  const auto j = forward_jet(constants(p), pts, JetLayout::full(0));
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    const double h = std::tanh(wx * pts(i, 0) + wt * pts(i, 1) + b);
    const double s = 1.0 - h * h;
    EXPECT_NEAR(j.value(i, 0), a * h, 1e-15);
    EXPECT_NEAR(j.dx(i, 0), a * wx * s, 1e-15);
    EXPECT_NEAR(j.dxx(i, 0), -2.0 * a * wx * wx * h * s, 1e-15);
    EXPECT_NEAR(j.dt(i, 0), a * wt * s, 1e-15);
  }
}

TEST(ForwardJet, MatchesFiniteDifferencesOnRandomNets) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 8; ++trial) {
    const auto p = init_params(MlpArch{2, 2, 8 + trial, 2 + trial % 3}, 100 + trial);
    const auto net = constants(p);
    const Matrix pts = points(rng, 6);
    const auto j = forward_jet(net, pts, JetLayout::full(0));
    const double h = 1e-4;
    auto shifted = [&](double dx, double dt) {
      Matrix q = pts;
      q.col(0).array() += dx;
      q.col(1).array() += dt;
      return values_at(net, q);
    };
    const Matrix f0 = shifted(0, 0);
    const Matrix fxp = shifted(h, 0), fxm = shifted(-h, 0);
    const Matrix ftp = shifted(0, h), ftm = shifted(0, -h);
    const Matrix dx = (fxp - fxm) / (2 * h);
    const Matrix dxx = (fxp - 2 * f0 + fxm) / (h * h);
    const Matrix dt = (ftp - ftm) / (2 * h);
    EXPECT_LT(testutil::rel_diff(j.dx.value(), dx), 1e-6);
    EXPECT_LT(testutil::rel_diff(j.dt.value(), dt), 1e-6);
    EXPECT_LT(testutil::rel_diff(j.dxx.value(), dxx), 1e-5);
  }
}

TEST(ForwardJet, PartialLayoutsAgreeWithFull) {
  std::mt19937_64 rng(4);
  const auto net = constants(init_params(MlpArch{2, 2, 9, 3}, 5));
  const Matrix pts = points(rng, 7);
  const auto full = forward_jet(net, pts, JetLayout::full(0));
  const auto dt_only = forward_jet(net, pts, JetLayout{0, false, false, true});
  const auto dx_only = forward_jet(net, pts, JetLayout{0, true, false, false});
  EXPECT_LT((full.value.value() - dt_only.value.value()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((full.dt.value() - dt_only.dt.value()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((full.dx.value() - dx_only.dx.value()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_FALSE(dt_only.dx.defined());
}

TEST(ForwardJet, RejectsBadInput) {
  const auto net = constants(init_params(MlpArch{2, 1, 4, 2}, 0));
  EXPECT_THROW(forward_jet(net, Matrix::Zero(3, 3), JetLayout::full(0)), diff::ShapeError);
  Matrix bad = Matrix::Zero(2, 2);
  bad(1, 0) = std::nan("");
  EXPECT_THROW(forward_jet(net, bad, JetLayout::full(0)), diff::NonFiniteError);
  const auto copilot = constants(init_params(MlpArch{1, 1, 4, 2}, 0));
  EXPECT_THROW(forward_jet(copilot, Matrix::Zero(2, 2), JetLayout::full(0)), diff::ShapeError);
}

TEST(CopilotJet, ZeroWeightsGiveConstant) {
  auto p = init_params(MlpArch{1, 1, 5, 2}, 0);
  for (auto& w : p.weights) w.setZero();
  p.biases.back()(0, 0) = 0.75;
  const Matrix t = Eigen::VectorXd::LinSpaced(6, 0.0, 1.0);
  const auto j = copilot_jet(constants(p), t);
  for (Eigen::Index i = 0; i < 6; ++i) {
    EXPECT_EQ(j.value(i, 0), 0.75);
    EXPECT_EQ(j.dt(i, 0), 0.0);
  }
}

TEST(CopilotJet, NearLinearCopilot) {
  // One hidden neuron in its linear regime: R = 1 + (a / k) tanh(k t) ~ 1 + a t.
  MlpParams p;
  p.arch = {1, 1, 1, 1};
  const double k = 1e-4, a = 0.5;
  p.weights = {Matrix{{k}}, Matrix{{a / k}}};
  p.biases = {Matrix{{0.0}}, Matrix{{1.0}}};
  const Matrix t = Eigen::VectorXd::LinSpaced(5, 0.0, 1.0);
  const auto j = copilot_jet(constants(p), t);
  for (Eigen::Index i = 0; i < 5; ++i) {
    EXPECT_NEAR(j.value(i, 0), 1.0 + a * t(i, 0), 1e-8);
    EXPECT_NEAR(j.dt(i, 0), a, 1e-8);
  }
}

TEST(CopilotJet, MatchesFiniteDifferences) {
  const auto net = constants(init_params(MlpArch{1, 1, 10, 2}, 8));
  const Matrix t = Eigen::VectorXd::LinSpaced(9, 0.0, 1.5);
  const auto j = copilot_jet(net, t);
  const double h = 1e-5;
  const Matrix fp = copilot_jet(net, (t.array() + h).matrix(), false).value.value();
  const Matrix fm = copilot_jet(net, (t.array() - h).matrix(), false).value.value();
  EXPECT_LT(testutil::rel_diff(j.dt.value(), (fp - fm) / (2 * h)), 1e-6);
}

TEST(SidecarEval, IdentityCopilotGivesPrimaryJet) {
  auto m = init_model(ModelArch{MlpArch{2, 2, 8, 3}, MlpArch{1, 1, 4, 2}}, 3);
  for (auto& w : m.copilot->weights) w.setZero();
  m.copilot->biases.back()(0, 0) = 1.0;
  std::mt19937_64 rng(5);
  const Matrix pts = points(rng, 12);
  const auto s = sidecar_eval(constants(m), pts, JetLayout::full(0));
  for (const auto& [u, v] : {std::pair{s.u.value, s.v.value}, {s.u.dx, s.v.dx}, {s.u.dxx, s.v.dxx}, {s.u.dt, s.v.dt}}) {
    EXPECT_TRUE(testutil::bitwise_equal(u.value(), v.value()));
  }
}

TEST(SidecarEval, ScalesByR) {
  SidecarModel m;
  m.primary.arch = {2, 2, 1, 1};
  m.primary.weights = {Matrix::Zero(1, 2), Matrix::Zero(2, 1)};
  m.primary.biases = {Matrix::Zero(1, 1), Matrix{{0.3, -0.4}}};
  MlpParams r;
  r.arch = {1, 1, 1, 1};
  r.weights = {Matrix::Zero(1, 1), Matrix::Zero(1, 1)};
  r.biases = {Matrix::Zero(1, 1), Matrix{{2.0}}};
  m.copilot = r;
  const auto s = sidecar_eval(constants(m), Matrix{{0.1, 0.2}}, JetLayout::value_only(0));
  EXPECT_NEAR(s.u.value(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(s.u.value(0, 1), -0.8, 1e-15);
}

TEST(SidecarEval, ProductRuleInvariant) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const auto m = init_model(ModelArch{MlpArch{2, 2, 9, 3}, MlpArch{1, 1, 5, 2}}, 20 + trial);
    const auto net = constants(m);
    const Matrix pts = points(rng, 11);
    const auto s = sidecar_eval(net, pts, JetLayout::full(0));
    const auto v = forward_jet(net.primary, pts, JetLayout::full(0));
    const auto r = copilot_jet(*net.copilot, pts.col(1));
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      for (Eigen::Index c = 0; c < 2; ++c) {
        const double R = r.value(i, 0), Rt = r.dt(i, 0);
        EXPECT_DOUBLE_EQ(s.u.value(i, c), R * v.value(i, c));
        EXPECT_DOUBLE_EQ(s.u.dx(i, c), R * v.dx(i, c));
        EXPECT_DOUBLE_EQ(s.u.dxx(i, c), R * v.dxx(i, c));
        EXPECT_NEAR(s.u.dt(i, c), Rt * v.value(i, c) + R * v.dt(i, c), 1e-14);
      }
    }
  }
}

TEST(SidecarEval, CombinedTimeDerivativeMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const auto net = constants(init_model(ModelArch{MlpArch{2, 2, 10, 3}, MlpArch{1, 1, 6, 2}}, 4));
  const Matrix pts = points(rng, 9);
  const auto s = sidecar_eval(net, pts, JetLayout::full(0));
  const double h = 1e-5;
  Matrix p1 = pts, p2 = pts;
  p1.col(1).array() += h;
  p2.col(1).array() -= h;
  const Matrix up = sidecar_eval(net, p1, JetLayout::value_only(0)).u.value.value();
  const Matrix um = sidecar_eval(net, p2, JetLayout::value_only(0)).u.value.value();
  EXPECT_LT(testutil::rel_diff(s.u.dt.value(), (up - um) / (2 * h)), 1e-6);
}

TEST(SidecarEval, GradientsReachBothNetworks) {
  const auto m = init_model(ModelArch{MlpArch{2, 1, 6, 2}, MlpArch{1, 1, 4, 2}}, 11);
  diff::Tape tape;
  const auto bound = bind(tape, m);
  std::mt19937_64 rng(8);
  const auto s = sidecar_eval(bound, points(rng, 5), JetLayout::full(0));
  const Tensor loss = diff::sum(diff::square(s.u.dt));
  const auto grads = tape.gradient(loss, bound.parameters());
  double primary = 0.0, copilot = 0.0;
  const std::size_t np = 2 * m.primary.weights.size();
  for (std::size_t i = 0; i < grads.size(); ++i) (i < np ? primary : copilot) += grads[i].norm();
  EXPECT_GT(primary, 0.0);
  EXPECT_GT(copilot, 0.0);
}

TEST(EquivalentWidth, TableInstances) {
  EXPECT_EQ(equivalent_width(50, 4, 10, 2), 55);
  EXPECT_EQ(equivalent_width(64, 4, 16, 2), 72);
  EXPECT_EQ(equivalent_width(400, 4, 10, 2), 405);
  EXPECT_EQ(equivalent_width(16, 4, 10, 2), 21);
  EXPECT_EQ(equivalent_width(128, 6, 32, 1), 133);  // 128 + 5.33
  EXPECT_THROW(equivalent_width(0, 4, 10, 2), std::invalid_argument);
}

TEST(EquivalentWidth, SidecarHasFewerParametersThanVanilla) {
  struct Cfg { int wv, lv, wr, lr, out; };
  for (const Cfg c : {Cfg{50, 4, 10, 2, 2}, Cfg{100, 4, 10, 2, 2}, Cfg{200, 4, 10, 2, 2}, Cfg{400, 4, 10, 2, 2},
                      Cfg{64, 4, 16, 2, 1}, Cfg{128, 4, 16, 2, 1}, Cfg{256, 4, 16, 2, 1}}) {
    const std::size_t sidecar = parameter_count(MlpArch{2, c.out, c.wv, c.lv}) + parameter_count(MlpArch{1, 1, c.wr, c.lr});
    const int eq = equivalent_width(c.wv, c.lv, c.wr, c.lr);
    EXPECT_LT(sidecar, parameter_count(MlpArch{2, c.out, eq, c.lv})) << c.wv;
  }
}

TEST(ModelFile, RoundTripIsBitExact) {
  const auto m = init_model(ModelArch{MlpArch{2, 2, 7, 3}, MlpArch{1, 1, 4, 2}}, 12);
  const auto path = temp_path("roundtrip.bin");
  save_model(m, path);
  const auto back = load_model(path);
  ASSERT_TRUE(back.copilot.has_value());
  EXPECT_EQ(back.arch(), m.arch());
  const auto a = m.parameters();
  const auto b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(testutil::bitwise_equal(*a[i], *b[i]));
  std::remove(path.c_str());
}

TEST(ModelFile, CorruptionIsDetected) {
  const auto m = init_model(ModelArch{MlpArch{2, 1, 5, 2}, std::nullopt}, 13);
  const auto path = temp_path("corrupt.bin");
  save_model(m, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    const char junk = 0x5a;
    f.write(&junk, 1);
  }
  EXPECT_THROW(load_model(path), io::FormatError);
  std::remove(path.c_str());
  EXPECT_THROW(load_model(temp_path("missing.bin")), std::exception);
}
