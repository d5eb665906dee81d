#pragma once

// Invariant battery: finite-difference checks of every derivative channel and
// loss gradient, the soliton oracles, AC energy identities, the detachment
// contract and the finite-difference reference. Used by `sidecar check` and
// by the acceptance suite.

#include "sidecar/diffcore.hpp"
#include "sidecar/losses.hpp"
#include "sidecar/models.hpp"
#include "sidecar/problems.hpp"
#include "sidecar/quadrature.hpp"
#include "sidecar/reference.hpp"
#include "sidecar/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace sidecar::checks {

using diff::Matrix;
using diff::Tensor;

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

template <class F>
CheckResult timed(const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r{name, false, "", 0.0};
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Richardson-extrapolated central differences (O(h^4)).
inline double first_derivative(const std::function<double(double)>& f, double h) {
  auto d = [&](double s) { return (f(s) - f(-s)) / (2.0 * s); };
  return (4.0 * d(h / 2) - d(h)) / 3.0;
}

inline double second_derivative(const std::function<double(double)>& f, double h) {
  const double f0 = f(0.0);
  auto d = [&](double s) { return (f(s) - 2.0 * f0 + f(-s)) / (s * s); };
  return (4.0 * d(h / 2) - d(h)) / 3.0;
}

inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  if (den == 0.0) return std::sqrt(num);
  return std::sqrt(num / den);
}

/// Gradient of `loss` by finite differences in every entry of `params`.
inline std::vector<double> fd_gradient(const std::function<double()>& loss, const std::vector<Matrix*>& params,
                                       double h) {
  std::vector<double> g;
  for (Matrix* p : params) {
    for (Eigen::Index k = 0; k < p->size(); ++k) {
      const double saved = p->data()[k];
      g.push_back(first_derivative(
          [&](double s) {
            p->data()[k] = saved + s;
            const double v = loss();
            p->data()[k] = saved;
            return v;
          },
          h));
    }
  }
  return g;
}

inline std::vector<double> flatten(const std::vector<Matrix>& grads, std::size_t from = 0) {
  std::vector<double> out;
  for (std::size_t i = from; i < grads.size(); ++i) {
    out.insert(out.end(), grads[i].data(), grads[i].data() + grads[i].size());
  }
  return out;
}

inline Matrix random_points(std::mt19937_64& rng, int n, double x0, double x1, double t0, double t1) {
  Matrix p(n, 2);
  for (int i = 0; i < n; ++i) {
    p(i, 0) = x0 + (x1 - x0) * models::unit_uniform(rng);
    p(i, 1) = t0 + (t1 - t0) * models::unit_uniform(rng);
  }
  return p;
}

}  // namespace detail

/// Every derivative channel of forward_jet and sidecar_eval against
/// extrapolated central differences of the value channel.
inline CheckResult derivative_exactness(int nets = 60, double tol = 1e-6) {
  return detail::timed("derivative exactness", [&](CheckResult& out) {
    std::mt19937_64 rng(20240601);
    double worst = 0.0;
    for (int trial = 0; trial < nets; ++trial) {
      const int width = 3 + static_cast<int>(rng() % 10);
      const int depth = 1 + static_cast<int>(rng() % 4);
      const int channels = 1 + static_cast<int>(rng() % 2);
      models::ModelArch arch{{2, channels, width, depth}, std::nullopt};
      if (trial % 2 == 1) arch.copilot = models::MlpArch{1, 1, 2 + static_cast<int>(rng() % 8), 1 + static_cast<int>(rng() % 2)};
      const auto model = models::init_model(arch, rng());
      const auto bound = models::constants(model);
      const Matrix pts = detail::random_points(rng, 6, -2.0, 2.0, 0.0, 1.0);

      const auto jet = models::sidecar_eval(bound, pts, diff::JetLayout::full(0));
      const auto primary = models::forward_jet(bound.primary, pts, diff::JetLayout::full(0));
      auto value_at = [&](bool composed, Eigen::Index i, int c, double dx, double dt) {
        Matrix q = pts.row(i);
        q(0, 0) += dx;
        q(0, 1) += dt;
        if (composed) return models::sidecar_eval(bound, q, diff::JetLayout::value_only(0)).u.value.value()(0, c);
        return models::forward_jet(bound.primary, q, diff::JetLayout::value_only(0)).value.value()(0, c);
      };
      for (bool composed : {false, true}) {
        const models::Jet& j = composed ? jet.u : primary;
        std::vector<double> ad, fd;
        for (Eigen::Index i = 0; i < pts.rows(); ++i) {
          for (int c = 0; c < channels; ++c) {
            ad.push_back(j.dx.value()(i, c));
            fd.push_back(detail::first_derivative([&](double s) { return value_at(composed, i, c, s, 0.0); }, 1e-3));
            ad.push_back(j.dxx.value()(i, c));
            fd.push_back(detail::second_derivative([&](double s) { return value_at(composed, i, c, s, 0.0); }, 1e-2));
            ad.push_back(j.dt.value()(i, c));
            fd.push_back(detail::first_derivative([&](double s) { return value_at(composed, i, c, 0.0, s); }, 1e-3));
          }
        }
        worst = std::max(worst, detail::rel_error(ad, fd));
      }
    }
    out.passed = worst < tol;
    out.detail = std::to_string(nets) + " nets, max relative error " + detail::fmt(worst) + " (tol " + detail::fmt(tol) + ")";
  });
}

/// Autodiff parameter gradients of every loss against finite differences.
inline CheckResult gradient_exactness(double tol = 1e-5) {
  return detail::timed("gradient exactness", [&](CheckResult& out) {
    std::mt19937_64 rng(77);
    double worst = 0.0;
    std::vector<std::string> parts;
    auto record = [&](const std::string& name, const std::vector<double>& ad, const std::vector<double>& fd) {
      const double e = detail::rel_error(ad, fd);
      worst = std::max(worst, e);
      parts.push_back(name + " " + detail::fmt(e));
    };

    for (auto problem : {problems::ProblemSpec::nls1d(), problems::ProblemSpec::ac1d()}) {
      const int ch = problem.channels();
      auto model = models::init_model({{2, ch, 6, 2}, models::MlpArch{1, 1, 5, 2}}, rng());
      const auto colloc = losses::make_collocation(problem, {6, 3, 5, 3});
      auto solver_value = [&] { return losses::solver_loss(models::constants(model), problem, colloc).total.item(); };
      diff::Tape tape;
      const auto bound = models::bind(tape, model);
      const auto loss = losses::solver_loss(bound, problem, colloc).total;
      record("solver/" + problems::to_string(problem.id), detail::flatten(tape.gradient(loss, bound.parameters())),
             detail::fd_gradient(solver_value, model.parameters(), 1e-4));
    }

    // Structure losses: integrals are constants, so differentiate w.r.t. the copilot only.
    for (auto law_id : {problems::LawId::NlsMass, problems::LawId::NlsMomentum, problems::LawId::AcEnergy}) {
      const auto problem = law_id == problems::LawId::AcEnergy ? problems::ProblemSpec::ac1d()
                                                                : problems::ProblemSpec::nls1d();
      auto model = models::init_model({{2, problem.channels(), 8, 2}, models::MlpArch{1, 1, 8, 2}}, rng());
      const auto law = problems::make_law(law_id, problem, 6);
      const losses::TimeGrid tg(problem.horizon, 4);
      const auto integrals = losses::structure_integrals(models::constants(model).primary, problem, law, tg, 6);
      Matrix tcol(tg.nodes(), 1);
      for (int n = 0; n < tg.nodes(); ++n) tcol(n, 0) = tg.node(n);
      auto eval = [&](const models::BoundMlp& copilot) {
        const Tensor r = models::copilot_jet(copilot, tcol, false).value;
        if (law.kind == problems::LawKind::Conservative) {
          return losses::structure_loss_conservative(r, integrals.conserved, law.factored_target());
        }
        return losses::structure_loss_dissipative(r, integrals.energy, integrals.dissipation, tg.step(),
                                                  law.factored_target());
      };
      diff::Tape tape;
      const auto bound = models::bind(tape, model);
      const auto loss = eval(*bound.copilot);
      const auto grads = tape.gradient(loss, bound.parameters());
      std::vector<Matrix*> copilot_params;
      for (std::size_t l = 0; l < model.copilot->weights.size(); ++l) {
        copilot_params.push_back(&model.copilot->weights[l]);
        copilot_params.push_back(&model.copilot->biases[l]);
      }
      const std::size_t skip = model.primary.weights.size() * 2;
      record("structure/" + problems::to_string(law_id), detail::flatten(grads, skip),
             detail::fd_gradient([&] { return eval(*models::constants(model).copilot).item(); }, copilot_params, 1e-4));
    }

    {
      const auto problem = problems::ProblemSpec::nls1d();
      auto model = models::init_model({{2, 2, 8, 2}, models::MlpArch{1, 1, 6, 2}}, rng());
      const Matrix pts = detail::random_points(rng, 16, problem.x_min, problem.x_max, 0.0, problem.horizon);
      const Matrix target = reference::soliton_eval(pts).value;
      auto eval = [&](const models::BoundModel& m) {
        return losses::fit_loss(models::sidecar_eval(m, pts, diff::JetLayout::value_only(0)).u.value, target);
      };
      diff::Tape tape;
      const auto bound = models::bind(tape, model);
      const auto loss = eval(bound);
      record("fit", detail::flatten(tape.gradient(loss, bound.parameters())),
             detail::fd_gradient([&] { return eval(models::constants(model)).item(); }, model.parameters(), 1e-4));
    }

    out.passed = worst < tol;
    std::string d = "max relative error " + detail::fmt(worst) + " (tol " + detail::fmt(tol) + "):";
    for (const auto& p : parts) d += " " + p;
    out.detail = d;
  });
}

/// Exact soliton in the NLS residual on a 513 x 65 grid.
inline CheckResult soliton_residual(double tol = 1e-8) {
  return detail::timed("soliton residual", [&](CheckResult& out) {
    const auto p = problems::ProblemSpec::nls1d();
    const int nx = 513, nt = 65;
    Matrix pts(nx * nt, 2);
    for (int n = 0; n < nt; ++n) {
      for (int i = 0; i < nx; ++i) {
        pts(n * nx + i, 0) = p.x_min + p.length() * i / (nx - 1);
        pts(n * nx + i, 1) = p.horizon * n / (nt - 1);
      }
    }
    const auto s = reference::soliton_eval(pts);
    models::Jet j{Tensor(s.value), Tensor(s.dx), Tensor(s.dxx), Tensor(s.dt)};
    const double worst = problems::nls_residual(j).value().cwiseAbs().maxCoeff();
    out.passed = worst < tol;
    out.detail = "max |residual| " + detail::fmt(worst) + " (tol " + detail::fmt(tol) + ")";
  });
}

/// Soliton mass and momentum by Romberg at level 9 at several times.
inline CheckResult soliton_conservation(double tol = 1e-8) {
  return detail::timed("soliton conservation", [&](CheckResult& out) {
    const auto p = problems::ProblemSpec::nls1d();
    const auto ref = reference::Reference::nls(p);
    const quadrature::QuadratureGrid grid(p.x_min, p.x_max, 9);
    const std::vector<double> times{0.0, 0.3, 0.7, 1.1, 1.4, p.horizon};
    const auto mass = ref.quantity(problems::make_law(problems::LawId::NlsMass, p), times, grid);
    const auto mom = ref.quantity(problems::make_law(problems::LawId::NlsMomentum, p), times, grid);
    double worst = 0.0;
    for (std::size_t i = 0; i < times.size(); ++i) {
      worst = std::max(worst, std::abs(mass[i] - 2.0 * std::tanh(15.0)));
      worst = std::max(worst, std::abs(mom[i] + 4.0 * std::tanh(15.0)));
    }
    out.passed = worst < tol;
    out.detail = std::to_string(times.size()) + " times, max |error| " + detail::fmt(worst) + " (tol " +
                 detail::fmt(tol) + ")";
  });
}

/// Factored AC energy and dissipation against direct quadrature of R v.
inline CheckResult energy_identities(int instances = 24, double tol = 1e-9) {
  return detail::timed("energy identities", [&](CheckResult& out) {
    const auto p = problems::ProblemSpec::ac1d();
    const quadrature::QuadratureGrid grid(p.x_min, p.x_max, 9);
    const auto xs = grid.points();
    std::mt19937_64 rng(4242);
    double worst = 0.0;
    for (int k = 0; k < instances; ++k) {
      const auto net = models::init_params({2, 1, 4 + static_cast<int>(rng() % 8), 1 + static_cast<int>(rng() % 3)}, rng());
      const double t = models::unit_uniform(rng);
      const double r = 0.5 + models::unit_uniform(rng);
      const double rt = 2.0 * models::unit_uniform(rng) - 1.0;
      Matrix pts(static_cast<Eigen::Index>(xs.size()), 2);
      for (std::size_t i = 0; i < xs.size(); ++i) {
        pts(static_cast<Eigen::Index>(i), 0) = xs[i];
        pts(static_cast<Eigen::Index>(i), 1) = t;
      }
      const auto jet = models::forward_jet(models::constants(net), pts, diff::JetLayout{0, true, false, true});
      problems::GridSlice s{jet.value.value(), jet.dx.value(), jet.dt.value()};
      const auto e = problems::ac_energy_parts(s, p.epsilon, p.reaction, grid);
      const auto d = problems::ac_dissipation_parts(s, grid);
      const double factored = std::pow(r, 4) * e.quartic + r * r * e.quadratic + problems::ac_energy_offset(p);
      const double speed = rt * rt * d.rate_sq + r * r * d.value_sq + r * rt * d.cross;

      std::vector<double> fe(xs.size()), fs(xs.size());
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const double u = r * s.value(ii, 0);
        const double ux = r * s.dx(ii, 0);
        const double ut = rt * s.value(ii, 0) + r * s.dt(ii, 0);
        fe[i] = 0.5 * p.epsilon * p.epsilon * ux * ux + 0.25 * p.reaction * (u * u - 1.0) * (u * u - 1.0);
        fs[i] = -ut * ut;
      }
      worst = std::max(worst, std::abs(factored - quadrature::romberg(fe, grid)));
      worst = std::max(worst, std::abs(speed - quadrature::romberg(fs, grid)));
    }
    out.passed = worst < tol;
    out.detail = std::to_string(instances) + " instances, max |difference| " + detail::fmt(worst) + " (tol " +
                 detail::fmt(tol) + ")";
  });
}

/// dL_R / d(primary) is exactly zero, and stage 1 performs no quadrature.
inline CheckResult detachment_contract() {
  return detail::timed("detachment contract", [&](CheckResult& out) {
    bool zero = true;
    bool copilot_nonzero = true;
    for (auto law_id : {problems::LawId::NlsMass, problems::LawId::NlsMomentum, problems::LawId::AcEnergy}) {
      const auto problem = law_id == problems::LawId::AcEnergy ? problems::ProblemSpec::ac1d()
                                                                : problems::ProblemSpec::nls1d();
      const auto model = models::init_model({{2, problem.channels(), 8, 3}, models::MlpArch{1, 1, 6, 2}}, 11);
      const auto law = problems::make_law(law_id, problem, 7);
      diff::Tape tape;
      const auto bound = models::bind(tape, model);
      const auto loss = losses::structure_loss(bound, problem, law, losses::TimeGrid(problem.horizon, 6), 7);
      const auto grads = tape.gradient(loss, bound.parameters());
      const std::size_t n_primary = model.primary.weights.size() * 2;
      bool any_copilot = false;
      for (std::size_t i = 0; i < grads.size(); ++i) {
        if (i < n_primary && (grads[i].array() != 0.0).any()) zero = false;
        if (i >= n_primary && (grads[i].array() != 0.0).any()) any_copilot = true;
      }
      copilot_nonzero = copilot_nonzero && any_copilot;
    }

    const auto problem = problems::ProblemSpec::nls1d();
    training::TrainSetup setup;
    setup.problem = problem;
    setup.sizes = {8, 3, 8, 4};
    training::TrainConfig cfg;
    cfg.k1 = 3;
    cfg.k2 = 2;
    cfg.law = problems::LawId::NlsMass;
    cfg.quad_level = 6;
    cfg.eval_every = 1;
    training::Trainer t(models::init_model({{2, 2, 6, 2}, models::MlpArch{1, 1, 4, 2}}, 3), setup, cfg,
                        std::make_shared<reference::Reference>(reference::Reference::nls(problem)));
    const auto q0 = quadrature::evaluation_count();
    t.run({}, cfg.k1);
    const auto stage1 = quadrature::evaluation_count() - q0;
    t.run({});
    const auto stage2 = quadrature::evaluation_count() - q0 - stage1;

    out.passed = zero && copilot_nonzero && stage1 == 0 && stage2 > 0;
    out.detail = std::string("primary gradient ") + (zero ? "exactly zero" : "NONZERO") +
                 ", stage-1 quadrature evaluations " + std::to_string(stage1) + ", stage-2 " + std::to_string(stage2);
  });
}

/// FD reference: monotone discrete energy at the default resolution and
/// self-convergence at first order in dt and second order in dx.
inline CheckResult fd_reference_validity(int nx = 512, int nt = 10000) {
  return detail::timed("fd reference validity", [&](CheckResult& out) {
    const auto p = problems::ProblemSpec::ac1d();
    const auto f = reference::ac_fd_solve(p, nx, nt);
    double max_increase = -1e300;
    for (std::size_t n = 1; n < f.step_energy.size(); ++n) {
      max_increase = std::max(max_increase, f.step_energy[n] - f.step_energy[n - 1]);
    }
    const bool monotone = max_increase <= 1e-10;

    auto final_row = [](const reference::ReferenceField& r, int stride) {
      std::vector<double> v;
      for (Eigen::Index i = 0; i < r.values.cols(); i += stride) v.push_back(r.values(r.values.rows() - 1, i));
      return v;
    };
    auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
      double m = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
      return m;
    };
    // Time: nx fixed, dt halved twice.
    const int tx = 256;
    const auto t1 = final_row(reference::ac_fd_solve(p, tx, 1000, 1000), 1);
    const auto t2 = final_row(reference::ac_fd_solve(p, tx, 2000, 2000), 1);
    const auto t3 = final_row(reference::ac_fd_solve(p, tx, 4000, 4000), 1);
    const double order_t = std::log2(dist(t1, t2) / dist(t2, t3));
    // Space: dt small and fixed, dx halved twice; compare on the coarse nodes.
    const int sn = 4000;
    const auto x1 = final_row(reference::ac_fd_solve(p, 512, sn, sn), 1);
    const auto x2 = final_row(reference::ac_fd_solve(p, 1024, sn, sn), 2);
    const auto x3 = final_row(reference::ac_fd_solve(p, 2048, sn, sn), 4);
    const double order_x = std::log2(dist(x1, x2) / dist(x2, x3));

    const bool orders = std::abs(order_t - 1.0) < 0.25 && std::abs(order_x - 2.0) < 0.4;
    out.passed = monotone && orders;
    out.detail = "max per-step energy increase " + detail::fmt(max_increase) + " (tol 1e-10), observed order dt " +
                 detail::fmt(order_t) + ", dx " + detail::fmt(order_x);
  });
}

inline std::vector<CheckResult> run_invariant_battery() {
  return {derivative_exactness(), gradient_exactness(), soliton_residual(), soliton_conservation(),
          energy_identities(),    detachment_contract(), fd_reference_validity()};
}

}  // namespace sidecar::checks
