#pragma once

// Adam and the two-stage training procedure: stage 1 trains both networks on
// the solver loss alone, stage 2 adds alpha * L_R with integrals refreshed
// every epoch from a detached copy of the primary network.

#include "sidecar/binary_io.hpp"
#include "sidecar/diffcore.hpp"
#include "sidecar/losses.hpp"
#include "sidecar/models.hpp"
#include "sidecar/problems.hpp"
#include "sidecar/quadrature.hpp"
#include "sidecar/reference.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sidecar::training {

using diff::Matrix;
using diff::Tensor;

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t step = 0;

  static AdamState like(const std::vector<const Matrix*>& params) {
    AdamState s;
    for (const Matrix* p : params) {
      s.m.push_back(Matrix::Zero(p->rows(), p->cols()));
      s.v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
    return s;
  }
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update, parameters visited in the given order.
/// Nothing is modified when a gradient is not finite.
inline void adam_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads, AdamState& s,
                      double lr, const AdamHyper& h = {}) {
  if (params.size() != grads.size() || params.size() != s.m.size() || params.size() != s.v.size()) {
    throw diff::ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params[i]->rows() || grads[i].cols() != params[i]->cols() ||
        s.m[i].rows() != params[i]->rows() || s.m[i].cols() != params[i]->cols()) {
      throw diff::ShapeError("adam_step: shape mismatch at parameter " + std::to_string(i));
    }
    if (!diff::all_finite(grads[i])) {
      throw diff::NonFiniteError("adam_step: non-finite gradient at parameter " + std::to_string(i));
    }
  }
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = grads[i];
    Matrix& m = s.m[i];
    Matrix& v = s.v[i];
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double gk = g.data()[k];
      m.data()[k] = h.beta1 * m.data()[k] + (1.0 - h.beta1) * gk;
      v.data()[k] = h.beta2 * v.data()[k] + (1.0 - h.beta2) * gk * gk;
      const double mhat = m.data()[k] / c1;
      const double vhat = v.data()[k] / c2;
      p.data()[k] -= lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Configuration

/// lr(epoch) = initial * decay^floor(epoch / decay_every); decay_every = 0 keeps it constant.
struct LrSchedule {
  double initial = 1e-3;
  double decay = 0.9;
  int decay_every = 5000;

  double at(long long epoch) const {
    if (decay_every <= 0) return initial;
    return initial * std::pow(decay, static_cast<double>(epoch / decay_every));
  }
};

struct TrainConfig {
  int k1 = 0;
  int k2 = 0;
  double alpha = 1.0;
  LrSchedule lr;
  AdamHyper adam;
  std::uint64_t seed = 0;
  std::optional<double> causal_pde;
  std::optional<double> causal_structure;
  std::optional<problems::LawId> law;
  int eval_every = 1000;
  int quad_level = 9;

  int total_epochs() const { return k1 + k2; }

  void validate() const {
    if (k1 < 0 || k2 < 0) throw std::invalid_argument("epoch counts must be nonnegative");
    if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be nonnegative");
    if (!(lr.initial > 0.0) || !(lr.decay > 0.0) || lr.decay_every < 0) {
      throw std::invalid_argument("invalid learning-rate schedule");
    }
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) ||
        !(adam.eps > 0.0)) {
      throw std::invalid_argument("invalid Adam hyper-parameters");
    }
    if ((causal_pde && !(*causal_pde >= 0.0)) || (causal_structure && !(*causal_structure >= 0.0))) {
      throw std::invalid_argument("causal epsilon must be nonnegative");
    }
    if (eval_every < 1) throw std::invalid_argument("eval_every must be positive");
    if (quad_level < 1 || quad_level > 20) throw std::invalid_argument("quad_level must be in [1, 20]");
  }

  /// Epoch budgets of the full-size experiments.
  static TrainConfig table1(problems::ProblemId id) {
    TrainConfig c;
    if (id == problems::ProblemId::Nls1d) {
      c.k1 = 100000;
      c.k2 = 20000;
      c.law = problems::LawId::NlsMass;
    } else {
      c.k1 = 180000;
      c.k2 = 20000;
      c.law = problems::LawId::AcEnergy;
    }
    return c;
  }
};

enum class Objective { Pinn, Fit };

struct TrainSetup {
  problems::ProblemSpec problem = problems::ProblemSpec::nls1d();
  losses::CollocationSizes sizes;
  Objective objective = Objective::Pinn;
  int fit_points = 32000;
  std::string run_id = "run";
};

/// One evaluation row. Fit runs store the fitting loss in l_solver and leave
/// the residual components at zero.
struct MetricsRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  int width = 0;
  int epoch = 0;
  int stage = 1;
  double l_solver = 0.0;
  double l_pde = 0.0;
  double l_ic = 0.0;
  double l_bc = 0.0;
  double l_r = 0.0;
  double rel_l2_error = 0.0;
  double structure_linf_error = 0.0;
  double r0 = 1.0;
  double wall_clock_seconds = 0.0;
};

struct EpochLosses {
  int epoch = 0;
  int stage = 1;
  double total = 0.0;
  double solver = 0.0;
  double pde = 0.0;
  double ic = 0.0;
  double bc = 0.0;
  double l_r = 0.0;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int epoch, const std::string& what)
      : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

// ---------------------------------------------------------------------------
// Evaluation grid (2x refined in each dimension)

struct EvalGrid {
  Matrix points;  // (x, t) rows
  Matrix truth;
  std::vector<double> times;
  std::vector<double> q_true;
};

inline EvalGrid make_eval_grid(const problems::ProblemSpec& p, const losses::CollocationSizes& sizes,
                               const problems::StructureLaw* law, const reference::Reference& ref,
                               int quad_level) {
  EvalGrid g;
  const int nx = 2 * sizes.n_x;
  const int nt = 2 * (sizes.n_t - 1) + 1;
  const double hx = p.length() / nx;
  const losses::TimeGrid tg(p.horizon, nt - 1);
  g.times = tg.times();
  g.points.resize(static_cast<Eigen::Index>(nx) * nt, 2);
  for (int n = 0; n < nt; ++n) {
    for (int i = 0; i < nx; ++i) {
      g.points(n * nx + i, 0) = p.x_min + (i + 0.5) * hx;
      g.points(n * nx + i, 1) = g.times[static_cast<std::size_t>(n)];
    }
  }
  g.truth = ref.values(g.points);
  if (law != nullptr) {
    quadrature::UncountedScope uncounted;
    g.q_true = ref.quantity(*law, g.times, quadrature::QuadratureGrid(p.x_min, p.x_max, quad_level));
  }
  return g;
}

/// Q of the composed network at each time of `times`.
inline std::vector<double> model_quantity(const models::SidecarModel& model, const problems::ProblemSpec& p,
                                          const problems::StructureLaw& law, std::span<const double> times,
                                          int quad_level) {
  quadrature::UncountedScope uncounted;
  const quadrature::QuadratureGrid grid(p.x_min, p.x_max, quad_level);
  const auto xs = grid.points();
  const auto m = static_cast<Eigen::Index>(xs.size());
  const auto nt = static_cast<Eigen::Index>(times.size());
  Matrix pts(m * nt, 2);
  for (Eigen::Index n = 0; n < nt; ++n) {
    for (Eigen::Index i = 0; i < m; ++i) {
      pts(n * m + i, 0) = xs[static_cast<std::size_t>(i)];
      pts(n * m + i, 1) = times[static_cast<std::size_t>(n)];
    }
  }
  const auto jet = models::sidecar_eval(models::constants(model), pts, diff::JetLayout{0, true, false, false});
  std::vector<double> q;
  q.reserve(times.size());
  for (Eigen::Index n = 0; n < nt; ++n) {
    problems::GridSlice s;
    s.value = jet.u.value.value().middleRows(n * m, m);
    s.dx = jet.u.dx.value().middleRows(n * m, m);
    q.push_back(problems::quantity(law.id, p, s, grid));
  }
  return q;
}

// ---------------------------------------------------------------------------
// Trainer

using RecordSink = std::function<void(const MetricsRecord&)>;

class Trainer {
 public:
  Trainer(models::SidecarModel model, TrainSetup setup, TrainConfig config,
          std::shared_ptr<const reference::Reference> ref)
      : model_(std::move(model)), setup_(std::move(setup)), cfg_(config), ref_(std::move(ref)),
        rng_(config.seed ^ 0x5eedf17da7a5e7ull) {
    cfg_.validate();
    if (!ref_) throw std::invalid_argument("trainer requires a reference solution");
    if (ref_->problem().id != setup_.problem.id) throw std::invalid_argument("reference is for another problem");
    if (model_.primary.arch.input_dim != 2 || model_.primary.arch.output_dim != setup_.problem.channels()) {
      throw diff::ShapeError("primary network does not match the problem");
    }
    if (cfg_.law) {
      quadrature::UncountedScope uncounted;
      law_ = problems::make_law(*cfg_.law, setup_.problem, cfg_.quad_level);
    }
    if (setup_.objective == Objective::Pinn && cfg_.k2 > 0 && cfg_.alpha > 0.0) {
      if (!model_.copilot) throw std::invalid_argument("stage 2 with alpha > 0 requires a copilot network");
      if (!law_) throw std::invalid_argument("stage 2 with alpha > 0 requires a structure law");
    }
    state_ = AdamState::like(std::as_const(model_).parameters());
    if (setup_.objective == Objective::Pinn) {
      colloc_ = losses::make_collocation(setup_.problem, setup_.sizes);
    } else {
      draw_fit_data();
    }
    eval_ = make_eval_grid(setup_.problem, setup_.sizes, law_ ? &*law_ : nullptr, *ref_, cfg_.quad_level);
    start_ = std::chrono::steady_clock::now();
  }

  int epoch() const { return epoch_; }
  int total_epochs() const { return cfg_.total_epochs(); }
  bool done() const { return epoch_ >= total_epochs() && final_recorded_; }
  int stage_at(int e) const { return (e < cfg_.k1 || cfg_.k2 == 0) ? 1 : 2; }
  int stage() const { return stage_at(std::min(epoch_, std::max(total_epochs() - 1, 0))); }
  double active_alpha() const { return stage() == 2 ? cfg_.alpha : 0.0; }
  const models::SidecarModel& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const AdamState& adam_state() const { return state_; }
  const std::vector<EpochLosses>& history() const { return history_; }
  const std::optional<problems::StructureLaw>& law() const { return law_; }
  int width() const { return model_.primary.arch.width; }

  /// Trains until `stop_epoch` (default: the full budget); the final
  /// parameters are evaluated and recorded once the budget is exhausted.
  void run(const RecordSink& sink, std::optional<int> stop_epoch = std::nullopt) {
    const int stop = std::min(stop_epoch.value_or(total_epochs()), total_epochs());
    while (epoch_ < stop) iterate(sink, true);
    if (epoch_ >= total_epochs() && !final_recorded_) {
      iterate(sink, false);
      final_recorded_ = true;
    }
  }

  MetricsRecord evaluate(const EpochLosses& l) const {
    MetricsRecord r;
    r.run_id = setup_.run_id;
    r.seed = cfg_.seed;
    r.width = width();
    r.epoch = l.epoch;
    r.stage = l.stage;
    r.l_solver = l.solver;
    r.l_pde = l.pde;
    r.l_ic = l.ic;
    r.l_bc = l.bc;
    r.l_r = l.l_r;
    const auto constant = models::constants(model_);
    const auto u = models::sidecar_eval(constant, eval_.points, diff::JetLayout::value_only(0));
    r.rel_l2_error = reference::rel_l2_error(u.u.value.value(), eval_.truth);
    if (law_) {
      const auto q = model_quantity(model_, setup_.problem, *law_, eval_.times, cfg_.quad_level);
      r.structure_linf_error = reference::structure_linf_error(q, eval_.q_true);
    }
    if (constant.copilot) {
      Matrix t0 = Matrix::Zero(1, 1);
      r.r0 = models::copilot_jet(*constant.copilot, t0, false).value.item();
    }
    r.wall_clock_seconds = elapsed_before_ + seconds_since(start_);
    return r;
  }

  // Checkpoint container "SIDECARC" v1 payload:
  //   model (as in the model file) | u64 epoch | u32 stage | f64 active alpha |
  //   u32 final_recorded | u64 adam step | u64 count | count x (m, v) matrices |
  //   string rng state | f64 elapsed seconds
  static constexpr char kMagic[] = "SIDECARC";
  static constexpr std::uint32_t kVersion = 1;

  void save_checkpoint(const std::string& path) const {
    io::Writer w(std::string_view(kMagic, 8), kVersion);
    models::write_model(w, model_);
    w.put_u64(static_cast<std::uint64_t>(epoch_));
    w.put_u32(static_cast<std::uint32_t>(stage()));
    w.put_f64(active_alpha());
    w.put_u32(final_recorded_ ? 1u : 0u);
    w.put_u64(state_.step);
    w.put_u64(state_.m.size());
    for (std::size_t i = 0; i < state_.m.size(); ++i) {
      w.put_matrix(state_.m[i]);
      w.put_matrix(state_.v[i]);
    }
    std::ostringstream rng;
    rng << rng_;
    w.put_string(rng.str());
    w.put_f64(elapsed_before_ + seconds_since(start_));
    w.save(path);
  }

  /// Restores a checkpoint written by a trainer with the same setup and
  /// configuration. The whole file is validated before any state changes.
  void load_checkpoint(const std::string& path) {
    io::Reader r(path, std::string_view(kMagic, 8), kVersion);
    auto model = models::read_model(r);
    const auto epoch = static_cast<int>(r.get_u64());
    const auto stage = static_cast<int>(r.get_u32());
    const double alpha = r.get_f64();
    const bool final_recorded = r.get_u32() != 0;
    AdamState st;
    st.step = r.get_u64();
    const auto count = r.get_u64();
    for (std::uint64_t i = 0; i < count; ++i) {
      st.m.push_back(r.get_matrix());
      st.v.push_back(r.get_matrix());
    }
    std::istringstream rng_text(r.get_string());
    std::mt19937_64 rng;
    rng_text >> rng;
    const double elapsed = r.get_f64();
    if (!r.at_end() || rng_text.fail()) throw io::FormatError(path + ": malformed checkpoint");

    const auto own = model_.arch();
    const auto got = model.arch();
    const auto same = [](const models::MlpArch& a, const models::MlpArch& b) {
      return a.input_dim == b.input_dim && a.output_dim == b.output_dim && a.width == b.width && a.depth == b.depth;
    };
    if (!same(own.primary, got.primary) || own.copilot.has_value() != got.copilot.has_value() ||
        (own.copilot && !same(*own.copilot, *got.copilot))) {
      throw io::FormatError(path + ": checkpoint architecture does not match the trainer");
    }
    const auto params = std::as_const(model).parameters();
    if (count != params.size()) throw io::FormatError(path + ": optimizer state does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (st.m[i].rows() != params[i]->rows() || st.m[i].cols() != params[i]->cols() ||
          st.v[i].rows() != params[i]->rows() || st.v[i].cols() != params[i]->cols()) {
        throw io::FormatError(path + ": optimizer state does not match the model");
      }
    }
    if (epoch < 0 || epoch > total_epochs() || stage != stage_at(std::min(epoch, std::max(total_epochs() - 1, 0)))) {
      throw io::FormatError(path + ": checkpoint epoch is inconsistent with this configuration");
    }
    if (alpha != (stage == 2 ? cfg_.alpha : 0.0)) {
      throw io::FormatError(path + ": checkpoint alpha is inconsistent with this configuration");
    }

    model_ = std::move(model);
    epoch_ = epoch;
    final_recorded_ = final_recorded;
    state_ = std::move(st);
    rng_ = rng;
    elapsed_before_ = elapsed;
    start_ = std::chrono::steady_clock::now();
    history_.clear();
  }

 private:
  static double seconds_since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
  }

  bool is_eval_epoch(int e) const { return e % cfg_.eval_every == 0 || e == total_epochs(); }

  void draw_fit_data() {
    const auto& p = setup_.problem;
    if (setup_.fit_points < 1) throw std::invalid_argument("fit objective needs at least one point");
    fit_points_.resize(setup_.fit_points, 2);
    for (int i = 0; i < setup_.fit_points; ++i) {
      fit_points_(i, 0) = p.x_min + p.length() * models::unit_uniform(rng_);
      fit_points_(i, 1) = p.horizon * models::unit_uniform(rng_);
    }
    fit_values_ = ref_->values(fit_points_);
  }

  /// Loss at the current parameters, then (if `update`) one Adam step.
  void iterate(const RecordSink& sink, bool update) {
    const int e = epoch_;
    const int st = stage_at(update ? e : std::max(e - 1, 0));
    EpochLosses l;
    l.epoch = e;
    l.stage = st;
    try {
      diff::Tape tape;
      const auto bound = models::bind(tape, model_);
      Tensor objective;
      if (setup_.objective == Objective::Fit) {
        const auto u = models::sidecar_eval(bound, fit_points_, diff::JetLayout::value_only(0));
        objective = losses::fit_loss(u.u.value, fit_values_);
        l.solver = objective.item();
      } else {
        losses::TotalLossOptions opts;
        opts.alpha = st == 2 ? cfg_.alpha : 0.0;
        opts.causal_pde = cfg_.causal_pde;
        opts.causal_structure = cfg_.causal_structure;
        opts.quad_level = cfg_.quad_level;
        const auto tl = losses::total_loss(bound, setup_.problem, law_ ? &*law_ : nullptr, colloc_, opts);
        objective = tl.total;
        l.solver = tl.solver.total.item();
        l.pde = tl.solver.pde.item();
        l.ic = tl.solver.ic.item();
        l.bc = tl.solver.bc.item();
        if (tl.structure) l.l_r = tl.structure->item();
      }
      l.total = objective.item();
      history_.push_back(l);
      if (is_eval_epoch(e) && sink) sink(evaluate(l));
      if (update) {
        const auto grads = tape.gradient(objective, bound.parameters());
        adam_step(model_.parameters(), grads, state_, cfg_.lr.at(e), cfg_.adam);
        ++epoch_;
      }
    } catch (const diff::NonFiniteError& err) {
      throw DivergenceError(e, err.what());
    }
  }

  models::SidecarModel model_;
  TrainSetup setup_;
  TrainConfig cfg_;
  std::shared_ptr<const reference::Reference> ref_;
  std::mt19937_64 rng_;
  std::optional<problems::StructureLaw> law_;
  losses::CollocationSets colloc_;
  Matrix fit_points_;
  Matrix fit_values_;
  EvalGrid eval_;
  AdamState state_;
  std::vector<EpochLosses> history_;
  int epoch_ = 0;
  bool final_recorded_ = false;
  double elapsed_before_ = 0.0;
  std::chrono::steady_clock::time_point start_;
};

struct TrainResult {
  models::SidecarModel model;
  std::vector<MetricsRecord> records;
  std::vector<EpochLosses> history;
};

inline TrainResult run_two_stage(models::SidecarModel model, const TrainSetup& setup, const TrainConfig& config,
                                 std::shared_ptr<const reference::Reference> ref) {
  Trainer t(std::move(model), setup, config, std::move(ref));
  TrainResult out;
  t.run([&](const MetricsRecord& r) { out.records.push_back(r); });
  out.model = t.model();
  out.history = t.history();
  return out;
}

}  // namespace sidecar::training
