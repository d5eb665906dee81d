#pragma once

// Training objectives: PINN solver loss (optionally causal), conservative and
// dissipative structure losses over detached integrals, the combined Sidecar
// loss, and the plain fitting loss.

#include "sidecar/diffcore.hpp"
#include "sidecar/models.hpp"
#include "sidecar/problems.hpp"
#include "sidecar/quadrature.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace sidecar::losses {

using diff::Matrix;
using diff::Tensor;
using problems::ProblemSpec;
using problems::StructureLaw;

/// Uniform nodes t^n = n * T / N_T, n = 0..N_T.
struct TimeGrid {
  double horizon = 1.0;
  int intervals = 1;

  TimeGrid() = default;
  TimeGrid(double T, int n) : horizon(T), intervals(n) {
    if (!(T > 0.0)) throw std::invalid_argument("time horizon must be positive");
    if (n < 1) throw std::invalid_argument("time grid needs at least one interval");
  }

  int nodes() const { return intervals + 1; }
  double step() const { return horizon / intervals; }
  double node(int n) const { return n == intervals ? horizon : n * step(); }
  std::vector<double> times() const {
    std::vector<double> t(static_cast<std::size_t>(nodes()));
    for (int n = 0; n < nodes(); ++n) t[static_cast<std::size_t>(n)] = node(n);
    return t;
  }
};

struct CollocationSizes {
  int n_x = 512;   // spatial points per time slice
  int n_t = 128;   // time slices (N_T + 1)
  int n_ic = 512;
  int n_bc = 128;

  int n_pde() const { return n_x * n_t; }
};

/// Interior points are laid out slice-major: rows [n * n_x, (n + 1) * n_x)
/// all sit at t^n of `time_grid`.
struct CollocationSets {
  Matrix interior;              // (n_t * n_x) x 2
  Eigen::Index points_per_slice = 0;
  TimeGrid time_grid;
  Matrix ic_points;             // n_ic x 2, t = 0
  Matrix ic_values;             // n_ic x channels
  Matrix bc_points;             // 2 n_bc x 2: x_min rows, then x_max rows
  Eigen::Index bc_count = 0;

  Eigen::Index slices() const { return interior.rows() / points_per_slice; }
};

/// Equally spaced sets: cell-centred interior abscissae, IC points spanning
/// [x_min, x_max], BC times spanning [0, T].
inline CollocationSets make_collocation(const ProblemSpec& p, const CollocationSizes& sz) {
  if (sz.n_x < 1 || sz.n_t < 2 || sz.n_ic < 2 || sz.n_bc < 1) {
    throw std::invalid_argument("collocation sets must be nonempty (n_t >= 2, n_ic >= 2)");
  }
  CollocationSets c;
  c.time_grid = TimeGrid(p.horizon, sz.n_t - 1);
  c.points_per_slice = sz.n_x;
  c.interior.resize(static_cast<Eigen::Index>(sz.n_pde()), 2);
  const double hx = p.length() / sz.n_x;
  for (int n = 0; n < sz.n_t; ++n) {
    const double t = c.time_grid.node(n);
    for (int i = 0; i < sz.n_x; ++i) {
      const auto r = static_cast<Eigen::Index>(n) * sz.n_x + i;
      c.interior(r, 0) = p.x_min + (i + 0.5) * hx;
      c.interior(r, 1) = t;
    }
  }
  std::vector<double> xs(static_cast<std::size_t>(sz.n_ic));
  c.ic_points.resize(sz.n_ic, 2);
  for (int j = 0; j < sz.n_ic; ++j) {
    xs[static_cast<std::size_t>(j)] =
        j + 1 == sz.n_ic ? p.x_max : p.x_min + p.length() * j / (sz.n_ic - 1);
    c.ic_points(j, 0) = xs[static_cast<std::size_t>(j)];
    c.ic_points(j, 1) = 0.0;
  }
  c.ic_values = p.initial_condition(xs);
  c.bc_count = sz.n_bc;
  c.bc_points.resize(2 * sz.n_bc, 2);
  for (int k = 0; k < sz.n_bc; ++k) {
    const double t = sz.n_bc == 1 ? 0.0 : p.horizon * k / (sz.n_bc - 1);
    c.bc_points(k, 0) = p.x_min;
    c.bc_points(k, 1) = t;
    c.bc_points(sz.n_bc + k, 0) = p.x_max;
    c.bc_points(sz.n_bc + k, 1) = t;
  }
  return c;
}

/// w_n = exp(-eps * sum_{l<n} L^l). Returned as plain numbers: the weights
/// enter the loss as constants.
inline std::vector<double> causal_weights(std::span<const double> slice_losses, double epsilon) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("causal epsilon must be nonnegative");
  std::vector<double> w(slice_losses.size());
  double acc = 0.0;
  for (std::size_t n = 0; n < w.size(); ++n) {
    w[n] = std::exp(-epsilon * acc);
    acc += slice_losses[n];
  }
  return w;
}

namespace detail {

inline Tensor column(std::span<const double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = v[i];
  return Tensor(std::move(m));
}

inline std::vector<double> to_vector(const Tensor& col) {
  std::vector<double> v(static_cast<std::size_t>(col.rows()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = col(static_cast<Eigen::Index>(i), 0);
  return v;
}

// Mean over slices of w_n * L^n (w_n = 1 without causal weighting).
inline Tensor weighted_slice_mean(const Tensor& per_slice, std::optional<double> causal_epsilon,
                                  std::vector<double>* weights_out) {
  const auto values = to_vector(per_slice);
  std::vector<double> w = causal_epsilon ? causal_weights(values, *causal_epsilon)
                                         : std::vector<double>(values.size(), 1.0);
  Tensor weighted = causal_epsilon ? diff::mul(per_slice, column(w)) : per_slice;
  if (weights_out != nullptr) *weights_out = std::move(w);
  return diff::mean(weighted);
}

}  // namespace detail

struct SolverLoss {
  Tensor total;
  Tensor pde;
  Tensor ic;
  Tensor bc;
  std::vector<double> slice_losses;  // unweighted L_PDE^n
  std::vector<double> weights;       // causal weights (all 1 when disabled)
};

/// L_PDE + L_IC + L_BC on the combined output R * v.
///   L_PDE: mean over slices of w_n * (mean squared residual at t^n)
///   L_IC:  mean over IC points of |u(x, 0) - u0(x)|^2
///   L_BC:  mean over BC times of |u(a,t) - u(b,t)|^2 + |u_x(a,t) - u_x(b,t)|^2
inline SolverLoss solver_loss(const models::BoundModel& model, const ProblemSpec& problem,
                              const CollocationSets& colloc,
                              std::optional<double> causal_epsilon = std::nullopt) {
  using namespace diff;
  if (colloc.interior.rows() == 0 || colloc.ic_points.rows() == 0 || colloc.bc_points.rows() == 0) {
    throw std::invalid_argument("solver_loss: empty collocation set");
  }
  if (model.primary.arch.output_dim != problem.channels()) {
    throw ShapeError("solver_loss: network output does not match problem channels");
  }
  SolverLoss out;

  const auto interior = models::sidecar_eval(model, colloc.interior, JetLayout::full(0));
  const Tensor r = problems::residual(problem, interior.u);
  const Tensor per_slice = block_mean(row_sum(square(r)), colloc.points_per_slice);
  out.slice_losses = detail::to_vector(per_slice);
  out.pde = detail::weighted_slice_mean(per_slice, causal_epsilon, &out.weights);

  const auto ic = models::sidecar_eval(model, colloc.ic_points, JetLayout::value_only(0));
  out.ic = mean(row_sum(square(sub(ic.u.value, Tensor(colloc.ic_values)))));

  const auto bc = models::sidecar_eval(model, colloc.bc_points, JetLayout{0, true, false, false});
  const auto n = colloc.bc_count;
  const Tensor dv = sub(slice_rows(bc.u.value, 0, n), slice_rows(bc.u.value, n, n));
  const Tensor ddx = sub(slice_rows(bc.u.dx, 0, n), slice_rows(bc.u.dx, n, n));
  out.bc = mean(add(row_sum(square(dv)), row_sum(square(ddx))));

  out.total = add(add(out.pde, out.ic), out.bc);
  return out;
}

/// mean_n (R_n^2 I_n - C0)^2 (causally weighted when epsilon is given).
/// Gradient flows through R only.
inline Tensor structure_loss_conservative(const Tensor& r, std::span<const double> integrals, double c0,
                                          std::optional<double> causal_epsilon = std::nullopt) {
  using namespace diff;
  if (r.cols() != 1 || r.rows() != static_cast<Eigen::Index>(integrals.size())) {
    throw ShapeError("structure_loss_conservative: R and integrals are not aligned");
  }
  const Tensor residual = add_scalar(mul(square(r), detail::column(integrals)), -c0);
  return detail::weighted_slice_mean(square(residual), causal_epsilon, nullptr);
}

/// Backward-Euler residuals of the factored energy law
///   E^n = R_n^4 I_Q1^n + R_n^2 I_Q2^n
///   L^0 = (E^0 - C0)^2
///   L^{n+1} = ((E^{n+1} - E^n)/dt - S^{n+1})^2,
///   S^{n+1} = Rt^2 J_a^{n+1} + R_{n+1}^2 J_b^{n+1} + R_{n+1} Rt J_c^{n+1},  Rt = (R_{n+1} - R_n)/dt
/// averaged over n (causally weighted when epsilon is given).
inline Tensor structure_loss_dissipative(const Tensor& r,
                                         std::span<const problems::AcEnergyParts> energy,
                                         std::span<const problems::AcDissipationParts> dissipation,
                                         double dt, double c0,
                                         std::optional<double> causal_epsilon = std::nullopt) {
  using namespace diff;
  const auto n = static_cast<Eigen::Index>(energy.size());
  if (r.cols() != 1 || r.rows() != n || static_cast<Eigen::Index>(dissipation.size()) != n) {
    throw ShapeError("structure_loss_dissipative: R and integrals are not aligned");
  }
  if (!(dt > 0.0)) throw std::invalid_argument("structure_loss_dissipative: dt must be positive");

  std::vector<double> q1, q2, ja, jb, jc;
  for (Eigen::Index i = 0; i < n; ++i) {
    q1.push_back(energy[static_cast<std::size_t>(i)].quartic);
    q2.push_back(energy[static_cast<std::size_t>(i)].quadratic);
    ja.push_back(dissipation[static_cast<std::size_t>(i)].rate_sq);
    jb.push_back(dissipation[static_cast<std::size_t>(i)].value_sq);
    jc.push_back(dissipation[static_cast<std::size_t>(i)].cross);
  }
  const Tensor r2 = square(r);
  const Tensor energy_n = add(mul(square(r2), detail::column(q1)), mul(r2, detail::column(q2)));

  const Tensor first = square(add_scalar(slice_rows(energy_n, 0, 1), -c0));
  std::vector<Tensor> terms{first};
  if (n > 1) {
    auto tail = [&](const Tensor& t) { return slice_rows(t, 1, n - 1); };
    auto head = [&](const Tensor& t) { return slice_rows(t, 0, n - 1); };
    auto tail_const = [&](const std::vector<double>& v) {
      return detail::column(std::span<const double>(v).subspan(1));
    };
    const Tensor de = scale(sub(tail(energy_n), head(energy_n)), 1.0 / dt);
    const Tensor r_next = tail(r);
    const Tensor rt = scale(sub(r_next, head(r)), 1.0 / dt);
    const Tensor speed = add(add(mul(square(rt), tail_const(ja)), mul(square(r_next), tail_const(jb))),
                             mul(mul(r_next, rt), tail_const(jc)));
    terms.push_back(square(sub(de, speed)));
  }
  const Tensor per_step = concat_rows(terms);
  return detail::weighted_slice_mean(per_step, causal_epsilon, nullptr);
}

/// Detached per-slice integrals of the primary network, recomputed from
/// constant copies of its parameters.
struct StructureIntegrals {
  std::vector<double> conserved;                          // I_Q per slice (mass or momentum)
  std::vector<problems::AcEnergyParts> energy;            // AC only
  std::vector<problems::AcDissipationParts> dissipation;  // AC only
};

inline StructureIntegrals structure_integrals(const models::BoundMlp& primary_copy,
                                              const ProblemSpec& problem, const StructureLaw& law,
                                              const TimeGrid& time_grid, int quad_level) {
  for (const auto& w : primary_copy.weights) {
    if (w.tracked()) throw std::invalid_argument("structure integrals require a detached primary network");
  }
  const quadrature::QuadratureGrid grid(problem.x_min, problem.x_max, quad_level);
  const auto xs = grid.points();
  const auto m = static_cast<Eigen::Index>(xs.size());
  const int slices = time_grid.nodes();
  Matrix pts(m * slices, 2);
  for (int n = 0; n < slices; ++n) {
    for (Eigen::Index i = 0; i < m; ++i) {
      pts(n * m + i, 0) = xs[static_cast<std::size_t>(i)];
      pts(n * m + i, 1) = time_grid.node(n);
    }
  }
  const auto jet = models::forward_jet(primary_copy, pts, law.required_layout());

  StructureIntegrals out;
  for (int n = 0; n < slices; ++n) {
    problems::GridSlice s;
    s.value = jet.value.value().middleRows(n * m, m);
    if (jet.dx.defined()) s.dx = jet.dx.value().middleRows(n * m, m);
    if (jet.dt.defined()) s.dt = jet.dt.value().middleRows(n * m, m);
    switch (law.id) {
      case problems::LawId::NlsMass: out.conserved.push_back(problems::nls_mass_integral(s.value, grid)); break;
      case problems::LawId::NlsMomentum:
        out.conserved.push_back(problems::nls_momentum_integral(s.value, s.dx, grid));
        break;
      case problems::LawId::AcEnergy:
        out.energy.push_back(problems::ac_energy_parts(s, problem.epsilon, problem.reaction, grid));
        out.dissipation.push_back(problems::ac_dissipation_parts(s, grid));
        break;
    }
  }
  return out;
}

inline models::BoundMlp detached_copy(const models::BoundMlp& net) {
  models::BoundMlp copy{net.arch, {}, {}};
  for (const auto& w : net.weights) copy.weights.push_back(diff::detach(w));
  for (const auto& b : net.biases) copy.biases.push_back(diff::detach(b));
  return copy;
}

/// L_R for the given law, with R evaluated (tracked) at the time-grid nodes
/// and the integrals taken from a detached copy of the primary network.
inline Tensor structure_loss(const models::BoundModel& model, const ProblemSpec& problem,
                             const StructureLaw& law, const TimeGrid& time_grid, int quad_level,
                             std::optional<double> causal_epsilon = std::nullopt) {
  if (!model.copilot) throw std::invalid_argument("structure loss requires a copilot network");
  const auto integrals = structure_integrals(detached_copy(model.primary), problem, law, time_grid, quad_level);
  const auto times = time_grid.times();
  Matrix tcol(static_cast<Eigen::Index>(times.size()), 1);
  for (std::size_t i = 0; i < times.size(); ++i) tcol(static_cast<Eigen::Index>(i), 0) = times[i];
  const Tensor r = models::copilot_jet(*model.copilot, tcol, false).value;
  if (law.kind == problems::LawKind::Conservative) {
    return structure_loss_conservative(r, integrals.conserved, law.factored_target(), causal_epsilon);
  }
  return structure_loss_dissipative(r, integrals.energy, integrals.dissipation, time_grid.step(),
                                    law.factored_target(), causal_epsilon);
}

struct TotalLossOptions {
  double alpha = 1.0;
  std::optional<double> causal_pde;
  std::optional<double> causal_structure;
  int quad_level = 9;
};

struct TotalLoss {
  Tensor total;
  SolverLoss solver;
  std::optional<Tensor> structure;  // absent when alpha == 0
};

/// L_solver[R v] + alpha * L_R[R, v_copy]. alpha == 0 skips the structure
/// loss entirely, so no quadrature is performed.
inline TotalLoss total_loss(const models::BoundModel& model, const ProblemSpec& problem,
                            const StructureLaw* law, const CollocationSets& colloc,
                            const TotalLossOptions& opts) {
  if (!(opts.alpha >= 0.0)) throw std::invalid_argument("alpha must be nonnegative");
  TotalLoss out;
  out.solver = solver_loss(model, problem, colloc, opts.causal_pde);
  out.total = out.solver.total;
  if (opts.alpha > 0.0) {
    if (law == nullptr) throw std::invalid_argument("alpha > 0 requires a structure law");
    out.structure = structure_loss(model, problem, *law, colloc.time_grid, opts.quad_level,
                                   opts.causal_structure);
    out.total = diff::add(out.total, diff::scale(*out.structure, opts.alpha));
  }
  return out;
}

/// Mean over points of the squared deviation summed over channels.
inline Tensor fit_loss(const Tensor& prediction, const Matrix& reference) {
  if (prediction.rows() != reference.rows() || prediction.cols() != reference.cols()) {
    throw diff::ShapeError("fit_loss: prediction and reference shapes differ");
  }
  return diff::mean(diff::row_sum(diff::square(diff::sub(prediction, Tensor(reference)))));
}

}  // namespace sidecar::losses
