#pragma once

// tanh MLPs with exact input-derivative propagation, and the primary/copilot
// composition u(x, t) = R(t) * v(x, t).

#include "sidecar/binary_io.hpp"
#include "sidecar/diffcore.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace sidecar::models {

using diff::JetLayout;
using diff::Matrix;
using diff::Tensor;

struct MlpArch {
  int input_dim = 2;
  int output_dim = 1;
  int width = 50;
  int depth = 4;  // number of hidden layers

  bool operator==(const MlpArch&) const = default;
};

/// Hidden layers are weights[0..depth-1]; the output layer is weights[depth].
/// Weights are stored (out x in), biases as (1 x out) rows.
struct MlpParams {
  MlpArch arch;
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += static_cast<std::size_t>(w.size());
    for (const auto& b : biases) n += static_cast<std::size_t>(b.size());
    return n;
  }
};

inline std::size_t parameter_count(const MlpArch& a) {
  const auto w = static_cast<std::size_t>(a.width);
  const auto in = static_cast<std::size_t>(a.input_dim);
  const auto out = static_cast<std::size_t>(a.output_dim);
  return (in * w + w) + static_cast<std::size_t>(a.depth - 1) * (w * w + w) + (w * out + out);
}

/// Uniform double in [0, 1) from the top 53 bits; identical on every platform,
/// unlike std::uniform_real_distribution.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double glorot_bound(int fan_in, int fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

/// Glorot-uniform weights, zero biases. Draws from `rng` in layer order.
inline MlpParams init_params(const MlpArch& arch, std::mt19937_64& rng) {
  if (arch.input_dim <= 0 || arch.output_dim <= 0 || arch.width <= 0 || arch.depth <= 0) {
    throw std::invalid_argument("MLP dimensions must be positive");
  }
  MlpParams p;
  p.arch = arch;
  auto layer = [&](int in, int out) {
    const double bound = glorot_bound(in, out);
    Matrix w(out, in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = (2.0 * unit_uniform(rng) - 1.0) * bound;
    p.weights.push_back(std::move(w));
    p.biases.push_back(Matrix::Zero(1, out));
  };
  layer(arch.input_dim, arch.width);
  for (int l = 1; l < arch.depth; ++l) layer(arch.width, arch.width);
  layer(arch.width, arch.output_dim);
  return p;
}

inline MlpParams init_params(const MlpArch& arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return init_params(arch, rng);
}

/// Parameters of one network as tensors: either tracked leaves on a tape or
/// untracked constants (for detached evaluation).
struct BoundMlp {
  MlpArch arch;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
};

inline BoundMlp bind(diff::Tape& tape, const MlpParams& p) {
  BoundMlp b{p.arch, {}, {}};
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    b.weights.push_back(tape.variable(p.weights[i]));
    b.biases.push_back(tape.variable(p.biases[i]));
  }
  return b;
}

inline BoundMlp constants(const MlpParams& p) {
  BoundMlp b{p.arch, {}, {}};
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    b.weights.push_back(Tensor(p.weights[i]));
    b.biases.push_back(Tensor(p.biases[i]));
  }
  return b;
}

/// Network outputs with exact input derivatives; absent channels are
/// undefined tensors. Each defined member is (points x output_dim).
struct Jet {
  Tensor value;
  Tensor dx;
  Tensor dxx;
  Tensor dt;
};

namespace detail {

// Propagates a stacked jet (value block plus seeded tangent blocks) through the
// network. Bias enters only the value block; tangents are linear in the input.
inline Tensor propagate(const BoundMlp& net, const Tensor& stacked, const JetLayout& layout) {
  Tensor h = stacked;
  const auto n = layout.points;
  const std::size_t layers = net.weights.size();
  for (std::size_t l = 0; l < layers; ++l) {
    const Tensor z = diff::affine(h, net.weights[l], net.biases[l], 0, n);
    h = (l + 1 < layers) ? diff::tanh_jet(z, layout) : z;
  }
  return h;
}

inline Jet unstack(const Tensor& out, const JetLayout& layout) {
  const auto n = layout.points;
  Jet j;
  j.value = diff::slice_rows(out, 0, n);
  if (layout.dx) j.dx = diff::slice_rows(out, layout.dx_block() * n, n);
  if (layout.dxx) j.dxx = diff::slice_rows(out, layout.dxx_block() * n, n);
  if (layout.dt) j.dt = diff::slice_rows(out, layout.dt_block() * n, n);
  return j;
}

inline void check_points(const Matrix& points, int dim) {
  if (points.cols() != dim) {
    throw diff::ShapeError("expected " + std::to_string(dim) + " input columns, got " +
                           std::to_string(points.cols()));
  }
  if (!diff::all_finite(points)) throw diff::NonFiniteError("non-finite input point");
}

}  // namespace detail

/// Evaluates a 2-input (x, t) network at `points` (N x 2). `layout.points` is
/// overwritten with N; the flags select which derivative channels are built.
inline Jet forward_jet(const BoundMlp& net, const Matrix& points, JetLayout layout) {
  if (net.arch.input_dim != 2) throw diff::ShapeError("forward_jet requires a (x, t) network");
  detail::check_points(points, 2);
  const auto n = points.rows();
  layout.points = n;
  Matrix seeds = Matrix::Zero(layout.rows(), 2);
  seeds.topRows(n) = points;
  if (layout.dx) seeds.middleRows(layout.dx_block() * n, n).col(0).setOnes();
  if (layout.dt) seeds.middleRows(layout.dt_block() * n, n).col(1).setOnes();
  return detail::unstack(detail::propagate(net, Tensor::adopt(std::move(seeds)), layout), layout);
}

/// R(t) and optionally dR/dt for a 1-input copilot at `times` (N x 1).
inline Jet copilot_jet(const BoundMlp& net, const Matrix& times, bool with_dt = true) {
  if (net.arch.input_dim != 1) throw diff::ShapeError("copilot_jet requires a time-only network");
  detail::check_points(times, 1);
  const auto n = times.rows();
  JetLayout layout{n, false, false, with_dt};
  Matrix seeds = Matrix::Zero(layout.rows(), 1);
  seeds.topRows(n) = times;
  if (with_dt) seeds.middleRows(layout.dt_block() * n, n).setOnes();
  return detail::unstack(detail::propagate(net, Tensor::adopt(std::move(seeds)), layout), layout);
}

struct ModelArch {
  MlpArch primary;
  std::optional<MlpArch> copilot;

  bool operator==(const ModelArch&) const = default;
};

/// Primary network v(x, t) and optional copilot R(t). Without a copilot the
/// model is a plain MLP (R = 1), used for the equivalent-vanilla baselines.
struct SidecarModel {
  MlpParams primary;
  std::optional<MlpParams> copilot;

  ModelArch arch() const {
    ModelArch a{primary.arch, std::nullopt};
    if (copilot) a.copilot = copilot->arch;
    return a;
  }

  std::size_t parameter_count() const {
    return primary.parameter_count() + (copilot ? copilot->parameter_count() : 0);
  }

  /// Parameter matrices in registry order: primary (W, b per layer), then copilot.
  std::vector<Matrix*> parameters() {
    std::vector<Matrix*> out;
    auto add = [&out](MlpParams& p) {
      for (std::size_t i = 0; i < p.weights.size(); ++i) {
        out.push_back(&p.weights[i]);
        out.push_back(&p.biases[i]);
      }
    };
    add(primary);
    if (copilot) add(*copilot);
    return out;
  }

  std::vector<const Matrix*> parameters() const {
    std::vector<const Matrix*> out;
    for (Matrix* m : const_cast<SidecarModel*>(this)->parameters()) out.push_back(m);
    return out;
  }
};

inline SidecarModel init_model(const ModelArch& arch, std::uint64_t seed) {
  if (arch.copilot) {
    if (arch.copilot->input_dim != 1 || arch.copilot->output_dim != 1) {
      throw std::invalid_argument("copilot must map t to a scalar");
    }
  }
  std::mt19937_64 rng(seed);
  SidecarModel m{init_params(arch.primary, rng), std::nullopt};
  if (arch.copilot) m.copilot = init_params(*arch.copilot, rng);
  return m;
}

struct BoundModel {
  BoundMlp primary;
  std::optional<BoundMlp> copilot;

  /// Same order as SidecarModel::parameters().
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    auto add = [&out](const BoundMlp& p) {
      for (std::size_t i = 0; i < p.weights.size(); ++i) {
        out.push_back(p.weights[i]);
        out.push_back(p.biases[i]);
      }
    };
    add(primary);
    if (copilot) add(*copilot);
    return out;
  }

  std::vector<Tensor> primary_parameters() const {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < primary.weights.size(); ++i) {
      out.push_back(primary.weights[i]);
      out.push_back(primary.biases[i]);
    }
    return out;
  }
};

inline BoundModel bind(diff::Tape& tape, const SidecarModel& m) {
  BoundModel b{bind(tape, m.primary), std::nullopt};
  if (m.copilot) b.copilot = bind(tape, *m.copilot);
  return b;
}

inline BoundModel constants(const SidecarModel& m) {
  BoundModel b{constants(m.primary), std::nullopt};
  if (m.copilot) b.copilot = constants(*m.copilot);
  return b;
}

struct SidecarJet {
  Jet u;                     // combined output R * v
  Jet v;                     // primary output
  std::optional<Jet> r;      // copilot output (value, dt); absent for vanilla models
};

/// Combined jet by the product rule:
///   u = R v,  u_x = R v_x,  u_xx = R v_xx,  u_t = R_t v + R v_t.
inline SidecarJet sidecar_eval(const BoundModel& model, const Matrix& points, JetLayout layout) {
  SidecarJet out;
  out.v = forward_jet(model.primary, points, layout);
  if (!model.copilot) {
    out.u = out.v;
    return out;
  }
  Matrix times = points.col(1);
  Jet r = copilot_jet(*model.copilot, times, layout.dt);
  Jet u;
  u.value = diff::mul_col_broadcast(out.v.value, r.value);
  if (layout.dx) u.dx = diff::mul_col_broadcast(out.v.dx, r.value);
  if (layout.dxx) u.dxx = diff::mul_col_broadcast(out.v.dxx, r.value);
  if (layout.dt) {
    u.dt = diff::add(diff::mul_col_broadcast(out.v.value, r.dt),
                     diff::mul_col_broadcast(out.v.dt, r.value));
  }
  out.u = std::move(u);
  out.r = std::move(r);
  return out;
}

/// Width of the vanilla MLP whose neuron count matches a primary/copilot pair:
/// W_v + W_R * L_R / L_v, rounded to the nearest integer.
inline int equivalent_width(int primary_width, int primary_depth, int copilot_width,
                            int copilot_depth) {
  if (primary_width <= 0 || primary_depth <= 0 || copilot_width <= 0 || copilot_depth <= 0) {
    throw std::invalid_argument("equivalent_width: arguments must be positive");
  }
  const double w = primary_width + static_cast<double>(copilot_width) * copilot_depth / primary_depth;
  return static_cast<int>(std::lround(w));
}

// ---------------------------------------------------------------------------
// Model files.
//
// Payload after the container header (see binary_io.hpp):
//   u32 has_copilot
//   per network (primary, then copilot if present):
//     i32-as-u32 input_dim, output_dim, width, depth
//     depth + 1 layers, each: weight matrix (u64 rows, u64 cols, row-major f64),
//                              bias matrix (same encoding)

inline constexpr char kModelMagic[] = "SIDECARM";
inline constexpr std::uint32_t kModelVersion = 1;

inline void write_mlp(io::Writer& w, const MlpParams& p) {
  w.put_u32(static_cast<std::uint32_t>(p.arch.input_dim));
  w.put_u32(static_cast<std::uint32_t>(p.arch.output_dim));
  w.put_u32(static_cast<std::uint32_t>(p.arch.width));
  w.put_u32(static_cast<std::uint32_t>(p.arch.depth));
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    w.put_matrix(p.weights[i]);
    w.put_matrix(p.biases[i]);
  }
}

inline MlpParams read_mlp(io::Reader& r) {
  MlpParams p;
  p.arch.input_dim = static_cast<int>(r.get_u32());
  p.arch.output_dim = static_cast<int>(r.get_u32());
  p.arch.width = static_cast<int>(r.get_u32());
  p.arch.depth = static_cast<int>(r.get_u32());
  if (p.arch.depth <= 0 || p.arch.depth > 1024) throw io::FormatError("implausible network depth");
  for (int l = 0; l <= p.arch.depth; ++l) {
    p.weights.push_back(r.get_matrix());
    p.biases.push_back(r.get_matrix());
    const int in = l == 0 ? p.arch.input_dim : p.arch.width;
    const int out = l == p.arch.depth ? p.arch.output_dim : p.arch.width;
    if (p.weights.back().rows() != out || p.weights.back().cols() != in ||
        p.biases.back().rows() != 1 || p.biases.back().cols() != out) {
      throw io::FormatError("layer shape does not match architecture");
    }
  }
  return p;
}

inline void write_model(io::Writer& w, const SidecarModel& m) {
  w.put_u32(m.copilot ? 1u : 0u);
  write_mlp(w, m.primary);
  if (m.copilot) write_mlp(w, *m.copilot);
}

inline SidecarModel read_model(io::Reader& r) {
  const bool has_copilot = r.get_u32() != 0;
  SidecarModel m{read_mlp(r), std::nullopt};
  if (has_copilot) m.copilot = read_mlp(r);
  return m;
}

inline void save_model(const SidecarModel& m, const std::string& path) {
  io::Writer w(std::string_view(kModelMagic, 8), kModelVersion);
  write_model(w, m);
  w.save(path);
}

inline SidecarModel load_model(const std::string& path) {
  io::Reader r(path, std::string_view(kModelMagic, 8), kModelVersion);
  SidecarModel m = read_model(r);
  if (!r.at_end()) throw io::FormatError(path + ": trailing bytes");
  return m;
}

}  // namespace sidecar::models
