#pragma once

// Reverse-mode differentiation over batched dense matrices.
//
// A Tensor is an immutable row-major matrix of doubles, optionally attached
// to a Tape. Every operation on tracked inputs appends one node to the tape;
// nodes are stored in creation order, which is a topological order, so the
// backward sweep simply walks the tape in reverse. Operations on untracked
// inputs only compute values and never touch a tape.
//
// All reductions accumulate left to right in a fixed order so that two
// evaluations of the same graph are bitwise identical.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sidecar::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline bool all_finite(const Matrix& m) {
  constexpr std::uint64_t exponent = 0x7ff0000000000000ull;
  const double* p = m.data();
  const auto n = static_cast<std::size_t>(m.size());
  std::uint64_t bad = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, p + i, sizeof bits);
    bad |= static_cast<std::uint64_t>((bits & exponent) == exponent);
  }
  return bad == 0;
}

inline void require_finite(const Matrix& m, const char* where) {
  if (!all_finite(m)) throw NonFiniteError(std::string("non-finite value produced by ") + where);
}

/// tanh through the vectorized exponential: sign(z) (1 - e) / (1 + e), e = exp(-2|z|).
/// Absolute error is within a few ulp of 1.
template <class Derived>
Matrix tanh_values(const Eigen::MatrixBase<Derived>& z) {
  const auto e = (-2.0 * z.array().abs()).exp();
  const Matrix mag = ((1.0 - e) / (1.0 + e)).matrix();
  return (z.array() < 0.0).select(-mag.array(), mag.array()).matrix();
}

inline std::string shape_string(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

class Tape;

class Tensor {
 public:
  Tensor() = default;

  /// Untracked constant.
  explicit Tensor(Matrix value) : value_(std::make_shared<const Matrix>(std::move(value))) {
    require_finite(*value_, "tensor construction");
  }

  /// Wraps an already validated value without re-checking finiteness.
  static Tensor adopt(Matrix value) {
    Tensor t;
    t.value_ = std::make_shared<const Matrix>(std::move(value));
    return t;
  }

  static Tensor scalar(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return Tensor(std::move(m));
  }

  bool defined() const { return static_cast<bool>(value_); }
  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  const Matrix& value() const { return *value_; }
  const std::shared_ptr<const Matrix>& shared_value() const { return value_; }
  Eigen::Index rows() const { return value_->rows(); }
  Eigen::Index cols() const { return value_->cols(); }
  Eigen::Index size() const { return value_->size(); }
  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(*value_));
    return (*value_)(0, 0);
  }
  double operator()(Eigen::Index r, Eigen::Index c) const { return (*value_)(r, c); }

 private:
  friend class Tape;
  friend Tensor detach(const Tensor& t);

  std::shared_ptr<const Matrix> value_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

/// Gradient buffers indexed by tape node. An empty matrix means "zero".
using GradBuffer = std::vector<Matrix>;

inline void accumulate(GradBuffer& grads, std::size_t node, const Matrix& contribution) {
  Matrix& g = grads[node];
  if (g.size() == 0) {
    g = contribution;
  } else {
    g.noalias() += contribution;
  }
}

inline void accumulate(GradBuffer& grads, std::size_t node, Matrix&& contribution) {
  Matrix& g = grads[node];
  if (g.size() == 0) {
    g = std::move(contribution);
  } else {
    g.noalias() += contribution;
  }
}

class Tape {
 public:
  using Backward = std::function<void(const Matrix& grad_out, GradBuffer& grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Tracked leaf (a trainable parameter or differentiable input).
  Tensor variable(const Matrix& value) {
    Tensor t(value);
    attach(t, nullptr);
    return t;
  }

  /// Appends an interior node. `backward` receives the gradient of this node
  /// and must accumulate into its parents.
  Tensor record(Matrix value, Backward backward, const char* op) {
    require_finite(value, op);
    Tensor t;
    t.value_ = std::make_shared<const Matrix>(std::move(value));
    attach(t, std::move(backward));
    return t;
  }

  std::size_t size() const { return nodes_.size(); }

  /// d(loss)/d(wrt[i]) for each requested tensor. Tensors that the loss does
  /// not depend on (including untracked ones) receive exact zeros.
  std::vector<Matrix> gradient(const Tensor& loss, std::span<const Tensor> wrt) const {
    if (!loss.defined() || loss.size() != 1) {
      throw ShapeError("gradient requires a scalar loss");
    }
    if (!std::isfinite(loss.item())) throw NonFiniteError("loss is not finite");
    std::vector<Matrix> out;
    out.reserve(wrt.size());
    if (!loss.tracked()) {
      for (const auto& w : wrt) out.push_back(Matrix::Zero(w.rows(), w.cols()));
      return out;
    }
    if (loss.tape() != this) throw std::invalid_argument("loss belongs to another tape");

    GradBuffer grads(loss.node() + 1);
    grads[loss.node()] = Matrix::Ones(1, 1);
    for (std::size_t i = loss.node() + 1; i-- > 0;) {
      if (grads[i].size() == 0 || !nodes_[i]) continue;
      nodes_[i](grads[i], grads);
      // Interior gradients are no longer needed once propagated; leaves keep theirs.
      if (nodes_[i]) grads[i] = Matrix();
    }

    for (const auto& w : wrt) {
      if (w.tracked() && w.tape() == this && w.node() < grads.size() &&
          grads[w.node()].size() != 0) {
        require_finite(grads[w.node()], "backward pass");
        out.push_back(grads[w.node()]);
      } else {
        out.push_back(Matrix::Zero(w.rows(), w.cols()));
      }
    }
    return out;
  }

 private:
  void attach(Tensor& t, Backward backward) {
    t.tape_ = this;
    t.node_ = nodes_.size();
    nodes_.push_back(std::move(backward));
  }

  std::vector<Backward> nodes_;
};

inline Tensor detach(const Tensor& t) {
  Tensor out;
  out.value_ = t.value_;
  return out;
}

/// Free-function form of Tape::gradient.
inline std::vector<Matrix> backward_grad(const Tensor& loss, std::span<const Tensor> params) {
  if (!loss.defined() || loss.size() != 1) throw ShapeError("backward_grad requires a scalar loss");
  if (!loss.tracked()) {
    if (!std::isfinite(loss.item())) throw NonFiniteError("loss is not finite");
    std::vector<Matrix> zeros;
    for (const auto& p : params) zeros.push_back(Matrix::Zero(p.rows(), p.cols()));
    return zeros;
  }
  return loss.tape()->gradient(loss, params);
}

namespace detail {

inline Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->defined()) throw std::invalid_argument("undefined tensor passed to operation");
    if (!t->tracked()) continue;
    if (tape != nullptr && tape != t->tape()) {
      throw std::invalid_argument("operation mixes tensors from different tapes");
    }
    tape = t->tape();
  }
  return tape;
}

inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.value()) + " vs " +
                     shape_string(b.value()));
  }
}

inline Tensor finish(Tape* tape, Matrix value, Tape::Backward backward, const char* op) {
  if (tape == nullptr) {
    require_finite(value, op);
    return Tensor::adopt(std::move(value));
  }
  return tape->record(std::move(value), std::move(backward), op);
}

// Column sums of rows [begin, begin + count), accumulated top to bottom.
inline Matrix column_sums(const Matrix& g, Eigen::Index begin, Eigen::Index count) {
  Matrix out = Matrix::Zero(1, g.cols());
  for (Eigen::Index r = begin; r < begin + count; ++r) out.row(0) += g.row(r);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_string(a.value()) + " x " + shape_string(b.value()));
  }
  Tape* tape = detail::common_tape({&a, &b});
  Matrix out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return detail::finish(tape, std::move(out),
                        [a, b](const Matrix& g, GradBuffer& grads) {
                          if (a.tracked()) accumulate(grads, a.node(), g * b.value().transpose());
                          if (b.tracked()) accumulate(grads, b.node(), a.value().transpose() * g);
                        },
                        "matmul");
}

/// a * b^T, the natural layout for weights stored as (out x in).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_string(a.value()) + " x " + shape_string(b.value()) +
                     "^T");
  }
  Tape* tape = detail::common_tape({&a, &b});
  Matrix out(a.rows(), b.rows());
  out.noalias() = a.value() * b.value().transpose();
  return detail::finish(tape, std::move(out),
                        [a, b](const Matrix& g, GradBuffer& grads) {
                          if (a.tracked()) accumulate(grads, a.node(), g * b.value());
                          if (b.tracked()) accumulate(grads, b.node(), g.transpose() * a.value());
                        },
                        "matmul_nt");
}

/// x * w^T with the bias row b added to rows [begin, begin + count).
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b, Eigen::Index begin, Eigen::Index count) {
  if (x.cols() != w.cols() || b.rows() != 1 || b.cols() != w.rows() || begin < 0 || count < 0 ||
      begin + count > x.rows()) {
    throw ShapeError("affine: " + shape_string(x.value()) + " x " + shape_string(w.value()) + "^T + " +
                     shape_string(b.value()));
  }
  Tape* tape = detail::common_tape({&x, &w, &b});
  Matrix out(x.rows(), w.rows());
  out.noalias() = x.value() * w.value().transpose();
  out.middleRows(begin, count).rowwise() += b.value().row(0);
  return detail::finish(tape, std::move(out),
                        [x, w, b, begin, count](const Matrix& g, GradBuffer& grads) {
                          if (x.tracked()) {
                            Matrix gx(g.rows(), w.cols());
                            gx.noalias() = g * w.value();
                            accumulate(grads, x.node(), std::move(gx));
                          }
                          if (w.tracked()) {
                            Matrix gw(w.rows(), w.cols());
                            gw.noalias() = g.transpose() * x.value();
                            accumulate(grads, w.node(), std::move(gw));
                          }
                          if (b.tracked()) accumulate(grads, b.node(), detail::column_sums(g, begin, count));
                        },
                        "affine");
}

/// Adds the (1 x cols) row vector `row` to rows [begin, begin + count) of `a`.
inline Tensor add_row_broadcast(const Tensor& a, const Tensor& row, Eigen::Index begin,
                                Eigen::Index count) {
  if (row.rows() != 1 || row.cols() != a.cols() || begin < 0 || begin + count > a.rows()) {
    throw ShapeError("add_row_broadcast: bad operands");
  }
  Tape* tape = detail::common_tape({&a, &row});
  Matrix out = a.value();
  for (Eigen::Index r = begin; r < begin + count; ++r) out.row(r) += row.value().row(0);
  return detail::finish(tape, std::move(out),
                        [a, row, begin, count](const Matrix& g, GradBuffer& grads) {
                          if (a.tracked()) accumulate(grads, a.node(), g);
                          if (row.tracked()) {
                            accumulate(grads, row.node(), detail::column_sums(g, begin, count));
                          }
                        },
                        "add_row_broadcast");
}

inline Tensor add_row_broadcast(const Tensor& a, const Tensor& row) {
  return add_row_broadcast(a, row, 0, a.rows());
}

/// Scales row i of `a` by col(i, 0).
inline Tensor mul_col_broadcast(const Tensor& a, const Tensor& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeError("mul_col_broadcast: bad operands");
  Tape* tape = detail::common_tape({&a, &col});
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) *= col.value()(r, 0);
  return detail::finish(tape, std::move(out),
                        [a, col](const Matrix& g, GradBuffer& grads) {
                          if (a.tracked()) {
                            Matrix ga = g;
                            for (Eigen::Index r = 0; r < ga.rows(); ++r) ga.row(r) *= col.value()(r, 0);
                            accumulate(grads, a.node(), ga);
                          }
                          if (col.tracked()) {
                            Matrix gc(col.rows(), 1);
                            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                              double s = 0.0;
                              for (Eigen::Index c = 0; c < g.cols(); ++c) s += g(r, c) * a.value()(r, c);
                              gc(r, 0) = s;
                            }
                            accumulate(grads, col.node(), gc);
                          }
                        },
                        "mul_col_broadcast");
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "add");
  Tape* tape = detail::common_tape({&a, &b});
  Matrix out = a.value() + b.value();
  return detail::finish(tape, std::move(out),
                        [a, b](const Matrix& g, GradBuffer& grads) {
                          if (a.tracked()) accumulate(grads, a.node(), g);
                          if (b.tracked()) accumulate(grads, b.node(), g);
                        },
                        "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "sub");
  Tape* tape = detail::common_tape({&a, &b});
  Matrix out = a.value() - b.value();
  return detail::finish(tape, std::move(out),
                        [a, b](const Matrix& g, GradBuffer& grads) {
                          if (a.tracked()) accumulate(grads, a.node(), g);
                          if (b.tracked()) accumulate(grads, b.node(), -g);
                        },
                        "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "mul");
  Tape* tape = detail::common_tape({&a, &b});
  Matrix out = a.value().cwiseProduct(b.value());
  return detail::finish(tape, std::move(out),
                        [a, b](const Matrix& g, GradBuffer& grads) {
                          if (a.tracked()) accumulate(grads, a.node(), g.cwiseProduct(b.value()));
                          if (b.tracked()) accumulate(grads, b.node(), g.cwiseProduct(a.value()));
                        },
                        "mul");
}

inline Tensor scale(const Tensor& a, double s) {
  Tape* tape = detail::common_tape({&a});
  Matrix out = a.value() * s;
  return detail::finish(tape, std::move(out),
                        [a, s](const Matrix& g, GradBuffer& grads) { accumulate(grads, a.node(), g * s); },
                        "scale");
}

inline Tensor add_scalar(const Tensor& a, double s) {
  Tape* tape = detail::common_tape({&a});
  Matrix out = a.value().array() + s;
  return detail::finish(tape, std::move(out),
                        [a](const Matrix& g, GradBuffer& grads) { accumulate(grads, a.node(), g); },
                        "add_scalar");
}

inline Tensor square(const Tensor& a) {
  Tape* tape = detail::common_tape({&a});
  Matrix out = a.value().cwiseProduct(a.value());
  return detail::finish(tape, std::move(out),
                        [a](const Matrix& g, GradBuffer& grads) {
                          accumulate(grads, a.node(), 2.0 * g.cwiseProduct(a.value()));
                        },
                        "square");
}

inline Tensor tanh(const Tensor& a) {
  Tape* tape = detail::common_tape({&a});
  auto out = std::make_shared<Matrix>(tanh_values(a.value()));
  Matrix copy = *out;
  return detail::finish(tape, std::move(copy),
                        [a, out](const Matrix& g, GradBuffer& grads) {
                          Matrix d = (1.0 - out->array().square()).matrix();
                          accumulate(grads, a.node(), g.cwiseProduct(d));
                        },
                        "tanh");
}

/// Block layout of a stacked jet: `points` rows per block, ordered
/// value, d/dx, d2/dx2, d/dt (absent blocks are skipped).
struct JetLayout {
  Eigen::Index points = 0;
  bool dx = false;
  bool dxx = false;
  bool dt = false;

  static JetLayout value_only(Eigen::Index n) { return {n, false, false, false}; }
  static JetLayout full(Eigen::Index n) { return {n, true, true, true}; }

  Eigen::Index blocks() const { return 1 + (dx ? 1 : 0) + (dxx ? 1 : 0) + (dt ? 1 : 0); }
  Eigen::Index dx_block() const { return 1; }
  Eigen::Index dxx_block() const { return 2; }
  Eigen::Index dt_block() const { return 1 + (dx ? 1 : 0) + (dxx ? 1 : 0); }
  Eigen::Index rows() const { return points * blocks(); }
};

/// tanh applied to a stacked jet of pre-activations. With h = tanh(z),
/// s = 1 - h^2:
///   value -> h,  first-order tangent z' -> s z',
///   second-order (xx) -> s z_xx - 2 h s z_x^2.
/// Fused into one node so the backward pass touches each element once.
inline Tensor tanh_jet(const Tensor& z, const JetLayout& layout) {
  if (layout.dxx && !layout.dx) throw ShapeError("tanh_jet: dxx block requires dx block");
  if (z.rows() != layout.rows()) throw ShapeError("tanh_jet: row count does not match layout");
  Tape* tape = detail::common_tape({&z});
  const Eigen::Index n = layout.points;
  const Eigen::Index w = z.cols();
  const Matrix& zv = z.value();

  auto h = std::make_shared<Matrix>(tanh_values(zv.topRows(n)));
  auto s = std::make_shared<Matrix>((1.0 - h->array().square()).matrix());

  Matrix out(z.rows(), w);
  out.topRows(n) = *h;
  if (layout.dx) {
    out.middleRows(layout.dx_block() * n, n) =
        s->cwiseProduct(zv.middleRows(layout.dx_block() * n, n));
  }
  if (layout.dxx) {
    const auto zx = zv.middleRows(layout.dx_block() * n, n).array();
    const auto zxx = zv.middleRows(layout.dxx_block() * n, n).array();
    out.middleRows(layout.dxx_block() * n, n) =
        (s->array() * zxx - 2.0 * h->array() * s->array() * zx.square()).matrix();
  }
  if (layout.dt) {
    out.middleRows(layout.dt_block() * n, n) =
        s->cwiseProduct(zv.middleRows(layout.dt_block() * n, n));
  }

  return detail::finish(
      tape, std::move(out),
      [z, layout, h, s](const Matrix& g, GradBuffer& grads) {
        const Eigen::Index n = layout.points;
        const Matrix& zv = z.value();
        const auto ha = h->array();
        const auto sa = s->array();
        const auto hs = ha * sa;  // -(1/2) d s / d z

        Matrix gz(zv.rows(), zv.cols());
        auto gval = gz.topRows(n).array();
        gval = g.topRows(n).array() * sa;
        if (layout.dx) {
          const auto zx = zv.middleRows(layout.dx_block() * n, n).array();
          const auto gx = g.middleRows(layout.dx_block() * n, n).array();
          gval -= 2.0 * gx * hs * zx;
          gz.middleRows(layout.dx_block() * n, n) = (gx * sa).matrix();
        }
        if (layout.dxx) {
          const auto zx = zv.middleRows(layout.dx_block() * n, n).array();
          const auto zxx = zv.middleRows(layout.dxx_block() * n, n).array();
          const auto gxx = g.middleRows(layout.dxx_block() * n, n).array();
          // d/dz [s zxx - 2 h s zx^2] = -2 h s zxx - 2 zx^2 s (s - 2 h^2)
          gval -= gxx * (2.0 * hs * zxx + 2.0 * zx.square() * sa * (sa - 2.0 * ha.square()));
          gz.middleRows(layout.dx_block() * n, n).array() -= 4.0 * gxx * hs * zx;
          gz.middleRows(layout.dxx_block() * n, n) = (gxx * sa).matrix();
        }
        if (layout.dt) {
          const auto zt = zv.middleRows(layout.dt_block() * n, n).array();
          const auto gt = g.middleRows(layout.dt_block() * n, n).array();
          gval -= 2.0 * gt * hs * zt;
          gz.middleRows(layout.dt_block() * n, n) = (gt * sa).matrix();
        }
        accumulate(grads, z.node(), gz);
      },
      "tanh_jet");
}

// ---------------------------------------------------------------------------
// Slicing and stacking

inline Tensor slice_rows(const Tensor& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw ShapeError("slice_rows: out of range");
  Tape* tape = detail::common_tape({&a});
  Matrix out = a.value().middleRows(begin, count);
  return detail::finish(tape, std::move(out),
                        [a, begin, count](const Matrix& g, GradBuffer& grads) {
                          Matrix ga = Matrix::Zero(a.rows(), a.cols());
                          ga.middleRows(begin, count) = g;
                          accumulate(grads, a.node(), ga);
                        },
                        "slice_rows");
}

inline Tensor slice_cols(const Tensor& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Tape* tape = detail::common_tape({&a});
  Matrix out = a.value().middleCols(begin, count);
  return detail::finish(tape, std::move(out),
                        [a, begin, count](const Matrix& g, GradBuffer& grads) {
                          Matrix ga = Matrix::Zero(a.rows(), a.cols());
                          ga.middleCols(begin, count) = g;
                          accumulate(grads, a.node(), ga);
                        },
                        "slice_cols");
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape* tape = nullptr;
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw ShapeError("concat_rows: column mismatch");
    Tape* t = detail::common_tape({&p});
    if (t != nullptr) {
      if (tape != nullptr && tape != t) throw std::invalid_argument("concat_rows mixes tapes");
      tape = t;
    }
    rows += p.rows();
  }
  Matrix out(rows, parts.front().cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return detail::finish(tape, std::move(out),
                        [parts](const Matrix& g, GradBuffer& grads) {
                          Eigen::Index r = 0;
                          for (const auto& p : parts) {
                            if (p.tracked()) accumulate(grads, p.node(), g.middleRows(r, p.rows()));
                            r += p.rows();
                          }
                        },
                        "concat_rows");
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape* tape = nullptr;
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) throw ShapeError("concat_cols: row mismatch");
    Tape* t = detail::common_tape({&p});
    if (t != nullptr) {
      if (tape != nullptr && tape != t) throw std::invalid_argument("concat_cols mixes tapes");
      tape = t;
    }
    cols += p.cols();
  }
  Matrix out(parts.front().rows(), cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return detail::finish(tape, std::move(out),
                        [parts](const Matrix& g, GradBuffer& grads) {
                          Eigen::Index c = 0;
                          for (const auto& p : parts) {
                            if (p.tracked()) accumulate(grads, p.node(), g.middleCols(c, p.cols()));
                            c += p.cols();
                          }
                        },
                        "concat_cols");
}

// ---------------------------------------------------------------------------
// Reductions (fixed left-to-right order)

inline double ordered_sum(const Matrix& m) {
  double s = 0.0;
  const double* p = m.data();
  const auto n = static_cast<std::size_t>(m.size());
  for (std::size_t i = 0; i < n; ++i) s += p[i];
  return s;
}

inline Tensor sum(const Tensor& a) {
  Tape* tape = detail::common_tape({&a});
  Matrix out(1, 1);
  out(0, 0) = ordered_sum(a.value());
  return detail::finish(tape, std::move(out),
                        [a](const Matrix& g, GradBuffer& grads) {
                          accumulate(grads, a.node(), Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
                        },
                        "sum");
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Per-row sums: (n x c) -> (n x 1).
inline Tensor row_sum(const Tensor& a) {
  Tape* tape = detail::common_tape({&a});
  Matrix out(a.rows(), 1);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) s += a.value()(r, c);
    out(r, 0) = s;
  }
  return detail::finish(tape, std::move(out),
                        [a](const Matrix& g, GradBuffer& grads) {
                          Matrix ga(a.rows(), a.cols());
                          for (Eigen::Index r = 0; r < a.rows(); ++r) ga.row(r).setConstant(g(r, 0));
                          accumulate(grads, a.node(), ga);
                        },
                        "row_sum");
}

/// Means of consecutive blocks of `block` rows of a column: (n x 1) -> (n/block x 1).
inline Tensor block_mean(const Tensor& a, Eigen::Index block) {
  if (a.cols() != 1 || block <= 0 || a.rows() % block != 0) throw ShapeError("block_mean: bad operands");
  Tape* tape = detail::common_tape({&a});
  const Eigen::Index nb = a.rows() / block;
  const double inv = 1.0 / static_cast<double>(block);
  Matrix out(nb, 1);
  for (Eigen::Index b = 0; b < nb; ++b) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < block; ++i) s += a.value()(b * block + i, 0);
    out(b, 0) = s * inv;
  }
  return detail::finish(tape, std::move(out),
                        [a, block, inv](const Matrix& g, GradBuffer& grads) {
                          Matrix ga(a.rows(), 1);
                          for (Eigen::Index r = 0; r < a.rows(); ++r) ga(r, 0) = g(r / block, 0) * inv;
                          accumulate(grads, a.node(), ga);
                        },
                        "block_mean");
}

}  // namespace sidecar::diff
