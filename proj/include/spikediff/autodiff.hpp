// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode automatic differentiation over real vectors.
//
// Every recorded primitive appends one node. Node values live in a single
// contiguous arena owned by the tape, so the tape's memory is exactly the sum
// of its saved forward values plus node headers; nothing is recomputed during
// the backward sweep. Binary elementwise primitives broadcast operands of
// length 1, which is how scalar parameters (time constants, amplitudes)
// enter vector-valued neuron updates.
//
// The primitive set is closed. Spiking models are written in terms of these
// primitives only; each backward rule is tested in isolation.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spikediff/common.hpp"
#include "spikediff/sparse.hpp"
#include "spikediff/surrogate.hpp"

namespace spikediff::ad {

enum class Op : std::uint8_t {
  constant,
  parameter,
  add,
  sub,
  mul,
  div,
  affine,        // a*x + b, scalar constants a, b
  mix,           // a*u + b*v + c, scalar constants (exponential-decay mixing)
  affine_dense,  // y = x^T W + b, W row-major [rows x cols]
  event_matvec,  // y = x W, W in CSR with values on the tape
  spike,         // Heaviside forward, surrogate backward
  relu,
  sigmoid,
  exp,
  exprel,        // x / (1 - exp(-x)), continuous at 0
  square,
  abs,
  sum,
  mean,
  select,        // mask ? a : b; the mask carries no gradient
  softmax_ce,    // -log softmax(logits)[label]
};

/// How the spike primitive evaluates its forward pass. `heaviside` is the
/// model; `relaxed` swaps in a smooth step whose derivative equals the
/// surrogate, for finite-difference checks. Reset masks stay binary in both.
enum class SpikeMode : std::uint8_t { heaviside, relaxed };

class Tape;

/// Handle to a tape node. Cheap to copy; valid while the tape is alive and
/// not cleared.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  std::span<const double> value() const;
  double scalar() const;
  std::size_t size() const;
};

class Gradients;

class Tape {
 public:
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();

  struct Node {
    Op op;
    std::uint32_t in0 = kNone, in1 = kNone, in2 = kNone;
    std::uint32_t size = 0;
    std::uint32_t aux = 0;
    std::uint64_t offset = 0;
    double c0 = 0.0, c1 = 0.0, c2 = 0.0;
  };

  explicit Tape(SpikeMode mode = SpikeMode::heaviside) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  SpikeMode spike_mode() const { return mode_; }
  void set_spike_mode(SpikeMode m) { mode_ = m; }

  /// Drops all nodes but keeps allocated capacity.
  void clear() {
    nodes_.clear();
    values_.clear();
    masks_.clear();
    patterns_.clear();
    specs_.clear();
  }

  std::size_t node_count() const { return nodes_.size(); }

  /// Bytes held by saved forward values, spike masks and node headers.
  std::size_t memory_bytes() const {
    return values_.size() * sizeof(double) + masks_.size() +
           nodes_.size() * sizeof(Node);
  }

  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  std::span<const double> value(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return {values_.data() + n.offset, n.size};
  }

  // Leaves ------------------------------------------------------------------

  Var constant(std::span<const double> v) { return leaf(Op::constant, v); }
  Var constant(double v) { return leaf(Op::constant, std::span<const double>(&v, 1)); }
  Var constant(std::size_t n, double fill) {
    auto [id, out] = push(Op::constant, n);
    std::fill(out.begin(), out.end(), fill);
    return {this, id};
  }
  Var parameter(std::span<const double> v) { return leaf(Op::parameter, v); }
  Var parameter(double v) { return leaf(Op::parameter, std::span<const double>(&v, 1)); }

  // Primitives (see free functions below for the public spelling) -----------

  Var binary(Op op, Var a, Var b);
  Var affine(Var x, double a, double b);
  Var mix(Var u, Var v, double a, double b, double c);
  Var affine_dense(Var w, Var x, Var bias, std::size_t rows, std::size_t cols);
  Var event_matvec(Var w_values, const std::shared_ptr<const sparse::CsrPattern>& pattern,
                   Var x);
  Var spike(Var x, const surrogate::SurrogateSpec& spec);
  Var unary(Op op, Var x);
  Var reduce(Op op, Var x);
  Var select(Var mask, Var a, Var b);
  Var softmax_ce(Var logits, std::size_t label);

  /// Reverse sweep from a scalar loss.
  Gradients backward(Var loss) const;
  /// Same sweep; the gradient slots reuse the capacity of `buffer`.
  Gradients backward(Var loss, std::vector<double> buffer) const;

  /// Binary mask of a spike node (or any node, thresholded at 0.5).
  bool mask_at(std::uint32_t id, std::size_t i) const {
    const Node& n = nodes_[id];
    if (n.op == Op::spike) return masks_[n.aux + i] != 0;
    return values_[n.offset + i] >= 0.5;
  }

 private:
  friend class Gradients;

  std::pair<std::uint32_t, std::span<double>> push(Op op, std::size_t n) {
    Node node;
    node.op = op;
    node.size = static_cast<std::uint32_t>(n);
    node.offset = values_.size();
    values_.resize(values_.size() + n);
    nodes_.push_back(node);
    return {static_cast<std::uint32_t>(nodes_.size() - 1),
            std::span<double>(values_.data() + node.offset, n)};
  }

  Var leaf(Op op, std::span<const double> v) {
    auto [id, out] = push(op, v.size());
    std::copy(v.begin(), v.end(), out.begin());
    return {this, id};
  }

  void check_owner(Var v) const {
    if (v.tape != this) throw std::invalid_argument("ad: variable from another tape");
  }

  std::uint32_t pattern_slot(const std::shared_ptr<const sparse::CsrPattern>& p) {
    if (patterns_.empty() || patterns_.back().get() != p.get()) {
      for (std::size_t k = 0; k < patterns_.size(); ++k)
        if (patterns_[k].get() == p.get()) return static_cast<std::uint32_t>(k);
      patterns_.push_back(p);
    }
    return static_cast<std::uint32_t>(patterns_.size() - 1);
  }

  std::uint32_t spec_slot(const surrogate::SurrogateSpec& s) {
    for (std::size_t k = 0; k < specs_.size(); ++k)
      if (specs_[k].kind == s.kind && specs_[k].alpha == s.alpha &&
          specs_[k].width == s.width)
        return static_cast<std::uint32_t>(k);
    specs_.push_back(s);
    return static_cast<std::uint32_t>(specs_.size() - 1);
  }

  SpikeMode mode_;
  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<std::uint8_t> masks_;
  std::vector<std::shared_ptr<const sparse::CsrPattern>> patterns_;
  std::vector<surrogate::SurrogateSpec> specs_;
};

/// Result of a backward sweep: one gradient slot per tape node.
class Gradients {
 public:
  Gradients(const Tape* tape, std::vector<double> g) : tape_(tape), grads_(std::move(g)) {}

  std::span<const double> operator[](Var v) const {
    const auto& n = tape_->nodes_[v.id];
    return {grads_.data() + n.offset, n.size};
  }
  std::vector<double> copy(Var v) const {
    auto s = (*this)[v];
    return {s.begin(), s.end()};
  }
  /// Number of nodes the sweep propagated through.
  std::size_t visited() const { return visited_; }
  /// Hands the slot storage back for another sweep.
  std::vector<double> release() && { return std::move(grads_); }

 private:
  friend class Tape;
  const Tape* tape_;
  std::vector<double> grads_;
  std::size_t visited_ = 0;
};

// Var accessors ----------------------------------------------------------------

inline std::span<const double> Var::value() const { return tape->value(id); }
inline double Var::scalar() const {
  auto v = value();
  if (v.size() != 1) throw ShapeError("ad: scalar() on non-scalar variable");
  return v[0];
}
inline std::size_t Var::size() const { return tape->node(id).size; }

// Forward rules ------------------------------------------------------------------

namespace detail {
inline double exprel(double x) {
  if (std::abs(x) < 1e-3) return 1.0 + x / 2.0 + x * x / 12.0;
  return x / -std::expm1(-x);
}
inline double exprel_grad(double x) {
  if (std::abs(x) < 1e-3) return 0.5 + x / 6.0 - x * x * x / 180.0;
  const double em = -std::expm1(-x);
  return (em - x * std::exp(-x)) / (em * em);
}
}  // namespace detail

inline Var Tape::binary(Op op, Var a, Var b) {
  check_owner(a);
  check_owner(b);
  const std::size_t na = a.size(), nb = b.size();
  require_shape(na == nb || na == 1 || nb == 1, "ad: elementwise shape mismatch");
  const std::size_t n = std::max(na, nb);
  auto [id, out] = push(op, n);
  const double* pa = values_.data() + nodes_[a.id].offset;
  const double* pb = values_.data() + nodes_[b.id].offset;
  const std::size_t sa = na == 1 ? 0 : 1, sb = nb == 1 ? 0 : 1;
  double* po = out.data();
  switch (op) {
    case Op::add: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i * sa] + pb[i * sb]; break;
    case Op::sub: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i * sa] - pb[i * sb]; break;
    case Op::mul: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i * sa] * pb[i * sb]; break;
    case Op::div: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i * sa] / pb[i * sb]; break;
    default: throw std::logic_error("ad: not a binary op");
  }
  nodes_[id].in0 = a.id;
  nodes_[id].in1 = b.id;
  return {this, id};
}

inline Var Tape::affine(Var x, double a, double b) {
  check_owner(x);
  const std::size_t n = x.size();
  auto [id, out] = push(Op::affine, n);
  const double* px = values_.data() + nodes_[x.id].offset;
  for (std::size_t i = 0; i < n; ++i) out[i] = a * px[i] + b;
  auto& node = nodes_[id];
  node.in0 = x.id;
  node.c0 = a;
  node.c1 = b;
  return {this, id};
}

inline Var Tape::mix(Var u, Var v, double a, double b, double c) {
  check_owner(u);
  check_owner(v);
  const std::size_t nu = u.size(), nv = v.size();
  require_shape(nu == nv || nu == 1 || nv == 1, "ad: mix shape mismatch");
  const std::size_t n = std::max(nu, nv);
  auto [id, out] = push(Op::mix, n);
  const double* pu = values_.data() + nodes_[u.id].offset;
  const double* pv = values_.data() + nodes_[v.id].offset;
  const std::size_t su = nu == 1 ? 0 : 1, sv = nv == 1 ? 0 : 1;
  for (std::size_t i = 0; i < n; ++i) out[i] = a * pu[i * su] + b * pv[i * sv] + c;
  auto& node = nodes_[id];
  node.in0 = u.id;
  node.in1 = v.id;
  node.c0 = a;
  node.c1 = b;
  node.c2 = c;
  return {this, id};
}

inline Var Tape::affine_dense(Var w, Var x, Var bias, std::size_t rows, std::size_t cols) {
  check_owner(w);
  check_owner(x);
  check_owner(bias);
  require_shape(w.size() == rows * cols, "affine_dense: W size != rows*cols");
  require_shape(x.size() == rows, "affine_dense: len(x) != rows");
  require_shape(bias.size() == cols, "affine_dense: len(b) != cols");
  auto [id, out] = push(Op::affine_dense, cols);
  const double* pw = values_.data() + nodes_[w.id].offset;
  const double* px = values_.data() + nodes_[x.id].offset;
  const double* pb = values_.data() + nodes_[bias.id].offset;
  for (std::size_t c = 0; c < cols; ++c) out[c] = pb[c];
  for (std::size_t r = 0; r < rows; ++r) {
    const double xr = px[r];
    if (xr == 0.0) continue;
    for (std::size_t c = 0; c < cols; ++c) out[c] += xr * pw[r * cols + c];
  }
  auto& node = nodes_[id];
  node.in0 = w.id;
  node.in1 = x.id;
  node.in2 = bias.id;
  node.aux = static_cast<std::uint32_t>(rows);
  return {this, id};
}

inline Var Tape::event_matvec(Var w_values,
                              const std::shared_ptr<const sparse::CsrPattern>& pattern,
                              Var x) {
  check_owner(w_values);
  check_owner(x);
  require_shape(w_values.size() == pattern->nnz(), "event_matvec: values != nnz");
  require_shape(x.size() == pattern->n_rows, "event_matvec: len(x) != n_rows");
  const std::uint32_t slot = pattern_slot(pattern);
  auto [id, out] = push(Op::event_matvec, pattern->n_cols);
  std::fill(out.begin(), out.end(), 0.0);
  const double* pw = values_.data() + nodes_[w_values.id].offset;
  const double* px = values_.data() + nodes_[x.id].offset;
  const auto& off = pattern->row_offsets;
  const auto& col = pattern->col_indices;
  double* po = out.data();
  for (std::size_t i = 0; i < pattern->n_rows; ++i) {
    const double xi = px[i];
    if (xi == 0.0) continue;
    if (xi == 1.0) {
      for (std::size_t j = off[i]; j < off[i + 1]; ++j) po[col[j]] += pw[j];
    } else {
      for (std::size_t j = off[i]; j < off[i + 1]; ++j) po[col[j]] += xi * pw[j];
    }
  }
  auto& node = nodes_[id];
  node.in0 = w_values.id;
  node.in1 = x.id;
  node.aux = slot;
  return {this, id};
}

inline Var Tape::spike(Var x, const surrogate::SurrogateSpec& spec) {
  check_owner(x);
  const std::uint32_t slot = spec_slot(spec);
  const std::size_t n = x.size();
  auto [id, out] = push(Op::spike, n);
  const std::size_t mask_at = masks_.size();
  masks_.resize(mask_at + n);
  const double* px = values_.data() + nodes_[x.id].offset;
  for (std::size_t i = 0; i < n; ++i) {
    const bool fired = px[i] >= 0.0;
    masks_[mask_at + i] = fired ? 1 : 0;
    out[i] = mode_ == SpikeMode::heaviside ? (fired ? 1.0 : 0.0)
                                           : surrogate::smooth_step(px[i], spec);
  }
  auto& node = nodes_[id];
  node.in0 = x.id;
  node.aux = static_cast<std::uint32_t>(mask_at);
  node.c0 = static_cast<double>(slot);
  return {this, id};
}

inline Var Tape::unary(Op op, Var x) {
  check_owner(x);
  const std::size_t n = x.size();
  auto [id, out] = push(op, n);
  const double* px = values_.data() + nodes_[x.id].offset;
  switch (op) {
    case Op::relu: for (std::size_t i = 0; i < n; ++i) out[i] = px[i] > 0.0 ? px[i] : 0.0; break;
    case Op::sigmoid: for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-px[i])); break;
    case Op::exp: for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(px[i]); break;
    case Op::exprel: for (std::size_t i = 0; i < n; ++i) out[i] = detail::exprel(px[i]); break;
    case Op::square: for (std::size_t i = 0; i < n; ++i) out[i] = px[i] * px[i]; break;
    case Op::abs: for (std::size_t i = 0; i < n; ++i) out[i] = std::abs(px[i]); break;
    default: throw std::logic_error("ad: not a unary op");
  }
  nodes_[id].in0 = x.id;
  return {this, id};
}

inline Var Tape::reduce(Op op, Var x) {
  check_owner(x);
  const std::size_t n = x.size();
  auto [id, out] = push(op, 1);
  const double* px = values_.data() + nodes_[x.id].offset;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += px[i];
  if (op == Op::mean) {
    require_shape(n > 0, "ad: mean of empty vector");
    s /= static_cast<double>(n);
  } else if (op != Op::sum) {
    throw std::logic_error("ad: not a reduction");
  }
  out[0] = s;
  nodes_[id].in0 = x.id;
  return {this, id};
}

inline Var Tape::select(Var mask, Var a, Var b) {
  check_owner(mask);
  check_owner(a);
  check_owner(b);
  const std::size_t n = mask.size();
  require_shape((a.size() == n || a.size() == 1) && (b.size() == n || b.size() == 1),
                "ad: select shape mismatch");
  auto [id, out] = push(Op::select, n);
  const double* pa = values_.data() + nodes_[a.id].offset;
  const double* pb = values_.data() + nodes_[b.id].offset;
  const std::size_t sa = a.size() == 1 ? 0 : 1, sb = b.size() == 1 ? 0 : 1;
  for (std::size_t i = 0; i < n; ++i) out[i] = mask_at(mask.id, i) ? pa[i * sa] : pb[i * sb];
  auto& node = nodes_[id];
  node.in0 = mask.id;
  node.in1 = a.id;
  node.in2 = b.id;
  return {this, id};
}

inline Var Tape::softmax_ce(Var logits, std::size_t label) {
  check_owner(logits);
  const std::size_t k = logits.size();
  require_shape(label < k, "softmax_ce: label out of range");
  auto [id, out] = push(Op::softmax_ce, 1);
  const double* pl = values_.data() + nodes_[logits.id].offset;
  double mx = pl[0];
  for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, pl[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) z += std::exp(pl[i] - mx);
  out[0] = std::log(z) + mx - pl[label];
  auto& node = nodes_[id];
  node.in0 = logits.id;
  node.aux = static_cast<std::uint32_t>(label);
  return {this, id};
}

// Backward sweep -------------------------------------------------------------------

inline Gradients Tape::backward(Var loss) const { return backward(loss, {}); }

inline Gradients Tape::backward(Var loss, std::vector<double> g) const {
  if (nodes_.empty()) throw std::invalid_argument("ad: backward on empty tape");
  if (loss.tape != this) throw std::invalid_argument("ad: loss from another tape");
  if (loss.size() != 1) throw ShapeError("ad: loss must be scalar");

  g.assign(values_.size(), 0.0);
  std::vector<std::uint8_t> live(nodes_.size(), 0);
  g[nodes_[loss.id].offset] = 1.0;
  live[loss.id] = 1;
  std::size_t visited = 0;

  auto gptr = [&](std::uint32_t id) { return g.data() + nodes_[id].offset; };
  auto vptr = [&](std::uint32_t id) { return values_.data() + nodes_[id].offset; };
  auto touch = [&](std::uint32_t id) {
    const Op op = nodes_[id].op;
    if (op != Op::constant) live[id] = 1;
  };
  // Accumulate dy (length n) into an input of length n or 1.
  auto accumulate = [&](std::uint32_t in, const double* dy, std::size_t n, double scale) {
    if (nodes_[in].op == Op::constant) return;
    touch(in);
    double* gi = gptr(in);
    if (nodes_[in].size == 1 && n != 1) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += dy[i];
      gi[0] += scale * s;
    } else {
      for (std::size_t i = 0; i < n; ++i) gi[i] += scale * dy[i];
    }
  };

  std::vector<double> tmp;
  for (std::int64_t k = loss.id; k >= 0; --k) {
    const auto id = static_cast<std::uint32_t>(k);
    if (!live[id]) continue;
    const Node& nd = nodes_[id];
    ++visited;
    const double* dy = gptr(id);
    const std::size_t n = nd.size;
    switch (nd.op) {
      case Op::constant:
      case Op::parameter:
        break;
      case Op::add:
        accumulate(nd.in0, dy, n, 1.0);
        accumulate(nd.in1, dy, n, 1.0);
        break;
      case Op::sub:
        accumulate(nd.in0, dy, n, 1.0);
        accumulate(nd.in1, dy, n, -1.0);
        break;
      case Op::mul:
      case Op::div: {
        const double* a = vptr(nd.in0);
        const double* b = vptr(nd.in1);
        const std::size_t sa = nodes_[nd.in0].size == 1 ? 0 : 1;
        const std::size_t sb = nodes_[nd.in1].size == 1 ? 0 : 1;
        tmp.resize(n);
        if (nodes_[nd.in0].op != Op::constant) {
          if (nd.op == Op::mul)
            for (std::size_t i = 0; i < n; ++i) tmp[i] = dy[i] * b[i * sb];
          else
            for (std::size_t i = 0; i < n; ++i) tmp[i] = dy[i] / b[i * sb];
          accumulate(nd.in0, tmp.data(), n, 1.0);
        }
        if (nodes_[nd.in1].op != Op::constant) {
          if (nd.op == Op::mul) {
            for (std::size_t i = 0; i < n; ++i) tmp[i] = dy[i] * a[i * sa];
          } else {
            for (std::size_t i = 0; i < n; ++i) {
              const double bi = b[i * sb];
              tmp[i] = -dy[i] * a[i * sa] / (bi * bi);
            }
          }
          accumulate(nd.in1, tmp.data(), n, 1.0);
        }
        break;
      }
      case Op::affine:
        accumulate(nd.in0, dy, n, nd.c0);
        break;
      case Op::mix:
        accumulate(nd.in0, dy, n, nd.c0);
        accumulate(nd.in1, dy, n, nd.c1);
        break;
      case Op::affine_dense: {
        const std::size_t rows = nd.aux, cols = n;
        const double* w = vptr(nd.in0);
        const double* x = vptr(nd.in1);
        if (nodes_[nd.in0].op != Op::constant) {
          touch(nd.in0);
          double* gw = gptr(nd.in0);
          for (std::size_t r = 0; r < rows; ++r) {
            const double xr = x[r];
            if (xr == 0.0) continue;
            for (std::size_t c = 0; c < cols; ++c) gw[r * cols + c] += xr * dy[c];
          }
        }
        if (nodes_[nd.in1].op != Op::constant) {
          touch(nd.in1);
          double* gx = gptr(nd.in1);
          for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += w[r * cols + c] * dy[c];
            gx[r] += s;
          }
        }
        accumulate(nd.in2, dy, n, 1.0);
        break;
      }
      case Op::event_matvec: {
        const auto& p = *patterns_[nd.aux];
        const double* w = vptr(nd.in0);
        const double* x = vptr(nd.in1);
        const auto& off = p.row_offsets;
        const auto& col = p.col_indices;
        if (nodes_[nd.in0].op != Op::constant) {
          touch(nd.in0);
          double* gw = gptr(nd.in0);
          for (std::size_t i = 0; i < p.n_rows; ++i) {
            const double xi = x[i];
            if (xi == 0.0) continue;
            for (std::size_t j = off[i]; j < off[i + 1]; ++j) gw[j] += xi * dy[col[j]];
          }
        }
        if (nodes_[nd.in1].op != Op::constant) {
          touch(nd.in1);
          double* gx = gptr(nd.in1);
          for (std::size_t i = 0; i < p.n_rows; ++i) {
            double r = 0.0;
            for (std::size_t j = off[i]; j < off[i + 1]; ++j) r += w[j] * dy[col[j]];
            gx[i] += r;
          }
        }
        break;
      }
      case Op::spike: {
        if (nodes_[nd.in0].op == Op::constant) break;
        const auto& spec = specs_[static_cast<std::size_t>(nd.c0)];
        const double* x = vptr(nd.in0);
        tmp.resize(n);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = dy[i] * surrogate::grad(x[i], spec);
        accumulate(nd.in0, tmp.data(), n, 1.0);
        break;
      }
      case Op::relu:
      case Op::sigmoid:
      case Op::exp:
      case Op::exprel:
      case Op::square:
      case Op::abs: {
        if (nodes_[nd.in0].op == Op::constant) break;
        const double* x = vptr(nd.in0);
        const double* y = vptr(id);
        tmp.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
          double d = 0.0;
          switch (nd.op) {
            case Op::relu: d = x[i] >= 0.0 ? 1.0 : 0.0; break;  // right limit at 0
            case Op::sigmoid: d = y[i] * (1.0 - y[i]); break;
            case Op::exp: d = y[i]; break;
            case Op::exprel: d = detail::exprel_grad(x[i]); break;
            case Op::square: d = 2.0 * x[i]; break;
            case Op::abs: d = x[i] >= 0.0 ? 1.0 : -1.0; break;
            default: break;
          }
          tmp[i] = dy[i] * d;
        }
        accumulate(nd.in0, tmp.data(), n, 1.0);
        break;
      }
      case Op::sum:
      case Op::mean: {
        if (nodes_[nd.in0].op == Op::constant) break;
        const std::size_t m = nodes_[nd.in0].size;
        const double scale = nd.op == Op::mean ? 1.0 / static_cast<double>(m) : 1.0;
        touch(nd.in0);
        double* gi = gptr(nd.in0);
        for (std::size_t i = 0; i < m; ++i) gi[i] += scale * dy[0];
        break;
      }
      case Op::select: {
        tmp.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          if (mask_at(nd.in0, i)) tmp[i] = dy[i];
        accumulate(nd.in1, tmp.data(), n, 1.0);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = mask_at(nd.in0, i) ? 0.0 : dy[i];
        accumulate(nd.in2, tmp.data(), n, 1.0);
        break;
      }
      case Op::softmax_ce: {
        if (nodes_[nd.in0].op == Op::constant) break;
        const std::size_t k = nodes_[nd.in0].size;
        const double* l = vptr(nd.in0);
        double mx = l[0];
        for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, l[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < k; ++i) z += std::exp(l[i] - mx);
        touch(nd.in0);
        double* gl = gptr(nd.in0);
        for (std::size_t i = 0; i < k; ++i) {
          const double p = std::exp(l[i] - mx) / z;
          gl[i] += dy[0] * (p - (i == nd.aux ? 1.0 : 0.0));
        }
        break;
      }
    }
  }
  Gradients out(this, std::move(g));
  out.visited_ = visited;
  return out;
}

// Public spelling of the primitives -------------------------------------------------

inline Var add(Var a, Var b) { return a.tape->binary(Op::add, a, b); }
inline Var sub(Var a, Var b) { return a.tape->binary(Op::sub, a, b); }
inline Var mul(Var a, Var b) { return a.tape->binary(Op::mul, a, b); }
inline Var div(Var a, Var b) { return a.tape->binary(Op::div, a, b); }
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

/// a*x + b.
inline Var affine(Var x, double a, double b = 0.0) { return x.tape->affine(x, a, b); }
inline Var scale(Var x, double a) { return x.tape->affine(x, a, 0.0); }
inline Var operator*(double a, Var x) { return scale(x, a); }
/// a*u + b*v + c.
inline Var mix(Var u, Var v, double a, double b, double c = 0.0) {
  return u.tape->mix(u, v, a, b, c);
}
/// y = x^T W + bias with W stored row-major [rows x cols].
inline Var affine_dense(Var w, Var x, Var bias, std::size_t rows, std::size_t cols) {
  return w.tape->affine_dense(w, x, bias, rows, cols);
}
inline Var event_matvec(Var w_values, const std::shared_ptr<const sparse::CsrPattern>& p,
                        Var x) {
  return w_values.tape->event_matvec(w_values, p, x);
}
inline Var spike(Var x, const surrogate::SurrogateSpec& s) { return x.tape->spike(x, s); }
inline Var relu(Var x) { return x.tape->unary(Op::relu, x); }
inline Var sigmoid(Var x) { return x.tape->unary(Op::sigmoid, x); }
inline Var exp(Var x) { return x.tape->unary(Op::exp, x); }
inline Var exprel(Var x) { return x.tape->unary(Op::exprel, x); }
inline Var square(Var x) { return x.tape->unary(Op::square, x); }
inline Var abs(Var x) { return x.tape->unary(Op::abs, x); }
inline Var sum(Var x) { return x.tape->reduce(Op::sum, x); }
inline Var mean(Var x) { return x.tape->reduce(Op::mean, x); }
inline Var select(Var mask, Var a, Var b) { return mask.tape->select(mask, a, b); }
inline Var softmax_cross_entropy(Var logits, std::size_t label) {
  return logits.tape->softmax_ce(logits, label);
}

/// Scalar function of one parameter vector, recorded on the given tape.
using TapeFunction = std::function<Var(Tape&, Var)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares the reverse-mode gradient of f at x0 with central differences,
/// coordinate by coordinate: |analytic - fd| / (|fd| + 1e-12), maximised.
/// Spiking functions should be checked with SpikeMode::relaxed.
inline GradCheckResult grad_check_detailed(const TapeFunction& f, std::span<const double> x0,
                                           double eps,
                                           SpikeMode mode = SpikeMode::heaviside) {
  GradCheckResult r;
  {
    Tape tape(mode);
    Var x = tape.parameter(x0);
    Var loss = f(tape, x);
    r.analytic = tape.backward(loss).copy(x);
  }
  std::vector<double> xp(x0.begin(), x0.end());
  Tape tape(mode);
  auto eval = [&](std::span<const double> at) {
    tape.clear();
    Var x = tape.parameter(at);
    return f(tape, x).scalar();
  };
  r.numeric.resize(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + eps;
    const double fp = eval(xp);
    xp[i] = orig - eps;
    const double fm = eval(xp);
    xp[i] = orig;
    r.numeric[i] = (fp - fm) / (2.0 * eps);
    const double err =
        std::abs(r.analytic[i] - r.numeric[i]) / (std::abs(r.numeric[i]) + 1e-12);
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = i;
    }
  }
  return r;
}

inline double grad_check(const TapeFunction& f, std::span<const double> x0, double eps,
                         SpikeMode mode = SpikeMode::heaviside) {
  return grad_check_detailed(f, x0, eps, mode).max_rel_error;
}

}  // namespace spikediff::ad
