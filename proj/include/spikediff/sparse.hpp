// SPDX-License-Identifier: Apache-2.0
//
// Compressed-sparse-row synaptic connectivity and the event-driven
// matrix-vector product y = x W, where x holds presynaptic spike events
// (rows) and y the postsynaptic accumulation (columns).

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spikediff/common.hpp"

namespace spikediff::sparse {

using Index = std::uint32_t;

/// Row-major dense matrix; used for oracles, readout weights and I/O.
template <class Real = double>
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> data;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c, Real fill = Real(0))
      : rows(r), cols(c), data(r * c, fill) {}

  Real& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  Real operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }
  bool operator==(const DenseMatrix&) const = default;
};

/// Presynaptic spike indicators for one time step.
class EventVector {
 public:
  EventVector() = default;
  explicit EventVector(std::size_t n) : bits_(n, 0) {}
  explicit EventVector(std::vector<std::uint8_t> bits)
      : bits_(std::move(bits)) {}
  EventVector(std::initializer_list<bool> init) {
    bits_.reserve(init.size());
    for (bool b : init) bits_.push_back(b ? 1 : 0);
  }

  std::size_t size() const { return bits_.size(); }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool v) { bits_[i] = v ? 1 : 0; }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto b : bits_) c += b;
    return c;
  }
  std::span<const std::uint8_t> bits() const { return bits_; }

 private:
  std::vector<std::uint8_t> bits_;
};

/// Sparsity pattern shared between matrices that differ only in values
/// (e.g. successive training iterates of one weight matrix).
struct CsrPattern {
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<Index> col_indices;
  std::vector<Index> row_offsets;

  std::size_t nnz() const { return col_indices.size(); }
};

inline void validate_pattern(const CsrPattern& p) {
  if (p.row_offsets.size() != p.n_rows + 1)
    throw DataError("csr: row_offsets must have n_rows + 1 entries");
  if (p.row_offsets.front() != 0)
    throw DataError("csr: row_offsets[0] must be 0");
  if (p.row_offsets.back() != p.col_indices.size())
    throw DataError("csr: row_offsets[n_rows] must equal nnz");
  for (std::size_t i = 0; i < p.n_rows; ++i) {
    if (p.row_offsets[i] > p.row_offsets[i + 1])
      throw DataError("csr: row_offsets must be nondecreasing");
    // Duplicates are rejected; a per-row seen-set would cost O(n_cols), so
    // sort a copy of the row instead.
    std::vector<Index> row(p.col_indices.begin() + p.row_offsets[i],
                           p.col_indices.begin() + p.row_offsets[i + 1]);
    std::sort(row.begin(), row.end());
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (row[k] >= p.n_cols)
        throw DataError("csr: column index out of range");
      if (k > 0 && row[k] == row[k - 1])
        throw DataError("csr: duplicate entry (" + std::to_string(i) + ", " +
                        std::to_string(row[k]) + ")");
    }
  }
}

/// Synaptic weights in CSR form: rows are presynaptic neurons, columns
/// postsynaptic. The pattern is immutable and shared; values are owned.
template <class Real = double>
class CsrMatrix {
 public:
  CsrMatrix() {
    auto p = std::make_shared<CsrPattern>();
    p->row_offsets = {0};
    pattern_ = std::move(p);
  }

  CsrMatrix(std::size_t n_rows, std::size_t n_cols, std::vector<Real> values,
            std::vector<Index> col_indices, std::vector<Index> row_offsets)
      : values_(std::move(values)) {
    auto p = std::make_shared<CsrPattern>();
    p->n_rows = n_rows;
    p->n_cols = n_cols;
    p->col_indices = std::move(col_indices);
    p->row_offsets = std::move(row_offsets);
    validate_pattern(*p);
    if (values_.size() != p->col_indices.size())
      throw DataError("csr: values and col_indices differ in length");
    pattern_ = std::move(p);
  }

  CsrMatrix(std::shared_ptr<const CsrPattern> pattern, std::vector<Real> values)
      : pattern_(std::move(pattern)), values_(std::move(values)) {
    if (values_.size() != pattern_->nnz())
      throw DataError("csr: values length does not match pattern nnz");
  }

  /// Same pattern, new values.
  CsrMatrix with_values(std::vector<Real> values) const {
    return CsrMatrix(pattern_, std::move(values));
  }

  std::size_t n_rows() const { return pattern_->n_rows; }
  std::size_t n_cols() const { return pattern_->n_cols; }
  std::size_t nnz() const { return pattern_->nnz(); }
  std::span<const Real> values() const { return values_; }
  std::span<const Index> col_indices() const { return pattern_->col_indices; }
  std::span<const Index> row_offsets() const { return pattern_->row_offsets; }
  const std::shared_ptr<const CsrPattern>& pattern() const { return pattern_; }

  bool operator==(const CsrMatrix& o) const {
    return n_rows() == o.n_rows() && n_cols() == o.n_cols() &&
           values_ == o.values_ &&
           pattern_->col_indices == o.pattern_->col_indices &&
           pattern_->row_offsets == o.pattern_->row_offsets;
  }

 private:
  std::shared_ptr<const CsrPattern> pattern_;
  std::vector<Real> values_;
};

template <class Real>
CsrMatrix<Real> csr_from_dense(const DenseMatrix<Real>& dense) {
  std::vector<Real> values;
  std::vector<Index> cols;
  std::vector<Index> offsets{0};
  offsets.reserve(dense.rows + 1);
  for (std::size_t i = 0; i < dense.rows; ++i) {
    for (std::size_t j = 0; j < dense.cols; ++j) {
      Real v = dense(i, j);
      if (!std::isfinite(static_cast<double>(v)))
        throw DataError("csr_from_dense: non-finite entry");
      if (v != Real(0)) {
        values.push_back(v);
        cols.push_back(static_cast<Index>(j));
      }
    }
    offsets.push_back(static_cast<Index>(values.size()));
  }
  return CsrMatrix<Real>(dense.rows, dense.cols, std::move(values),
                         std::move(cols), std::move(offsets));
}

template <class Real>
DenseMatrix<Real> csr_to_dense(const CsrMatrix<Real>& w) {
  DenseMatrix<Real> d(w.n_rows(), w.n_cols());
  auto off = w.row_offsets();
  auto col = w.col_indices();
  auto val = w.values();
  for (std::size_t i = 0; i < w.n_rows(); ++i)
    for (std::size_t j = off[i]; j < off[i + 1]; ++j) d(i, col[j]) = val[j];
  return d;
}

/// y = x W for a spike vector x. Rows whose event bit is false are skipped
/// entirely; within an active row every synapse adds its weight to the
/// postsynaptic column it points at (col_ind[j], not col_ind[i]).
template <class Real>
std::vector<Real> event_matvec(const CsrMatrix<Real>& w, const EventVector& x) {
  require_shape(x.size() == w.n_rows(), "event_matvec: len(x) != n_rows");
  std::vector<Real> y(w.n_cols(), Real(0));
  auto off = w.row_offsets();
  auto col = w.col_indices();
  auto val = w.values();
  auto bits = x.bits();
  for (std::size_t i = 0; i < w.n_rows(); ++i) {
    if (!bits[i]) continue;
    for (std::size_t j = off[i]; j < off[i + 1]; ++j) y[col[j]] += val[j];
  }
  return y;
}

/// Real-valued generalisation of event_matvec: rows with x[i] == 0 are
/// skipped, other rows are scaled by x[i]. Identical to event_matvec when x
/// is 0/1. Used by the autodiff primitive and for relaxed gradient checks.
template <class Real>
void weighted_event_matvec(const CsrMatrix<Real>& w, std::span<const double> x,
                           std::span<double> y) {
  require_shape(x.size() == w.n_rows(), "event_matvec: len(x) != n_rows");
  require_shape(y.size() == w.n_cols(), "event_matvec: len(y) != n_cols");
  auto off = w.row_offsets();
  auto col = w.col_indices();
  auto val = w.values();
  for (std::size_t i = 0; i < w.n_rows(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    if (xi == 1.0) {
      for (std::size_t j = off[i]; j < off[i + 1]; ++j) y[col[j]] += val[j];
    } else {
      for (std::size_t j = off[i]; j < off[i + 1]; ++j)
        y[col[j]] += xi * val[j];
    }
  }
}

/// Vector-Jacobian product with respect to the (relaxed) event vector:
/// dx[i] = sum over row i of values[j] * dy[col_indices[j]].
template <class Real>
std::vector<double> event_matvec_grad_x(const CsrMatrix<Real>& w,
                                        std::span<const double> dy) {
  require_shape(dy.size() == w.n_cols(), "grad_x: len(dy) != n_cols");
  std::vector<double> dx(w.n_rows(), 0.0);
  auto off = w.row_offsets();
  auto col = w.col_indices();
  auto val = w.values();
  for (std::size_t i = 0; i < w.n_rows(); ++i) {
    double r = 0.0;
    for (std::size_t j = off[i]; j < off[i + 1]; ++j)
      r += static_cast<double>(val[j]) * dy[col[j]];
    dx[i] = r;
  }
  return dx;
}

/// Gradient with respect to the stored values: dvals[j] = x[i] * dy[col[j]]
/// for j in row i. Rows without an event contribute nothing.
template <class Real>
std::vector<double> event_matvec_grad_w(const CsrMatrix<Real>& pattern,
                                        std::span<const double> x,
                                        std::span<const double> dy) {
  require_shape(x.size() == pattern.n_rows(), "grad_w: len(x) != n_rows");
  require_shape(dy.size() == pattern.n_cols(), "grad_w: len(dy) != n_cols");
  std::vector<double> dvals(pattern.nnz(), 0.0);
  auto off = pattern.row_offsets();
  auto col = pattern.col_indices();
  for (std::size_t i = 0; i < pattern.n_rows(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    for (std::size_t j = off[i]; j < off[i + 1]; ++j) dvals[j] = xi * dy[col[j]];
  }
  return dvals;
}

template <class Real>
std::vector<double> event_matvec_grad_w(const CsrMatrix<Real>& pattern,
                                        const EventVector& x,
                                        std::span<const double> dy) {
  std::vector<double> xr(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xr[i] = x[i] ? 1.0 : 0.0;
  return event_matvec_grad_w(pattern, std::span<const double>(xr), dy);
}

/// Weight draw |sqrt(scale / fan_in) * N(0, 1)|.
struct WeightInit {
  double scale = 1.0;
  double fan_in = 1.0;
  bool absolute = true;
};

/// Each (i, j) present independently with probability p.
template <class Real = double>
CsrMatrix<Real> random_csr(std::size_t n_pre, std::size_t n_post, double p,
                           const WeightInit& init, std::uint64_t seed) {
  if (!(p > 0.0 && p <= 1.0))
    throw ConfigError("random_csr: connection probability must be in (0, 1]");
  if (!(init.scale > 0.0 && init.fan_in > 0.0))
    throw ConfigError("random_csr: weight scale and fan-in must be positive");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution connect(p);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sd = std::sqrt(init.scale / init.fan_in);
  std::vector<Real> values;
  std::vector<Index> cols;
  std::vector<Index> offsets{0};
  values.reserve(static_cast<std::size_t>(n_pre * n_post * p * 1.1) + 16);
  cols.reserve(values.capacity());
  for (std::size_t i = 0; i < n_pre; ++i) {
    for (std::size_t j = 0; j < n_post; ++j) {
      if (p < 1.0 && !connect(rng)) continue;
      double w = sd * normal(rng);
      if (init.absolute) w = std::abs(w);
      // A zero draw would vanish from a dense round trip; keep it explicit.
      values.push_back(static_cast<Real>(w));
      cols.push_back(static_cast<Index>(j));
    }
    offsets.push_back(static_cast<Index>(values.size()));
  }
  return CsrMatrix<Real>(n_pre, n_post, std::move(values), std::move(cols),
                         std::move(offsets));
}

/// Dense reference product y = x D, same loop order for every x.
template <class Real>
std::vector<Real> dense_matvec(const DenseMatrix<Real>& d,
                               std::span<const double> x) {
  std::vector<Real> y(d.cols, Real(0));
  for (std::size_t i = 0; i < d.rows; ++i) {
    const Real xi = static_cast<Real>(x[i]);
    for (std::size_t j = 0; j < d.cols; ++j) y[j] += xi * d(i, j);
  }
  return y;
}

}  // namespace spikediff::sparse
