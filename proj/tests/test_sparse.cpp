#include <gtest/gtest.h>

#include <random>

#include "spikediff/sparse.hpp"

using namespace spikediff;
using namespace spikediff::sparse;

namespace {

// Independent oracle: y[j] = sum_i x[i] * D(i, j) over a dense copy built by hand.
std::vector<double> oracle_product(const std::vector<std::vector<double>>& d,
                                   const std::vector<double>& x) {
  std::vector<double> y(d.empty() ? 0 : d[0].size(), 0.0);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += x[i] * d[i][j];
  return y;
}

CsrMatrix<double> small() {
  // [[1, 0, 2], [0, 3, 0]]
  return CsrMatrix<double>(2, 3, {1.0, 2.0, 3.0}, {0, 2, 1}, {0, 2, 3});
}

}  // namespace

TEST(Csr, ListedExampleProducts) {
  auto w = small();
  EXPECT_EQ(event_matvec(w, EventVector{true, false}), (std::vector<double>{1, 0, 2}));
  EXPECT_EQ(event_matvec(w, EventVector{true, true}), (std::vector<double>{1, 3, 2}));
  EXPECT_EQ(event_matvec(w, EventVector{false, false}), (std::vector<double>{0, 0, 0}));
}

TEST(Csr, RejectsMalformedPatterns) {
  EXPECT_THROW(CsrMatrix<double>(2, 3, {1, 2}, {0, 0}, {0, 2, 2}), DataError);  // duplicate
  EXPECT_THROW(CsrMatrix<double>(2, 3, {1}, {3}, {0, 1, 1}), DataError);        // col range
  EXPECT_THROW(CsrMatrix<double>(2, 3, {1}, {0}, {0, 1}), DataError);           // offsets len
  EXPECT_THROW(CsrMatrix<double>(2, 3, {1, 2}, {0}, {0, 1, 1}), DataError);     // values len
}

TEST(Csr, ShapeMismatchThrows) {
  auto w = small();
  EXPECT_THROW(event_matvec(w, EventVector{true}), ShapeError);
}

TEST(Csr, DenseRoundTrip) {
  auto w = random_csr<double>(40, 30, 0.2, {1.0, 10.0, false}, 3);
  auto back = csr_from_dense(csr_to_dense(w));
  EXPECT_EQ(back, w);
}

TEST(Csr, NonFiniteDenseRejected) {
  DenseMatrix<double> d(1, 2, 1.0);
  d(0, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(csr_from_dense(d), DataError);
}

TEST(Csr, RandomMatchesDenseOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 5 + rng() % 60, m = 5 + rng() % 60;
    auto w = random_csr<double>(n, m, 0.15, {1.0, 4.0, false}, rng());
    auto dense = csr_to_dense(w);
    std::vector<std::vector<double>> d(n, std::vector<double>(m));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) d[i][j] = dense(i, j);
    EventVector x(n);
    std::vector<double> xr(n);
    for (std::size_t i = 0; i < n; ++i) {
      x.set(i, rng() % 3 == 0);
      xr[i] = x[i] ? 1.0 : 0.0;
    }
    auto y = event_matvec(w, x);
    auto ref = oracle_product(d, xr);
    for (std::size_t j = 0; j < m; ++j) EXPECT_NEAR(y[j], ref[j], 1e-12 * (1 + std::abs(ref[j])));

    std::vector<double> dy(m);
    for (auto& v : dy) v = std::normal_distribution<double>()(rng);
    auto gx = event_matvec_grad_x(w, dy);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += d[i][j] * dy[j];
      EXPECT_NEAR(gx[i], acc, 1e-12 * (1 + std::abs(acc)));
    }
    auto gw = event_matvec_grad_w(w, x, dy);
    auto off = w.row_offsets();
    auto col = w.col_indices();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = off[i]; k < off[i + 1]; ++k) EXPECT_EQ(gw[k], xr[i] * dy[col[k]]);
  }
}

TEST(Csr, RandomCsrDensityAndDeterminism) {
  auto a = random_csr<double>(200, 200, 0.1, {1.0, 100.0, true}, 42);
  auto b = random_csr<double>(200, 200, 0.1, {1.0, 100.0, true}, 42);
  EXPECT_EQ(a, b);
  const double density = static_cast<double>(a.nnz()) / 40000.0;
  // Binomial(40000, 0.1): sd of the density is 0.0015.
  EXPECT_NEAR(density, 0.1, 5 * 0.0015);
  for (double v : a.values()) EXPECT_GE(v, 0.0);
  EXPECT_THROW(random_csr<double>(2, 2, 0.0, {}, 1), ConfigError);
  EXPECT_THROW(random_csr<double>(2, 2, 1.5, {}, 1), ConfigError);
}

TEST(Csr, WithValuesSharesPattern) {
  auto w = small();
  auto w2 = w.with_values({4.0, 5.0, 6.0});
  EXPECT_EQ(w.pattern().get(), w2.pattern().get());
  EXPECT_EQ(event_matvec(w2, EventVector{false, true}), (std::vector<double>{0, 6, 0}));
}

TEST(Csr, FloatPrecisionAccumulates) {
  auto w = random_csr<float>(50, 20, 0.3, {1.0, 50.0, true}, 9);
  EventVector x(50);
  for (std::size_t i = 0; i < 50; i += 2) x.set(i, true);
  auto y = event_matvec(w, x);
  auto d = csr_to_dense(w);
  for (std::size_t j = 0; j < 20; ++j) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < 50; i += 2) acc += d(i, j);
    EXPECT_NEAR(y[j], acc, 1e-5f);
  }
}
