// SPDX-License-Identifier: Apache-2.0
//
// Event-driven vs dense matvec timing on one random instance. Relative
// numbers only; both kernels run on the same matrix and spike vectors.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "spikediff/sparse.hpp"

namespace spikediff::bench {

struct MatvecBenchConfig {
  std::size_t n = 4096;
  double density = 0.01;
  double spike_rate = 0.02;  // fraction of active presynaptic neurons
  std::size_t n_vectors = 32;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
};

struct MatvecBenchResult {
  double event_s = 0.0;  // per matvec, median over repeats
  double dense_s = 0.0;
  double speedup = 0.0;
  double max_abs_diff = 0.0;
  std::size_t nnz = 0;
  double mean_active = 0.0;
};

inline MatvecBenchResult matvec_bench(const MatvecBenchConfig& c) {
  if (c.n == 0 || c.n_vectors == 0 || c.repeats == 0)
    throw ConfigError("matvec_bench: sizes must be > 0");
  if (!(c.spike_rate >= 0.0 && c.spike_rate <= 1.0))
    throw ConfigError("matvec_bench: spike_rate must be in [0, 1]");
  auto w = sparse::random_csr<double>(c.n, c.n, c.density, {1.0, 1.0, false}, c.seed);
  const auto d = sparse::csr_to_dense(w);

  std::mt19937_64 rng(c.seed + 1);
  std::bernoulli_distribution fire(c.spike_rate);
  std::vector<sparse::EventVector> ev;
  std::vector<std::vector<double>> xs;
  MatvecBenchResult r;
  r.nnz = w.nnz();
  for (std::size_t k = 0; k < c.n_vectors; ++k) {
    sparse::EventVector e(c.n);
    std::vector<double> x(c.n, 0.0);
    for (std::size_t i = 0; i < c.n; ++i)
      if (fire(rng)) {
        e.set(i, true);
        x[i] = 1.0;
      }
    r.mean_active += static_cast<double>(e.count()) / static_cast<double>(c.n_vectors);
    ev.push_back(std::move(e));
    xs.push_back(std::move(x));
  }

  using clock = std::chrono::steady_clock;
  volatile double sink = 0.0;
  auto time_it = [&](auto&& fn) {
    std::vector<double> times;
    for (std::size_t rep = 0; rep < c.repeats; ++rep) {
      const auto t0 = clock::now();
      for (std::size_t k = 0; k < c.n_vectors; ++k) sink = sink + fn(k);
      times.push_back(std::chrono::duration<double>(clock::now() - t0).count() /
                      static_cast<double>(c.n_vectors));
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
  };
  r.event_s = time_it([&](std::size_t k) { return sparse::event_matvec(w, ev[k])[0]; });
  r.dense_s = time_it([&](std::size_t k) { return sparse::dense_matvec(d, xs[k])[0]; });
  r.speedup = r.event_s > 0.0 ? r.dense_s / r.event_s : 0.0;

  for (std::size_t k = 0; k < c.n_vectors; ++k) {
    auto a = sparse::event_matvec(w, ev[k]);
    auto b = sparse::dense_matvec(d, xs[k]);
    for (std::size_t j = 0; j < c.n; ++j) r.max_abs_diff = std::max(r.max_abs_diff, std::abs(a[j] - b[j]));
  }
  return r;
}

}  // namespace spikediff::bench
