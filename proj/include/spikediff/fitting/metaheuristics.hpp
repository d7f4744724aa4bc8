// SPDX-License-Identifier: Apache-2.0
//
// Derivative-free baselines: differential evolution (rand/1/bin), DE with
// two-point crossover, and particle swarm optimisation. Objective values for
// one generation are computed under a parallel map; selection is sequential,
// so results depend only on the seed.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spikediff/common.hpp"
#include "spikediff/fitting/lbfgsb.hpp"

namespace spikediff::fitting {

enum class Method { lbfgsb, de, two_points_de, pso };

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::lbfgsb: return "lbfgsb";
    case Method::de: return "de";
    case Method::two_points_de: return "two_points_de";
    case Method::pso: return "pso";
  }
  return "?";
}

inline Method method_from_name(std::string_view s) {
  for (Method m : {Method::lbfgsb, Method::de, Method::two_points_de, Method::pso})
    if (method_name(m) == s) return m;
  throw ConfigError("unknown optimizer method: " + std::string(s));
}

struct MetaConfig {
  std::size_t population = 20;
  std::size_t max_evaluations = 5000;
  std::uint64_t seed = 0;
  double F = 0.8;         // DE differential weight
  double CR = 0.9;        // DE crossover rate (binomial)
  double inertia = 0.7298;
  double c_personal = 1.49618;
  double c_social = 1.49618;
  double v_max_frac = 0.5;  // PSO speed limit as a fraction of the box width
};

using Objective = std::function<double(std::span<const double>)>;

namespace detail {

// Non-finite objective values rank last.
inline double sanitize(double f) {
  return std::isfinite(f) ? f : std::numeric_limits<double>::infinity();
}

struct Budgeted {
  const Objective& f;
  std::size_t threads;
  OptimResult& r;
  std::size_t max_evaluations;

  std::size_t remaining() const { return max_evaluations - r.evaluations; }

  // Evaluates the first `count` candidates; appends best-so-far per evaluation.
  std::vector<double> run(const std::vector<std::vector<double>>& xs, std::size_t count) {
    std::vector<double> out(count);
    parallel_for(count, threads, [&](std::size_t i) { out[i] = sanitize(f(xs[i])); });
    for (std::size_t i = 0; i < count; ++i) {
      ++r.evaluations;
      if (out[i] < r.f || r.x.empty()) {
        r.f = out[i];
        r.x = xs[i];
      }
      r.history.push_back(r.f);
    }
    return out;
  }
};

// Out-of-box components are placed between the base value and the bound.
inline double bounce_back(double v, double base, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (v < lo) return lo + u(rng) * (base - lo);
  if (v > hi) return hi - u(rng) * (hi - base);
  return v;
}

inline std::vector<std::vector<double>> uniform_population(const Bounds& b, std::size_t n,
                                                           std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> pop(n, std::vector<double>(b.size()));
  for (auto& x : pop)
    for (std::size_t j = 0; j < b.size(); ++j)
      x[j] = b.lower[j] + u(rng) * (b.upper[j] - b.lower[j]);
  return pop;
}

inline OptimResult differential_evolution(const Objective& f, const Bounds& b,
                                          const MetaConfig& cfg, bool two_point,
                                          std::size_t threads) {
  if (cfg.population < 4) throw ConfigError("de: population must be >= 4");
  const std::size_t d = b.size();
  const std::size_t np = cfg.population;
  std::mt19937_64 rng(cfg.seed);
  OptimResult r;
  Budgeted eval{f, threads, r, cfg.max_evaluations};

  auto pop = uniform_population(b, np, rng);
  const std::size_t first = std::min(np, eval.remaining());
  auto fit = eval.run(pop, first);
  pop.resize(first);
  if (first < np) return r;

  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, np - 1);
  std::uniform_int_distribution<std::size_t> dim(0, d - 1);
  std::vector<std::vector<double>> trials(np, std::vector<double>(d));
  while (eval.remaining() > 0) {
    for (std::size_t i = 0; i < np; ++i) {
      std::size_t r1, r2, r3;
      do r1 = pick(rng); while (r1 == i);
      do r2 = pick(rng); while (r2 == i || r2 == r1);
      do r3 = pick(rng); while (r3 == i || r3 == r1 || r3 == r2);
      auto& t = trials[i];
      if (two_point) {
        // Mutant components on a cyclic segment [a, a + len), len in [1, d].
        const std::size_t a = dim(rng);
        const std::size_t len = 1 + std::uniform_int_distribution<std::size_t>(0, d - 1)(rng);
        t = pop[i];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t j = (a + k) % d;
          const double v = pop[r1][j] + cfg.F * (pop[r2][j] - pop[r3][j]);
          t[j] = bounce_back(v, pop[r1][j], b.lower[j], b.upper[j], rng);
        }
      } else {
        const std::size_t jrand = dim(rng);
        for (std::size_t j = 0; j < d; ++j) {
          if (j == jrand || u(rng) < cfg.CR) {
            const double v = pop[r1][j] + cfg.F * (pop[r2][j] - pop[r3][j]);
            t[j] = bounce_back(v, pop[r1][j], b.lower[j], b.upper[j], rng);
          } else {
            t[j] = pop[i][j];
          }
        }
      }
    }
    const std::size_t count = std::min(np, eval.remaining());
    auto ft = eval.run(trials, count);
    for (std::size_t i = 0; i < count; ++i) {
      if (ft[i] <= fit[i]) {
        pop[i] = trials[i];
        fit[i] = ft[i];
      }
    }
    ++r.iterations;
  }
  return r;
}

inline OptimResult particle_swarm(const Objective& f, const Bounds& b, const MetaConfig& cfg,
                                  std::size_t threads) {
  if (cfg.population < 2) throw ConfigError("pso: population must be >= 2");
  const std::size_t d = b.size();
  const std::size_t np = cfg.population;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  OptimResult r;
  Budgeted eval{f, threads, r, cfg.max_evaluations};

  auto pos = uniform_population(b, np, rng);
  std::vector<std::vector<double>> vel(np, std::vector<double>(d));
  std::vector<double> vmax(d);
  for (std::size_t j = 0; j < d; ++j) vmax[j] = cfg.v_max_frac * (b.upper[j] - b.lower[j]);
  for (auto& v : vel)
    for (std::size_t j = 0; j < d; ++j) v[j] = (2.0 * u(rng) - 1.0) * vmax[j];

  const std::size_t first = std::min(np, eval.remaining());
  auto fit = eval.run(pos, first);
  if (first < np) return r;
  auto best_pos = pos;
  auto best_fit = fit;

  while (eval.remaining() > 0) {
    const std::vector<double> global = r.x;
    for (std::size_t i = 0; i < np; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        double v = cfg.inertia * vel[i][j] +
                   cfg.c_personal * u(rng) * (best_pos[i][j] - pos[i][j]) +
                   cfg.c_social * u(rng) * (global[j] - pos[i][j]);
        v = std::clamp(v, -vmax[j], vmax[j]);
        double x = pos[i][j] + v;
        if (x < b.lower[j] || x > b.upper[j]) {
          x = std::clamp(x, b.lower[j], b.upper[j]);
          v = 0.0;
        }
        pos[i][j] = x;
        vel[i][j] = v;
      }
    }
    const std::size_t count = std::min(np, eval.remaining());
    auto ft = eval.run(pos, count);
    for (std::size_t i = 0; i < count; ++i) {
      if (ft[i] < best_fit[i]) {
        best_fit[i] = ft[i];
        best_pos[i] = pos[i];
      }
    }
    ++r.iterations;
  }
  return r;
}

}  // namespace detail

inline OptimResult metaheuristic_minimize(Method method, const Objective& f, const Bounds& bounds,
                                          const MetaConfig& cfg, std::size_t threads = 1) {
  validate(bounds);
  if (cfg.max_evaluations == 0) throw ConfigError("metaheuristic: budget must be > 0");
  OptimResult r;
  switch (method) {
    case Method::de:
      r = detail::differential_evolution(f, bounds, cfg, false, threads);
      break;
    case Method::two_points_de:
      r = detail::differential_evolution(f, bounds, cfg, true, threads);
      break;
    case Method::pso:
      r = detail::particle_swarm(f, bounds, cfg, threads);
      break;
    case Method::lbfgsb:
      throw ConfigError("metaheuristic_minimize: lbfgsb is gradient-based");
  }
  r.stop_reason = "max_evaluations";
  return r;
}

}  // namespace spikediff::fitting
