// SPDX-License-Identifier: Apache-2.0
//
// Box-constrained limited-memory BFGS. Simplified against the full
// Cauchy-point algorithm: the two-loop recursion runs on the free variables
// (those not pinned at a bound by the gradient) and a projected backtracking
// line search enforces Armijo decrease.

#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "spikediff/common.hpp"

namespace spikediff::fitting {

struct Bounds {
  std::vector<double> lower;
  std::vector<double> upper;

  std::size_t size() const { return lower.size(); }
};

inline void validate(const Bounds& b) {
  if (b.lower.size() != b.upper.size()) throw ConfigError("bounds: lower/upper length mismatch");
  if (b.lower.empty()) throw ConfigError("bounds: no parameters");
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!std::isfinite(b.lower[i]) || !std::isfinite(b.upper[i]))
      throw ConfigError("bounds: must be finite");
    if (!(b.lower[i] < b.upper[i])) throw ConfigError("bounds: lower must be < upper");
  }
}

inline bool within(std::span<const double> x, const Bounds& b) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!(x[i] >= b.lower[i] && x[i] <= b.upper[i])) return false;
  return true;
}

struct LbfgsbConfig {
  std::size_t memory = 10;
  std::size_t max_iterations = 200;
  std::size_t max_evaluations = 1000;
  double pgtol = 1e-10;   // on the inf-norm of the projected gradient
  double ftol = 1e-12;    // relative decrease (f_k - f_{k+1}) / max(|f_k|, |f_{k+1}|, 1)
  double armijo = 1e-4;
  std::size_t max_backtracks = 40;
};

struct OptimResult {
  std::vector<double> x;
  double f = std::numeric_limits<double>::infinity();
  std::vector<double> history;  // accepted (or best-so-far) objective values
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  std::string stop_reason;
};

/// f(x, grad) returns the objective and writes its gradient.
using ValueAndGrad = std::function<double(std::span<const double>, std::span<double>)>;

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace detail

inline OptimResult lbfgsb_minimize(const ValueAndGrad& fg, std::vector<double> x0,
                                   const Bounds& bounds, const LbfgsbConfig& cfg = {}) {
  validate(bounds);
  const std::size_t d = bounds.size();
  if (x0.size() != d) throw ShapeError("lbfgsb: len(x0) != number of bounds");
  if (!within(x0, bounds)) throw ConfigError("lbfgsb: x0 outside bounds");
  if (cfg.memory == 0 || cfg.max_iterations == 0 || cfg.max_evaluations == 0)
    throw ConfigError("lbfgsb: memory and budgets must be > 0");

  OptimResult r;
  std::vector<double> x = std::move(x0), g(d), xt(d), gt(d), dir(d);
  auto eval = [&](std::span<const double> at, std::span<double> grad) {
    ++r.evaluations;
    return fg(at, grad);
  };

  double f = eval(x, g);
  if (!std::isfinite(f) || !detail::all_finite(g))
    throw NumericalError("lbfgsb: non-finite objective or gradient at x0");
  r.history.push_back(f);

  struct Pair {
    std::vector<double> s, y;
    double rho;
  };
  std::deque<Pair> mem;
  std::vector<std::uint8_t> free_var(d);
  std::vector<double> alpha_buf;

  auto pinned = [&](std::size_t i) {
    return (x[i] <= bounds.lower[i] && g[i] > 0.0) || (x[i] >= bounds.upper[i] && g[i] < 0.0);
  };

  r.stop_reason = "max_iterations";
  for (r.iterations = 0; r.iterations < cfg.max_iterations; ++r.iterations) {
    double pg = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      free_var[i] = pinned(i) ? 0 : 1;
      if (free_var[i]) pg = std::max(pg, std::abs(g[i]));
    }
    if (pg <= cfg.pgtol) {
      r.stop_reason = "projected_gradient";
      break;
    }

    bool accepted = false;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      // Two-loop recursion restricted to free variables.
      for (std::size_t i = 0; i < d; ++i) dir[i] = free_var[i] ? g[i] : 0.0;
      alpha_buf.assign(mem.size(), 0.0);
      for (std::size_t k = mem.size(); k-- > 0;) {
        alpha_buf[k] = mem[k].rho * detail::dot(mem[k].s, dir);
        for (std::size_t i = 0; i < d; ++i) dir[i] -= alpha_buf[k] * mem[k].y[i];
      }
      if (!mem.empty()) {
        const auto& last = mem.back();
        const double gamma = detail::dot(last.s, last.y) / detail::dot(last.y, last.y);
        for (double& v : dir) v *= gamma;
      }
      for (std::size_t k = 0; k < mem.size(); ++k) {
        const double beta = mem[k].rho * detail::dot(mem[k].y, dir);
        for (std::size_t i = 0; i < d; ++i) dir[i] += mem[k].s[i] * (alpha_buf[k] - beta);
      }
      for (std::size_t i = 0; i < d; ++i) dir[i] = free_var[i] ? -dir[i] : 0.0;

      if (!(detail::dot(dir, g) < 0.0)) {
        mem.clear();
        for (std::size_t i = 0; i < d; ++i) dir[i] = free_var[i] ? -g[i] : 0.0;
      }

      double step = 1.0;
      if (mem.empty()) {
        const double norm = std::sqrt(detail::dot(dir, dir));
        if (norm > 0.0) step = std::min(1.0, 1.0 / norm);
      }
      for (std::size_t bt = 0; bt < cfg.max_backtracks; ++bt, step *= 0.5) {
        if (r.evaluations >= cfg.max_evaluations) break;
        bool moved = false;
        for (std::size_t i = 0; i < d; ++i) {
          xt[i] = std::clamp(x[i] + step * dir[i], bounds.lower[i], bounds.upper[i]);
          moved |= xt[i] != x[i];
        }
        if (!moved) break;
        const double ft = eval(xt, gt);
        if (!std::isfinite(ft) || !detail::all_finite(gt)) continue;
        double slope = 0.0;
        for (std::size_t i = 0; i < d; ++i) slope += g[i] * (xt[i] - x[i]);
        if (ft <= f + cfg.armijo * slope && ft <= f) {
          accepted = true;
          std::vector<double> s(d), y(d);
          for (std::size_t i = 0; i < d; ++i) {
            s[i] = xt[i] - x[i];
            y[i] = gt[i] - g[i];
          }
          const double sy = detail::dot(s, y);
          if (sy > std::numeric_limits<double>::epsilon() * detail::dot(y, y)) {
            if (mem.size() == cfg.memory) mem.pop_front();
            mem.push_back({std::move(s), std::move(y), 1.0 / sy});
          }
          const double rel = (f - ft) / std::max({std::abs(f), std::abs(ft), 1.0});
          x.swap(xt);
          g.swap(gt);
          f = ft;
          r.history.push_back(f);
          if (rel <= cfg.ftol) r.stop_reason = "relative_decrease";
          break;
        }
      }
      if (!accepted) {
        if (mem.empty() || r.evaluations >= cfg.max_evaluations) break;
        mem.clear();  // retry once along steepest descent
      }
    }
    if (!accepted) {
      r.stop_reason = r.evaluations >= cfg.max_evaluations ? "max_evaluations" : "line_search";
      break;
    }
    if (r.stop_reason == "relative_decrease") {
      ++r.iterations;
      break;
    }
    if (r.evaluations >= cfg.max_evaluations) {
      ++r.iterations;
      r.stop_reason = "max_evaluations";
      break;
    }
  }
  r.x = std::move(x);
  r.f = f;
  return r;
}

}  // namespace spikediff::fitting
