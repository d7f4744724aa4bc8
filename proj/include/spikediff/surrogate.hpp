// SPDX-License-Identifier: Apache-2.0
//
// Heaviside spike with pluggable surrogate derivatives. The forward pass is
// the same for every kind; only the backward rule differs. Formulas and
// their sources are listed in docs/surrogates.md.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spikediff/common.hpp"

namespace spikediff::surrogate {

enum class Kind {
  relu_grad,
  sigmoid,
  arctan,
  piecewise_quadratic,
  gaussian,
  multi_gaussian,
  slayer,
};

inline constexpr std::array<Kind, 7> kAllKinds = {
    Kind::relu_grad, Kind::sigmoid,        Kind::arctan, Kind::piecewise_quadratic,
    Kind::gaussian,  Kind::multi_gaussian, Kind::slayer,
};

struct SurrogateSpec {
  Kind kind = Kind::relu_grad;
  double alpha = 0.3;
  double width = 1.0;
};

inline std::string_view kind_name(Kind k) {
  switch (k) {
    case Kind::relu_grad: return "relu_grad";
    case Kind::sigmoid: return "sigmoid";
    case Kind::arctan: return "arctan";
    case Kind::piecewise_quadratic: return "piecewise_quadratic";
    case Kind::gaussian: return "gaussian";
    case Kind::multi_gaussian: return "multi_gaussian";
    case Kind::slayer: return "slayer";
  }
  return "?";
}

inline Kind kind_from_name(std::string_view name) {
  for (Kind k : kAllKinds)
    if (kind_name(k) == name) return k;
  throw ConfigError("unknown surrogate kind: " + std::string(name));
}

inline void validate(const SurrogateSpec& s) {
  if (!(s.alpha > 0.0)) throw ConfigError("surrogate: alpha must be > 0");
  const bool uses_width =
      s.kind == Kind::relu_grad || s.kind == Kind::piecewise_quadratic;
  if (uses_width && !(s.width > 0.0))
    throw ConfigError("surrogate: width must be > 0");
}

/// Heaviside with H(0) = 1.
inline double spike(double x) { return x >= 0.0 ? 1.0 : 0.0; }

namespace detail {
inline double normal_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

// Multi-Gaussian constants (h, s, sigma) from the source.
inline constexpr double kMgH = 0.15;
inline constexpr double kMgS = 6.0;
inline constexpr double kMgSigma = 0.5;

inline double normal_cdf(double x, double mu, double sigma) {
  return 0.5 * std::erfc(-(x - mu) / (sigma * std::numbers::sqrt2));
}

inline double multi_gaussian_raw(double x) {
  return (1.0 + kMgH) * normal_pdf(x, 0.0, kMgSigma) -
         kMgH * normal_pdf(x, kMgSigma, kMgS * kMgSigma) -
         kMgH * normal_pdf(x, -kMgSigma, kMgS * kMgSigma);
}

inline double multi_gaussian_cdf_raw(double x) {
  return (1.0 + kMgH) * normal_cdf(x, 0.0, kMgSigma) -
         kMgH * normal_cdf(x, kMgSigma, kMgS * kMgSigma) -
         kMgH * normal_cdf(x, -kMgSigma, kMgS * kMgSigma);
}

// Positive root of the unclipped mixture; the clipped surrogate is supported
// on [-root, root].
inline double multi_gaussian_root() {
  static const double root = [] {
    double lo = 0.0, hi = 10.0;
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      (multi_gaussian_raw(mid) > 0.0 ? lo : hi) = mid;
    }
    return lo;
  }();
  return root;
}
}  // namespace detail

/// g'(x) for one scalar.
inline double grad(double x, const SurrogateSpec& s) {
  const double a = s.alpha;
  switch (s.kind) {
    case Kind::relu_grad:
      return std::max(0.0, a * (s.width - std::abs(x)));
    case Kind::sigmoid: {
      // a s(ax)(1 - s(ax)) written in |x| so it is even to the last bit.
      const double e = std::exp(-a * std::abs(x));
      return a * e / ((1.0 + e) * (1.0 + e));
    }
    case Kind::arctan: {
      const double u = std::numbers::pi / 2.0 * a * x;
      return a / (2.0 * (1.0 + u * u));
    }
    case Kind::piecewise_quadratic:
      return std::max(0.0, a * (1.0 - std::abs(x) / s.width));
    case Kind::gaussian:
      return a / std::sqrt(2.0 * std::numbers::pi) * std::exp(-0.5 * (a * x) * (a * x));
    case Kind::multi_gaussian:
      // The source mixture has small negative side lobes; clipped at zero.
      return a * std::max(0.0, detail::multi_gaussian_raw(std::abs(x)));
    case Kind::slayer:
      return 0.5 * a * std::exp(-a * std::abs(x));
  }
  throw ConfigError("surrogate: unknown kind");
}

/// A smooth step S with S' = grad(., s). Substituted for the Heaviside when a
/// tape runs in relaxed mode, so that finite differences of the forward pass
/// measure exactly what the surrogate backward rule computes.
inline double smooth_step(double x, const SurrogateSpec& s) {
  const double a = s.alpha;
  const double w = s.width;
  switch (s.kind) {
    case Kind::relu_grad:
      if (x <= -w) return 0.0;
      if (x <= 0.0) return 0.5 * a * (w + x) * (w + x);
      if (x < w) return a * w * w - 0.5 * a * (w - x) * (w - x);
      return a * w * w;
    case Kind::sigmoid:
      return 1.0 / (1.0 + std::exp(-a * x));
    case Kind::arctan:
      return std::atan(std::numbers::pi / 2.0 * a * x) / std::numbers::pi + 0.5;
    case Kind::piecewise_quadratic:
      if (x <= -w) return 0.0;
      if (x <= 0.0) return 0.5 * a * (x + w) * (x + w) / w;
      if (x < w) return a * w - 0.5 * a * (w - x) * (w - x) / w;
      return a * w;
    case Kind::gaussian:
      return detail::normal_cdf(a * x, 0.0, 1.0);
    case Kind::multi_gaussian: {
      const double r = detail::multi_gaussian_root();
      const double xc = std::clamp(x, -r, r);
      return a * (detail::multi_gaussian_cdf_raw(xc) -
                  detail::multi_gaussian_cdf_raw(-r));
    }
    case Kind::slayer:
      return x < 0.0 ? 0.5 * std::exp(a * x) : 1.0 - 0.5 * std::exp(-a * x);
  }
  throw ConfigError("surrogate: unknown kind");
}

inline std::vector<double> spike_forward(std::span<const double> x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = spike(x[i]);
  return out;
}

inline std::vector<double> spike_backward(std::span<const double> x,
                                          const SurrogateSpec& s) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = grad(x[i], s);
  return out;
}

}  // namespace spikediff::surrogate
