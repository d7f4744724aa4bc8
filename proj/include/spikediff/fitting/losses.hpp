// SPDX-License-Identifier: Apache-2.0
//
// Losses for neuron fitting: mean squared error between membrane traces and
// the coincidence-based gamma factor between spike trains.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "spikediff/common.hpp"

namespace spikediff::fitting {

/// (1/T) sum (model - data)^2.
inline double mse_loss(std::span<const double> model, std::span<const double> data) {
  if (model.size() != data.size()) throw ShapeError("mse_loss: length mismatch");
  if (model.empty()) throw ShapeError("mse_loss: empty traces");
  double s = 0.0;
  for (std::size_t i = 0; i < model.size(); ++i) {
    const double d = model[i] - data[i];
    s += d * d;
  }
  return s / static_cast<double>(model.size());
}

/// Number of one-to-one coincidences between two sorted spike trains: pairs
/// with |t_model - t_data| <= window, each spike used at most once. Data
/// spikes are scanned in time order and take the earliest free model spike
/// in their window; on interval graphs this greedy order yields a maximum
/// matching, so the count is symmetric in its arguments.
inline std::size_t count_coincidences(std::span<const double> model,
                                      std::span<const double> data, double window) {
  std::size_t n = 0;
  std::size_t m = 0;
  for (double td : data) {
    while (m < model.size() && model[m] < td - window) ++m;
    if (m < model.size() && model[m] <= td + window) {
      ++n;
      ++m;
    }
  }
  return n;
}

struct GammaTerms {
  std::size_t n_coinc = 0;
  std::size_t n_exp = 0;
  std::size_t n_model = 0;
  double r_exp = 0.0;  // spikes per ms
  double gamma = 0.0;
};

/// Gamma factor with coincidence window `delta` (ms) over a recording of
/// `duration` ms. 1 for identical trains, 0 at the coincidence count
/// expected from two independent Poisson trains of equal rate.
inline GammaTerms gamma_terms(std::span<const double> model, std::span<const double> data,
                              double delta, double duration) {
  if (!(delta > 0.0)) throw ConfigError("gamma_factor: delta must be > 0");
  if (!(duration > 0.0)) throw ConfigError("gamma_factor: duration must be > 0");
  if (data.empty()) throw DataError("gamma_factor: empty data spike train");
  GammaTerms t;
  t.n_exp = data.size();
  t.n_model = model.size();
  t.r_exp = static_cast<double>(t.n_exp) / duration;
  const double q = 2.0 * delta * t.r_exp;  // expected coincidences per data spike
  if (!(q < 1.0)) throw ConfigError("gamma_factor: requires 2 * delta * r_exp < 1");
  t.n_coinc = count_coincidences(model, data, delta);
  const double ne = static_cast<double>(t.n_exp);
  const double nm = static_cast<double>(t.n_model);
  // Same value as 2 / (1 - q) * (N_coinc - q N_exp) / (N_exp + N_model),
  // grouped so that identical trains give exactly 1.
  t.gamma = ((static_cast<double>(t.n_coinc) / ne - q) / (1.0 - q)) * (2.0 * ne / (ne + nm));
  return t;
}

inline double gamma_factor(std::span<const double> model, std::span<const double> data,
                           double delta, double duration) {
  return gamma_terms(model, data, delta, duration).gamma;
}

/// 1 + 2 |r_data - r_model| / r_data - gamma.
inline double gamma_loss_from(double gamma, double r_data, double r_model) {
  if (!(r_data > 0.0)) throw DataError("gamma_loss: r_data must be > 0");
  return 1.0 + 2.0 * std::abs(r_data - r_model) / r_data - gamma;
}

inline double gamma_loss(std::span<const double> model, std::span<const double> data,
                         double delta, double duration) {
  const double g = gamma_factor(model, data, delta, duration);
  const double r_data = static_cast<double>(data.size()) / duration;
  const double r_model = static_cast<double>(model.size()) / duration;
  return gamma_loss_from(g, r_data, r_model);
}

}  // namespace spikediff::fitting
