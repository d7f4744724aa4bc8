// SPDX-License-Identifier: Apache-2.0
//
// Single-neuron fitting problems and the multi-start driver. Optimizers work
// in normalised coordinates u in [0, 1]^d, x = lower + u * (upper - lower),
// so one tolerance suits parameters of very different magnitude.

#pragma once

#include <chrono>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "spikediff/autodiff.hpp"
#include "spikediff/common.hpp"
#include "spikediff/dynamics.hpp"
#include "spikediff/fitting/lbfgsb.hpp"
#include "spikediff/fitting/losses.hpp"
#include "spikediff/fitting/metaheuristics.hpp"
#include "spikediff/fitting/recording.hpp"

namespace spikediff::fitting {

enum class LossKind { mse, gamma };

inline std::string_view loss_name(LossKind k) { return k == LossKind::mse ? "mse" : "gamma"; }

inline LossKind loss_from_name(std::string_view s) {
  if (s == "mse") return LossKind::mse;
  if (s == "gamma") return LossKind::gamma;
  throw ConfigError("unknown loss: " + std::string(s));
}

struct ParamBound {
  std::string name;
  double lower = 0.0;
  double upper = 1.0;
};

struct FitProblem {
  dynamics::ModelKind model = dynamics::ModelKind::gif;
  std::vector<ParamBound> params;
  LossKind loss = LossKind::mse;
  Recording recording;
  dynamics::GifParams gif;  // values of parameters that are not fitted
  dynamics::HhParams hh;
  dynamics::ScalingConfig scaling;
  surrogate::SurrogateSpec surrogate;
  double gamma_delta = 2.0;  // ms
};

struct OptimizerConfig {
  Method method = Method::lbfgsb;
  LbfgsbConfig lbfgsb;
  MetaConfig meta;
  std::uint64_t seed = 0;
};

struct StartOutcome {
  std::vector<double> x0;  // physical units; empty for population methods
  std::vector<double> x;
  double loss = std::numeric_limits<double>::infinity();
  std::size_t evaluations = 0;
  double wall_time_s = 0.0;
  std::string status;  // stop reason, or "failed: ..."
};

struct FitResult {
  std::string method;
  std::vector<std::string> param_names;
  std::vector<double> best_params;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<double> loss_history;  // of the best start
  double wall_time_s = 0.0;
  std::size_t n_evaluations = 0;
  std::vector<StartOutcome> starts;
};

inline const std::vector<std::string>& allowed_params(dynamics::ModelKind m) {
  static const std::vector<std::string> gif{"A1", "A2", "tau_I1", "tau_I2"};
  static const std::vector<std::string> hh{"gNa", "gK", "gL"};
  return m == dynamics::ModelKind::gif ? gif : hh;
}

inline void validate(const FitProblem& p) {
  if (p.params.empty()) throw ConfigError("fit: no free parameters");
  const auto& allowed = allowed_params(p.model);
  for (std::size_t i = 0; i < p.params.size(); ++i) {
    const auto& b = p.params[i];
    if (std::find(allowed.begin(), allowed.end(), b.name) == allowed.end())
      throw ConfigError("fit: parameter '" + b.name + "' cannot be fitted for this model");
    for (std::size_t j = 0; j < i; ++j)
      if (p.params[j].name == b.name) throw ConfigError("fit: duplicate parameter " + b.name);
    if (!std::isfinite(b.lower) || !std::isfinite(b.upper) || !(b.lower < b.upper))
      throw ConfigError("fit: invalid bounds for " + b.name);
    if ((b.name == "tau_I1" || b.name == "tau_I2") && !(b.lower > 0.0))
      throw ConfigError("fit: time-constant bounds must be positive");
    if ((b.name == "gNa" || b.name == "gK" || b.name == "gL") && b.lower < 0.0)
      throw ConfigError("fit: conductance bounds must be nonnegative");
  }
  validate(p.recording);
  if (!(p.scaling.V_scale > 0.0)) throw ConfigError("fit: V_scale must be > 0");
  if (p.loss == LossKind::gamma && p.recording.spike_times.empty())
    throw DataError("fit: gamma loss needs spikes in the recording");
  dynamics::validate(p.gif);
  dynamics::validate(p.hh);
  surrogate::validate(p.surrogate);
}

inline std::vector<double> to_physical(const FitProblem& p, std::span<const double> u) {
  std::vector<double> x(u.size());
  for (std::size_t i = 0; i < u.size(); ++i)
    x[i] = p.params[i].lower + u[i] * (p.params[i].upper - p.params[i].lower);
  return x;
}

inline dynamics::GifParams gif_with(const FitProblem& p, std::span<const double> x) {
  dynamics::GifParams g = p.gif;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& n = p.params[i].name;
    if (n == "A1") g.A1 = x[i];
    else if (n == "A2") g.A2 = x[i];
    else if (n == "tau_I1") g.tau_I1 = x[i];
    else if (n == "tau_I2") g.tau_I2 = x[i];
  }
  return g;
}

inline dynamics::HhParams hh_with(const FitProblem& p, std::span<const double> x) {
  dynamics::HhParams h = p.hh;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& n = p.params[i].name;
    if (n == "gNa") h.gNa = x[i];
    else if (n == "gK") h.gK = x[i];
    else if (n == "gL") h.gL = x[i];
  }
  return h;
}

inline double spike_threshold(const FitProblem& p) {
  return p.model == dynamics::ModelKind::gif ? p.gif.V_th : dynamics::kHhSpikeThreshold;
}

/// Simulates the model at physical parameters x; trace V in mV.
inline dynamics::Trace simulate(const FitProblem& p, std::span<const double> x) {
  const double dt = p.recording.dt();
  if (p.model == dynamics::ModelKind::gif)
    return dynamics::simulate_gif(gif_with(p, x), p.recording.I_inj, dt);
  return dynamics::simulate_hh(hh_with(p, x), p.recording.I_inj, dt);
}

/// Loss at physical parameters (plain forward simulation).
inline double evaluate_loss(const FitProblem& p, std::span<const double> x) {
  const auto tr = simulate(p, x);
  if (p.loss == LossKind::mse) {
    double s = 0.0;
    for (std::size_t k = 0; k < tr.V.size(); ++k) {
      const double d = (tr.V[k] - p.recording.V[k]) / p.scaling.V_scale;
      s += d * d;
    }
    return s / static_cast<double>(tr.V.size());
  }
  return gamma_loss(tr.spike_times, p.recording.spike_times, p.gamma_delta,
                    p.recording.duration());
}

/// Rescaled MSE and its gradient with respect to normalised coordinates u,
/// by reverse mode through the whole recording.
inline double mse_value_and_grad(const FitProblem& p, std::span<const double> u,
                                 std::span<double> grad, ad::Tape& tape) {
  using namespace ad;
  tape.clear();
  const std::size_t d = u.size();
  const double dt = p.recording.dt();
  const double vs = p.scaling.V_scale;
  const std::size_t T = p.recording.size();
  std::vector<Var> leaf(d), phys(d);
  for (std::size_t i = 0; i < d; ++i) {
    leaf[i] = tape.parameter(u[i]);
    phys[i] = affine(leaf[i], p.params[i].upper - p.params[i].lower, p.params[i].lower);
  }
  auto find = [&](const char* name) -> const Var* {
    for (std::size_t i = 0; i < d; ++i)
      if (p.params[i].name == name) return &phys[i];
    return nullptr;
  };

  Var loss = tape.constant(0.0);
  if (p.model == dynamics::ModelKind::gif) {
    const dynamics::GifParams g = dynamics::rescale(p.gif, p.scaling);
    dynamics::GifTapeParams tp = dynamics::constant_gif_params(tape, g, dt);
    if (auto* v = find("A1")) tp.A1 = scale(*v, 1.0 / vs);
    if (auto* v = find("A2")) tp.A2 = scale(*v, 1.0 / vs);
    if (auto* v = find("tau_I1")) tp.decay_I1 = dynamics::decay_factor(*v, dt);
    if (auto* v = find("tau_I2")) tp.decay_I2 = dynamics::decay_factor(*v, dt);
    dynamics::GifTapeState s{tape.constant(0.0), tape.constant(0.0), tape.constant(g.V_rest)};
    for (std::size_t k = 0; k < T; ++k) {
      const double target = dynamics::rescale_voltage(p.recording.V[k], p.scaling);
      loss = add(loss, square(affine(s.V, 1.0, -target)));
      if (k + 1 == T) break;
      auto st = dynamics::gif_step(s, tp, tape.constant(p.recording.I_inj[k] / vs), p.surrogate);
      s = st.state;
    }
  } else {
    dynamics::HhTapeParams tp{tape.constant(p.hh.gNa), tape.constant(p.hh.gK),
                              tape.constant(p.hh.gL), p.hh.ENa, p.hh.EK, p.hh.EL, p.hh.C};
    if (auto* v = find("gNa")) tp.gNa = *v;
    if (auto* v = find("gK")) tp.gK = *v;
    if (auto* v = find("gL")) tp.gL = *v;
    const auto s0 = dynamics::HhState::resting(1);
    dynamics::HhTapeState s{tape.constant(s0.V), tape.constant(s0.m), tape.constant(s0.h),
                            tape.constant(s0.n)};
    for (std::size_t k = 0; k < T; ++k) {
      const double target = dynamics::rescale_voltage(p.recording.V[k], p.scaling);
      loss = add(loss, square(affine(s.V, 1.0 / vs, -p.scaling.V_offset / vs - target)));
      if (k + 1 == T) break;
      s = dynamics::hh_step(s, tp, tape.constant(p.recording.I_inj[k]), dt);
    }
  }
  loss = scale(loss, 1.0 / static_cast<double>(T));
  const auto g = tape.backward(loss);
  for (std::size_t i = 0; i < d; ++i) grad[i] = g[leaf[i]][0];
  return loss.scalar();
}

namespace detail {

inline std::uint64_t start_seed(std::uint64_t seed, std::size_t i) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(i), 0x5eedu};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace detail

/// Uniform draw in [0, 1]^d for start i; the same for every n_starts > i.
inline std::vector<double> start_point(std::uint64_t seed, std::size_t i, std::size_t d) {
  std::mt19937_64 rng(detail::start_seed(seed, i));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(d);
  for (auto& v : x) v = u(rng);
  return x;
}

inline StartOutcome run_start(const FitProblem& p, const OptimizerConfig& opt, std::size_t i,
                              std::vector<double>* history) {
  const std::size_t d = p.params.size();
  const Bounds unit{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
  StartOutcome out;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    OptimResult r;
    if (opt.method == Method::lbfgsb) {
      const auto u0 = start_point(opt.seed, i, d);
      out.x0 = to_physical(p, u0);
      ad::Tape tape;
      auto fg = [&](std::span<const double> u, std::span<double> g) {
        try {
          return mse_value_and_grad(p, u, g, tape);
        } catch (const NumericalError&) {
          return std::numeric_limits<double>::quiet_NaN();
        }
      };
      r = lbfgsb_minimize(fg, u0, unit, opt.lbfgsb);
    } else {
      MetaConfig mc = opt.meta;
      mc.seed = detail::start_seed(opt.seed, i);
      auto f = [&](std::span<const double> u) {
        try {
          return evaluate_loss(p, to_physical(p, u));
        } catch (const NumericalError&) {
          return std::numeric_limits<double>::infinity();
        }
      };
      r = metaheuristic_minimize(opt.method, f, unit, mc, 1);
    }
    out.x = to_physical(p, r.x);
    out.loss = r.f;
    out.evaluations = r.evaluations;
    out.status = r.stop_reason;
    if (history) *history = std::move(r.history);
    if (!std::isfinite(out.loss)) out.status = "failed: no finite loss";
  } catch (const NumericalError& e) {
    out.status = std::string("failed: ") + e.what();
  }
  out.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline FitResult multistart_fit(const FitProblem& p, std::size_t n_starts,
                                const OptimizerConfig& opt, std::size_t threads = 1) {
  validate(p);
  if (n_starts == 0) throw ConfigError("fit: n_starts must be >= 1");
  if (opt.method == Method::lbfgsb && p.loss == LossKind::gamma)
    throw ConfigError("fit: gamma loss is not differentiable; use a population method");

  FitResult res;
  res.method = std::string(method_name(opt.method));
  for (const auto& b : p.params) res.param_names.push_back(b.name);
  res.starts.resize(n_starts);
  std::vector<std::vector<double>> histories(n_starts);
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(n_starts, threads,
               [&](std::size_t i) { res.starts[i] = run_start(p, opt, i, &histories[i]); });
  res.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::size_t best = n_starts;
  for (std::size_t i = 0; i < n_starts; ++i) {
    res.n_evaluations += res.starts[i].evaluations;
    if (res.starts[i].status.rfind("failed", 0) == 0) continue;
    if (best == n_starts || res.starts[i].loss < res.starts[best].loss) best = i;
  }
  if (best == n_starts) {
    std::string msg = "fit: all starts failed:";
    for (std::size_t i = 0; i < n_starts; ++i)
      msg += " [" + std::to_string(i) + "] " + res.starts[i].status;
    throw NumericalError(msg);
  }
  res.best_params = res.starts[best].x;
  res.best_loss = res.starts[best].loss;
  res.loss_history = std::move(histories[best]);
  return res;
}

// Synthetic targets ---------------------------------------------------------

/// Piecewise-constant current: (duration ms, amplitude) segments sampled at dt.
inline std::vector<double> step_current(const std::vector<std::pair<double, double>>& segments,
                                        double dt) {
  std::vector<double> I;
  for (const auto& [dur, amp] : segments) {
    const auto n = static_cast<std::size_t>(std::llround(dur / dt));
    I.insert(I.end(), n, amp);
  }
  return I;
}

inline Recording make_recording(const dynamics::Trace& tr, std::vector<double> I,
                                double threshold) {
  Recording r;
  r.t = tr.t;
  r.I_inj = std::move(I);
  r.V = tr.V;
  r.spike_times = dynamics::threshold_crossings(r.t, r.V, threshold);
  return r;
}

/// Default GIF target stimulus (mV-equivalent drive, dt 0.1 ms, 500 ms).
inline std::vector<double> default_gif_stimulus(double dt = 0.1) {
  return step_current({{50, 0.0}, {100, 26.0}, {50, 0.0}, {100, 34.0}, {50, -10.0}, {100, 22.0}, {50, 0.0}}, dt);
}

/// Default HH target stimulus (uA/cm^2, dt 0.025 ms, 80 ms).
inline std::vector<double> default_hh_stimulus(double dt = 0.025) {
  return step_current({{10, 0.0}, {35, 8.0}, {10, 0.0}, {25, 16.0}}, dt);
}

inline Recording synthetic_gif_recording(const dynamics::GifParams& p, double dt = 0.1) {
  auto I = default_gif_stimulus(dt);
  return make_recording(dynamics::simulate_gif(p, I, dt), I, p.V_th);
}

inline Recording synthetic_hh_recording(const dynamics::HhParams& p, double dt = 0.025) {
  auto I = default_hh_stimulus(dt);
  return make_recording(dynamics::simulate_hh(p, I, dt), I, dynamics::kHhSpikeThreshold);
}

inline FitProblem default_gif_problem() {
  FitProblem p;
  p.model = dynamics::ModelKind::gif;
  p.params = {{"A1", -10.0, 5.0}, {"A2", -5.0, 2.0}, {"tau_I1", 2.0, 50.0},
              {"tau_I2", 50.0, 500.0}};
  p.recording = synthetic_gif_recording(p.gif);
  return p;
}

inline FitProblem default_hh_problem() {
  FitProblem p;
  p.model = dynamics::ModelKind::hh;
  p.params = {{"gNa", 60.0, 240.0}, {"gK", 18.0, 72.0}, {"gL", 0.15, 0.6}};
  p.recording = synthetic_hh_recording(p.hh);
  return p;
}

}  // namespace spikediff::fitting
