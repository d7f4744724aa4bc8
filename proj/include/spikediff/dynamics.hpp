// SPDX-License-Identifier: Apache-2.0
//
// Neuron and synapse state updates: generalized integrate-and-fire (GIF)
// with fast and slow spike-triggered currents, Hodgkin-Huxley (HH),
// exponential conductance synapses, and affine voltage rescaling.
//
// Each update exists in two forms: a plain function on doubles (state in,
// state out) and a tape form built from autodiff primitives. Both perform the
// same floating-point operations in the same order.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "spikediff/autodiff.hpp"
#include "spikediff/common.hpp"
#include "spikediff/sparse.hpp"
#include "spikediff/surrogate.hpp"

namespace spikediff::dynamics {

using Vec = std::vector<double>;

// ---------------------------------------------------------------------------
// Voltage rescaling

struct ScalingConfig {
  double V_scale = 20.0;
  double V_offset = -60.0;
};

inline double rescale_voltage(double v, const ScalingConfig& c) {
  return (v - c.V_offset) / c.V_scale;
}
inline double unscale_voltage(double vs, const ScalingConfig& c) {
  return vs * c.V_scale + c.V_offset;
}
inline Vec rescale_voltage(std::span<const double> v, const ScalingConfig& c) {
  if (!(c.V_scale > 0.0)) throw ConfigError("rescale: V_scale must be > 0");
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = rescale_voltage(v[i], c);
  return out;
}
inline Vec unscale_voltage(std::span<const double> vs, const ScalingConfig& c) {
  Vec out(vs.size());
  for (std::size_t i = 0; i < vs.size(); ++i) out[i] = unscale_voltage(vs[i], c);
  return out;
}

// ---------------------------------------------------------------------------
// GIF neuron

/// Units follow the voltage convention in use: mV for single-neuron fitting,
/// rescaled units inside the network. R is in model units, so A1, A2 and
/// external currents are expressed as voltage drive.
struct GifParams {
  double tau_I1 = 10.0;
  double tau_I2 = 200.0;
  double tau_V = 20.0;
  double R = 1.0;
  double V_rest = -60.0;
  double V_th = -40.0;
  double A1 = -2.0;
  double A2 = -1.0;
};

inline void validate(const GifParams& p) {
  if (!(p.tau_I1 > 0 && p.tau_I2 > 0 && p.tau_V > 0))
    throw ConfigError("gif: time constants must be > 0");
  if (!(p.V_th > p.V_rest)) throw ConfigError("gif: V_th must exceed V_rest");
}

/// Same neuron in rescaled voltage units.
inline GifParams rescale(const GifParams& p, const ScalingConfig& c) {
  GifParams s = p;
  s.V_rest = rescale_voltage(p.V_rest, c);
  s.V_th = rescale_voltage(p.V_th, c);
  s.A1 = p.A1 / c.V_scale;
  s.A2 = p.A2 / c.V_scale;
  return s;
}

struct GifState {
  Vec I1, I2, V;

  static GifState resting(std::size_t n, const GifParams& p) {
    return {Vec(n, 0.0), Vec(n, 0.0), Vec(n, p.V_rest)};
  }
  std::size_t size() const { return V.size(); }
};

struct GifStepResult {
  GifState state;
  Vec spikes;
};

/// One step of length dt. The spike is read from the incoming potential
/// (fires when V >= V_th). Currents decay by their exact exponential factor,
/// V advances by explicit Euler from the incoming state, then firing neurons
/// reset: I1 <- A1, I2 <- I2 + A2, V <- V_rest.
inline GifStepResult gif_step(const GifState& s, const GifParams& p,
                              std::span<const double> I_ext, double dt) {
  const std::size_t n = s.size();
  require_shape(I_ext.size() == n && s.I1.size() == n && s.I2.size() == n,
                "gif_step: state/input size mismatch");
  if (!(dt > 0.0)) throw ConfigError("gif_step: dt must be > 0");
  const double e1 = std::exp(-dt / p.tau_I1);
  const double e2 = std::exp(-dt / p.tau_I2);
  const double k = dt / p.tau_V;
  GifStepResult r;
  r.state.I1.resize(n);
  r.state.I2.resize(n);
  r.state.V.resize(n);
  r.spikes.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = surrogate::spike(s.V[i] - p.V_th);
    const double drive = (s.I1[i] + s.I2[i]) + I_ext[i];
    const double v_int = (1.0 - k) * s.V[i] + (k * p.R) * drive + k * p.V_rest;
    const double i1d = s.I1[i] * e1;
    const double i2d = s.I2[i] * e2;
    r.spikes[i] = z;
    r.state.I1[i] = z != 0.0 ? p.A1 : i1d;
    r.state.I2[i] = i2d + p.A2 * z;
    r.state.V[i] = z != 0.0 ? p.V_rest : v_int;
    if (!std::isfinite(r.state.V[i]) || !std::isfinite(r.state.I2[i]))
      throw NumericalError("gif_step: non-finite state");
  }
  return r;
}

/// GIF parameters as tape variables. Decay factors are variables so that
/// time constants can be fitted; tau_V, R, V_rest and V_th are fixed.
struct GifTapeParams {
  ad::Var decay_I1;  // exp(-dt / tau_I1)
  ad::Var decay_I2;  // exp(-dt / tau_I2)
  ad::Var A1;
  ad::Var A2;
  double tau_V = 20.0;
  double R = 1.0;
  double V_rest = 0.0;
  double V_th = 1.0;
  double dt = 1.0;
};

/// Records decay factors exp(-dt / tau) for given time-constant variables.
inline ad::Var decay_factor(ad::Var tau, double dt) {
  ad::Tape& t = *tau.tape;
  return ad::exp(ad::div(t.constant(-dt), tau));
}

/// All GIF parameters as tape constants.
inline GifTapeParams constant_gif_params(ad::Tape& t, const GifParams& p, double dt) {
  GifTapeParams g;
  g.decay_I1 = t.constant(std::exp(-dt / p.tau_I1));
  g.decay_I2 = t.constant(std::exp(-dt / p.tau_I2));
  g.A1 = t.constant(p.A1);
  g.A2 = t.constant(p.A2);
  g.tau_V = p.tau_V;
  g.R = p.R;
  g.V_rest = p.V_rest;
  g.V_th = p.V_th;
  g.dt = dt;
  return g;
}

struct GifTapeState {
  ad::Var I1, I2, V;
};

struct GifTapeStep {
  GifTapeState state;
  ad::Var spikes;
  ad::Var drive;  // I1 + I2 + I_ext, recorded for diagnostics
};

/// Tape form of gif_step. The spike mask used by the resets carries no
/// gradient; gradients reach V only through the surrogate spike path
/// (the I2 increment and everything downstream of the emitted spikes).
inline GifTapeStep gif_step(const GifTapeState& s, const GifTapeParams& p, ad::Var I_ext,
                            const surrogate::SurrogateSpec& spec) {
  ad::Tape& t = *s.V.tape;
  const double k = p.dt / p.tau_V;
  ad::Var z = ad::spike(ad::affine(s.V, 1.0, -p.V_th), spec);
  ad::Var drive = ad::add(ad::add(s.I1, s.I2), I_ext);
  ad::Var v_int = ad::mix(s.V, drive, 1.0 - k, k * p.R, k * p.V_rest);
  ad::Var i1d = ad::mul(s.I1, p.decay_I1);
  ad::Var i2d = ad::mul(s.I2, p.decay_I2);
  GifTapeStep r;
  r.spikes = z;
  r.drive = drive;
  r.state.I1 = ad::select(z, p.A1, i1d);
  r.state.I2 = ad::add(i2d, ad::mul(p.A2, z));
  r.state.V = ad::select(z, t.constant(p.V_rest), v_int);
  return r;
}

// ---------------------------------------------------------------------------
// Hodgkin-Huxley neuron (squid axon, V in mV, t in ms, conductances in
// mS/cm^2, current in uA/cm^2, rest near -65 mV).

struct HhParams {
  double gNa = 120.0;
  double gK = 36.0;
  double gL = 0.3;
  double ENa = 50.0;
  double EK = -77.0;
  double EL = -54.387;
  double C = 1.0;
};

inline void validate(const HhParams& p) {
  if (p.gNa < 0 || p.gK < 0 || p.gL < 0) throw ConfigError("hh: conductances must be >= 0");
  if (!(p.C > 0)) throw ConfigError("hh: capacitance must be > 0");
}

struct HhRates {
  double am, bm, ah, bh, an, bn;
};

namespace detail {
inline double exprel(double x) { return ad::detail::exprel(x); }
}  // namespace detail

// Written as affine maps of v so the tape form rounds identically.
inline HhRates hh_rates(double v) {
  return {
      detail::exprel(0.1 * v + 4.0),
      4.0 * std::exp(-1.0 / 18.0 * v + -65.0 / 18.0),
      0.07 * std::exp(-1.0 / 20.0 * v + -65.0 / 20.0),
      1.0 / (1.0 + std::exp(-(0.1 * v + 3.5))),
      0.1 * detail::exprel(0.1 * v + 5.5),
      0.125 * std::exp(-1.0 / 80.0 * v + -65.0 / 80.0),
  };
}

struct HhState {
  Vec V, m, h, n;

  static HhState resting(std::size_t count, double v0 = -65.0) {
    const HhRates r = hh_rates(v0);
    return {Vec(count, v0), Vec(count, r.am / (r.am + r.bm)),
            Vec(count, r.ah / (r.ah + r.bh)), Vec(count, r.an / (r.an + r.bn))};
  }
  std::size_t size() const { return V.size(); }
};

inline constexpr double kHhMaxAbsV = 500.0;

namespace detail {
inline double gate_step(double x, double a, double b, double dt) {
  const double sab = a + b;
  const double inf = a / sab;
  const double e = std::exp(-dt * sab);
  return inf + (x - inf) * e;
}
}  // namespace detail

/// Explicit Euler on V, exponential Euler on the gates, both from the
/// incoming state. Gates stay in [0, 1]: each update is a convex combination
/// of the old value and its steady state.
inline HhState hh_step(const HhState& s, const HhParams& p, std::span<const double> I_ext,
                       double dt) {
  const std::size_t n = s.size();
  require_shape(I_ext.size() == n, "hh_step: input size mismatch");
  HhState r{Vec(n), Vec(n), Vec(n), Vec(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const double v = s.V[i];
    const double m3h = s.m[i] * s.m[i] * s.m[i] * s.h[i];
    const double n2 = s.n[i] * s.n[i];
    const double n4 = n2 * n2;
    const double i_ion = (p.gNa * m3h * (v - p.ENa) + p.gK * n4 * (v - p.EK)) +
                         p.gL * (v - p.EL);
    r.V[i] = v + (dt / p.C) * (I_ext[i] - i_ion);
    const HhRates k = hh_rates(v);
    r.m[i] = std::clamp(detail::gate_step(s.m[i], k.am, k.bm, dt), 0.0, 1.0);
    r.h[i] = std::clamp(detail::gate_step(s.h[i], k.ah, k.bh, dt), 0.0, 1.0);
    r.n[i] = std::clamp(detail::gate_step(s.n[i], k.an, k.bn, dt), 0.0, 1.0);
    if (!std::isfinite(r.V[i]) || std::abs(r.V[i]) > kHhMaxAbsV)
      throw NumericalError("hh_step: unstable integration (|V| > 500 mV)");
  }
  return r;
}

struct HhTapeParams {
  ad::Var gNa, gK, gL;  // size-1 variables
  double ENa = 50.0, EK = -77.0, EL = -54.387, C = 1.0;
};

struct HhTapeState {
  ad::Var V, m, h, n;
};

namespace detail {
inline ad::Var gate_step(ad::Var x, ad::Var a, ad::Var b, double dt) {
  ad::Var sab = ad::add(a, b);
  ad::Var inf = ad::div(a, sab);
  ad::Var e = ad::exp(ad::scale(sab, -dt));
  return ad::add(inf, ad::mul(ad::sub(x, inf), e));
}
}  // namespace detail

/// Tape form of hh_step. The clamp of the plain version is inactive for
/// exponential-Euler gates and is not recorded.
inline HhTapeState hh_step(const HhTapeState& s, const HhTapeParams& p, ad::Var I_ext,
                           double dt) {
  using namespace ad;
  Var v = s.V;
  Var m3h = mul(mul(mul(s.m, s.m), s.m), s.h);
  Var n4 = square(square(s.n));
  Var ina = mul(mul(p.gNa, m3h), affine(v, 1.0, -p.ENa));
  Var ik = mul(mul(p.gK, n4), affine(v, 1.0, -p.EK));
  Var il = mul(p.gL, affine(v, 1.0, -p.EL));
  Var i_ion = add(add(ina, ik), il);
  HhTapeState r;
  r.V = mix(v, sub(I_ext, i_ion), 1.0, dt / p.C);
  Var am = exprel(affine(v, 0.1, 4.0));
  Var bm = scale(ad::exp(affine(v, -1.0 / 18.0, -65.0 / 18.0)), 4.0);
  Var ah = scale(ad::exp(affine(v, -1.0 / 20.0, -65.0 / 20.0)), 0.07);
  Var bh = sigmoid(affine(v, 0.1, 3.5));
  Var an = scale(exprel(affine(v, 0.1, 5.5)), 0.1);
  Var bn = scale(ad::exp(affine(v, -1.0 / 80.0, -65.0 / 80.0)), 0.125);
  r.m = detail::gate_step(s.m, am, bm, dt);
  r.h = detail::gate_step(s.h, ah, bh, dt);
  r.n = detail::gate_step(s.n, an, bn, dt);
  auto vv = r.V.value();
  for (double x : vv)
    if (!std::isfinite(x) || std::abs(x) > kHhMaxAbsV)
      throw NumericalError("hh_step: unstable integration (|V| > 500 mV)");
  return r;
}

// ---------------------------------------------------------------------------
// Synapses

struct SynapseParams {
  double tau_syn = 10.0;
  double E_exc = 0.0;
  double E_inh = -120.0;
};

inline void validate(const SynapseParams& p) {
  if (!(p.tau_syn > 0)) throw ConfigError("synapse: tau_syn must be > 0");
  if (!(p.E_inh < p.E_exc)) throw ConfigError("synapse: E_inh must be < E_exc");
}

inline SynapseParams rescale(const SynapseParams& p, const ScalingConfig& c) {
  return {p.tau_syn, rescale_voltage(p.E_exc, c), rescale_voltage(p.E_inh, c)};
}

/// g' = g * exp(-dt / tau_syn) + (spikes W).
template <class Real>
Vec expsyn_step(std::span<const double> g, const sparse::EventVector& pre_spikes,
                const sparse::CsrMatrix<Real>& w, double tau_syn, double dt) {
  require_shape(g.size() == w.n_cols(), "expsyn_step: len(g) != n_post");
  require_shape(pre_spikes.size() == w.n_rows(), "expsyn_step: len(spikes) != n_pre");
  const double decay = std::exp(-dt / tau_syn);
  auto inc = sparse::event_matvec(w, pre_spikes);
  Vec out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    out[i] = decay * g[i] + static_cast<double>(inc[i]);
  return out;
}

/// I = g_exc (E_exc - V) + g_inh (E_inh - V).
inline Vec conductance_current(std::span<const double> g_exc, std::span<const double> g_inh,
                               std::span<const double> V, const SynapseParams& p) {
  require_shape(g_exc.size() == V.size() && g_inh.size() == V.size(),
                "conductance_current: size mismatch");
  Vec out(V.size());
  for (std::size_t i = 0; i < V.size(); ++i)
    out[i] = g_exc[i] * (p.E_exc - V[i]) + g_inh[i] * (p.E_inh - V[i]);
  return out;
}

inline ad::Var conductance_current(ad::Var g_exc, ad::Var g_inh, ad::Var V,
                                   const SynapseParams& p) {
  ad::Var de = ad::affine(V, -1.0, p.E_exc);
  ad::Var di = ad::affine(V, -1.0, p.E_inh);
  return ad::add(ad::mul(g_exc, de), ad::mul(g_inh, di));
}

// ---------------------------------------------------------------------------
// Trace simulation

enum class ModelKind { gif, hh };

struct Trace {
  Vec t;                   // ms
  Vec V;                   // potential at t[k], before the k-th update
  std::vector<double> spike_times;
};

/// Upward crossings of `threshold` in a sampled trace.
inline std::vector<double> threshold_crossings(std::span<const double> t,
                                               std::span<const double> v,
                                               double threshold) {
  std::vector<double> out;
  for (std::size_t k = 1; k < v.size(); ++k)
    if (v[k - 1] < threshold && v[k] >= threshold) out.push_back(t[k]);
  return out;
}

inline Trace simulate_gif(const GifParams& p, std::span<const double> I, double dt) {
  validate(p);
  Trace tr;
  tr.t.resize(I.size());
  tr.V.resize(I.size());
  GifState s = GifState::resting(1, p);
  for (std::size_t k = 0; k < I.size(); ++k) {
    tr.t[k] = static_cast<double>(k) * dt;
    tr.V[k] = s.V[0];
    auto r = gif_step(s, p, I.subspan(k, 1), dt);
    if (r.spikes[0] != 0.0) tr.spike_times.push_back(tr.t[k]);
    s = std::move(r.state);
  }
  return tr;
}

inline constexpr double kHhSpikeThreshold = 0.0;

inline Trace simulate_hh(const HhParams& p, std::span<const double> I, double dt) {
  validate(p);
  Trace tr;
  tr.t.resize(I.size());
  tr.V.resize(I.size());
  HhState s = HhState::resting(1);
  for (std::size_t k = 0; k < I.size(); ++k) {
    tr.t[k] = static_cast<double>(k) * dt;
    tr.V[k] = s.V[0];
    s = hh_step(s, p, I.subspan(k, 1), dt);
  }
  tr.spike_times = threshold_crossings(tr.t, tr.V, kHhSpikeThreshold);
  return tr;
}

}  // namespace spikediff::dynamics
