// SPDX-License-Identifier: Apache-2.0
//
// Task training: gradients by BPTT over a tape or by a forward-only
// eligibility-trace learner, Adam with global-norm clipping and Dale
// projection, the epoch loop, and the memory/time scaling benchmark.
//
// The online learner keeps, for every trainable input/recurrent synapse
// (i -> j), the exact sensitivities of neuron j's own state (V, I2) and of
// its filtered readout contribution to w_ij, ignoring every path that runs
// through another neuron's spikes. With no recurrent connections no such
// path exists and the result equals BPTT. The learning signal (readout error
// broadcast through W_out) is applied once the recall window has closed.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <new>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spikediff/autodiff.hpp"
#include "spikediff/common.hpp"
#include "spikediff/network.hpp"

namespace spikediff::training {

using network::EiNetwork;
using network::TaskConfig;
using network::TrialBatch;
using network::VoltageMonitor;

class ResourceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Parameter layout: [W_in values | W_rec values | W_out | b_out].

struct ParamLayout {
  std::size_t n_in_w = 0, n_rec_w = 0, n_out_w = 0, n_bias = 0;

  std::size_t rec_offset() const { return n_in_w; }
  std::size_t out_offset() const { return n_in_w + n_rec_w; }
  std::size_t bias_offset() const { return out_offset() + n_out_w; }
  std::size_t size() const { return bias_offset() + n_bias; }
  /// Leading entries that must stay nonnegative.
  std::size_t dale_count() const { return n_in_w + n_rec_w; }
};

inline ParamLayout layout_of(const EiNetwork& net) {
  return {net.W_in.nnz(), net.W_rec.nnz(), net.W_out.data.size(), net.b_out.size()};
}

inline std::vector<double> flatten(const EiNetwork& net) {
  std::vector<double> p;
  p.reserve(layout_of(net).size());
  p.insert(p.end(), net.W_in.values().begin(), net.W_in.values().end());
  p.insert(p.end(), net.W_rec.values().begin(), net.W_rec.values().end());
  p.insert(p.end(), net.W_out.data.begin(), net.W_out.data.end());
  p.insert(p.end(), net.b_out.begin(), net.b_out.end());
  return p;
}

inline void unflatten(EiNetwork& net, std::span<const double> p) {
  const auto L = layout_of(net);
  require_shape(p.size() == L.size(), "unflatten: parameter count mismatch");
  auto seg = [&](std::size_t off, std::size_t n) {
    return std::vector<double>(p.begin() + off, p.begin() + off + n);
  };
  net.W_in = net.W_in.with_values(seg(0, L.n_in_w));
  net.W_rec = net.W_rec.with_values(seg(L.rec_offset(), L.n_rec_w));
  net.W_out.data = seg(L.out_offset(), L.n_out_w);
  net.b_out = seg(L.bias_offset(), L.n_bias);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

inline void validate(const AdamConfig& c) {
  if (!(c.lr > 0.0)) throw ConfigError("adam: lr must be > 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0))
    throw ConfigError("adam: betas must be in [0, 1)");
  if (!(c.eps > 0.0)) throw ConfigError("adam: eps must be > 0");
}

struct AdamState {
  std::vector<double> m, v;
  std::size_t step = 0;
  AdamConfig config;

  static AdamState zeros(std::size_t n, const AdamConfig& c) {
    validate(c);
    return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0, c};
  }
};

struct AdamReport {
  bool skipped = false;
  double grad_norm = 0.0;
  double clip_scale = 1.0;
};

inline double l2_norm(std::span<const double> g) {
  double s = 0.0;
  for (double x : g) s += x * x;
  return std::sqrt(s);
}

/// g <- g min(1, c / |g|).
inline double clip_by_norm(std::span<double> g, double c) {
  const double n = l2_norm(g);
  if (!(c > 0.0) || n <= c) return 1.0;
  const double s = c / n;
  for (double& x : g) x *= s;
  return s;
}

/// Bias-corrected Adam. Non-finite gradients leave params and state untouched.
inline AdamReport adam_step(std::span<double> params, std::span<const double> grads,
                            AdamState& st) {
  require_shape(params.size() == grads.size() && st.m.size() == params.size() &&
                    st.v.size() == params.size(),
                "adam_step: shape mismatch");
  AdamReport rep;
  rep.grad_norm = l2_norm(grads);
  if (!std::isfinite(rep.grad_norm)) {
    rep.skipped = true;
    return rep;
  }
  std::vector<double> g(grads.begin(), grads.end());
  rep.clip_scale = clip_by_norm(g, st.config.clip_norm);
  const auto& c = st.config;
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g[i];
    st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g[i] * g[i];
    const double mh = st.m[i] / bc1;
    const double vh = st.v[i] / bc2;
    params[i] -= c.lr * mh / (std::sqrt(vh) + c.eps);
  }
  return rep;
}

/// Adam on the network followed by Dale projection and precision rounding.
inline AdamReport apply_update(EiNetwork& net, AdamState& st, std::span<const double> grads) {
  auto p = flatten(net);
  auto rep = adam_step(p, grads, st);
  if (rep.skipped) return rep;
  unflatten(net, p);
  network::dale_projection(net);
  network::quantize_weights(net);
  if (!network::dale_holds(net)) throw NumericalError("apply_update: Dale's law violated");
  return rep;
}

// ---------------------------------------------------------------------------
// Batch gradients

struct BatchGrad {
  std::vector<double> grad;  // mean over trials
  double loss = 0.0;         // mean over trials
  std::size_t correct = 0;
  std::size_t trials = 0;
  std::size_t spikes = 0;
  std::size_t peak_memory_bytes = 0;  // tape bytes or eligibility-state bytes, one trial
  VoltageMonitor monitor;
};

namespace detail {

struct TrialGrad {
  std::vector<double> grad;
  double loss = 0.0;
  bool correct = false;
  std::size_t spikes = 0;
  std::size_t memory = 0;
  VoltageMonitor monitor;
};

// Per-trial results are reduced in trial order, so the sum does not depend on
// the thread count.
inline BatchGrad reduce(std::vector<TrialGrad>& parts, std::size_t n_params) {
  BatchGrad out;
  out.grad.assign(n_params, 0.0);
  out.trials = parts.size();
  for (auto& p : parts) {
    for (std::size_t i = 0; i < n_params; ++i) out.grad[i] += p.grad[i];
    out.loss += p.loss;
    out.correct += p.correct;
    out.spikes += p.spikes;
    out.peak_memory_bytes = std::max(out.peak_memory_bytes, p.memory);
    out.monitor.merge(p.monitor);
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (double& g : out.grad) g *= inv;
  out.loss *= inv;
  return out;
}

}  // namespace detail

/// Gradient of one trial's loss by reverse accumulation over the whole trial.
inline detail::TrialGrad bptt_trial(const EiNetwork& net, const TrialBatch& batch, std::size_t b) {
  detail::TrialGrad r;
  // Kept per thread. Tape-sized buffers freed after every trial go back to
  // the OS, and refaulting them cost more than the sweep at desk scale.
  thread_local ad::Tape tape;
  thread_local std::vector<double> slots;
  try {
    tape.clear();
    tape.set_spike_mode(ad::SpikeMode::heaviside);
    auto vars = network::parameter_vars(tape, net);
    auto tr = network::record_trial(tape, net, vars, batch, b, &r.monitor);
    r.loss = tr.loss.scalar();
    auto ym = tr.y_mean.value();
    r.correct = (ym[1] > ym[0] ? 1u : 0u) == batch.labels[b];
    r.memory = tape.memory_bytes();
    auto g = tape.backward(tr.loss, std::move(slots));
    r.grad.reserve(layout_of(net).size());
    for (auto v : {vars.w_in, vars.w_rec, vars.w_out, vars.b_out}) {
      auto s = g[v];
      r.grad.insert(r.grad.end(), s.begin(), s.end());
    }
    for (std::size_t t = 0; t < tape.node_count(); ++t)
      if (tape.node(static_cast<std::uint32_t>(t)).op == ad::Op::spike)
        for (double z : tape.value(static_cast<std::uint32_t>(t))) r.spikes += z != 0.0;
    slots = std::move(g).release();
  } catch (const std::bad_alloc&) {
    throw ResourceError("bptt: out of memory recording T=" + std::to_string(batch.n_steps) +
                        " steps");
  }
  return r;
}

inline BatchGrad bptt_grad(const EiNetwork& net, const TrialBatch& batch, std::size_t threads = 1) {
  if (batch.batch == 0) throw ConfigError("bptt_grad: empty batch");
  std::vector<detail::TrialGrad> parts(batch.batch);
  parallel_for(batch.batch, threads, [&](std::size_t b) { parts[b] = bptt_trial(net, batch, b); });
  return detail::reduce(parts, layout_of(net).size());
}

// ---------------------------------------------------------------------------
// Online learner

/// Forward-running traces for one trial. Storage depends on the network
/// only, never on the number of steps.
struct EligibilityState {
  // Per synapse (input synapses first, then recurrent), sensitivities of the
  // postsynaptic V and I2, the filtered readout drive, and its recall sum.
  std::vector<double> eV, eI2, ebar, F;
  std::vector<double> s_in, s_rec;  // presynaptic conductance traces
  std::vector<double> zbar, zsum;   // readout traces per neuron
  double bbar = 0.0, bsum = 0.0;
  // Per-neuron step coefficients.
  std::vector<double> c_v, gate, drive_exc, drive_inh, dz_coef;

  static EligibilityState zeros(const EiNetwork& net) {
    EligibilityState e;
    const std::size_t ns = net.W_in.nnz() + net.W_rec.nnz();
    const std::size_t n = net.n_rec();
    for (auto* v : {&e.eV, &e.eI2, &e.ebar, &e.F}) v->assign(ns, 0.0);
    e.s_in.assign(net.n_in(), 0.0);
    for (auto* v : {&e.s_rec, &e.zbar, &e.zsum, &e.c_v, &e.gate, &e.drive_exc, &e.drive_inh,
                    &e.dz_coef})
      v->assign(n, 0.0);
    return e;
  }

  std::size_t bytes() const {
    std::size_t n = 0;
    for (auto* v : {&eV, &eI2, &ebar, &F, &s_in, &s_rec, &zbar, &zsum, &c_v, &gate, &drive_exc,
                    &drive_inh, &dz_coef})
      n += v->capacity() * sizeof(double);
    return n + 2 * sizeof(double);
  }
};

/// One forward step of the network plus the trace update. `recall` marks
/// steps whose readout enters the loss.
inline void online_grad_step(const EiNetwork& net, network::NetworkState& state,
                             EligibilityState& e, std::span<const std::uint8_t> input_t,
                             bool recall, network::StepScratch& scratch) {
  const auto& cfg = net.config;
  const auto& p = cfg.neuron;
  const std::size_t n = net.n_rec();
  const double lam = std::exp(-cfg.dt / cfg.synapse.tau_syn);
  const double e2 = std::exp(-cfg.dt / p.tau_I2);
  const double k = cfg.dt / p.tau_V;
  const double kR = k * p.R;
  const double alpha = net.readout.alpha();
  const double dt_out = net.readout.dt;

  for (std::size_t i = 0; i < net.n_in(); ++i) e.s_in[i] = lam * e.s_in[i] + input_t[i];
  for (std::size_t i = 0; i < n; ++i) e.s_rec[i] = lam * e.s_rec[i] + state.z[i];

  // Coefficients from the incoming V; conductances after this step's input.
  const std::vector<double> v_pre = state.neuron.V;
  network::network_step(net, state, input_t, scratch);
  for (std::size_t j = 0; j < n; ++j) {
    const double z = state.z[j];
    const double G = state.g_exc[j] + state.g_inh[j];
    e.gate[j] = 1.0 - z;
    e.c_v[j] = (1.0 - k) - kR * G;
    e.drive_exc[j] = cfg.synapse.E_exc - v_pre[j];
    e.drive_inh[j] = cfg.synapse.E_inh - v_pre[j];
    e.dz_coef[j] = surrogate::grad(v_pre[j] - p.V_th, cfg.surrogate);
  }

  auto update_rows = [&](const sparse::CsrMatrix<double>& W, std::span<const double> pre,
                         std::size_t base, auto is_exc_row) {
    auto off = W.row_offsets();
    auto col = W.col_indices();
    for (std::size_t i = 0; i < W.n_rows(); ++i) {
      const double s = pre[i];
      const std::vector<double>& drive = is_exc_row(i) ? e.drive_exc : e.drive_inh;
      for (std::size_t q = off[i]; q < off[i + 1]; ++q) {
        const std::size_t j = col[q];
        const std::size_t x = base + q;
        const double ev = e.eV[x];
        const double dz = e.dz_coef[j] * ev;
        e.eV[x] = e.gate[j] * (e.c_v[j] * ev + kR * (e.eI2[x] + s * drive[j]));
        e.eI2[x] = e2 * e.eI2[x] + p.A2 * dz;
        e.ebar[x] = alpha * e.ebar[x] + dt_out * dz;
        if (recall) e.F[x] += e.ebar[x];
      }
    }
  };
  update_rows(net.W_in, e.s_in, 0, [](std::size_t) { return true; });
  update_rows(net.W_rec, e.s_rec, net.W_in.nnz(),
              [&](std::size_t i) { return net.neuron_types[i] == network::NeuronType::exc; });

  for (std::size_t j = 0; j < n; ++j) {
    e.zbar[j] = alpha * e.zbar[j] + dt_out * state.z[j];
    if (recall) e.zsum[j] += e.zbar[j];
  }
  e.bbar = alpha * e.bbar + dt_out;
  if (recall) e.bsum += e.bbar;
}

/// Combines the accumulated traces with the readout error of the recall mean.
inline std::vector<double> online_gradient(const EiNetwork& net, const EligibilityState& e,
                                           std::span<const double> y_mean, std::size_t label,
                                           std::size_t recall_steps) {
  const auto L = layout_of(net);
  std::vector<double> grad(L.size(), 0.0);
  double mx = std::max(y_mean[0], y_mean[1]);
  double z = 0.0;
  for (double v : y_mean) z += std::exp(v - mx);
  std::vector<double> delta(network::kClasses);
  const double inv_r = 1.0 / static_cast<double>(recall_steps);
  for (std::size_t c = 0; c < network::kClasses; ++c)
    delta[c] = (std::exp(y_mean[c] - mx) / z - (c == label ? 1.0 : 0.0)) * inv_r;
  const std::size_t n = net.n_rec();
  std::vector<double> signal(n, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < network::kClasses; ++c) signal[j] += net.W_out(j, c) * delta[c];

  auto fill = [&](const sparse::CsrMatrix<double>& W, std::size_t base) {
    auto off = W.row_offsets();
    auto col = W.col_indices();
    for (std::size_t i = 0; i < W.n_rows(); ++i)
      for (std::size_t q = off[i]; q < off[i + 1]; ++q)
        grad[base + q] = signal[col[q]] * e.F[base + q];
  };
  fill(net.W_in, 0);
  fill(net.W_rec, L.rec_offset());
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < network::kClasses; ++c)
      grad[L.out_offset() + j * network::kClasses + c] = delta[c] * e.zsum[j];
  for (std::size_t c = 0; c < network::kClasses; ++c) grad[L.bias_offset() + c] = delta[c] * e.bsum;
  return grad;
}

inline detail::TrialGrad online_trial(const EiNetwork& net, const TrialBatch& batch,
                                      std::size_t b) {
  detail::TrialGrad r;
  auto state = network::NetworkState::initial(net);
  auto e = EligibilityState::zeros(net);
  network::StepScratch scratch;
  std::vector<double> y_mean(network::kClasses, 0.0);
  const auto& syn = net.config.synapse;
  const std::size_t R = batch.recall_steps();
  if (R == 0) throw ConfigError("trial_loss: empty recall mask");
  for (std::size_t t = 0; t < batch.n_steps; ++t) {
    const bool recall = batch.recall_mask[t] != 0;
    online_grad_step(net, state, e, batch.input(b, t), recall, scratch);
    r.monitor.observe(state.neuron.V, syn.E_inh, syn.E_exc);
    for (double z : state.z) r.spikes += z != 0.0;
    if (recall)
      for (std::size_t c = 0; c < network::kClasses; ++c) y_mean[c] += state.y[c];
  }
  for (double& v : y_mean) v /= static_cast<double>(R);
  r.loss = network::softmax_ce(y_mean, batch.labels[b]);
  r.correct = (y_mean[1] > y_mean[0] ? 1u : 0u) == batch.labels[b];
  r.memory = e.bytes();
  r.grad = online_gradient(net, e, y_mean, batch.labels[b], R);
  return r;
}

inline BatchGrad online_grad(const EiNetwork& net, const TrialBatch& batch,
                             std::size_t threads = 1) {
  if (batch.batch == 0) throw ConfigError("online_grad: empty batch");
  std::vector<detail::TrialGrad> parts(batch.batch);
  parallel_for(batch.batch, threads,
               [&](std::size_t b) { parts[b] = online_trial(net, batch, b); });
  return detail::reduce(parts, layout_of(net).size());
}

// ---------------------------------------------------------------------------
// Evaluation and training loop

enum class Learner { bptt, online };

inline std::string_view learner_name(Learner l) { return l == Learner::bptt ? "bptt" : "online"; }

inline Learner learner_from_name(std::string_view s) {
  if (s == "bptt") return Learner::bptt;
  if (s == "online") return Learner::online;
  throw ConfigError("unknown learner: " + std::string(s));
}

inline BatchGrad batch_grad(Learner l, const EiNetwork& net, const TrialBatch& batch,
                            std::size_t threads) {
  return l == Learner::bptt ? bptt_grad(net, batch, threads) : online_grad(net, batch, threads);
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  double rate_hz = 0.0;
  VoltageMonitor monitor;
};

inline EvalResult evaluate(const EiNetwork& net, const TrialBatch& batch, std::size_t threads = 1) {
  std::vector<network::TrialOutput> outs(batch.batch);
  std::vector<VoltageMonitor> mons(batch.batch);
  parallel_for(batch.batch, threads,
               [&](std::size_t b) { outs[b] = network::run_trial(net, batch, b, &mons[b]); });
  EvalResult r;
  std::size_t correct = 0, spikes = 0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    r.loss += outs[b].loss;
    correct += outs[b].prediction == batch.labels[b];
    spikes += outs[b].spike_count;
    r.monitor.merge(mons[b]);
  }
  const double B = static_cast<double>(batch.batch);
  r.loss /= B;
  r.accuracy = static_cast<double>(correct) / B;
  r.rate_hz = static_cast<double>(spikes) /
              (B * static_cast<double>(net.n_rec() * batch.n_steps) * net.config.dt) * 1000.0;
  return r;
}

struct TrainConfig {
  Learner learner = Learner::bptt;
  std::size_t epochs = 30;
  std::size_t batches_per_epoch = 10;
  std::size_t batch_size = 64;
  AdamConfig adam;
  double lr_decay = 1.0;  // multiplied into lr after every epoch
  std::uint64_t seed = 0;
  std::size_t eval_trials = 256;
  std::size_t eval_every = 1;  // epochs; 0 evaluates only after the last one
  std::size_t threads = 1;
};

inline void validate(const TrainConfig& c) {
  if (c.epochs == 0 || c.batches_per_epoch == 0 || c.batch_size == 0)
    throw ConfigError("train: epochs, batches_per_epoch and batch_size must be > 0");
  if (!(c.lr_decay > 0.0 && c.lr_decay <= 1.0)) throw ConfigError("train: lr_decay must be in (0, 1]");
  validate(c.adam);
}

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t updates = 0;  // cumulative
  double loss = 0.0;        // mean training loss over the epoch's batches
  double accuracy = 0.0;
  double eval_loss = std::numeric_limits<double>::quiet_NaN();
  double eval_accuracy = std::numeric_limits<double>::quiet_NaN();
  double wall_time_s = 0.0;  // cumulative
  double grad_norm = 0.0;    // mean pre-clip norm
  std::size_t skipped = 0;
  double rate_hz = 0.0;
  double v_min = 0.0, v_max = 0.0;
  std::size_t v_violations = 0;
  double lr = 0.0;
  std::size_t memory_bytes = 0;
};

struct TrainState {
  EiNetwork net;
  AdamState adam;
  std::mt19937_64 rng;
  std::size_t epoch = 0;
  std::size_t updates = 0;
  double wall_time_s = 0.0;
  std::vector<EpochMetrics> history;
};

inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq s{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                  static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(s);
}

inline TrainState initial_train_state(EiNetwork net, const TrainConfig& cfg) {
  validate(cfg);
  TrainState s;
  s.adam = AdamState::zeros(layout_of(net).size(), cfg.adam);
  s.net = std::move(net);
  s.rng = derived_rng(cfg.seed, 1);
  return s;
}

/// Held-out trials: same seed stream for every evaluation.
inline TrialBatch heldout_batch(const TaskConfig& task, std::size_t n_in, std::size_t n,
                                std::uint64_t seed) {
  auto rng = derived_rng(seed, 2);
  return network::generate_batch(task, n_in, n, rng);
}

using EpochCallback = std::function<void(const TrainState&, const EpochMetrics&)>;

/// Runs epochs until state.epoch == cfg.epochs. A state restored from a
/// checkpoint continues where it stopped.
inline void train(TrainState& s, const TaskConfig& task, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {}) {
  validate(cfg);
  network::validate(task);
  using clock = std::chrono::steady_clock;
  std::optional<TrialBatch> heldout;
  while (s.epoch < cfg.epochs) {
    const auto t0 = clock::now();
    EpochMetrics m;
    m.epoch = s.epoch + 1;
    m.lr = s.adam.config.lr;
    VoltageMonitor mon;
    std::size_t spikes = 0, trials = 0, steps = 0;
    for (std::size_t k = 0; k < cfg.batches_per_epoch; ++k) {
      auto batch = network::generate_batch(task, s.net.n_in(), cfg.batch_size, s.rng);
      auto g = batch_grad(cfg.learner, s.net, batch, cfg.threads);
      if (!std::isfinite(g.loss))
        throw NumericalError("train: loss diverged at epoch " + std::to_string(m.epoch) +
                             ", update " + std::to_string(s.updates + 1));
      auto rep = apply_update(s.net, s.adam, g.grad);
      ++s.updates;
      m.loss += g.loss;
      m.accuracy += static_cast<double>(g.correct) / static_cast<double>(g.trials);
      m.grad_norm += rep.grad_norm;
      m.skipped += rep.skipped;
      m.memory_bytes = std::max(m.memory_bytes, g.peak_memory_bytes);
      mon.merge(g.monitor);
      spikes += g.spikes;
      trials += g.trials;
      steps = batch.n_steps;
    }
    const double nb = static_cast<double>(cfg.batches_per_epoch);
    m.loss /= nb;
    m.accuracy /= nb;
    m.grad_norm /= nb;
    m.updates = s.updates;
    m.rate_hz = static_cast<double>(spikes) /
                (static_cast<double>(trials * steps * s.net.n_rec()) * s.net.config.dt) * 1000.0;
    ++s.epoch;
    const bool last = s.epoch == cfg.epochs;
    if (cfg.eval_trials > 0 &&
        (last || (cfg.eval_every > 0 && s.epoch % cfg.eval_every == 0))) {
      if (!heldout) heldout = heldout_batch(task, s.net.n_in(), cfg.eval_trials, cfg.seed);
      auto ev = evaluate(s.net, *heldout, cfg.threads);
      m.eval_loss = ev.loss;
      m.eval_accuracy = ev.accuracy;
      mon.merge(ev.monitor);
    }
    m.v_min = mon.v_min;
    m.v_max = mon.v_max;
    m.v_violations = mon.violations;
    s.adam.config.lr *= cfg.lr_decay;
    s.wall_time_s += std::chrono::duration<double>(clock::now() - t0).count();
    m.wall_time_s = s.wall_time_s;
    s.history.push_back(m);
    if (on_epoch) on_epoch(s, m);
  }
}

// ---------------------------------------------------------------------------
// Scaling benchmark

struct ScalingRow {
  std::size_t T = 0;
  Learner learner = Learner::bptt;
  std::size_t memory_bytes = 0;
  double wall_time_s = 0.0;  // per batch, fastest repeat
};

/// Task of total length T ms with the desk cue layout stretched to fit.
inline TaskConfig scaled_task(std::size_t T, double dt = 1.0) {
  TaskConfig t = network::desk_task();
  t.dt = dt;
  const double total = static_cast<double>(T) * dt;
  t.recall_ms = total / 4.0;
  t.accumulation_ms = total - t.recall_ms;
  t.cue_ms = t.accumulation_ms / 6.0;
  t.gap_ms = t.accumulation_ms / 12.0;
  return t;
}

inline std::vector<ScalingRow> bench_scaling(const EiNetwork& net, std::span<const std::size_t> Ts,
                                             std::size_t batch_size, std::size_t repeats,
                                             std::uint64_t seed, std::size_t threads = 1) {
  if (Ts.size() < 3) throw ConfigError("bench_scaling: need at least 3 values of T");
  if (batch_size == 0 || repeats == 0) throw ConfigError("bench_scaling: empty batch");
  for (std::size_t T : Ts)
    if (T < 8) throw ConfigError("bench_scaling: T must be >= 8 steps");
  std::vector<ScalingRow> rows;
  for (std::size_t T : Ts) {
    auto rng = derived_rng(seed, T);
    auto batch = network::generate_batch(scaled_task(T, net.config.dt), net.n_in(), batch_size, rng);
    for (Learner l : {Learner::bptt, Learner::online}) {
      std::vector<double> times;
      std::size_t mem = 0;
      batch_grad(l, net, batch, threads);  // warm-up, grows reused buffers to size
      for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        auto g = batch_grad(l, net, batch, threads);
        times.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        mem = g.peak_memory_bytes;
      }
      std::sort(times.begin(), times.end());
      rows.push_back({T, l, mem, times.front()});
    }
  }
  return rows;
}

/// Coefficient of determination of the least-squares line through (x, y).
inline double linear_r2(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (syy == 0.0) return 1.0;
  return sxy * sxy / (sxx * syy);
}

}  // namespace spikediff::training
