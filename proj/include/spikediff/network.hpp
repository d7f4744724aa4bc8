// SPDX-License-Identifier: Apache-2.0
//
// Excitatory/inhibitory recurrent GIF network, the evidence-accumulation
// task, and the leaky linear readout. All potentials are rescaled (threshold
// 1, reversal potentials +-3). Recurrent weights are stored as nonnegative
// magnitudes; the presynaptic neuron type decides whether a spike feeds
// g_exc or g_inh.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "spikediff/autodiff.hpp"
#include "spikediff/common.hpp"
#include "spikediff/dynamics.hpp"
#include "spikediff/sparse.hpp"
#include "spikediff/surrogate.hpp"

namespace spikediff::network {

using dynamics::Vec;

enum class NeuronType : std::uint8_t { exc, inh };
enum class Precision : std::uint8_t { f64, f32 };

struct InitConfig {
  double s_exc = 1.0;
  double s_inh = 4.0;
  double readout_scale = 2.0;
};

struct TaskConfig {
  std::size_t n_cues = 7;
  double cue_ms = 100.0;
  double gap_ms = 50.0;
  double accumulation_ms = 1100.0;
  double recall_ms = 150.0;
  double cue_rate_hz = 40.0;
  double recall_rate_hz = 40.0;
  double noise_rate_hz = 10.0;
  double dt = 1.0;

  double total_ms() const { return accumulation_ms + recall_ms; }
  std::size_t n_steps() const { return static_cast<std::size_t>(std::llround(total_ms() / dt)); }
  std::size_t recall_start() const {
    return static_cast<std::size_t>(std::llround(accumulation_ms / dt));
  }
};

/// Shortened task for desk-scale runs: 3 cues of 50 ms, 400 ms in total.
inline TaskConfig desk_task() {
  TaskConfig t;
  t.n_cues = 3;
  t.cue_ms = 50.0;
  t.gap_ms = 25.0;
  t.accumulation_ms = 300.0;
  t.recall_ms = 100.0;
  return t;
}

inline void validate(const TaskConfig& t) {
  if (t.n_cues == 0) throw ConfigError("task: n_cues must be >= 1");
  if (!(t.dt > 0.0 && t.cue_ms > 0.0 && t.gap_ms >= 0.0 && t.recall_ms > 0.0))
    throw ConfigError("task: durations must be positive");
  const double last_end = static_cast<double>(t.n_cues - 1) * (t.cue_ms + t.gap_ms) + t.cue_ms;
  if (last_end > t.accumulation_ms)
    throw ConfigError("task: cues do not fit in the accumulation period");
  for (double r : {t.cue_rate_hz, t.recall_rate_hz, t.noise_rate_hz})
    if (!(r >= 0.0 && r * t.dt / 1000.0 <= 1.0)) throw ConfigError("task: invalid rate");
}

struct EiNetworkConfig {
  std::size_t n_rec = 400;
  std::size_t ei_exc = 4;  // E:I ratio
  std::size_t ei_inh = 1;
  double conn_prob = 0.1;
  std::size_t n_in = 100;
  dynamics::GifParams neuron = default_neuron();
  dynamics::SynapseParams synapse = dynamics::rescale(dynamics::SynapseParams{}, {});
  double tau_out = 20.0;  // ms
  InitConfig init;
  surrogate::SurrogateSpec surrogate;
  double dt = 1.0;
  Precision precision = Precision::f64;
  std::uint64_t seed = 0;

  std::size_t n_exc() const { return n_rec / (ei_exc + ei_inh) * ei_exc; }
  std::size_t n_inh() const { return n_rec - n_exc(); }

  /// Rescaled GIF: threshold 1, rest 0, A1/A2 from the tonic-adapting fit.
  static dynamics::GifParams default_neuron() {
    dynamics::GifParams p;
    p.tau_I1 = 10.0;
    p.tau_I2 = 200.0;
    p.tau_V = 20.0;
    p.R = 1.0;
    p.V_rest = 0.0;
    p.V_th = 1.0;
    p.A1 = -0.1;
    p.A2 = -0.05;
    return p;
  }
};

inline void validate(const EiNetworkConfig& c) {
  if (c.n_rec == 0 || c.n_in == 0) throw ConfigError("network: sizes must be > 0");
  if (c.ei_exc == 0 || c.ei_inh == 0) throw ConfigError("network: ei_ratio parts must be > 0");
  if (c.n_rec % (c.ei_exc + c.ei_inh) != 0)
    throw ConfigError("network: n_rec must be divisible by the ei_ratio sum");
  if (!(c.conn_prob > 0.0 && c.conn_prob <= 1.0))
    throw ConfigError("network: conn_prob must be in (0, 1]");
  if (!(c.tau_out > 0.0) || !(c.dt > 0.0)) throw ConfigError("network: tau_out, dt must be > 0");
  if (!(c.init.s_exc > 0 && c.init.s_inh > 0 && c.init.readout_scale > 0))
    throw ConfigError("network: init scales must be positive");
  dynamics::validate(c.neuron);
  dynamics::validate(c.synapse);
  surrogate::validate(c.surrogate);
}

struct ReadoutParams {
  double tau_out = 20.0;
  double dt = 1.0;
  double alpha() const { return std::exp(-dt / tau_out); }
};

struct EiNetwork {
  EiNetworkConfig config;
  sparse::CsrMatrix<double> W_in;   // n_in x n_rec, all excitatory
  sparse::CsrMatrix<double> W_rec;  // n_rec x n_rec, magnitudes
  std::vector<NeuronType> neuron_types;
  Vec is_exc;  // 1 for E neurons, as a mask
  Vec is_inh;
  sparse::DenseMatrix<double> W_out;  // n_rec x 2, row-major
  Vec b_out;                          // 2
  ReadoutParams readout;

  std::size_t n_rec() const { return config.n_rec; }
  std::size_t n_in() const { return config.n_in; }
};

inline constexpr std::size_t kClasses = 2;

inline double quantize(double x, Precision p) {
  return p == Precision::f32 ? static_cast<double>(static_cast<float>(x)) : x;
}

inline void quantize_weights(EiNetwork& net) {
  if (net.config.precision != Precision::f32) return;
  auto q = [](std::span<const double> v) {
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x = static_cast<float>(x);
    return out;
  };
  net.W_in = net.W_in.with_values(q(net.W_in.values()));
  net.W_rec = net.W_rec.with_values(q(net.W_rec.values()));
  for (double& x : net.W_out.data) x = static_cast<float>(x);
  for (double& x : net.b_out) x = static_cast<float>(x);
}

/// Builds the network deterministically from config.seed. Input weights use
/// fan-in n_in; recurrent weights use fan-in n_rec (the afferent population)
/// with the presynaptic neuron's scale.
inline EiNetwork build_network(const EiNetworkConfig& cfg) {
  validate(cfg);
  EiNetwork net;
  net.config = cfg;
  const std::size_t n = cfg.n_rec;
  net.neuron_types.assign(n, NeuronType::exc);
  for (std::size_t i = cfg.n_exc(); i < n; ++i) net.neuron_types[i] = NeuronType::inh;
  net.is_exc.assign(n, 0.0);
  net.is_inh.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    (net.neuron_types[i] == NeuronType::exc ? net.is_exc : net.is_inh)[i] = 1.0;

  std::mt19937_64 seeder(cfg.seed);
  const std::uint64_t seed_in = seeder(), seed_rec = seeder(), seed_out = seeder();

  net.W_in = sparse::random_csr<double>(cfg.n_in, n, 1.0,
                                        {cfg.init.s_exc, static_cast<double>(cfg.n_in), true},
                                        seed_in);

  // Recurrent pattern and magnitudes drawn at unit scale, then scaled per
  // presynaptic row.
  auto rec = sparse::random_csr<double>(n, n, cfg.conn_prob,
                                        {1.0, static_cast<double>(n), true}, seed_rec);
  std::vector<double> vals(rec.values().begin(), rec.values().end());
  auto off = rec.row_offsets();
  for (std::size_t i = 0; i < n; ++i) {
    const double s = net.neuron_types[i] == NeuronType::exc ? cfg.init.s_exc : cfg.init.s_inh;
    const double f = std::sqrt(s);
    for (std::size_t k = off[i]; k < off[i + 1]; ++k) vals[k] *= f;
  }
  net.W_rec = rec.with_values(std::move(vals));

  std::mt19937_64 rng(seed_out);
  std::normal_distribution<double> nd(0.0, 1.0);
  net.W_out = sparse::DenseMatrix<double>(n, kClasses);
  const double sd = std::sqrt(cfg.init.readout_scale / static_cast<double>(n));
  for (double& w : net.W_out.data) w = sd * nd(rng);
  net.b_out.assign(kClasses, 0.0);
  net.readout = {cfg.tau_out, cfg.dt};
  quantize_weights(net);
  return net;
}

/// Clamps stored weights driven below zero back to zero. Returns the number
/// of entries changed.
inline std::size_t dale_projection(EiNetwork& net) {
  std::size_t changed = 0;
  auto clamp = [&](const sparse::CsrMatrix<double>& w) {
    std::vector<double> v(w.values().begin(), w.values().end());
    for (double& x : v)
      if (x < 0.0) {
        x = 0.0;
        ++changed;
      }
    return w.with_values(std::move(v));
  };
  net.W_in = clamp(net.W_in);
  net.W_rec = clamp(net.W_rec);
  return changed;
}

/// True when every stored input/recurrent weight is nonnegative.
inline bool dale_holds(const EiNetwork& net) {
  for (double x : net.W_in.values())
    if (!(x >= 0.0)) return false;
  for (double x : net.W_rec.values())
    if (!(x >= 0.0)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Task

enum class Side : std::uint8_t { left = 0, right = 1 };

struct TrialBatch {
  std::size_t batch = 0;
  std::size_t n_steps = 0;
  std::size_t n_in = 0;
  std::vector<std::uint8_t> input_spikes;  // [b][t][i]
  std::vector<std::size_t> labels;         // 0 = left, 1 = right
  std::vector<std::uint8_t> recall_mask;   // [t]
  std::vector<std::vector<Side>> cues;     // per trial

  std::span<const std::uint8_t> input(std::size_t b, std::size_t t) const {
    return {input_spikes.data() + (b * n_steps + t) * n_in, n_in};
  }
  std::size_t recall_steps() const {
    return static_cast<std::size_t>(std::count(recall_mask.begin(), recall_mask.end(), 1));
  }
};

/// Input groups of equal size: left cue, right cue, recall, noise.
struct InputGroups {
  std::size_t size;
  std::size_t left() const { return 0; }
  std::size_t right() const { return size; }
  std::size_t recall() const { return 2 * size; }
  std::size_t noise() const { return 3 * size; }
};

inline InputGroups input_groups(std::size_t n_in) {
  if (n_in % 4 != 0) throw ConfigError("task: n_in must split into 4 equal groups");
  return {n_in / 4};
}

/// Appends one trial to `batch` (which fixes n_in and n_steps).
inline void generate_trial(const TaskConfig& task, std::mt19937_64& rng, TrialBatch& batch) {
  const auto g = input_groups(batch.n_in);
  const std::size_t T = batch.n_steps;
  std::bernoulli_distribution coin(0.5);
  std::vector<Side> cues(task.n_cues);
  std::size_t n_left = 0;
  do {
    n_left = 0;
    for (auto& c : cues) {
      c = coin(rng) ? Side::left : Side::right;
      n_left += c == Side::left;
    }
  } while (2 * n_left == task.n_cues);  // ties re-drawn

  const std::size_t base = batch.input_spikes.size();
  batch.input_spikes.resize(base + T * batch.n_in, 0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double p_cue = task.cue_rate_hz * task.dt / 1000.0;
  const double p_recall = task.recall_rate_hz * task.dt / 1000.0;
  const double p_noise = task.noise_rate_hz * task.dt / 1000.0;
  const std::size_t recall_start = task.recall_start();
  for (std::size_t t = 0; t < T; ++t) {
    const double now = static_cast<double>(t) * task.dt;
    int active = -1;
    for (std::size_t c = 0; c < task.n_cues; ++c) {
      const double on = static_cast<double>(c) * (task.cue_ms + task.gap_ms);
      if (now >= on && now < on + task.cue_ms) active = static_cast<int>(cues[c]);
    }
    std::uint8_t* row = batch.input_spikes.data() + base + t * batch.n_in;
    // Every group draws every step so the random stream does not depend on
    // which cue is active.
    for (std::size_t i = 0; i < g.size; ++i) {
      const bool l = u(rng) < p_cue, r = u(rng) < p_cue;
      row[g.left() + i] = active == 0 && l;
      row[g.right() + i] = active == 1 && r;
      const bool rc = u(rng) < p_recall;
      row[g.recall() + i] = t >= recall_start && rc;
      row[g.noise() + i] = u(rng) < p_noise;
    }
  }
  batch.labels.push_back(2 * n_left > task.n_cues ? 0 : 1);
  batch.cues.push_back(std::move(cues));
  ++batch.batch;
}

inline TrialBatch generate_batch(const TaskConfig& task, std::size_t n_in, std::size_t B,
                                 std::mt19937_64& rng) {
  validate(task);
  TrialBatch batch;
  batch.n_in = n_in;
  batch.n_steps = task.n_steps();
  batch.recall_mask.assign(batch.n_steps, 0);
  for (std::size_t t = task.recall_start(); t < batch.n_steps; ++t) batch.recall_mask[t] = 1;
  batch.input_spikes.reserve(B * batch.n_steps * n_in);
  for (std::size_t b = 0; b < B; ++b) generate_trial(task, rng, batch);
  return batch;
}

// ---------------------------------------------------------------------------
// Plain forward

struct NetworkState {
  Vec g_exc, g_inh;
  dynamics::GifState neuron;
  Vec z;  // spikes emitted on the last step
  Vec y;  // readout

  static NetworkState initial(const EiNetwork& net) {
    const std::size_t n = net.n_rec();
    NetworkState s;
    s.g_exc.assign(n, 0.0);
    s.g_inh.assign(n, 0.0);
    s.neuron = dynamics::GifState::resting(n, net.config.neuron);
    s.z.assign(n, 0.0);
    s.y.assign(kClasses, 0.0);
    return s;
  }
};

/// y' = alpha y + (W_out^T z + b) dt.
inline void readout_step(std::span<double> y, std::span<const double> z,
                         const sparse::DenseMatrix<double>& W_out, std::span<const double> b,
                         const ReadoutParams& rp) {
  require_shape(y.size() == W_out.cols && z.size() == W_out.rows && b.size() == W_out.cols,
                "readout_step: shape mismatch");
  const double a = rp.alpha();
  for (std::size_t c = 0; c < y.size(); ++c) {
    double o = b[c];
    for (std::size_t r = 0; r < z.size(); ++r)
      if (z[r] != 0.0) o += z[r] * W_out(r, c);
    y[c] = a * y[c] + rp.dt * o + 0.0;
  }
}

/// Scratch buffers reused across steps.
struct StepScratch {
  Vec x, z_exc, z_inh, inc_exc, inc_inh, i_ext;
};

/// Advances the network by one step in place. The step reads input x_t and
/// the spikes of the previous step; the new spikes land in state.z.
inline void network_step(const EiNetwork& net, NetworkState& s,
                         std::span<const std::uint8_t> input_t, StepScratch& w) {
  const std::size_t n = net.n_rec();
  require_shape(input_t.size() == net.n_in(), "network_step: input size mismatch");
  require_shape(s.z.size() == n && s.g_exc.size() == n, "network_step: state size mismatch");
  const auto& cfg = net.config;
  const double lam = std::exp(-cfg.dt / cfg.synapse.tau_syn);
  w.x.assign(input_t.begin(), input_t.end());
  w.z_exc.resize(n);
  w.z_inh.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    w.z_exc[i] = s.z[i] * net.is_exc[i];
    w.z_inh[i] = s.z[i] * net.is_inh[i];
  }
  w.inc_exc.assign(n, 0.0);
  w.inc_inh.assign(n, 0.0);
  sparse::weighted_event_matvec(net.W_in, w.x, w.inc_exc);
  Vec rec_exc(n, 0.0);
  sparse::weighted_event_matvec(net.W_rec, w.z_exc, rec_exc);
  sparse::weighted_event_matvec(net.W_rec, w.z_inh, w.inc_inh);
  w.i_ext.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.g_exc[i] = lam * s.g_exc[i] + 1.0 * (w.inc_exc[i] + rec_exc[i]) + 0.0;
    s.g_inh[i] = lam * s.g_inh[i] + 1.0 * w.inc_inh[i] + 0.0;
    const double v = s.neuron.V[i];
    w.i_ext[i] = s.g_exc[i] * (-v + cfg.synapse.E_exc) + s.g_inh[i] * (-v + cfg.synapse.E_inh);
  }
  auto r = dynamics::gif_step(s.neuron, cfg.neuron, w.i_ext, cfg.dt);
  s.neuron = std::move(r.state);
  s.z = std::move(r.spikes);
  readout_step(s.y, s.z, net.W_out, net.b_out, net.readout);
  if (cfg.precision == Precision::f32) {
    for (auto* v : {&s.g_exc, &s.g_inh, &s.neuron.I1, &s.neuron.I2, &s.neuron.V, &s.y})
      for (double& x : *v) x = static_cast<float>(x);
  }
}

/// Softmax cross-entropy of the recall-window mean readout.
inline double softmax_ce(std::span<const double> logits, std::size_t label) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return std::log(z) + mx - logits[label];
}

/// Mean over recall steps of y (series is [t][class]), then cross-entropy.
inline double trial_loss(std::span<const double> y_series, std::span<const std::uint8_t> recall_mask,
                         std::size_t label) {
  const std::size_t T = recall_mask.size();
  require_shape(y_series.size() == T * kClasses, "trial_loss: series/mask length mismatch");
  std::vector<double> mean(kClasses, 0.0);
  std::size_t count = 0;
  for (std::size_t t = 0; t < T; ++t) {
    if (!recall_mask[t]) continue;
    ++count;
    for (std::size_t c = 0; c < kClasses; ++c) mean[c] += y_series[t * kClasses + c];
  }
  if (count == 0) throw ConfigError("trial_loss: empty recall mask");
  for (double& m : mean) m /= static_cast<double>(count);
  return softmax_ce(mean, label);
}

/// Bounds observed on the rescaled potential during a run.
struct VoltageMonitor {
  double v_min = std::numeric_limits<double>::infinity();
  double v_max = -std::numeric_limits<double>::infinity();
  std::size_t violations = 0;  // neuron-steps outside [E_inh, E_exc]

  void observe(std::span<const double> v, double lo, double hi) {
    for (double x : v) {
      v_min = std::min(v_min, x);
      v_max = std::max(v_max, x);
      if (!(x >= lo && x <= hi)) ++violations;
    }
  }
  void merge(const VoltageMonitor& o) {
    v_min = std::min(v_min, o.v_min);
    v_max = std::max(v_max, o.v_max);
    violations += o.violations;
  }
};

/// Optional per-step recording for diagnostics.
struct TrialRecord {
  std::vector<std::pair<std::size_t, std::size_t>> spikes;  // (t, neuron)
  std::vector<Vec> V;                                       // [t][neuron]
};

struct TrialOutput {
  Vec y_series;  // [t][class]
  Vec y_mean;    // recall mean
  double loss = 0.0;
  std::size_t prediction = 0;
  std::size_t spike_count = 0;
};

inline TrialOutput run_trial(const EiNetwork& net, const TrialBatch& batch, std::size_t b,
                             VoltageMonitor* monitor = nullptr, TrialRecord* record = nullptr) {
  NetworkState s = NetworkState::initial(net);
  StepScratch w;
  TrialOutput out;
  out.y_series.resize(batch.n_steps * kClasses);
  const auto& syn = net.config.synapse;
  for (std::size_t t = 0; t < batch.n_steps; ++t) {
    network_step(net, s, batch.input(b, t), w);
    if (monitor) monitor->observe(s.neuron.V, syn.E_inh, syn.E_exc);
    for (std::size_t i = 0; i < s.z.size(); ++i) {
      if (s.z[i] == 0.0) continue;
      ++out.spike_count;
      if (record) record->spikes.emplace_back(t, i);
    }
    if (record) record->V.push_back(s.neuron.V);
    std::copy(s.y.begin(), s.y.end(), out.y_series.begin() + t * kClasses);
  }
  out.loss = trial_loss(out.y_series, batch.recall_mask, batch.labels[b]);
  out.y_mean.assign(kClasses, 0.0);
  const double count = static_cast<double>(batch.recall_steps());
  for (std::size_t t = 0; t < batch.n_steps; ++t)
    if (batch.recall_mask[t])
      for (std::size_t c = 0; c < kClasses; ++c) out.y_mean[c] += out.y_series[t * kClasses + c];
  for (double& m : out.y_mean) m /= count;
  out.prediction = out.y_mean[1] > out.y_mean[0] ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Tape forward

/// Trainable arrays as tape leaves.
struct NetworkVars {
  ad::Var w_in, w_rec, w_out, b_out;
};

inline NetworkVars parameter_vars(ad::Tape& t, const EiNetwork& net) {
  return {t.parameter(net.W_in.values()), t.parameter(net.W_rec.values()),
          t.parameter(net.W_out.data), t.parameter(net.b_out)};
}

struct TapeNetworkState {
  ad::Var g_exc, g_inh;
  dynamics::GifTapeState neuron;
  ad::Var z, y;
};

/// Per-trial constants shared by every step.
struct TapeContext {
  ad::Var is_exc, is_inh;
  dynamics::GifTapeParams gif;
  double lam = 0.0;
};

inline TapeContext tape_context(ad::Tape& t, const EiNetwork& net) {
  TapeContext c;
  c.is_exc = t.constant(net.is_exc);
  c.is_inh = t.constant(net.is_inh);
  c.gif = dynamics::constant_gif_params(t, net.config.neuron, net.config.dt);
  c.lam = std::exp(-net.config.dt / net.config.synapse.tau_syn);
  return c;
}

inline TapeNetworkState tape_initial_state(ad::Tape& t, const EiNetwork& net) {
  const std::size_t n = net.n_rec();
  TapeNetworkState s;
  s.g_exc = t.constant(n, 0.0);
  s.g_inh = t.constant(n, 0.0);
  s.neuron = {t.constant(n, 0.0), t.constant(n, 0.0), t.constant(n, net.config.neuron.V_rest)};
  s.z = t.constant(n, 0.0);
  s.y = t.constant(kClasses, 0.0);
  return s;
}

/// Tape form of network_step; records the same number of nodes every step.
inline TapeNetworkState network_step(const EiNetwork& net, const NetworkVars& p,
                                     const TapeContext& ctx, const TapeNetworkState& s,
                                     ad::Var input_t) {
  using namespace ad;
  const auto& cfg = net.config;
  Var z_exc = mul(s.z, ctx.is_exc);
  Var z_inh = mul(s.z, ctx.is_inh);
  Var in_exc = event_matvec(p.w_in, net.W_in.pattern(), input_t);
  Var rec_exc = event_matvec(p.w_rec, net.W_rec.pattern(), z_exc);
  Var rec_inh = event_matvec(p.w_rec, net.W_rec.pattern(), z_inh);
  TapeNetworkState r;
  r.g_exc = mix(s.g_exc, add(in_exc, rec_exc), ctx.lam, 1.0, 0.0);
  r.g_inh = mix(s.g_inh, rec_inh, ctx.lam, 1.0, 0.0);
  Var i_ext = dynamics::conductance_current(r.g_exc, r.g_inh, s.neuron.V, cfg.synapse);
  auto st = dynamics::gif_step(s.neuron, ctx.gif, i_ext, cfg.surrogate);
  r.neuron = st.state;
  r.z = st.spikes;
  Var o = affine_dense(p.w_out, r.z, p.b_out, net.n_rec(), kClasses);
  r.y = mix(s.y, o, net.readout.alpha(), net.readout.dt, 0.0);
  return r;
}

struct TapeTrial {
  ad::Var loss;
  ad::Var y_mean;
  std::size_t nodes_per_step = 0;
};

/// Records a whole trial and its loss on the tape.
inline TapeTrial record_trial(ad::Tape& t, const EiNetwork& net, const NetworkVars& p,
                              const TrialBatch& batch, std::size_t b,
                              VoltageMonitor* monitor = nullptr) {
  using namespace ad;
  TapeContext ctx = tape_context(t, net);
  TapeNetworkState s = tape_initial_state(t, net);
  const double inv_r = 1.0 / static_cast<double>(batch.recall_steps());
  if (batch.recall_steps() == 0) throw ConfigError("trial_loss: empty recall mask");
  Var y_acc = t.constant(kClasses, 0.0);
  std::vector<double> x(batch.n_in);
  std::size_t before = 0;
  TapeTrial out;
  const auto& syn = net.config.synapse;
  for (std::size_t k = 0; k < batch.n_steps; ++k) {
    if (k == 1) before = t.node_count();
    auto in = batch.input(b, k);
    std::copy(in.begin(), in.end(), x.begin());
    s = network_step(net, p, ctx, s, t.constant(x));
    y_acc = mix(y_acc, s.y, 1.0, batch.recall_mask[k] ? inv_r : 0.0, 0.0);
    if (k == 1) out.nodes_per_step = t.node_count() - before;
    if (monitor) monitor->observe(s.neuron.V.value(), syn.E_inh, syn.E_exc);
  }
  out.y_mean = y_acc;
  out.loss = softmax_cross_entropy(y_acc, batch.labels[b]);
  return out;
}

// ---------------------------------------------------------------------------
// Weight histograms

enum class WeightClass { exc, inh };

struct Histogram {
  std::vector<double> edges;  // n_bins + 1
  std::vector<std::size_t> counts;
  bool log_spaced = false;
};

/// Stored magnitudes of recurrent weights whose presynaptic neuron is of the
/// given class.
inline std::vector<double> recurrent_weights(const EiNetwork& net, WeightClass which) {
  std::vector<double> out;
  auto off = net.W_rec.row_offsets();
  auto val = net.W_rec.values();
  const NeuronType want = which == WeightClass::exc ? NeuronType::exc : NeuronType::inh;
  for (std::size_t i = 0; i < net.n_rec(); ++i)
    if (net.neuron_types[i] == want)
      for (std::size_t k = off[i]; k < off[i + 1]; ++k) out.push_back(val[k]);
  return out;
}

/// Linear bins on [0, max] for excitatory weights, log-spaced bins on
/// [min positive, max] for inhibitory ones (zeros fall in the first bin).
inline Histogram weight_histogram(const EiNetwork& net, WeightClass which, std::size_t n_bins) {
  if (n_bins < 2) throw ConfigError("weight_histogram: n_bins must be > 1");
  const auto w = recurrent_weights(net, which);
  if (w.empty()) throw DataError("weight_histogram: empty weight set");
  Histogram h;
  h.log_spaced = which == WeightClass::inh;
  const double hi = *std::max_element(w.begin(), w.end());
  h.counts.assign(n_bins, 0);
  h.edges.resize(n_bins + 1);
  if (h.log_spaced) {
    double lo = std::numeric_limits<double>::infinity();
    for (double x : w)
      if (x > 0.0) lo = std::min(lo, x);
    if (!std::isfinite(lo) || lo == hi) h.log_spaced = false;
    else {
      const double a = std::log(lo), bnd = std::log(hi);
      for (std::size_t k = 0; k <= n_bins; ++k)
        h.edges[k] = std::exp(a + (bnd - a) * static_cast<double>(k) / static_cast<double>(n_bins));
      h.edges.front() = lo;
      h.edges.back() = hi;
      for (double x : w) {
        std::size_t k = 0;
        if (x > lo) {
          const double pos = (std::log(x) - a) / (bnd - a) * static_cast<double>(n_bins);
          k = std::min(n_bins - 1, static_cast<std::size_t>(std::max(0.0, pos)));
        }
        ++h.counts[k];
      }
      return h;
    }
  }
  const double top = hi > 0.0 ? hi : 1.0;
  for (std::size_t k = 0; k <= n_bins; ++k)
    h.edges[k] = top * static_cast<double>(k) / static_cast<double>(n_bins);
  for (double x : w) {
    const double pos = x / top * static_cast<double>(n_bins);
    ++h.counts[std::min(n_bins - 1, static_cast<std::size_t>(std::max(0.0, pos)))];
  }
  return h;
}

}  // namespace spikediff::network
