#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "spikediff/network.hpp"

using namespace spikediff;
using namespace spikediff::network;

namespace {

EiNetworkConfig small_config(std::size_t n_rec = 20, std::uint64_t seed = 3) {
  EiNetworkConfig c;
  c.n_rec = n_rec;
  c.n_in = 20;
  c.conn_prob = 0.3;
  c.seed = seed;
  return c;
}

TaskConfig short_task() {
  TaskConfig t;
  t.n_cues = 1;
  t.cue_ms = 10;
  t.gap_ms = 0;
  t.accumulation_ms = 20;
  t.recall_ms = 10;
  t.cue_rate_hz = 400;
  t.recall_rate_hz = 400;
  t.noise_rate_hz = 200;
  return t;
}

}  // namespace

TEST(Network, BuildShapesAndDale) {
  auto net = build_network(small_config(100));
  EXPECT_EQ(net.config.n_exc(), 80u);
  EXPECT_EQ(std::count(net.neuron_types.begin(), net.neuron_types.end(), NeuronType::inh), 20);
  for (std::size_t i = 0; i < 80; ++i) EXPECT_EQ(net.neuron_types[i], NeuronType::exc);
  EXPECT_EQ(net.W_in.nnz(), 20u * 100u);
  EXPECT_EQ(net.W_rec.n_rows(), 100u);
  EXPECT_TRUE(dale_holds(net));
  EXPECT_EQ(net.W_out.rows, 100u);
  EXPECT_EQ(net.W_out.cols, 2u);
  const double density = static_cast<double>(net.W_rec.nnz()) / (100.0 * 100.0);
  EXPECT_NEAR(density, 0.3, 5 * std::sqrt(0.3 * 0.7 / 1e4));
}

TEST(Network, BuildIsDeterministic) {
  auto a = build_network(small_config(40, 9));
  auto b = build_network(small_config(40, 9));
  auto c = build_network(small_config(40, 10));
  EXPECT_TRUE(a.W_rec == b.W_rec);
  EXPECT_TRUE(a.W_in == b.W_in);
  EXPECT_EQ(a.W_out, b.W_out);
  EXPECT_FALSE(a.W_rec == c.W_rec);
}

TEST(Network, InhibitoryRowsScaled) {
  // Mean |N(0,1)| sqrt(s / n): ratio of I to E row means near sqrt(4).
  auto cfg = small_config(400);
  cfg.conn_prob = 0.5;
  auto net = build_network(cfg);
  auto e = recurrent_weights(net, WeightClass::exc);
  auto i = recurrent_weights(net, WeightClass::inh);
  const double me = std::accumulate(e.begin(), e.end(), 0.0) / e.size();
  const double mi = std::accumulate(i.begin(), i.end(), 0.0) / i.size();
  EXPECT_NEAR(mi / me, 2.0, 0.1);
  EXPECT_NEAR(me, std::sqrt(1.0 / 400.0) * std::sqrt(2.0 / M_PI), 0.003);
}

TEST(Network, ConfigValidation) {
  auto c = small_config();
  c.n_rec = 21;
  EXPECT_THROW(build_network(c), ConfigError);
  c = small_config();
  c.conn_prob = 0.0;
  EXPECT_THROW(build_network(c), ConfigError);
  c = small_config();
  c.tau_out = -1;
  EXPECT_THROW(build_network(c), ConfigError);
  EXPECT_THROW(input_groups(10), ConfigError);
  TaskConfig t;
  t.accumulation_ms = 900;
  EXPECT_THROW(validate(t), ConfigError);
}

TEST(Network, DaleProjectionClamps) {
  auto net = build_network(small_config());
  std::vector<double> v(net.W_rec.values().begin(), net.W_rec.values().end());
  v[0] = -0.5;
  v[1] = -1e-9;
  net.W_rec = net.W_rec.with_values(v);
  EXPECT_FALSE(dale_holds(net));
  EXPECT_EQ(dale_projection(net), 2u);
  EXPECT_TRUE(dale_holds(net));
  EXPECT_EQ(net.W_rec.values()[0], 0.0);
}

TEST(Task, LabelsFollowMajorityAndWindows) {
  TaskConfig task;  // 7 cues
  std::mt19937_64 rng(5);
  auto batch = generate_batch(task, 100, 40, rng);
  const auto g = input_groups(100);
  ASSERT_EQ(batch.n_steps, 1250u);
  EXPECT_EQ(batch.recall_steps(), 150u);
  std::size_t lefts = 0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    std::size_t n_left = 0;
    for (auto c : batch.cues[b]) n_left += c == Side::left;
    EXPECT_NE(2 * n_left, task.n_cues);
    EXPECT_EQ(batch.labels[b], n_left * 2 > task.n_cues ? 0u : 1u);
    lefts += batch.labels[b] == 0;
    for (std::size_t t = 0; t < batch.n_steps; ++t) {
      auto in = batch.input(b, t);
      const std::size_t c = t / 150;
      const bool in_cue = c < task.n_cues && t % 150 < 100;
      for (std::size_t i = 0; i < g.size; ++i) {
        if (in[g.left() + i])
          ASSERT_TRUE(in_cue && batch.cues[b][c] == Side::left) << b << " " << t;
        if (in[g.right() + i])
          ASSERT_TRUE(in_cue && batch.cues[b][c] == Side::right) << b << " " << t;
        if (in[g.recall() + i]) ASSERT_GE(t, 1100u);
      }
    }
  }
  EXPECT_GT(lefts, 5u);
  EXPECT_LT(lefts, 35u);
}

TEST(Task, PoissonRates) {
  TaskConfig task;
  std::mt19937_64 rng(11);
  auto batch = generate_batch(task, 100, 20, rng);
  const auto g = input_groups(100);
  double noise = 0, cue = 0, cue_slots = 0, recall = 0;
  for (std::size_t b = 0; b < batch.batch; ++b)
    for (std::size_t t = 0; t < batch.n_steps; ++t) {
      auto in = batch.input(b, t);
      const std::size_t c = t / 150;
      const bool in_cue = c < task.n_cues && t % 150 < 100;
      const std::size_t grp = batch.cues[b][std::min(c, task.n_cues - 1)] == Side::left
                                  ? g.left()
                                  : g.right();
      for (std::size_t i = 0; i < g.size; ++i) {
        noise += in[g.noise() + i];
        recall += in[g.recall() + i];
        if (in_cue) cue += in[grp + i];
      }
      if (in_cue) cue_slots += g.size;
    }
  const double slots = 20.0 * 1250.0 * 25.0;
  const double p = 0.01;
  EXPECT_NEAR(noise / slots, p, 5 * std::sqrt(p * (1 - p) / slots));
  const double pc = 0.04;
  EXPECT_NEAR(cue / cue_slots, pc, 5 * std::sqrt(pc * (1 - pc) / cue_slots));
  const double rslots = 20.0 * 150.0 * 25.0;
  EXPECT_NEAR(recall / rslots, pc, 5 * std::sqrt(pc * (1 - pc) / rslots));
}

TEST(Task, DeterministicBySeed) {
  auto task = desk_task();
  std::mt19937_64 a(1), b(1);
  auto x = generate_batch(task, 100, 4, a);
  auto y = generate_batch(task, 100, 4, b);
  EXPECT_EQ(x.input_spikes, y.input_spikes);
  EXPECT_EQ(x.labels, y.labels);
}

TEST(Readout, StepMatchesFormula) {
  sparse::DenseMatrix<double> W(3, 2);
  W.data = {1, 2, 3, 4, 5, 6};
  std::vector<double> b{0.5, -0.5}, z{1, 0, 1}, y{0.2, 0.4};
  ReadoutParams rp{10.0, 1.0};
  readout_step(y, z, W, b, rp);
  const double a = std::exp(-0.1);
  EXPECT_DOUBLE_EQ(y[0], a * 0.2 + (0.5 + 1 + 5));
  EXPECT_DOUBLE_EQ(y[1], a * 0.4 + (-0.5 + 2 + 6));
}

TEST(Readout, TrialLossIsCrossEntropyOfRecallMean) {
  std::vector<std::uint8_t> mask{0, 1, 1};
  std::vector<double> ys{9, 9, 1, 0, 3, 2};  // recall mean (2, 1)
  const double p1 = std::exp(1.0) / (std::exp(2.0) + std::exp(1.0));
  EXPECT_NEAR(trial_loss(ys, mask, 1), -std::log(p1), 1e-14);
  EXPECT_NEAR(trial_loss(ys, mask, 0), -std::log(1 - p1), 1e-14);
  std::vector<std::uint8_t> none{0, 0, 0};
  EXPECT_THROW(trial_loss(ys, none, 0), ConfigError);
}

TEST(Network, TapeForwardMatchesPlain) {
  auto net = build_network(small_config(40));
  auto task = short_task();
  std::mt19937_64 rng(4);
  auto batch = generate_batch(task, net.n_in(), 3, rng);
  for (std::size_t b = 0; b < 3; ++b) {
    auto plain = run_trial(net, batch, b);
    ad::Tape tape;
    auto vars = parameter_vars(tape, net);
    auto tr = record_trial(tape, net, vars, batch, b);
    EXPECT_NEAR(tr.loss.scalar(), plain.loss, 1e-12);
    EXPECT_NEAR(tr.y_mean.value()[0], plain.y_mean[0], 1e-12);
    EXPECT_GT(plain.spike_count, 0u);
  }
}

TEST(Network, TapeNodesPerStepConstant) {
  auto net = build_network(small_config());
  auto t1 = short_task();
  auto t2 = t1;
  t2.accumulation_ms = 60;
  std::mt19937_64 r1(1), r2(1);
  auto b1 = generate_batch(t1, net.n_in(), 1, r1);
  auto b2 = generate_batch(t2, net.n_in(), 1, r2);
  ad::Tape a, b;
  auto va = parameter_vars(a, net);
  auto vb = parameter_vars(b, net);
  auto ra = record_trial(a, net, va, b1, 0);
  auto rb = record_trial(b, net, vb, b2, 0);
  EXPECT_GT(ra.nodes_per_step, 0u);
  EXPECT_EQ(ra.nodes_per_step, rb.nodes_per_step);
  EXPECT_EQ(b.node_count() - a.node_count(), 40 * ra.nodes_per_step);
}

// Central differences of the relaxed forward pass against the tape gradient
// on a 20-neuron, 30-step instance.
TEST(Network, GradientMatchesFiniteDifferences) {
  // Moderate drive and a small readout keep the softmax away from saturation,
  // where gradients shrink below what central differences resolve.
  auto cfg = small_config(20, 7);
  cfg.init.readout_scale = 0.1;
  cfg.surrogate = {surrogate::Kind::sigmoid, 4.0, 1.0};
  auto net = build_network(cfg);
  auto task = short_task();
  task.cue_rate_hz = task.recall_rate_hz = 200;
  task.noise_rate_hz = 100;
  std::mt19937_64 rng(8);
  auto batch = generate_batch(task, net.n_in(), 1, rng);
  ASSERT_EQ(batch.n_steps, 30u);

  auto loss_at = [&](const EiNetwork& n) {
    ad::Tape t(ad::SpikeMode::relaxed);
    auto v = parameter_vars(t, n);
    return record_trial(t, n, v, batch, 0).loss.scalar();
  };
  ad::Tape tape(ad::SpikeMode::relaxed);
  auto vars = parameter_vars(tape, net);
  auto tr = record_trial(tape, net, vars, batch, 0);
  auto grads = tape.backward(tr.loss);
  auto g_in = grads.copy(vars.w_in), g_rec = grads.copy(vars.w_rec);
  auto g_out = grads.copy(vars.w_out), g_b = grads.copy(vars.b_out);

  const double eps = 1e-4;
  double worst = 0.0;
  std::size_t checked = 0;
  auto check = [&](double analytic, auto perturb) {
    EiNetwork p = net, m = net;
    perturb(p, eps);
    perturb(m, -eps);
    const double fd = (loss_at(p) - loss_at(m)) / (2 * eps);
    const double err = std::abs(analytic - fd) / (std::abs(fd) + 1e-12);
    worst = std::max(worst, err);
    ++checked;
  };
  auto csr_perturb = [](sparse::CsrMatrix<double> EiNetwork::*field, std::size_t k) {
    return [=](EiNetwork& n, double d) {
      std::vector<double> v((n.*field).values().begin(), (n.*field).values().end());
      v[k] += d;
      n.*field = (n.*field).with_values(v);
    };
  };
  for (std::size_t k = 0; k < net.W_in.nnz(); k += 17)
    check(g_in[k], csr_perturb(&EiNetwork::W_in, k));
  for (std::size_t k = 0; k < net.W_rec.nnz(); k += 5)
    check(g_rec[k], csr_perturb(&EiNetwork::W_rec, k));
  for (std::size_t k = 0; k < net.W_out.data.size(); k += 3)
    check(g_out[k], [k](EiNetwork& n, double d) { n.W_out.data[k] += d; });
  for (std::size_t k = 0; k < 2; ++k)
    check(g_b[k], [k](EiNetwork& n, double d) { n.b_out[k] += d; });
  EXPECT_GT(checked, 40u);
  EXPECT_LT(worst, 1e-6);
  double rec_norm = 0;
  for (double g : g_rec) rec_norm += g * g;
  EXPECT_GT(rec_norm, 0.0);
}

TEST(Network, MembraneStaysWithinReversalPotentials) {
  EiNetworkConfig cfg;
  cfg.n_rec = 100;
  cfg.seed = 2;
  auto net = build_network(cfg);
  std::mt19937_64 rng(3);
  auto batch = generate_batch(desk_task(), net.n_in(), 4, rng);
  VoltageMonitor mon;
  std::size_t spikes = 0;
  for (std::size_t b = 0; b < 4; ++b) spikes += run_trial(net, batch, b, &mon).spike_count;
  EXPECT_EQ(mon.violations, 0u) << mon.v_min << " " << mon.v_max;
  EXPECT_GT(spikes, 0u);
}

TEST(Network, Float32Precision) {
  auto cfg = small_config(40);
  cfg.precision = Precision::f32;
  auto net = build_network(cfg);
  for (double w : net.W_rec.values()) EXPECT_EQ(w, static_cast<double>(static_cast<float>(w)));
  for (double w : net.W_out.data) EXPECT_EQ(w, static_cast<double>(static_cast<float>(w)));
  std::mt19937_64 rng(4);
  auto batch = generate_batch(short_task(), net.n_in(), 1, rng);
  auto out = run_trial(net, batch, 0);
  EXPECT_TRUE(std::isfinite(out.loss));
  auto cfg64 = cfg;
  cfg64.precision = Precision::f64;
  auto net64 = build_network(cfg64);
  EXPECT_NEAR(run_trial(net64, batch, 0).loss, out.loss, 1e-3);
}

TEST(Histogram, CountsAndBins) {
  auto net = build_network(small_config(100));
  auto he = weight_histogram(net, WeightClass::exc, 10);
  auto hi = weight_histogram(net, WeightClass::inh, 10);
  EXPECT_FALSE(he.log_spaced);
  EXPECT_TRUE(hi.log_spaced);
  EXPECT_EQ(std::accumulate(he.counts.begin(), he.counts.end(), std::size_t{0}),
            recurrent_weights(net, WeightClass::exc).size());
  EXPECT_EQ(std::accumulate(hi.counts.begin(), hi.counts.end(), std::size_t{0}),
            recurrent_weights(net, WeightClass::inh).size());
  for (std::size_t k = 1; k < hi.edges.size(); ++k) {
    EXPECT_GT(hi.edges[k], hi.edges[k - 1]);
    if (k > 1)
      EXPECT_NEAR(hi.edges[k] / hi.edges[k - 1], hi.edges[1] / hi.edges[0], 1e-9);
  }
  EXPECT_EQ(he.edges.front(), 0.0);
  EXPECT_THROW(weight_histogram(net, WeightClass::exc, 1), ConfigError);
}
