#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "spikediff/checkpoint.hpp"
#include "spikediff/training.hpp"

using namespace spikediff;
using namespace spikediff::training;

namespace {

network::EiNetworkConfig tiny_config(std::uint64_t seed = 3) {
  network::EiNetworkConfig c;
  c.n_rec = 20;
  c.n_in = 20;
  c.conn_prob = 0.3;
  c.init.s_exc = 4.0;
  c.seed = seed;
  return c;
}

network::TaskConfig tiny_task() {
  network::TaskConfig t;
  t.n_cues = 1;
  t.cue_ms = 20;
  t.gap_ms = 0;
  t.accumulation_ms = 40;
  t.recall_ms = 20;
  t.cue_rate_hz = 400;
  t.recall_rate_hz = 400;
  t.noise_rate_hz = 100;
  return t;
}

network::TrialBatch tiny_batch(std::size_t B, std::uint64_t seed = 5) {
  std::mt19937_64 rng(seed);
  return network::generate_batch(tiny_task(), 20, B, rng);
}

}  // namespace

TEST(Adam, ZeroGradientsLeaveParams) {
  std::vector<double> p{1.0, -2.0, 0.5}, g(3, 0.0);
  auto st = AdamState::zeros(3, {});
  auto before = p;
  adam_step(p, g, st);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ConstantGradientStepsApproachLr) {
  AdamConfig c;
  c.lr = 0.01;
  c.clip_norm = 0.0;
  std::vector<double> p{0.0, 0.0}, g{3.0, -0.2};
  auto st = AdamState::zeros(2, c);
  double last0 = 0, last1 = 0;
  for (int i = 0; i < 500; ++i) {
    const double a = p[0], b = p[1];
    adam_step(p, g, st);
    last0 = p[0] - a;
    last1 = p[1] - b;
  }
  EXPECT_NEAR(last0, -0.01, 1e-8);
  EXPECT_NEAR(last1, 0.01, 1e-7);
}

TEST(Adam, TwoStepHandTrace) {
  AdamConfig c;
  c.lr = 0.1;
  c.clip_norm = 0.0;
  std::vector<double> p{1.0};
  auto st = AdamState::zeros(1, c);
  std::vector<double> g1{0.5}, g2{-1.0};
  adam_step(p, g1, st);
  // m = 0.05, v = 0.00025; mh = 0.5, vh = 0.25 -> step 0.1 * 0.5 / 0.5.
  EXPECT_NEAR(p[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  adam_step(p, g2, st);
  const double m = 0.9 * 0.05 + 0.1 * -1.0;
  const double v = 0.999 * 0.00025 + 0.001 * 1.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * mh / (std::sqrt(vh) + 1e-8), 1e-14);
}

TEST(Adam, NonFiniteGradientSkipped) {
  std::vector<double> p{1.0, 2.0}, g{NAN, 1.0};
  auto st = AdamState::zeros(2, {});
  auto rep = adam_step(p, g, st);
  EXPECT_TRUE(rep.skipped);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(st.step, 0u);
}

TEST(Adam, ClippingPreservesDirection) {
  std::vector<double> g{3.0, -4.0};
  EXPECT_DOUBLE_EQ(clip_by_norm(g, 1.0), 0.2);
  EXPECT_DOUBLE_EQ(g[0], 0.6);
  EXPECT_DOUBLE_EQ(g[1], -0.8);
  std::vector<double> small{0.1, 0.1};
  EXPECT_EQ(clip_by_norm(small, 1.0), 1.0);
  EXPECT_EQ(small[0], 0.1);
}

TEST(Adam, UpdateKeepsDale) {
  auto net = network::build_network(tiny_config());
  auto st = AdamState::zeros(layout_of(net).size(), {0.5, 0.9, 0.999, 1e-8, 0.0});
  std::vector<double> g(layout_of(net).size(), 1.0);  // pushes every weight down
  for (int i = 0; i < 5; ++i) apply_update(net, st, g);
  EXPECT_TRUE(network::dale_holds(net));
  EXPECT_EQ(net.W_rec.values()[0], 0.0);
}

TEST(Layout, FlattenRoundTrip) {
  auto net = network::build_network(tiny_config());
  auto p = flatten(net);
  EXPECT_EQ(p.size(), layout_of(net).size());
  auto copy = net;
  for (double& x : p) x += 1.0;
  unflatten(copy, p);
  EXPECT_EQ(copy.W_rec.values()[0], net.W_rec.values()[0] + 1.0);
  EXPECT_EQ(copy.b_out[1], net.b_out[1] + 1.0);
  EXPECT_THROW(unflatten(copy, std::vector<double>(3)), ShapeError);
}

TEST(Online, ExactOnFeedforwardNetwork) {
  auto net = network::build_network(tiny_config());
  net.W_rec = net.W_rec.with_values(std::vector<double>(net.W_rec.nnz(), 0.0));
  auto batch = tiny_batch(3);
  auto a = bptt_grad(net, batch);
  auto b = online_grad(net, batch);
  ASSERT_EQ(a.grad.size(), b.grad.size());
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  EXPECT_GT(a.spikes, 0u);
  double scale = 0;
  for (double g : a.grad) scale = std::max(scale, std::abs(g));
  EXPECT_GT(scale, 1e-3);
  for (std::size_t i = 0; i < a.grad.size(); ++i) ASSERT_NEAR(a.grad[i], b.grad[i], 1e-6) << i;
}

TEST(Online, ApproximatesRecurrentGradient) {
  auto net = network::build_network(tiny_config());
  auto batch = tiny_batch(2);
  auto a = bptt_grad(net, batch);
  auto b = online_grad(net, batch);
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.grad.size(); ++i) {
    dot += a.grad[i] * b.grad[i];
    na += a.grad[i] * a.grad[i];
    nb += b.grad[i] * b.grad[i];
  }
  EXPECT_GT(dot / std::sqrt(na * nb), 0.9);
}

TEST(Online, ZeroLearningSignalGivesZeroWeightGradient) {
  auto net = network::build_network(tiny_config());
  std::fill(net.W_out.data.begin(), net.W_out.data.end(), 0.0);
  auto g = online_grad(net, tiny_batch(2));
  const auto L = layout_of(net);
  EXPECT_GT(g.spikes, 0u);
  for (std::size_t i = 0; i < L.out_offset(); ++i) ASSERT_EQ(g.grad[i], 0.0);
}

TEST(Online, StateSizeIndependentOfSteps) {
  auto net = network::build_network(tiny_config());
  auto e = EligibilityState::zeros(net);
  auto state = network::NetworkState::initial(net);
  network::StepScratch scratch;
  std::vector<std::uint8_t> x(net.n_in(), 0);
  std::mt19937_64 rng(1);
  std::size_t at10 = 0;
  for (std::size_t t = 0; t < 10000; ++t) {
    for (auto& b : x) b = rng() % 10 == 0;
    online_grad_step(net, state, e, x, t % 2 == 0, scratch);
    if (t == 9) at10 = e.bytes();
  }
  EXPECT_EQ(e.bytes(), at10);
  EXPECT_EQ(e.eV.size(), net.W_in.nnz() + net.W_rec.nnz());
}

// Hand-written recursion for one input synapse of a neuron that never
// spikes: the presynaptic trace is lambda^(t - t0) after a single input
// spike, and the V sensitivity obeys
//   eV' = (1 - k - kR G) eV + kR (eI2 + s (E_exc - V)),  eI2 = 0.
TEST(Online, SingleSynapseMatchesHandRecursion) {
  network::EiNetworkConfig c;
  c.n_rec = 5;
  c.n_in = 4;
  c.conn_prob = 1.0;
  c.seed = 1;
  c.surrogate = {surrogate::Kind::piecewise_quadratic, 1.0, 0.2};  // zero below V = 0.8
  auto net = network::build_network(c);
  net.W_rec = net.W_rec.with_values(std::vector<double>(net.W_rec.nnz(), 0.0));
  net.W_in = net.W_in.with_values(std::vector<double>(net.W_in.nnz(), 0.3));
  auto e = EligibilityState::zeros(net);
  auto state = network::NetworkState::initial(net);
  network::StepScratch scratch;
  const double lam = std::exp(-1.0 / 10.0), k = 1.0 / 20.0;
  double s = 0, ev = 0, V = 0, g = 0;
  for (std::size_t t = 0; t < 60; ++t) {
    std::vector<std::uint8_t> x(4, 0);
    if (t == 3) x[0] = 1;
    online_grad_step(net, state, e, x, false, scratch);
    // Synapse (0 -> 0) is entry 0 of W_in (full pattern).
    const double w = net.W_in.values()[0];
    s = lam * s + x[0];
    g = lam * g + w * x[0];
    const double ev_new = (1 - k - k * g) * ev + k * (s * (3.0 - V));
    V = (1 - k) * V + k * g * (3.0 - V);
    ev = ev_new;
    ASSERT_LT(state.neuron.V[0], 0.8);
    EXPECT_NEAR(e.s_in[0], t >= 3 ? std::pow(lam, static_cast<double>(t - 3)) : 0.0, 1e-12);
    EXPECT_NEAR(e.eV[0], ev, 1e-12) << t;
    EXPECT_NEAR(state.neuron.V[0], V, 1e-12);
    EXPECT_EQ(e.eI2[0], 0.0);
  }
}

TEST(Bptt, DeadReadoutPathHasZeroGradient) {
  auto net = network::build_network(tiny_config());
  auto batch = tiny_batch(1);
  std::fill(batch.input_spikes.begin(), batch.input_spikes.end(), 0);
  auto g = bptt_grad(net, batch);
  EXPECT_EQ(g.spikes, 0u);
  const auto L = layout_of(net);
  for (std::size_t i = L.out_offset(); i < L.bias_offset(); ++i) ASSERT_EQ(g.grad[i], 0.0);
  EXPECT_NE(g.grad[L.bias_offset()], 0.0);
}

TEST(Bptt, ThreadCountDoesNotChangeGradient) {
  auto net = network::build_network(tiny_config());
  auto batch = tiny_batch(5);
  auto a = bptt_grad(net, batch, 1);
  auto b = bptt_grad(net, batch, 3);
  EXPECT_EQ(a.grad, b.grad);
  EXPECT_EQ(a.loss, b.loss);
  auto c = online_grad(net, batch, 1);
  auto d = online_grad(net, batch, 2);
  EXPECT_EQ(c.grad, d.grad);
}

TEST(Train, DeterministicLossHistory) {
  TrainConfig tc;
  tc.epochs = 2;
  tc.batches_per_epoch = 2;
  tc.batch_size = 4;
  tc.eval_trials = 8;
  tc.seed = 7;
  auto run = [&] {
    auto s = initial_train_state(network::build_network(tiny_config(7)), tc);
    train(s, tiny_task(), tc);
    return s;
  };
  auto a = run(), b = run();
  ASSERT_EQ(a.history.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.history[i].loss, b.history[i].loss);
    EXPECT_EQ(a.history[i].eval_loss, b.history[i].eval_loss);
  }
  EXPECT_EQ(flatten(a.net), flatten(b.net));
}

TEST(Train, CheckpointResumeContinuesHistory) {
  TrainConfig tc;
  tc.epochs = 3;
  tc.batches_per_epoch = 2;
  tc.batch_size = 4;
  tc.eval_trials = 8;
  tc.seed = 9;
  auto full = initial_train_state(network::build_network(tiny_config(9)), tc);
  train(full, tiny_task(), tc);

  auto partial = initial_train_state(network::build_network(tiny_config(9)), tc);
  auto short_cfg = tc;
  short_cfg.epochs = 2;
  train(partial, tiny_task(), short_cfg);
  const auto path = std::filesystem::temp_directory_path() / "spikediff_ckpt_test.json";
  checkpoint::save(path.string(), partial, 9);
  auto resumed = checkpoint::load(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(resumed.epoch, 2u);
  EXPECT_EQ(flatten(resumed.net), flatten(partial.net));
  train(resumed, tiny_task(), tc);
  ASSERT_EQ(resumed.history.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(resumed.history[i].loss, full.history[i].loss);
  EXPECT_EQ(flatten(resumed.net), flatten(full.net));
}

TEST(Train, RejectsBadConfig) {
  TrainConfig tc;
  tc.batch_size = 0;
  EXPECT_THROW(validate(tc), ConfigError);
  tc = {};
  tc.adam.lr = -1;
  EXPECT_THROW(validate(tc), ConfigError);
  EXPECT_THROW(learner_from_name("rtrl"), ConfigError);
}

TEST(Train, UntrainedAccuracyNearChance) {
  network::EiNetworkConfig c;
  c.n_rec = 100;
  c.seed = 4;
  auto net = network::build_network(c);
  auto batch = heldout_batch(network::desk_task(), 100, 1000, 4);
  auto ev = evaluate(net, batch);
  EXPECT_NEAR(ev.accuracy, 0.5, 0.05);
  EXPECT_EQ(ev.monitor.violations, 0u);
}

// Conductance-only drive: one explicit Euler step maps [E_inh, E_exc] into
// itself whenever k (1 + R G) <= 1.
TEST(Network, MembraneBoundStepCondition) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double k = 1.0 / 20.0;
  for (int i = 0; i < 100000; ++i) {
    const double G = u(rng) * (1.0 / k - 1.0);
    const double ge = G * u(rng), gi = G - ge;
    const double V = -3.0 + 6.0 * u(rng);
    const double v = (1 - k) * V + k * (ge * (3.0 - V) + gi * (-3.0 - V));
    ASSERT_GE(v, -3.0 - 1e-12);
    ASSERT_LE(v, 3.0 + 1e-12);
  }
}

TEST(Bench, ScalingShapes) {
  auto net = network::build_network(tiny_config());
  std::vector<std::size_t> Ts{40, 80, 160};
  auto rows = bench_scaling(net, Ts, 2, 1, 1);
  ASSERT_EQ(rows.size(), 6u);
  std::vector<double> t, mb, mo;
  for (const auto& r : rows) {
    if (r.learner == Learner::bptt) {
      t.push_back(static_cast<double>(r.T));
      mb.push_back(static_cast<double>(r.memory_bytes));
    } else {
      mo.push_back(static_cast<double>(r.memory_bytes));
    }
  }
  EXPECT_GT(linear_r2(t, mb), 0.999);
  EXPECT_EQ(mo[0], mo[2]);
  std::vector<std::size_t> two{40, 80};
  EXPECT_THROW(bench_scaling(net, two, 2, 1, 1), ConfigError);
}

TEST(Bench, LinearR2) {
  std::vector<double> x{1, 2, 3, 4}, y{3, 5, 7, 9}, z{1, 4, 9, 16};
  EXPECT_DOUBLE_EQ(linear_r2(x, y), 1.0);
  // Pearson r for (x, x^2) on 1..4 is 0.984374..., squared:
  EXPECT_NEAR(linear_r2(x, z), 0.9689922480620154, 1e-12);
}
