#include <gtest/gtest.h>

#include <random>

#include "spikediff/dynamics.hpp"

using namespace spikediff;
using namespace spikediff::dynamics;

TEST(Rescale, ReversalPotentials) {
  ScalingConfig c;
  EXPECT_DOUBLE_EQ(rescale_voltage(0.0, c), 3.0);
  EXPECT_DOUBLE_EQ(rescale_voltage(-120.0, c), -3.0);
  EXPECT_EQ(rescale_voltage(c.V_offset, c), 0.0);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const double v = std::uniform_real_distribution<double>(-150, 60)(rng);
    EXPECT_NEAR(unscale_voltage(rescale_voltage(v, c), c), v, 1e-12);
  }
}

TEST(Gif, RestingFixedPoint) {
  GifParams p;
  auto s = GifState::resting(3, p);
  std::vector<double> zero(3, 0.0);
  auto r = gif_step(s, p, zero, 0.1);
  EXPECT_EQ(r.state.V, s.V);
  EXPECT_EQ(r.state.I1, s.I1);
  EXPECT_EQ(r.state.I2, s.I2);
  EXPECT_EQ(r.spikes, zero);
}

TEST(Gif, ThresholdCrossingResets) {
  GifParams p;
  GifState s{{0.5}, {0.2}, {p.V_th + 1e-9}};
  std::vector<double> in{0.0};
  auto r = gif_step(s, p, in, 0.1);
  EXPECT_EQ(r.spikes[0], 1.0);
  EXPECT_EQ(r.state.V[0], p.V_rest);
  EXPECT_EQ(r.state.I1[0], p.A1);
  EXPECT_DOUBLE_EQ(r.state.I2[0], 0.2 * std::exp(-0.1 / p.tau_I2) + p.A2);
  // V exactly at threshold fires as well.
  s.V[0] = p.V_th;
  EXPECT_EQ(gif_step(s, p, in, 0.1).spikes[0], 1.0);
}

TEST(Gif, AdaptationLengthensIntervals) {
  // A negative spike-triggered slow current opposes the drive, so intervals grow.
  GifParams p;
  p.A2 = -1.0;
  p.tau_I2 = 500.0;
  std::vector<double> I(20000, 30.0);
  auto tr = simulate_gif(p, I, 0.1);
  ASSERT_GE(tr.spike_times.size(), 6u);
  for (std::size_t k = 2; k < 6; ++k)
    EXPECT_GT(tr.spike_times[k] - tr.spike_times[k - 1],
              tr.spike_times[k - 1] - tr.spike_times[k - 2]);
}

TEST(Gif, ExactDecayOfCurrents) {
  GifParams p;
  GifState s{{1.5}, {-0.8}, {p.V_rest}};
  std::vector<double> in{0.0};
  const double dt = 0.1;
  for (int k = 1; k <= 50; ++k) {
    s = gif_step(s, p, in, dt).state;
    EXPECT_NEAR(s.I1[0], 1.5 * std::exp(-k * dt / p.tau_I1), 1e-12);
    EXPECT_NEAR(s.I2[0], -0.8 * std::exp(-k * dt / p.tau_I2), 1e-12);
  }
}

TEST(Gif, ZeroInputTraceFlatAndDeterministic) {
  GifParams p;
  std::vector<double> I(1000, 0.0);
  auto a = simulate_gif(p, I, 0.1);
  auto b = simulate_gif(p, I, 0.1);
  EXPECT_EQ(a.V.size(), 1000u);
  for (double v : a.V) EXPECT_EQ(v, p.V_rest);
  EXPECT_TRUE(a.spike_times.empty());
  std::vector<double> I2(1000, 25.0);
  EXPECT_EQ(simulate_gif(p, I2, 0.1).V, simulate_gif(p, I2, 0.1).V);
}

TEST(Gif, TapeMatchesPlainStep) {
  GifParams p = rescale(GifParams{}, ScalingConfig{});
  const double dt = 0.5;
  GifState s{{0.1, -0.05, 0.0}, {0.0, -0.02, 0.01}, {0.2, 1.0, 0.95}};
  std::vector<double> I{0.3, 0.0, 2.0};
  auto plain = gif_step(s, p, I, dt);
  ad::Tape t;
  GifTapeState ts{t.parameter(s.I1), t.parameter(s.I2), t.parameter(s.V)};
  auto tp = constant_gif_params(t, p, dt);
  auto step = gif_step(ts, tp, t.constant(I), surrogate::SurrogateSpec{});
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(step.state.V.value()[i], plain.state.V[i]);
    EXPECT_EQ(step.state.I1.value()[i], plain.state.I1[i]);
    EXPECT_EQ(step.state.I2.value()[i], plain.state.I2[i]);
    EXPECT_EQ(step.spikes.value()[i], plain.spikes[i]);
  }
}

namespace {

// Sum of V^2 over `steps` GIF steps; x = [A1, A2, tau_I1 / 10, tau_I2 / 200]
// so every coordinate is O(1).
ad::Var gif_rollout(ad::Tape& t, ad::Var x, std::size_t steps, std::span<const double> drive) {
  using namespace ad;
  GifParams base = rescale(GifParams{}, ScalingConfig{});
  const double dt = 1.0;
  auto xv = x.value();
  const std::size_t n = drive.size();
  // Pick scalar parameters out of x through fixed one-hot dense maps.
  auto pick = [&](std::size_t k) {
    std::vector<double> w(xv.size(), 0.0);
    w[k] = 1.0;
    return affine_dense(t.constant(w), x, t.constant(0.0), xv.size(), 1);
  };
  GifTapeParams p;
  p.A1 = pick(0);
  p.A2 = pick(1);
  p.decay_I1 = decay_factor(scale(pick(2), 10.0), dt);
  p.decay_I2 = decay_factor(scale(pick(3), 200.0), dt);
  p.tau_V = base.tau_V;
  p.R = base.R;
  p.V_rest = base.V_rest;
  p.V_th = base.V_th;
  p.dt = dt;
  GifTapeState s{t.constant(n, 0.0), t.constant(n, 0.0), t.constant(n, 0.0)};
  Var input = t.constant(drive);
  Var loss = t.constant(0.0);
  for (std::size_t k = 0; k < steps; ++k) {
    auto st = gif_step(s, p, input, surrogate::SurrogateSpec{});
    s = st.state;
    loss = add(loss, sum(square(s.V)));
  }
  return loss;
}

}  // namespace

// x = [A1, A2, tau_I1 / 10, tau_I2 / 200, I1 (n), I2 (n), V (n)]; every
// output of one step enters the loss.
ad::Var gif_one_step(ad::Tape& t, ad::Var x, std::span<const double> drive) {
  using namespace ad;
  GifParams base = rescale(GifParams{}, ScalingConfig{});
  const std::size_t d = x.size(), n = drive.size();
  auto slice = [&](std::size_t from, std::size_t len) {
    std::vector<double> w(d * len, 0.0);
    for (std::size_t k = 0; k < len; ++k) w[(from + k) * len + k] = 1.0;
    return affine_dense(t.constant(w), x, t.constant(len, 0.0), d, len);
  };
  GifTapeParams p;
  p.A1 = slice(0, 1);
  p.A2 = slice(1, 1);
  p.decay_I1 = decay_factor(scale(slice(2, 1), 10.0), 1.0);
  p.decay_I2 = decay_factor(scale(slice(3, 1), 200.0), 1.0);
  p.tau_V = base.tau_V;
  p.R = base.R;
  p.V_rest = base.V_rest;
  p.V_th = base.V_th;
  GifTapeState s{slice(4, n), slice(4 + n, n), slice(4 + 2 * n, n)};
  auto st = gif_step(s, p, t.constant(drive), surrogate::SurrogateSpec{});
  return add(add(sum(square(st.state.V)), scale(sum(square(st.state.I1)), 1.3)),
             add(scale(sum(square(st.state.I2)), 0.7), sum(st.spikes)));
}

TEST(Gif, SingleStepGradCheck) {
  // Neuron 1 starts above threshold and fires.
  std::vector<double> x0{-0.1, -0.05, 1.0, 1.0, 0.2, -0.3, 0.1, -0.1, 0.05, 0.2, 0.3, 1.2, 0.9};
  std::vector<double> drive{0.4, 1.5, 0.9};
  auto f = [&](ad::Tape& t, ad::Var x) { return gif_one_step(t, x, drive); };
  auto r = ad::grad_check_detailed(f, x0, 1e-5, ad::SpikeMode::relaxed);
  EXPECT_LT(r.max_rel_error, 1e-6);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NE(r.analytic[i], 0.0) << i;
  EXPECT_EQ(r.analytic[5], 0.0);  // incoming I1 of the firing neuron is reset away
}

TEST(Gif, TwentyStepGradCheckThroughResets) {
  std::vector<double> x0{-0.1, -0.05, 1.0, 1.0};
  std::vector<double> drive{4.1, 2.7, 0.7};
  auto f = [&](ad::Tape& t, ad::Var x) { return gif_rollout(t, x, 20, drive); };
  auto r = ad::grad_check_detailed(f, x0, 1e-5, ad::SpikeMode::relaxed);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst_index << " " << r.analytic[r.worst_index]
                                   << " vs " << r.numeric[r.worst_index];
  EXPECT_NE(r.analytic[0], 0.0);
  EXPECT_NE(r.analytic[1], 0.0);
}

TEST(Hh, RestsWithinPhysiologicalRange) {
  HhParams p;
  std::vector<double> I(4000, 0.0);
  auto tr = simulate_hh(p, I, 0.025);
  EXPECT_GE(tr.V.back(), -80.0);
  EXPECT_LE(tr.V.back(), -50.0);
  EXPECT_LT(std::abs(tr.V.back() - tr.V[tr.V.size() - 400]), 1e-3);
  EXPECT_TRUE(tr.spike_times.empty());
}

TEST(Hh, TwiceRheobaseFires) {
  HhParams p;
  auto fires = [&](double amp) {
    std::vector<double> I(8000, amp);
    return !simulate_hh(p, I, 0.025).spike_times.empty();
  };
  double lo = 0.0, hi = 20.0;
  ASSERT_FALSE(fires(lo));
  ASSERT_TRUE(fires(hi));
  for (int i = 0; i < 30; ++i) {
    const double mid = 0.5 * (lo + hi);
    (fires(mid) ? hi : lo) = mid;
  }
  EXPECT_GT(hi, 1.0);
  EXPECT_LT(hi, 10.0);
  EXPECT_TRUE(fires(2.0 * hi));
}

TEST(Hh, GatesStayInUnitIntervalUnderNoise) {
  HhParams p;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd(5.0, 20.0);
  std::vector<double> I(40000);
  for (auto& v : I) v = nd(rng);
  HhState s = HhState::resting(1);
  for (double i : I) {
    s = hh_step(s, p, std::span<const double>(&i, 1), 0.025);
    for (double g : {s.m[0], s.h[0], s.n[0]}) {
      ASSERT_GE(g, 0.0);
      ASSERT_LE(g, 1.0);
    }
  }
}

TEST(Hh, InstabilityIsReported) {
  HhParams p;
  HhState s = HhState::resting(1);
  std::vector<double> I{1e6};
  EXPECT_THROW(hh_step(s, p, I, 0.025), NumericalError);
}

TEST(Hh, TapeMatchesPlain) {
  HhParams p;
  std::vector<double> I(400, 10.0);
  HhState s = HhState::resting(1);
  ad::Tape t;
  HhTapeParams tp{t.parameter(p.gNa), t.parameter(p.gK), t.parameter(p.gL)};
  HhTapeState ts{t.constant(s.V), t.constant(s.m), t.constant(s.h), t.constant(s.n)};
  for (double i : I) {
    s = hh_step(s, p, std::span<const double>(&i, 1), 0.025);
    ts = hh_step(ts, tp, t.constant(i), 0.025);
    ASSERT_EQ(ts.V.value()[0], s.V[0]);
    ASSERT_EQ(ts.n.value()[0], s.n[0]);
  }
}

TEST(Hh, GradCheckShortWindow) {
  std::vector<double> x0{120.0, 36.0, 0.3};
  auto f = [](ad::Tape& t, ad::Var x) {
    using namespace ad;
    auto pick = [&](std::size_t k) {
      std::vector<double> w(3, 0.0);
      w[k] = 1.0;
      return affine_dense(t.constant(w), x, t.constant(0.0), 3, 1);
    };
    HhTapeParams p{pick(0), pick(1), pick(2)};
    HhState s0 = HhState::resting(1);
    HhTapeState s{t.constant(s0.V), t.constant(s0.m), t.constant(s0.h), t.constant(s0.n)};
    Var loss = t.constant(0.0);
    for (int k = 0; k < 400; ++k) {
      s = hh_step(s, p, t.constant(10.0), 0.025);
      loss = add(loss, square(affine(s.V, 0.05, 3.0)));
    }
    return loss;
  };
  EXPECT_LT(ad::grad_check(f, x0, 1e-5), 1e-6);
}

TEST(Synapse, DecayAndIncrement) {
  auto w = sparse::CsrMatrix<double>(2, 2, {0.5, 0.25}, {0, 1}, {0, 1, 2});
  std::vector<double> g{1.0, 1.0};
  auto g1 = expsyn_step(g, sparse::EventVector{false, false}, w, 10.0, 1.0);
  EXPECT_NEAR(g1[0], 0.9048374180359595, 1e-15);
  auto g2 = expsyn_step(std::vector<double>{0, 0}, sparse::EventVector{true, false}, w, 10.0, 1.0);
  EXPECT_EQ(g2, (std::vector<double>{0.5, 0.0}));
  auto ga = expsyn_step(std::vector<double>{0, 0}, sparse::EventVector{true, false}, w, 10.0, 1.0);
  auto gb = expsyn_step(std::vector<double>{0, 0}, sparse::EventVector{false, true}, w, 10.0, 1.0);
  auto gab = expsyn_step(std::vector<double>{0, 0}, sparse::EventVector{true, true}, w, 10.0, 1.0);
  EXPECT_EQ(gab[0], ga[0] + gb[0]);
  EXPECT_EQ(gab[1], ga[1] + gb[1]);
  EXPECT_THROW(expsyn_step(std::vector<double>{0}, sparse::EventVector{true, true}, w, 10.0, 1.0),
               ShapeError);
}

TEST(Synapse, ConductanceCurrentValues) {
  SynapseParams p;
  std::vector<double> one{1.0}, zero{0.0}, v{-60.0};
  EXPECT_EQ(conductance_current(one, zero, v, p)[0], 60.0);
  EXPECT_EQ(conductance_current(zero, zero, v, p)[0], 0.0);
  std::vector<double> at_exc{0.0};
  EXPECT_EQ(conductance_current(one, zero, at_exc, p)[0], 0.0);
}

TEST(Synapse, ExpsynConductanceCompositeGradCheck) {
  // x = [W values (3), V (2)]; g rolled over a few events, then the current.
  auto pat = sparse::CsrMatrix<double>(2, 2, {0.5, 0.2, 0.3}, {0, 1, 1}, {0, 2, 3}).pattern();
  std::vector<double> x0{0.5, 0.2, 0.3, -0.4, 0.7};
  auto f = [&](ad::Tape& t, ad::Var x) {
    using namespace ad;
    std::vector<double> pw(15, 0.0), pv(10, 0.0);
    for (int k = 0; k < 3; ++k) pw[k * 3 + k] = 1.0;
    pv[3 * 2 + 0] = 1.0;
    pv[4 * 2 + 1] = 1.0;
    Var w = affine_dense(t.constant(pw), x, t.constant(3, 0.0), 5, 3);
    Var v = affine_dense(t.constant(pv), x, t.constant(2, 0.0), 5, 2);
    SynapseParams sp = rescale(SynapseParams{}, ScalingConfig{});
    const double decay = std::exp(-1.0 / sp.tau_syn);
    Var ge = t.constant(2, 0.0), gi = t.constant(2, 0.0);
    Var loss = t.constant(0.0);
    const std::vector<std::vector<double>> ev{{1, 0}, {1, 1}, {0, 1}, {0, 0}};
    for (const auto& e : ev) {
      ge = add(scale(ge, decay), event_matvec(w, pat, t.constant(e)));
      gi = add(scale(gi, decay), event_matvec(scale(w, 0.5), pat, t.constant(e)));
      loss = add(loss, sum(square(conductance_current(ge, gi, v, sp))));
    }
    return loss;
  };
  EXPECT_LT(ad::grad_check(f, x0, 1e-5), 1e-6);
}
