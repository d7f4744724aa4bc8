#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "spikediff/surrogate.hpp"

using namespace spikediff;
using namespace spikediff::surrogate;

TEST(Surrogate, ForwardIsHeavisideRightLimit) {
  std::vector<double> x{-1.0, 0.0, 2.0};
  EXPECT_EQ(spike_forward(x), (std::vector<double>{0, 1, 1}));
  std::vector<double> neg{-3.0, -1e-300, -0.5};
  EXPECT_EQ(spike_forward(neg), (std::vector<double>{0, 0, 0}));
}

TEST(Surrogate, ReluGradListedValues) {
  SurrogateSpec s;
  EXPECT_DOUBLE_EQ(grad(0.0, s), 0.3);
  EXPECT_EQ(grad(1.0, s), 0.0);
  EXPECT_EQ(grad(-1.5, s), 0.0);
  EXPECT_DOUBLE_EQ(grad(0.5, s), 0.15);
}

TEST(Surrogate, SigmoidAtZero) {
  EXPECT_DOUBLE_EQ(grad(0.0, {Kind::sigmoid, 1.0, 1.0}), 0.25);
}

TEST(Surrogate, ArctanAtZero) {
  EXPECT_DOUBLE_EQ(grad(0.0, {Kind::arctan, 2.0, 1.0}), 1.0);
}

TEST(Surrogate, EvenNonnegativeMaximalAtZero) {
  for (Kind k : kAllKinds) {
    for (double alpha : {0.3, 1.0, 4.0}) {
      SurrogateSpec s{k, alpha, 1.0};
      const double g0 = grad(0.0, s);
      EXPECT_GT(g0, 0.0) << kind_name(k);
      for (int i = 1; i <= 400; ++i) {
        const double x = 0.0137 * i;
        const double gp = grad(x, s), gm = grad(-x, s);
        EXPECT_GE(gp, 0.0) << kind_name(k) << " x=" << x;
        EXPECT_EQ(gp, gm) << kind_name(k) << " x=" << x;
        EXPECT_LE(gp, g0) << kind_name(k) << " x=" << x;
      }
    }
  }
}

TEST(Surrogate, ReluGradIntegral) {
  // Midpoint quadrature of max(0, a (w - |x|)) over [-w, w]; closed form a w^2.
  for (double w : {0.5, 1.0, 2.0}) {
    SurrogateSpec s{Kind::relu_grad, 0.3, w};
    const int n = 200000;
    const double h = 2.0 * w / n;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += grad(-w + (i + 0.5) * h, s) * h;
    EXPECT_NEAR(acc, 0.3 * w * w, 1e-6);
  }
}

TEST(Surrogate, SmoothStepDerivativeIsSurrogate) {
  for (Kind k : kAllKinds) {
    SurrogateSpec s{k, 1.3, 0.8};
    for (double x : {-2.1, -0.7, -0.11, 0.23, 0.6, 1.9}) {
      const double h = 1e-6;
      const double fd = (smooth_step(x + h, s) - smooth_step(x - h, s)) / (2 * h);
      EXPECT_NEAR(fd, grad(x, s), 1e-7) << kind_name(k) << " x=" << x;
    }
  }
}

TEST(Surrogate, MultiGaussianMatchesMixtureNearZero) {
  // Three-Gaussian mixture, h=0.15, s=6, sigma=0.5, evaluated directly.
  auto pdf = [](double x, double mu, double sd) {
    return std::exp(-0.5 * (x - mu) * (x - mu) / (sd * sd)) / (sd * std::sqrt(2 * std::numbers::pi));
  };
  const double x = 0.3;
  const double ref = 1.15 * pdf(x, 0, 0.5) - 0.15 * pdf(x, 0.5, 3.0) - 0.15 * pdf(x, -0.5, 3.0);
  EXPECT_NEAR(grad(x, {Kind::multi_gaussian, 1.0, 1.0}), ref, 1e-15);
  EXPECT_EQ(grad(3.0, {Kind::multi_gaussian, 1.0, 1.0}), 0.0);
}

TEST(Surrogate, SlayerAndGaussianValues) {
  EXPECT_DOUBLE_EQ(grad(0.0, {Kind::slayer, 2.0, 1.0}), 1.0);
  EXPECT_DOUBLE_EQ(grad(1.0, {Kind::slayer, 2.0, 1.0}), std::exp(-2.0));
  EXPECT_DOUBLE_EQ(grad(0.0, {Kind::gaussian, 1.0, 1.0}), 1.0 / std::sqrt(2 * std::numbers::pi));
  EXPECT_DOUBLE_EQ(grad(0.0, {Kind::piecewise_quadratic, 0.7, 2.0}), 0.7);
}

TEST(Surrogate, NamesRoundTripAndValidation) {
  for (Kind k : kAllKinds) EXPECT_EQ(kind_from_name(kind_name(k)), k);
  EXPECT_THROW(kind_from_name("boxcar"), ConfigError);
  EXPECT_THROW(validate({Kind::relu_grad, 0.0, 1.0}), ConfigError);
  EXPECT_THROW(validate({Kind::relu_grad, 0.3, -1.0}), ConfigError);
  EXPECT_NO_THROW(validate({Kind::sigmoid, 1.0, -1.0}));
}
