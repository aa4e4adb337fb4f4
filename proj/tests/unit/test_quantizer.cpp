#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "pscsim/quantizer.hpp"

using namespace pscsim::psc;

TEST(Quantizer, IntegerScaledTraceOfConstantInput) {
  // u = 0.3 lsb, scaled by 10 so every intermediate value is exact
  QuantizerState st;
  std::vector<double> out;
  for (int k = 0; k < 10; ++k) {
    auto r = quantize_ef(3.0, st, 10.0);
    st = r.state;
    out.push_back(r.value / 10.0);
  }
  EXPECT_EQ(out, (std::vector<double>{0, 1, 0, 0, 1, 0, 0, 0, 1, 0}));
}

TEST(Quantizer, ConstantPointThreeAveragesToPointThree) {
  QuantizerState st;
  double sum = 0.0;
  for (int k = 0; k < 10; ++k) {
    auto r = quantize_ef(0.3, st, 1.0);
    st = r.state;
    EXPECT_TRUE(r.value == 0.0 || r.value == 1.0);
    sum += r.value;
  }
  EXPECT_NEAR(sum / 10.0, 0.3, 1e-12);
}

TEST(Quantizer, MultiplesPassThrough) {
  QuantizerState st;
  for (double u : {0.0, 4.0, -7.0, 12.0}) {
    auto r = quantize_ef(u * 0.25, st, 0.25);
    EXPECT_EQ(r.value, u * 0.25);
    EXPECT_EQ(r.state.error, 0.0);
    st = r.state;
  }
}

TEST(Quantizer, RunningSumBoundedAndMatchesOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dist(-50.0, 50.0);
  const double lsb = 20.0 / 32768.0;
  std::vector<double> u(20'000);
  for (auto& x : u) x = dist(rng) * lsb;

  const auto expected = oracle::error_feedback(u, lsb);
  ErrorFeedbackQuantizer q(lsb);
  double drift = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    const double v = q.quantize(u[k]);
    ASSERT_EQ(v, expected[k]) << "step " << k;
    EXPECT_NEAR(std::remainder(v, lsb), 0.0, 1e-12);
    EXPECT_LE(std::abs(q.error()), lsb / 2 + 1e-15);
    drift += v - u[k];
    EXPECT_LE(std::abs(drift), lsb / 2 + 1e-12);
  }
}

TEST(Quantizer, RejectsNonPositiveLsb) {
  EXPECT_THROW(ErrorFeedbackQuantizer(0.0), std::invalid_argument);
  EXPECT_THROW(ErrorFeedbackQuantizer(-1.0), std::invalid_argument);
}
