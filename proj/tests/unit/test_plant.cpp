#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "pscsim/magnet_plant.hpp"
#include "pscsim/ps_class.hpp"
#include "pscsim/sim_core.hpp"

using namespace pscsim::plant;

namespace {

PlantParams corrector() { return pscsim::default_classes().at("corrector").params; }

}  // namespace

TEST(Plant, ParamsValidate) {
  PlantParams p = corrector();
  EXPECT_NO_THROW(p.validate());
  p.resistance = 0.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = corrector();
  p.quadrants = 3;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(Plant, StepMatchesFineEulerOracle) {
  const PlantParams p = corrector();
  const auto next = plant_step(p, PlantState{}, 1.0, 20e-6);
  // 1 ns Euler oracle: 2 * (1 - e^-0.001) = 0.0019990003...
  const double expected = oracle::rl_euler(0.5, 0.01, 0.0, 1.0, 20e-6);
  EXPECT_NEAR(next.current, expected, 1e-9);
  EXPECT_NEAR(next.current, 0.0019990003, 1e-9);
  EXPECT_EQ(next.applied_voltage, 1.0);
}

TEST(Plant, EquilibriumIsFixedPoint) {
  const PlantParams p = corrector();
  const PlantState s{1.7, 0.0};
  EXPECT_NEAR(plant_step(p, s, p.resistance * 1.7, 20e-6).current, 1.7, 1e-15);
}

TEST(Plant, DecaysToZeroWithoutVoltage) {
  const PlantParams p = corrector();
  EXPECT_NEAR(plant_step(p, PlantState{1.0, 0.0}, 0.0, 10.0).current, 0.0, 1e-12);
}

TEST(Plant, SemigroupProperty) {
  const PlantParams p = pscsim::default_classes().at("quadrupole").params;
  const PlantState s0{12.5, 0.0};
  for (double v : {0.0, 3.0, 40.0, 80.0}) {
    const auto whole = plant_step(p, s0, v, 40e-6);
    const auto half = plant_step(p, plant_step(p, s0, v, 20e-6), v, 20e-6);
    EXPECT_NEAR(whole.current, half.current, 1e-12 * std::max(1.0, std::abs(whole.current)));
  }
}

TEST(Plant, RejectsNonFiniteInput) {
  const PlantParams p = corrector();
  EXPECT_THROW(plant_step(p, PlantState{}, std::nan(""), 20e-6), std::invalid_argument);
  EXPECT_THROW(plant_step(p, PlantState{}, 1.0, 0.0), std::invalid_argument);
}

TEST(Plant, MagnetMatchesFreeFunction) {
  const PlantParams p = corrector();
  Magnet m(p, 20e-6);
  PlantState s;
  for (int k = 0; k < 100; ++k) {
    m.step(2.0);
    s = plant_step(p, s, 2.0, 20e-6);
  }
  EXPECT_NEAR(m.state().current, s.current, 1e-12);
}

TEST(Adc, LsbIsFullScaleOver2To17) {
  AdcModel adc{3.0, 0.0};
  EXPECT_EQ(adc.lsb(), 3.0 / 131072.0);
  EXPECT_NEAR(adc.lsb(), 2.2888e-5, 1e-9);
}

TEST(Adc, RoundsHalfAwayFromZero) {
  AdcModel adc{3.0, 0.0};
  const double lsb = adc.lsb();
  EXPECT_EQ(measure_current(PlantState{0.0, 0.0}, adc, nullptr), 0.0);
  EXPECT_EQ(measure_current(PlantState{1.5 * lsb, 0.0}, adc, nullptr), 2.0 * lsb);
  EXPECT_EQ(measure_current(PlantState{-1.5 * lsb, 0.0}, adc, nullptr), -2.0 * lsb);
  EXPECT_EQ(measure_current(PlantState{1.49 * lsb, 0.0}, adc, nullptr), lsb);
}

TEST(Adc, SaturatesAtFullScale) {
  AdcModel adc{3.0, 0.0};
  EXPECT_EQ(measure_current(PlantState{5.0, 0.0}, adc, nullptr), 3.0);
  EXPECT_EQ(measure_current(PlantState{-5.0, 0.0}, adc, nullptr), -3.0);
}

TEST(Adc, NoisyErrorWithinThreeSigma) {
  AdcModel adc{3.0, 1e-4};
  pscsim::sim::Rng rng(5);
  const double bound = adc.lsb() / 2 + 3 * adc.noise_sigma;
  int inside = 0;
  const int n = 100'000;
  for (int k = 0; k < n; ++k) {
    const double i = rng.uniform(-2.0, 2.0);
    if (std::abs(measure_current(PlantState{i, 0.0}, adc, &rng) - i) <= bound) ++inside;
  }
  EXPECT_GE(static_cast<double>(inside) / n, 0.997);
}

TEST(Quadrants, ClampRules) {
  auto p = pscsim::default_classes().at("quadrupole").params;
  EXPECT_EQ(clamp_voltage(p, -5.0, 10.0), 0.0);
  EXPECT_EQ(clamp_voltage(p, 500.0, 10.0), p.v_max);
  auto b = pscsim::default_classes().at("booster_bend").params;
  EXPECT_EQ(clamp_voltage(b, -50.0, 100.0), -50.0);
  EXPECT_EQ(clamp_voltage(b, -50.0, 0.0), 0.0);
  EXPECT_EQ(clamp_voltage(corrector(), -25.0, -1.0), -20.0);
}
