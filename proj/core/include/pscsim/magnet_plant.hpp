#pragma once

#include <string>

namespace pscsim::sim {
class Rng;
}

namespace pscsim::plant {

/// Number of ADC codes on each side of zero: 17 bits plus sign.
inline constexpr double kAdcCodes = 131072.0;

struct PlantParams {
  double resistance = 0.5;   // ohm
  double inductance = 0.01;  // henry
  double i_max = 3.0;        // A, full scale
  double v_max = 20.0;       // V, ceiling
  int quadrants = 4;         // 1, 2 or 4
  std::string class_name;

  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;
  /// Lowest current the converter can drive (0 for 1- and 2-quadrant).
  double i_min() const { return quadrants == 4 ? -i_max : 0.0; }
};

struct PlantState {
  double current = 0.0;
  double applied_voltage = 0.0;
};

struct AdcModel {
  double i_max = 3.0;
  double noise_sigma = 0.0;

  double lsb() const { return i_max / kAdcCodes; }
};

/// Round half away from zero.
double round_half_away(double x);

/// Clamps a voltage command to +-V_max and to the converter's quadrants.
double clamp_voltage(const PlantParams& params, double volts, double current);

/// Exact step of L dI/dt = V - R I for constant V over dt seconds.
PlantState plant_step(const PlantParams& params, const PlantState& state, double volts, double dt);

/// Quantized DCCT reading: noise is drawn from rng only when sigma > 0.
double measure_current(const PlantState& state, const AdcModel& adc, sim::Rng* rng);

struct ResistanceChange {
  double new_resistance;
};

PlantParams inject_fault(const PlantParams& params, const ResistanceChange& fault);

/// A magnet load stepped at a fixed interval; caches the decay factor.
class Magnet {
 public:
  Magnet(PlantParams params, double dt);

  const PlantParams& params() const { return params_; }
  const PlantState& state() const { return state_; }
  void set_state(const PlantState& s) { state_ = s; }

  void step(double volts);
  void apply(const ResistanceChange& fault);

 private:
  void refresh();

  PlantParams params_;
  PlantState state_;
  double dt_;
  double decay_ = 1.0;
  double gain_ = 0.0;  // (1 - decay) / R
};

}  // namespace pscsim::plant
