#include "pscsim/magnet_plant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pscsim/sim_core.hpp"

namespace pscsim::plant {

void PlantParams::validate() const {
  if (!(resistance > 0.0) || !std::isfinite(resistance))
    throw std::invalid_argument("plant resistance must be positive");
  if (!(inductance > 0.0) || !std::isfinite(inductance))
    throw std::invalid_argument("plant inductance must be positive");
  if (!(i_max > 0.0) || !std::isfinite(i_max))
    throw std::invalid_argument("plant I_max must be positive");
  if (!(v_max > 0.0) || !std::isfinite(v_max))
    throw std::invalid_argument("plant V_max must be positive");
  if (quadrants != 1 && quadrants != 2 && quadrants != 4)
    throw std::invalid_argument("plant quadrants must be 1, 2 or 4");
}

double round_half_away(double x) { return std::round(x); }

double clamp_voltage(const PlantParams& params, double volts, double current) {
  double v = std::clamp(volts, -params.v_max, params.v_max);
  if (params.quadrants == 1) v = std::max(v, 0.0);
  // A 2-quadrant converter can reverse voltage but cannot push negative current.
  if (params.quadrants == 2 && current <= 0.0) v = std::max(v, 0.0);
  return v;
}

namespace {

PlantState step_with(const PlantParams& params, const PlantState& state, double volts,
                     double decay, double gain) {
  PlantState next;
  next.applied_voltage = volts;
  next.current = state.current * decay + volts * gain;
  if (params.quadrants != 4 && next.current < 0.0) next.current = 0.0;
  return next;
}

}  // namespace

PlantState plant_step(const PlantParams& params, const PlantState& state, double volts,
                      double dt) {
  if (!std::isfinite(volts) || !std::isfinite(dt) || !std::isfinite(state.current))
    throw std::invalid_argument("plant_step: non-finite input");
  if (!(dt > 0.0)) throw std::invalid_argument("plant_step: dt must be positive");
  const double x = -params.resistance * dt / params.inductance;
  const double decay = std::exp(x);
  const double gain = -std::expm1(x) / params.resistance;
  return step_with(params, state, volts, decay, gain);
}

double measure_current(const PlantState& state, const AdcModel& adc, sim::Rng* rng) {
  double i = state.current;
  if (adc.noise_sigma > 0.0 && rng != nullptr) i += rng->normal(adc.noise_sigma);
  const double lsb = adc.lsb();
  const double code = std::clamp(round_half_away(i / lsb), -kAdcCodes, kAdcCodes);
  return code * lsb;
}

PlantParams inject_fault(const PlantParams& params, const ResistanceChange& fault) {
  if (!(fault.new_resistance > 0.0) || !std::isfinite(fault.new_resistance))
    throw std::invalid_argument("resistance_change: new resistance must be positive");
  PlantParams out = params;
  out.resistance = fault.new_resistance;
  return out;
}

Magnet::Magnet(PlantParams params, double dt) : params_(std::move(params)), dt_(dt) {
  params_.validate();
  if (!(dt > 0.0)) throw std::invalid_argument("magnet step interval must be positive");
  refresh();
}

void Magnet::refresh() {
  const double x = -params_.resistance * dt_ / params_.inductance;
  decay_ = std::exp(x);
  gain_ = -std::expm1(x) / params_.resistance;
}

void Magnet::step(double volts) { state_ = step_with(params_, state_, volts, decay_, gain_); }

void Magnet::apply(const ResistanceChange& fault) {
  params_ = inject_fault(params_, fault);
  refresh();
}

}  // namespace pscsim::plant
