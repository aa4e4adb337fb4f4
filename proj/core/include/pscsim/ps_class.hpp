#pragma once

#include <map>
#include <string>

#include "pscsim/magnet_plant.hpp"

namespace pscsim {

/// Per-class configuration shared by the plant, the controller tuning and the
/// channel layer.
struct PsClass {
  std::string name;
  plant::PlantParams params;
  double f_c = 1000.0;            // Hz, closed-loop bandwidth
  double noise_sigma = 0.0;       // A, DCCT noise
  double ramp_rate = 10.0;        // A/s, used by the standardization cycle
  bool hysteresis_tracked = true;
  double compare_tol_ppm = 100.0;
  int cycles = 3;                 // full excursions per standardization

  void validate() const;
  double lsb() const { return params.i_max / plant::kAdcCodes; }
  double compare_threshold() const { return compare_tol_ppm * 1e-6 * params.i_max; }
};

/// corrector, quadrupole and booster_bend.
std::map<std::string, PsClass> default_classes();

}  // namespace pscsim
