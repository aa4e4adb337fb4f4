#include "pscsim/ps_class.hpp"

#include <cmath>
#include <stdexcept>

namespace pscsim {

void PsClass::validate() const {
  params.validate();
  if (!(f_c > 0.0) || !std::isfinite(f_c)) throw std::invalid_argument(name + ": f_c must be > 0");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument(name + ": noise_sigma must be >= 0");
  if (!(ramp_rate > 0.0)) throw std::invalid_argument(name + ": ramp_rate must be > 0");
  if (!(compare_tol_ppm > 0.0)) throw std::invalid_argument(name + ": compare_tol_ppm must be > 0");
  if (cycles < 1) throw std::invalid_argument(name + ": cycles must be >= 1");
}

std::map<std::string, PsClass> default_classes() {
  std::map<std::string, PsClass> out;

  PsClass corr;
  corr.name = "corrector";
  corr.params = {0.5, 0.010, 3.0, 20.0, 4, "corrector"};
  corr.f_c = 1000.0;
  corr.ramp_rate = 3.0;
  corr.hysteresis_tracked = false;
  out.emplace(corr.name, corr);

  PsClass quad;
  quad.name = "quadrupole";
  quad.params = {0.25, 0.060, 120.0, 80.0, 1, "quadrupole"};
  quad.f_c = 100.0;
  quad.ramp_rate = 10.0;
  out.emplace(quad.name, quad);

  PsClass bend;
  bend.name = "booster_bend";
  bend.params = {0.08, 0.120, 950.0, 1000.0, 2, "booster_bend"};
  bend.f_c = 100.0;
  bend.ramp_rate = 100.0;
  out.emplace(bend.name, bend);

  return out;
}

}  // namespace pscsim
