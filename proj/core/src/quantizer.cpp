#include "pscsim/quantizer.hpp"

#include <cmath>
#include <stdexcept>

#include "pscsim/magnet_plant.hpp"

namespace pscsim::psc {

QuantizeResult quantize_ef(double u, QuantizerState state, double lsb) {
  const double target = u + state.error;
  const double q = plant::round_half_away(target / lsb) * lsb;
  return {q, QuantizerState{target - q}};
}

ErrorFeedbackQuantizer::ErrorFeedbackQuantizer(double lsb) : lsb_(lsb) {
  if (!(lsb > 0.0) || !std::isfinite(lsb))
    throw std::invalid_argument("quantizer lsb must be positive");
}

}  // namespace pscsim::psc
