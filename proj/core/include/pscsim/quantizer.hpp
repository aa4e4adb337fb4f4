#pragma once

namespace pscsim::psc {

struct QuantizerState {
  double error = 0.0;  // accumulated rounding error, same units as the input
};

struct QuantizeResult {
  double value;
  QuantizerState state;
};

/// Error-feedback quantization: the rounding residue of each step is carried
/// into the next, so the running sum of outputs tracks the running sum of
/// inputs to within lsb/2.
QuantizeResult quantize_ef(double u, QuantizerState state, double lsb);

class ErrorFeedbackQuantizer {
 public:
  explicit ErrorFeedbackQuantizer(double lsb);

  double quantize(double u) {
    auto r = quantize_ef(u, state_, lsb_);
    state_ = r.state;
    return r.value;
  }
  void reset() { state_ = {}; }
  double lsb() const { return lsb_; }
  double error() const { return state_.error; }

 private:
  double lsb_;
  QuantizerState state_;
};

}  // namespace pscsim::psc
