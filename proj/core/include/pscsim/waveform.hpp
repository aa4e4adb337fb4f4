#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pscsim::psc {

enum class LoopMode { kOnce, kLoop };

inline constexpr std::size_t kMinWaveformPoints = 2;
inline constexpr std::size_t kMaxWaveformPoints = 32768;
/// One set-point every 80 us; the controller interpolates three values between.
inline constexpr int kTicksPerPoint = 4;

struct Waveform {
  std::string name;
  std::vector<double> points;  // A
  double offset = 0.0;         // A
  double scale = 1.0;
  LoopMode loop_mode = LoopMode::kOnce;

  double effective(double point) const { return scale * point + offset; }
};

enum class WaveformErrorCode { kTooShort, kTooLong, kNonFinite, kOutOfRange, kSchema };

class WaveformError : public std::runtime_error {
 public:
  WaveformError(WaveformErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  WaveformErrorCode code() const { return code_; }

 private:
  WaveformErrorCode code_;
};

std::string_view to_string(WaveformErrorCode code);

/// Checks length, finiteness and that scale*p+offset stays inside [lo, hi].
void validate_waveform(const Waveform& wf, double lo, double hi);

/// JSON object {name, points, offset, scale, loop_mode}.
Waveform parse_waveform(std::string_view json_text);
Waveform load_waveform_file(const std::string& path);
std::string waveform_to_json(const Waveform& wf);

}  // namespace pscsim::psc
