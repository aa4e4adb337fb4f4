#include "pscsim/waveform.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace pscsim::psc {

std::string_view to_string(WaveformErrorCode code) {
  switch (code) {
    case WaveformErrorCode::kTooShort: return "too_short";
    case WaveformErrorCode::kTooLong: return "too_long";
    case WaveformErrorCode::kNonFinite: return "non_finite";
    case WaveformErrorCode::kOutOfRange: return "out_of_range";
    case WaveformErrorCode::kSchema: return "schema";
  }
  return "unknown";
}

void validate_waveform(const Waveform& wf, double lo, double hi) {
  if (wf.points.size() < kMinWaveformPoints)
    throw WaveformError(WaveformErrorCode::kTooShort,
                        "waveform needs at least 2 points, got " + std::to_string(wf.points.size()));
  if (wf.points.size() > kMaxWaveformPoints)
    throw WaveformError(WaveformErrorCode::kTooLong,
                        "waveform exceeds 32768 points: " + std::to_string(wf.points.size()));
  if (!std::isfinite(wf.offset) || !std::isfinite(wf.scale))
    throw WaveformError(WaveformErrorCode::kNonFinite, "waveform offset/scale not finite");
  for (std::size_t i = 0; i < wf.points.size(); ++i) {
    const double p = wf.points[i];
    if (!std::isfinite(p))
      throw WaveformError(WaveformErrorCode::kNonFinite,
                          "waveform point " + std::to_string(i) + " is not finite");
    const double e = wf.effective(p);
    if (e < lo || e > hi) {
      std::ostringstream msg;
      msg << "waveform point " << i << " maps to " << e << " A, outside [" << lo << ", " << hi
          << "]";
      throw WaveformError(WaveformErrorCode::kOutOfRange, msg.str());
    }
  }
}

Waveform parse_waveform(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw WaveformError(WaveformErrorCode::kSchema, std::string("waveform JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("points") || !j["points"].is_array())
    throw WaveformError(WaveformErrorCode::kSchema, "waveform needs a 'points' array");
  Waveform wf;
  try {
    wf.name = j.value("name", std::string{});
    for (const auto& p : j["points"]) {
      if (p.is_null()) {
        wf.points.push_back(std::nan(""));
      } else {
        wf.points.push_back(p.get<double>());
      }
    }
    wf.offset = j.value("offset", 0.0);
    wf.scale = j.value("scale", 1.0);
    const std::string mode = j.value("loop_mode", std::string{"once"});
    if (mode == "once") {
      wf.loop_mode = LoopMode::kOnce;
    } else if (mode == "loop") {
      wf.loop_mode = LoopMode::kLoop;
    } else {
      throw WaveformError(WaveformErrorCode::kSchema, "loop_mode must be 'once' or 'loop'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw WaveformError(WaveformErrorCode::kSchema, std::string("waveform JSON: ") + e.what());
  }
  return wf;
}

Waveform load_waveform_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw WaveformError(WaveformErrorCode::kSchema, "cannot open waveform file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_waveform(ss.str());
}

std::string waveform_to_json(const Waveform& wf) {
  nlohmann::json j;
  j["name"] = wf.name;
  j["points"] = wf.points;
  j["offset"] = wf.offset;
  j["scale"] = wf.scale;
  j["loop_mode"] = wf.loop_mode == LoopMode::kLoop ? "loop" : "once";
  return j.dump();
}

}  // namespace pscsim::psc
