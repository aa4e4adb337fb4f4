#include "pscsim/channel.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace pscsim::chan {

std::string_view to_string(Severity s) {
  switch (s) {
    case Severity::kNone: return "none";
    case Severity::kMinor: return "minor";
    case Severity::kMajor: return "major";
  }
  return "none";
}

std::string value_to_string(const Value& v) {
  struct Visitor {
    std::string operator()(double d) const {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", d);
      return buf;
    }
    std::string operator()(std::int64_t i) const { return std::to_string(i); }
    std::string operator()(bool b) const { return b ? "true" : "false"; }
    std::string operator()(const std::string& s) const { return s; }
  };
  return std::visit(Visitor{}, v);
}

std::optional<double> as_number(const Value& v) {
  if (const auto* d = std::get_if<double>(&v)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  return std::nullopt;
}

std::optional<bool> as_bool(const Value& v) {
  if (const auto* b = std::get_if<bool>(&v)) return *b;
  if (const auto* i = std::get_if<std::int64_t>(&v)) {
    if (*i == 0 || *i == 1) return *i == 1;
  }
  if (const auto* d = std::get_if<double>(&v)) {
    if (*d == 0.0 || *d == 1.0) return *d == 1.0;
  }
  return std::nullopt;
}

const std::vector<std::string>& ps_channel_suffixes() {
  static const std::vector<std::string> names = {
      "I-SET",  "I-READ", "MODE",       "STATUS",    "COMPARE",  "HYST-STATE",
      "CYCLE-CMD", "R-LOAD", "V-OUT",  "LINK-TX-OK", "LINK-RX-OK", "LOCAL",
      "WF-OFFSET", "WF-SCALE", "WF-LOAD", "TRIG-ARM", "ALARM",     "RAMP-STATE"};
  return names;
}

std::string_view to_string(CompareFlag f) {
  switch (f) {
    case CompareFlag::kOk: return "ok";
    case CompareFlag::kAlarm: return "alarm";
    case CompareFlag::kSuppressed: return "suppressed";
    case CompareFlag::kOff: return "off";
  }
  return "off";
}

CompareFlag evaluate_compare(double i_set, double i_read, double threshold, bool on,
                             bool suppressed) {
  if (!on) return CompareFlag::kOff;
  if (suppressed) return CompareFlag::kSuppressed;
  return std::abs(i_set - i_read) <= threshold ? CompareFlag::kOk : CompareFlag::kAlarm;
}

void HysteresisTracker::standardized(double final_set) {
  on_branch_ = true;
  last_dir_ = Direction::kDown;
  prev_ = final_set;
}

void HysteresisTracker::set_changed(double new_set) {
  if (prev_) {
    if (new_set > *prev_) {
      on_branch_ = false;
      last_dir_ = Direction::kUp;
    } else if (new_set < *prev_) {
      last_dir_ = Direction::kDown;
    }
  }
  prev_ = new_set;
}

HysteresisState HysteresisTracker::state() const {
  if (!tracked_) return {false, true, last_dir_};
  return {true, on_branch_, last_dir_};
}

namespace {

void append_leg(std::vector<double>& out, double from, double to, double max_step) {
  const double dist = std::abs(to - from);
  if (dist == 0.0) return;
  const auto n = static_cast<std::size_t>(std::ceil(dist / max_step - 1e-9));
  for (std::size_t i = 1; i <= n; ++i)
    out.push_back(i == n ? to : from + (to - from) * static_cast<double>(i) / static_cast<double>(n));
}

}  // namespace

std::vector<double> standardize_program(double start, double i_min, double i_max, double rate,
                                        int cycles, double step_s) {
  if (!(rate > 0.0) || !(step_s > 0.0) || cycles < 1 || !(i_max > i_min))
    throw std::invalid_argument("standardize_program: bad parameters");
  const double max_step = rate * step_s;
  std::vector<double> out;
  append_leg(out, start, i_max, max_step);
  for (int c = 0; c < cycles; ++c) {
    append_leg(out, i_max, i_min, max_step);
    append_leg(out, i_min, i_max, max_step);
  }
  append_leg(out, i_max, start, max_step);
  if (out.empty()) out.push_back(start);
  return out;
}

std::vector<double> linear_ramp(double start, double target, std::size_t n) {
  if (n == 0) throw std::invalid_argument("linear_ramp: n must be > 0");
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k)
    out[k] = k + 1 == n ? target
                        : start + (target - start) * static_cast<double>(k + 1) / static_cast<double>(n);
  return out;
}

}  // namespace pscsim::chan
