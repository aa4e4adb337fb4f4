#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pscsim/sim_core.hpp"

namespace pscsim::chan {

using Value = std::variant<double, std::int64_t, bool, std::string>;

enum class Severity { kNone = 0, kMinor = 1, kMajor = 2 };
std::string_view to_string(Severity s);

std::string value_to_string(const Value& v);
/// Numeric view of a value; bools and strings do not convert.
std::optional<double> as_number(const Value& v);
std::optional<bool> as_bool(const Value& v);

struct Update {
  std::string name;
  Value value;
  Severity alarm = Severity::kNone;
  sim::TimeNs t_ns = 0;
};

using Monitor = std::function<void(const Update&)>;
using SubscriptionId = std::uint64_t;

struct PutResult {
  bool ok = true;
  std::string error;

  static PutResult success() { return {}; }
  static PutResult failure(std::string e) { return {false, std::move(e)}; }
};

using Reply = std::function<void(const PutResult&)>;

struct GetResult {
  bool ok = false;
  Value value;
  Severity alarm = Severity::kNone;
  std::string error;
};

/// The per-PS channel suffixes, in declaration order.
const std::vector<std::string>& ps_channel_suffixes();

// ---------------------------------------------------------------------------
// compare flag

enum class CompareFlag { kOk, kAlarm, kSuppressed, kOff };
std::string_view to_string(CompareFlag f);

CompareFlag evaluate_compare(double i_set, double i_read, double threshold, bool on,
                             bool suppressed);

// ---------------------------------------------------------------------------
// hysteresis branch tracking

enum class Direction { kNone, kUp, kDown };

struct HysteresisState {
  bool tracked = true;
  bool on_branch = false;
  Direction last_dir = Direction::kNone;
};

/// Branch convention "approach from above": a completed standardization puts
/// the magnet on branch; any later increase of the set current leaves it.
class HysteresisTracker {
 public:
  explicit HysteresisTracker(bool tracked) : tracked_(tracked) {}

  void standardized(double final_set);
  void set_changed(double new_set);
  HysteresisState state() const;

 private:
  bool tracked_;
  bool on_branch_ = false;
  Direction last_dir_ = Direction::kNone;
  std::optional<double> prev_;
};

// ---------------------------------------------------------------------------
// set-point programs, one value per ramp step

/// Cycle program: start -> I_max, then `cycles` times I_max -> I_min -> I_max,
/// then back down to start. No step moves more than rate * step_s.
std::vector<double> standardize_program(double start, double i_min, double i_max, double rate,
                                        int cycles, double step_s);

/// Linear ramp: value k is start + (target - start) * (k + 1) / n.
std::vector<double> linear_ramp(double start, double target, std::size_t n);

}  // namespace pscsim::chan
