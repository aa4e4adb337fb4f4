#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pscsim/link.hpp"
#include "pscsim/linalg.hpp"
#include "pscsim/sim_core.hpp"

namespace pscsim::chan {
class ChannelServer;
}

namespace pscsim::orbit {

enum class OrbitSource { kSetpoint, kPlant };

struct FeedbackConfig {
  std::vector<std::string> correctors;
  std::vector<std::string> bpms;
  Matrix r_om;                  // mm/A, BPMs x correctors
  std::vector<double> d;        // mm, static disturbance per BPM
  double noise_sigma = 0.0;     // mm
  double alpha = 0.5;
  bool enabled = true;
  sim::TimeNs period_ns = sim::kNsPerMs;
  OrbitSource source = OrbitSource::kSetpoint;

  void validate() const;
};

/// What the feedback needs from one corrector PS.
struct CorrectorPort {
  std::string ps;
  link::Link* link = nullptr;
  double lsb = 0.0;  // A, dead-band
  double i_min = 0.0;
  double i_max = 0.0;
  double initial = 0.0;                  // A, set current at start
  std::function<double()> plant_current;  // used with OrbitSource::kPlant
};

struct StepRecord {
  sim::TimeNs t_ns = 0;
  double rms = 0.0;
  double max_abs = 0.0;
  std::size_t writes = 0;
};

enum class FeedbackState { kOff, kRunning, kPaused };
std::string_view to_string(FeedbackState s);

/// 1 kHz orbit correction: y = R I + d + noise, I <- I - alpha P y, with all
/// corrector writes on the priority link path.
class OrbitFeedback {
 public:
  OrbitFeedback(sim::Scheduler& sched, FeedbackConfig cfg, std::vector<CorrectorPort> ports);
  ~OrbitFeedback();
  OrbitFeedback(const OrbitFeedback&) = delete;
  OrbitFeedback& operator=(const OrbitFeedback&) = delete;

  /// Registers FB:ENABLE, FB:STATE, FB:ALARM and FB:ORBIT-RMS.
  void attach(chan::ChannelServer& server);
  /// Steps start at the first multiple of the period at or after `first`.
  void start(sim::TimeNs first = 0);
  void set_enabled(bool on);

  FeedbackState state() const { return state_; }
  const Matrix& pinv_matrix() const { return p_; }
  const std::vector<double>& setpoints() const { return commanded_; }
  std::vector<double> orbit() const;
  const std::vector<StepRecord>& history() const { return history_; }

  std::uint64_t steps() const { return steps_; }
  std::uint64_t writes_issued() const { return writes_issued_; }
  std::uint64_t writes_failed() const { return writes_failed_; }
  sim::TimeNs max_write_latency() const { return max_latency_; }
  /// Longest time from a step start to its last write acknowledgement.
  sim::TimeNs max_step_completion() const { return max_step_completion_; }

 private:
  void step(sim::TimeNs t);
  bool links_up() const;
  void update_state();
  void publish();

  sim::Scheduler& sched_;
  FeedbackConfig cfg_;
  std::vector<CorrectorPort> ports_;
  Matrix p_;
  std::vector<double> commanded_;  // last value issued per corrector
  std::vector<double> applied_;    // last value acknowledged per corrector
  bool enabled_;
  FeedbackState state_ = FeedbackState::kOff;
  chan::ChannelServer* server_ = nullptr;
  std::unique_ptr<sim::PeriodicTimer> timer_;

  std::vector<StepRecord> history_;
  std::uint64_t steps_ = 0;
  std::uint64_t writes_issued_ = 0;
  std::uint64_t writes_failed_ = 0;
  sim::TimeNs max_latency_ = 0;
  sim::TimeNs max_step_completion_ = 0;
};

}  // namespace pscsim::orbit
