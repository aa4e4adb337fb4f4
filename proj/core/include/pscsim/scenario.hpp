#pragma once

#include <atomic>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pscsim/channel_server.hpp"
#include "pscsim/controller.hpp"
#include "pscsim/controller_slave.hpp"
#include "pscsim/link.hpp"
#include "pscsim/machine.hpp"
#include "pscsim/magnet_plant.hpp"
#include "pscsim/orbit_feedback.hpp"
#include "pscsim/ps_class.hpp"
#include "pscsim/sim_core.hpp"
#include "pscsim/waveform.hpp"

namespace pscsim::scenario {

/// Anything wrong with a scenario file. Maps to exit code 1.
class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PsSpec {
  std::string id;
  std::string cls;
  std::optional<double> resistance;  // plant overrides
  std::optional<double> inductance;
  std::optional<double> noise_sigma;
  std::optional<double> r_nominal;   // defaults to the plant resistance
  link::LinkParams link;
  bool on = false;
  double i_set = 0.0;
};

struct WaveformSpec {
  std::string ps;
  psc::Waveform waveform;
  psc::WaveformTarget target = psc::WaveformTarget::kVolatile;
  bool arm = false;
  std::optional<double> trigger_at;  // s
};

struct DacTap {
  std::string ps;
  psc::Dac dac = psc::Dac::kA;
  psc::Address source = 0;
  double offset = 0.0;
  double scale = 1.0;
  std::string path;  // full-rate CSV; empty keeps samples in memory only
};

enum class FaultKind { kResistanceChange, kSwapWith, kLinkBreak, kLinkRestore, kLocal, kBitError };
std::string_view to_string(FaultKind k);

struct FaultSpec {
  double t = 0.0;  // s
  std::string ps;
  FaultKind kind = FaultKind::kResistanceChange;
  double resistance = 0.0;
  std::string other;
  link::Direction direction = link::Direction::kRx;
  bool on = true;
  std::size_t bit = 0;
};

enum class CommandKind { kPut, kCycle, kRamp, kTrigger, kOptic };

struct CommandSpec {
  double t = 0.0;  // s
  CommandKind kind = CommandKind::kPut;
  std::string name;  // channel for put, PS for cycle and trigger
  chan::Value value;
  chan::RampRequest ramp;
  machine::OpticKnobs optic;
};

struct RunSpec {
  double until = 10.0;  // s
  std::uint64_t seed = 1;
  std::string metrics_path;
  double metrics_period_ms = 10.0;
  std::string state_dir;  // per-controller persistent stores
};

struct Scenario {
  std::string name;
  std::map<std::string, PsClass> classes;
  std::vector<PsSpec> ps;
  std::optional<machine::MachineConfig> machine;
  double family_ramp_s = 1.0;
  std::optional<orbit::FeedbackConfig> feedback;
  std::vector<WaveformSpec> waveforms;
  std::vector<CommandSpec> commands;
  std::vector<FaultSpec> faults;
  std::vector<DacTap> taps;
  chan::ChannelServerConfig server;
  RunSpec run;

  /// Referenced ids resolve, fault and command times lie inside the run.
  void validate() const;
};

/// Relative file references are resolved against base_dir.
Scenario parse_scenario(std::string_view json_text, const std::string& base_dir = ".");
/// Reads the file and applies the PSC_SIM_SEED override.
Scenario load_scenario(const std::string& path);
/// PSC_SIM_SEED, when set and numeric, replaces run.seed.
void apply_seed_override(Scenario& sc);

/// One simulated power supply: magnet, controller and its link.
struct PsUnit {
  std::string id;
  PsClass cls;
  std::unique_ptr<plant::Magnet> magnet;
  std::unique_ptr<psc::Controller> controller;
  std::unique_ptr<psc::ControllerSlave> slave;
  std::unique_ptr<link::Link> link;
};

struct Violation {
  sim::TimeNs t_ns = 0;
  std::string what;
};

struct CommandOutcome {
  sim::TimeNs t_ns = 0;
  std::string what;
  bool ok = false;
  std::string error;
};

struct TapSample {
  sim::TimeNs t_ns = 0;
  double value = 0.0;
};

inline constexpr std::string_view kMetricsHeader = "t_ns,ps_id,I_set,I_read,V_out,R_load,status_bits,alarm";

/// The simulated machine built from a scenario: every PS, the channel server,
/// the machine layer and the orbit feedback, all on one scheduler.
class Facility {
 public:
  /// Metrics go to `metrics` when given, else to run.metrics_path when set.
  explicit Facility(Scenario sc, std::ostream* metrics = nullptr);
  ~Facility();
  Facility(const Facility&) = delete;
  Facility& operator=(const Facility&) = delete;

  const Scenario& scenario() const { return sc_; }
  sim::Scheduler& scheduler() { return sched_; }
  chan::ChannelServer& server() { return *server_; }
  machine::MachineLayer* machine() { return machine_.get(); }
  orbit::OrbitFeedback* feedback() { return feedback_.get(); }

  bool has_unit(const std::string& id) const { return index_.count(id) != 0; }
  PsUnit& unit(const std::string& id);
  const std::vector<std::unique_ptr<PsUnit>>& units() const { return units_; }

  sim::TimeNs until() const { return sim::from_seconds(sc_.run.until); }
  void run_until(sim::TimeNs t);
  void run() { run_until(until()); }
  /// Paces virtual time to wall time at `pace` virtual seconds per wall
  /// second (<= 0 runs flat out) until `stop` is set or `end` is reached.
  void run_paced(double pace, const std::atomic<bool>& stop, std::optional<sim::TimeNs> end);

  void flush_metrics();
  std::uint64_t metrics_rows() const { return metrics_rows_; }
  const std::vector<Violation>& violations() const { return violations_; }
  const std::vector<CommandOutcome>& command_log() const { return command_log_; }
  const std::vector<TapSample>& tap_samples(std::size_t tap) const { return taps_.at(tap).samples; }
  /// Runs every invariant check now; also done at each metrics sample.
  void check_invariants();

 private:
  struct TapState {
    DacTap spec;
    std::vector<TapSample> samples;
    std::unique_ptr<std::ostream> out;
  };

  void build_units();
  void build_channels();
  void build_machine();
  void build_feedback();
  void schedule_events();
  void register_system_channels();
  void apply_fault(const FaultSpec& f);
  void run_command(const CommandSpec& c);
  void on_tick(sim::TimeNs t);
  void write_metrics(sim::TimeNs t);
  void note_violation(std::string what);
  std::array<psc::Word, 9> boot_readback(const PsUnit& u) const;

  Scenario sc_;
  sim::Scheduler sched_;
  std::vector<std::unique_ptr<PsUnit>> units_;
  std::map<std::string, std::size_t> index_;
  std::unique_ptr<psc::TickBus> bus_;
  std::unique_ptr<chan::ChannelServer> server_;
  std::unique_ptr<machine::MachineLayer> machine_;
  std::unique_ptr<orbit::OrbitFeedback> feedback_;
  std::unique_ptr<sim::PeriodicTimer> heartbeat_;

  std::unique_ptr<std::ostream> owned_metrics_;
  std::ostream* metrics_ = nullptr;
  sim::TimeNs metrics_period_ = 10 * sim::kNsPerMs;
  std::uint64_t metrics_rows_ = 0;
  std::string line_;

  std::vector<TapState> taps_;
  std::vector<Violation> violations_;
  std::vector<CommandOutcome> command_log_;
  std::size_t alarm_log_checked_ = 0;
  std::map<std::pair<std::string, int>, bool> alarm_raised_;
  sim::TimeNs last_check_ = -1;
};

}  // namespace pscsim::scenario
