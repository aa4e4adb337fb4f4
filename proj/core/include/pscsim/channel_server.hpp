#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pscsim/channel.hpp"
#include "pscsim/link.hpp"
#include "pscsim/ps_class.hpp"
#include "pscsim/psc_registers.hpp"
#include "pscsim/sim_core.hpp"

namespace pscsim::chan {

struct ChannelServerConfig {
  sim::TimeNs poll_period = 100 * sim::kNsPerMs;
  sim::TimeNs alarm_period = sim::kNsPerSec;
  sim::TimeNs ramp_step = 100 * sim::kNsPerMs;
  double r_band = 0.10;   // fraction of R_nom
  int r_strikes = 3;      // consecutive out-of-band scans before the alarm
};

/// What the channel layer knows about one PS: its link and its class.
struct PsBinding {
  std::string id;
  link::Link* link = nullptr;
  PsClass cls;
  double r_nominal = 0.0;  // 0 means the class resistance
};

/// Alarm conditions tracked per PS. Each raises and clears exactly once per
/// transition.
enum class Condition { kLinkTx, kLinkRx, kResistance, kFault, kCompare, kLocalMode, kRamp };
inline constexpr std::size_t kConditionCount = 7;
std::string_view to_string(Condition c);
Severity severity_of(Condition c);

struct AlarmEvent {
  sim::TimeNs t_ns = 0;
  std::string ps;
  Condition condition = Condition::kLinkTx;
  bool raised = false;
};

enum class JobKind { kRamp, kCycle };
enum class JobState { kPending, kRunning, kDone, kFailed };
std::string_view to_string(JobState s);

struct RampJob {
  std::uint64_t id = 0;
  JobKind kind = JobKind::kRamp;
  std::vector<std::string> members;
  std::vector<std::vector<double>> values;  // per member, one per step
  sim::TimeNs t0 = 0;
  JobState state = JobState::kPending;
  std::string error;
  std::size_t next_step = 0;
  std::size_t outstanding = 0;
  /// Virtual time each member's first write was issued.
  std::vector<sim::TimeNs> first_issue;
  std::size_t steps() const { return values.empty() ? 0 : values.front().size(); }
};

struct RampRequest {
  std::vector<std::string> members;
  std::vector<double> targets;
  double duration_s = 1.0;
  std::optional<sim::TimeNs> t0;
};

struct JobStart {
  bool ok = false;
  std::string error;
  std::uint64_t job = 0;
};

/// Register and soft channels, compare/hysteresis/alarm logic and the
/// synchronized ramp engine. Runs on the simulation thread only.
class ChannelServer {
 public:
  using PutHandler = std::function<void(const Value&, Reply)>;
  using JobObserver = std::function<void(const RampJob&)>;

  explicit ChannelServer(sim::Scheduler& sched, ChannelServerConfig cfg = {});
  ~ChannelServer();
  ChannelServer(const ChannelServer&) = delete;
  ChannelServer& operator=(const ChannelServer&) = delete;

  /// Registers the 18 per-PS channels.
  void add_ps(PsBinding binding);
  /// Seeds the read-back cache with registers 0x00..0x08, as a boot readback.
  void prime(const std::string& ps, const std::array<psc::Word, 9>& regs);
  /// Starts polling and alarm scans; the first poll fires at `first`.
  void start(sim::TimeNs first = 0);

  bool has(const std::string& name) const { return channels_.count(name) != 0; }
  std::vector<std::string> names() const;
  GetResult get(const std::string& name) const;
  void put(const std::string& name, const Value& value, Reply reply);
  std::optional<SubscriptionId> monitor(const std::string& name, Monitor cb);
  bool unmonitor(SubscriptionId id);

  void add_soft(const std::string& name, Value initial, PutHandler handler = {});
  void set_soft(const std::string& name, const Value& value, Severity alarm = Severity::kNone);

  /// Starts the class cycle program. Returns the error code on refusal.
  JobStart standardize(const std::string& ps);
  JobStart sync_ramp(const RampRequest& req);
  const RampJob* job(std::uint64_t id) const;
  void add_job_observer(JobObserver obs) { job_observers_.push_back(std::move(obs)); }

  // introspection, used by the machine layer, metrics and tests
  bool has_ps(const std::string& ps) const { return ps_index_.count(ps) != 0; }
  std::vector<std::string> ps_ids() const;
  const PsClass& ps_class(const std::string& ps) const;
  double r_nominal(const std::string& ps) const;
  double set_current(const std::string& ps) const;
  bool ps_ready(const std::string& ps) const;
  bool ps_busy(const std::string& ps) const;
  Severity alarm_of(const std::string& ps) const;
  std::string alarm_reason(const std::string& ps) const;
  bool condition_active(const std::string& ps, Condition c) const;
  HysteresisState hysteresis(const std::string& ps) const;
  CompareFlag compare(const std::string& ps) const;
  const std::vector<AlarmEvent>& alarm_log() const { return alarm_log_; }
  std::uint64_t polls_completed() const { return polls_completed_; }

 private:
  enum class Field {
    kISet, kIRead, kMode, kStatus, kCompare, kHyst, kCycleCmd, kRLoad, kVOut, kLinkTxOk,
    kLinkRxOk, kLocal, kWfOffset, kWfScale, kWfLoad, kTrigArm, kAlarm, kRampState, kSoft
  };

  struct Channel {
    std::string name;
    Field field = Field::kSoft;
    int ps = -1;
    Value value;
    Severity alarm = Severity::kNone;
    PutHandler handler;
    std::vector<std::pair<SubscriptionId, Monitor>> monitors;
  };

  struct PsRuntime {
    PsBinding binding;
    std::array<psc::Word, 9> regs{};
    bool primed = false;
    bool tx_broken = false;
    bool rx_broken = false;
    bool poll_outstanding = false;
    sim::TimeNs iset_acked_at = -1;
    HysteresisTracker hyst{true};
    CompareFlag compare = CompareFlag::kOff;
    int r_strikes = 0;
    std::array<bool, kConditionCount> conditions{};
    std::optional<std::uint64_t> job;
    std::string wf_name;
    std::array<Channel*, 18> ch{};
  };

  Channel& channel(const std::string& name);
  void publish(Channel& ch, const Value& v, Severity alarm);
  void publish(PsRuntime& ps, Field f, const Value& v, Severity alarm = Severity::kNone);
  void refresh_ps_channels(PsRuntime& ps);
  void set_condition(PsRuntime& ps, Condition c, bool active);

  void write_reg(PsRuntime& ps, psc::Address addr, psc::Word word, link::Priority prio,
                 link::Origin origin, std::function<void(const PutResult&)> done);
  void put_register(PsRuntime& ps, Field f, const Value& v, Reply reply);
  void load_waveform(PsRuntime& ps, const std::string& spec, Reply reply);
  void after_iset_ack(PsRuntime& ps, double value, bool track_hysteresis);

  void poll_all();
  void poll(PsRuntime& ps);
  void on_poll(PsRuntime& ps, sim::TimeNs issued, const link::TransactResult& r);
  void alarm_scan();
  void on_link_state(PsRuntime& ps, const link::LinkState& st);

  JobStart start_job(JobKind kind, std::vector<int> members, std::vector<std::vector<double>> values,
                     sim::TimeNs t0);
  void job_step(std::uint64_t id);
  void job_write_done(std::uint64_t id, int ps, std::size_t step, const PutResult& r);
  void finish_job(RampJob& job, JobState state, std::string error);

  PsRuntime& ps_rt(const std::string& ps);
  const PsRuntime& ps_rt(const std::string& ps) const;
  bool is_on(const PsRuntime& ps) const;
  bool is_local(const PsRuntime& ps) const;
  double reg_float(const PsRuntime& ps, psc::Address a) const;

  sim::Scheduler& sched_;
  ChannelServerConfig cfg_;
  std::map<std::string, Channel> channels_;
  std::vector<std::unique_ptr<PsRuntime>> ps_;
  std::unordered_map<std::string, int> ps_index_;
  std::unordered_map<SubscriptionId, std::string> subscriptions_;
  SubscriptionId next_sub_ = 1;

  std::map<std::uint64_t, RampJob> jobs_;
  std::uint64_t next_job_ = 1;
  std::vector<JobObserver> job_observers_;

  std::vector<AlarmEvent> alarm_log_;
  std::uint64_t polls_completed_ = 0;
  std::unique_ptr<sim::PeriodicTimer> poll_timer_;
  std::unique_ptr<sim::PeriodicTimer> alarm_timer_;
};

}  // namespace pscsim::chan
