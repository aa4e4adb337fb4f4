#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace pscsim::sim {

/// Virtual time in integer nanoseconds.
using TimeNs = std::int64_t;

inline constexpr TimeNs kNsPerUs = 1'000;
inline constexpr TimeNs kNsPerMs = 1'000'000;
inline constexpr TimeNs kNsPerSec = 1'000'000'000;

/// Controller tick: 50 kHz.
inline constexpr TimeNs kTickNs = 20'000;

constexpr double to_seconds(TimeNs t) { return static_cast<double>(t) * 1e-9; }
inline TimeNs from_seconds(double s) { return static_cast<TimeNs>(std::llround(s * 1e9)); }

class SchedulingError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct EventHandle {
  std::uint64_t seq = 0;
  bool valid() const { return seq != 0; }
};

/// Seeded generator shared by every module that needs randomness.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 1) : engine_(seed) {}

  void reseed(std::uint64_t seed) { engine_.seed(seed); }
  double normal(double sigma) {
    if (sigma <= 0.0) return 0.0;
    return std::normal_distribution<double>(0.0, sigma)(engine_);
  }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  std::uint64_t next() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Thread-safe queue of commands from outside the simulation thread. The
/// scheduler drains it between events.
class CommandQueue {
 public:
  using Command = std::function<void()>;

  void post(Command cmd);
  /// Runs every queued command on the calling thread; returns how many ran.
  std::size_t drain();
  bool empty() const;

 private:
  mutable std::mutex mu_;
  std::vector<Command> pending_;
};

/// Deterministic discrete-event scheduler. Events fire in (due, seq) order.
class Scheduler {
 public:
  using Action = std::function<void()>;
  using TraceHook = std::function<void(TimeNs due, std::uint64_t seq)>;

  explicit Scheduler(std::uint64_t seed = 1) : rng_(seed) {}
  Scheduler(const Scheduler&) = delete;
  Scheduler& operator=(const Scheduler&) = delete;

  TimeNs now() const { return now_; }

  EventHandle schedule_at(TimeNs due, Action action);
  EventHandle schedule_after(TimeNs delay, Action action) {
    return schedule_at(now_ + delay, std::move(action));
  }
  /// Returns false when the event already fired or was cancelled.
  bool cancel(EventHandle handle);

  /// Fires every event with due <= t_end, then sets now to t_end.
  std::size_t advance_until(TimeNs t_end);
  /// Fires the single next event, if any.
  bool step();
  std::optional<TimeNs> next_due();

  std::uint64_t scheduled() const { return scheduled_; }
  std::uint64_t fired() const { return fired_; }
  std::uint64_t cancelled() const { return cancelled_; }
  std::uint64_t pending() const { return actions_.size(); }

  Rng& rng() { return rng_; }
  CommandQueue& commands() { return commands_; }
  void set_trace(TraceHook hook) { trace_ = std::move(hook); }

 private:
  struct Key {
    TimeNs due;
    std::uint64_t seq;
    bool operator>(const Key& o) const { return due != o.due ? due > o.due : seq > o.seq; }
  };

  void drop_cancelled_head();
  void fire_head();

  TimeNs now_ = 0;
  std::uint64_t next_seq_ = 1;
  std::vector<Key> heap_;
  std::unordered_map<std::uint64_t, Action> actions_;
  std::uint64_t scheduled_ = 0;
  std::uint64_t fired_ = 0;
  std::uint64_t cancelled_ = 0;
  Rng rng_;
  CommandQueue commands_;
  TraceHook trace_;
};

/// Fires fn(t) at first, first + period, first + 2*period, ... until stopped
/// or destroyed. Times are computed from the index, never accumulated.
class PeriodicTimer {
 public:
  PeriodicTimer(Scheduler& sched, TimeNs first, TimeNs period, std::function<void(TimeNs)> fn);
  ~PeriodicTimer();
  PeriodicTimer(const PeriodicTimer&) = delete;
  PeriodicTimer& operator=(const PeriodicTimer&) = delete;

  void stop();
  bool running() const { return handle_.valid(); }
  std::uint64_t count() const { return index_; }

 private:
  void arm();

  Scheduler& sched_;
  TimeNs first_;
  TimeNs period_;
  std::uint64_t index_ = 0;
  std::function<void(TimeNs)> fn_;
  EventHandle handle_;
};

}  // namespace pscsim::sim
