#pragma once

#include <array>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pscsim/frame.hpp"
#include "pscsim/sim_core.hpp"

namespace pscsim::link {

struct LinkParams {
  double bitrate_hz = 5e6;
  sim::TimeNs t_proc_ns = 4'000;
  double timeout_factor = 3.0;
  sim::TimeNs detect_period_ns = sim::kTickNs;
};

/// Seen from the master (IP module) side: tx is master -> controller.
enum class Direction { kTx, kRx };
enum class Priority { kNormal, kHigh };

/// Who issued a transaction; used only for accounting.
enum class Origin : std::uint8_t { kClient, kPoll, kRamp, kFeedback, kDownload, kTest };
inline constexpr std::size_t kOriginCount = 6;

enum class LinkError { kNone, kLinkDown, kTimeout, kPriorityBusy };
std::string_view to_string(LinkError e);

struct TransactResult {
  LinkError error = LinkError::kNone;
  Frame response;
  sim::TimeNs issued = 0;
  sim::TimeNs completed = 0;

  bool ok() const { return error == LinkError::kNone; }
  bool nak() const { return ok() && response.opcode == Opcode::kNak; }
  sim::TimeNs latency() const { return completed - issued; }
};

using Completion = std::function<void(const TransactResult&)>;

/// Controller side of the link.
class Slave {
 public:
  virtual ~Slave() = default;
  virtual Frame service(const Frame& request) = 0;
  /// Mirror of the master's detected link flags.
  virtual void link_flags_changed(bool /*tx_broken*/, bool /*rx_broken*/) {}
};

struct LinkState {
  bool tx_broken = false;
  bool rx_broken = false;
  std::uint64_t crc_err_count = 0;
  std::uint64_t nak_count = 0;
  std::uint64_t aborted_frames = 0;
  std::uint64_t timeouts = 0;
  std::size_t normal_pending = 0;  // queued plus in flight
  bool priority_busy = false;
};

/// Simulated point-to-point link: one serial wire per direction. Normal
/// transactions are stop-and-wait FIFO; a priority frame preempts a normal
/// frame on the wire, which is retransmitted afterwards.
class Link {
 public:
  using StateObserver = std::function<void(const LinkState&)>;

  Link(std::string id, sim::Scheduler& sched, Slave& slave, LinkParams params = {});
  Link(const Link&) = delete;
  Link& operator=(const Link&) = delete;
  ~Link() = default;

  const std::string& id() const { return id_; }
  const LinkParams& params() const { return params_; }
  const LinkState& state() const { return state_; }

  void transact(Frame request, Priority prio, Completion done, Origin origin = Origin::kClient);
  void set_link_broken(Direction dir, bool broken);
  void add_state_observer(StateObserver obs) { observers_.push_back(std::move(obs)); }

  /// Flips one bit of the next frame delivered in the given direction.
  void inject_bit_error(Direction dir, std::size_t bit);

  sim::TimeNs wire_time(std::size_t bits) const;
  std::uint64_t issued(Priority p, Origin o) const {
    return issued_[static_cast<std::size_t>(p)][static_cast<std::size_t>(o)];
  }
  std::uint64_t issued_total() const;
  std::uint64_t completed_ok() const { return completed_ok_; }
  std::uint64_t completed_error() const { return completed_error_; }
  std::size_t in_flight() const;

 private:
  struct Txn {
    std::uint64_t id = 0;
    Frame request;
    Priority prio = Priority::kNormal;
    Origin origin = Origin::kClient;
    Completion done;
    sim::TimeNs issued = 0;
    sim::EventHandle timeout;
  };

  struct WireFrame {
    std::vector<std::uint8_t> bytes;
    bool prio = false;
    std::uint64_t txn = 0;
  };

  struct Wire {
    std::deque<WireFrame> normal;
    std::optional<WireFrame> prio_waiting;
    std::optional<WireFrame> on_wire;
    sim::EventHandle end_event;
    bool broken = false;
    std::optional<std::size_t> flip_bit;
  };

  enum class WireId { kForward, kReturn };

  void pump_normal();
  void send(WireId w, WireFrame frame);
  void start_next(WireId w);
  void on_wire_done(WireId w);
  void on_request_arrival(const std::vector<std::uint8_t>& bytes);
  void service_next();
  void on_response_arrival(const std::vector<std::uint8_t>& bytes);
  void arm_timeout(Txn& txn);
  void on_timeout(std::uint64_t txn_id);
  void finish(Txn txn, TransactResult result);
  void fail_all(LinkError err);
  void fail_later(Txn txn, LinkError err);
  sim::TimeNs expected_latency(const Frame& request) const;
  void apply_detected(Direction dir, bool broken);
  void notify();
  Wire& wire(WireId w) { return w == WireId::kForward ? forward_ : ret_; }

  std::string id_;
  sim::Scheduler& sched_;
  Slave& slave_;
  LinkParams params_;
  LinkState state_;
  bool rx_physical_ = false;
  bool rx_timeout_latched_ = false;

  std::uint64_t next_txn_ = 1;
  std::deque<Txn> normal_queue_;
  std::optional<Txn> normal_active_;
  std::optional<Txn> prio_active_;

  Wire forward_;
  Wire ret_;
  std::deque<Frame> slave_queue_;
  bool slave_busy_ = false;
  sim::EventHandle slave_event_;

  std::vector<StateObserver> observers_;
  std::array<std::array<std::uint64_t, kOriginCount>, 2> issued_{};
  std::uint64_t completed_ok_ = 0;
  std::size_t failing_ = 0;  // refused, completion not yet delivered
  std::uint64_t completed_error_ = 0;
};

}  // namespace pscsim::link
