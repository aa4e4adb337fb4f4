#include "pscsim/link.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace pscsim::link {

std::string_view to_string(LinkError e) {
  switch (e) {
    case LinkError::kNone: return "none";
    case LinkError::kLinkDown: return "link_down";
    case LinkError::kTimeout: return "timeout";
    case LinkError::kPriorityBusy: return "priority_busy";
  }
  return "unknown";
}

Link::Link(std::string id, sim::Scheduler& sched, Slave& slave, LinkParams params)
    : id_(std::move(id)), sched_(sched), slave_(slave), params_(params) {
  if (!(params_.bitrate_hz > 0.0)) throw std::invalid_argument("link bitrate must be positive");
  if (params_.t_proc_ns < 0) throw std::invalid_argument("link t_proc must be >= 0");
  if (params_.detect_period_ns <= 0) throw std::invalid_argument("link detect period must be > 0");
}

sim::TimeNs Link::wire_time(std::size_t bits) const {
  return static_cast<sim::TimeNs>(std::llround(static_cast<double>(bits) * 1e9 / params_.bitrate_hz));
}

std::uint64_t Link::issued_total() const {
  std::uint64_t n = 0;
  for (const auto& row : issued_)
    for (auto v : row) n += v;
  return n;
}

std::size_t Link::in_flight() const {
  return normal_queue_.size() + (normal_active_ ? 1 : 0) + (prio_active_ ? 1 : 0) + failing_;
}

sim::TimeNs Link::expected_latency(const Frame& request) const {
  std::size_t resp_words = 0;
  if (request.opcode == Opcode::kRead) resp_words = 1;
  if (request.opcode == Opcode::kBlockRead && !request.payload.empty())
    resp_words = request.payload[0];
  // a NAK carries one word, so never assume less than that
  resp_words = std::max<std::size_t>(resp_words, 1);
  return wire_time(frame_bits(request.count())) + params_.t_proc_ns + wire_time(frame_bits(resp_words));
}

void Link::transact(Frame request, Priority prio, Completion done, Origin origin) {
  ++issued_[static_cast<std::size_t>(prio)][static_cast<std::size_t>(origin)];
  Txn txn;
  txn.id = next_txn_++;
  request.prio = prio == Priority::kHigh;
  txn.request = std::move(request);
  txn.prio = prio;
  txn.origin = origin;
  txn.done = std::move(done);
  txn.issued = sched_.now();

  if (state_.tx_broken) {
    fail_later(std::move(txn), LinkError::kLinkDown);
    return;
  }
  if (prio == Priority::kHigh) {
    if (prio_active_) {
      fail_later(std::move(txn), LinkError::kPriorityBusy);
      return;
    }
    prio_active_ = std::move(txn);
    state_.priority_busy = true;
    arm_timeout(*prio_active_);
    send(WireId::kForward, WireFrame{encode_frame(prio_active_->request), true, prio_active_->id});
    return;
  }
  normal_queue_.push_back(std::move(txn));
  state_.normal_pending = normal_queue_.size() + (normal_active_ ? 1 : 0);
  pump_normal();
}

void Link::pump_normal() {
  if (normal_active_ || normal_queue_.empty()) return;
  normal_active_ = std::move(normal_queue_.front());
  normal_queue_.pop_front();
  arm_timeout(*normal_active_);
  send(WireId::kForward, WireFrame{encode_frame(normal_active_->request), false, normal_active_->id});
}

void Link::arm_timeout(Txn& txn) {
  sched_.cancel(txn.timeout);
  const auto limit = static_cast<sim::TimeNs>(
      std::llround(params_.timeout_factor * static_cast<double>(expected_latency(txn.request))));
  const std::uint64_t id = txn.id;
  txn.timeout = sched_.schedule_after(limit, [this, id] { on_timeout(id); });
}

void Link::send(WireId w, WireFrame frame) {
  Wire& wr = wire(w);
  if (frame.prio) {
    if (wr.on_wire && !wr.on_wire->prio) {
      // preempt: the normal frame goes back to the head of its queue
      sched_.cancel(wr.end_event);
      wr.normal.push_front(std::move(*wr.on_wire));
      wr.on_wire.reset();
      ++state_.aborted_frames;
      if (normal_active_) arm_timeout(*normal_active_);
    }
    if (wr.on_wire) {
      wr.prio_waiting = std::move(frame);
      return;
    }
    wr.prio_waiting = std::move(frame);
    start_next(w);
    return;
  }
  wr.normal.push_back(std::move(frame));
  if (!wr.on_wire) start_next(w);
}

void Link::start_next(WireId w) {
  Wire& wr = wire(w);
  if (wr.on_wire) return;
  if (wr.prio_waiting) {
    wr.on_wire = std::move(*wr.prio_waiting);
    wr.prio_waiting.reset();
  } else if (!wr.normal.empty()) {
    wr.on_wire = std::move(wr.normal.front());
    wr.normal.pop_front();
  } else {
    return;
  }
  const sim::TimeNs dur = wire_time(wr.on_wire->bytes.size() * 8);
  wr.end_event = sched_.schedule_after(dur, [this, w] { on_wire_done(w); });
}

void Link::on_wire_done(WireId w) {
  Wire& wr = wire(w);
  WireFrame frame = std::move(*wr.on_wire);
  wr.on_wire.reset();
  wr.end_event = {};
  if (!wr.broken) {
    if (wr.flip_bit) {
      const std::size_t bit = *wr.flip_bit % (frame.bytes.size() * 8);
      frame.bytes[bit / 8] ^= static_cast<std::uint8_t>(0x80u >> (bit % 8));
      wr.flip_bit.reset();
    }
    if (w == WireId::kForward) {
      on_request_arrival(frame.bytes);
    } else {
      on_response_arrival(frame.bytes);
    }
  }
  start_next(w);
}

void Link::on_request_arrival(const std::vector<std::uint8_t>& bytes) {
  auto decoded = decode_frame(bytes);
  if (auto* err = std::get_if<DecodeError>(&decoded)) {
    if (*err == DecodeError::kBadHeader || *err == DecodeError::kBadPayload) ++state_.crc_err_count;
    return;
  }
  Frame req = std::move(std::get<Frame>(decoded));
  if (req.prio) {
    slave_queue_.push_front(std::move(req));
  } else {
    slave_queue_.push_back(std::move(req));
  }
  if (!slave_busy_) service_next();
}

void Link::service_next() {
  if (slave_queue_.empty()) {
    slave_busy_ = false;
    return;
  }
  slave_busy_ = true;
  slave_event_ = sched_.schedule_after(params_.t_proc_ns, [this] {
    Frame req = std::move(slave_queue_.front());
    slave_queue_.pop_front();
    Frame resp = slave_.service(req);
    resp.prio = req.prio;
    const bool prio = resp.prio;
    send(WireId::kReturn, WireFrame{encode_frame(resp), prio, 0});
    service_next();
  });
}

void Link::on_response_arrival(const std::vector<std::uint8_t>& bytes) {
  auto decoded = decode_frame(bytes);
  if (auto* err = std::get_if<DecodeError>(&decoded)) {
    if (*err == DecodeError::kBadHeader || *err == DecodeError::kBadPayload) ++state_.crc_err_count;
    return;
  }
  Frame resp = std::move(std::get<Frame>(decoded));
  std::optional<Txn>& slot = resp.prio ? prio_active_ : normal_active_;
  if (!slot) return;  // stray response after a timeout
  Txn txn = std::move(*slot);
  slot.reset();
  if (resp.opcode == Opcode::kNak) ++state_.nak_count;
  if (rx_timeout_latched_) {
    rx_timeout_latched_ = false;
    state_.rx_broken = rx_physical_;
    slave_.link_flags_changed(state_.tx_broken, state_.rx_broken);
    notify();
  }
  TransactResult r;
  r.response = std::move(resp);
  r.issued = txn.issued;
  r.completed = sched_.now();
  finish(std::move(txn), std::move(r));
  pump_normal();
}

void Link::on_timeout(std::uint64_t txn_id) {
  std::optional<Txn>* slot = nullptr;
  if (prio_active_ && prio_active_->id == txn_id) slot = &prio_active_;
  if (normal_active_ && normal_active_->id == txn_id) slot = &normal_active_;
  if (slot == nullptr) return;
  Txn txn = std::move(**slot);
  slot->reset();
  txn.timeout = {};
  ++state_.timeouts;
  if (!rx_timeout_latched_) {
    rx_timeout_latched_ = true;
    state_.rx_broken = true;
    slave_.link_flags_changed(state_.tx_broken, state_.rx_broken);
    notify();
  }
  TransactResult r;
  r.error = LinkError::kTimeout;
  r.issued = txn.issued;
  r.completed = sched_.now();
  finish(std::move(txn), std::move(r));
  pump_normal();
}

void Link::finish(Txn txn, TransactResult result) {
  sched_.cancel(txn.timeout);
  if (result.ok()) {
    ++completed_ok_;
  } else {
    ++completed_error_;
  }
  state_.priority_busy = prio_active_.has_value();
  state_.normal_pending = normal_queue_.size() + (normal_active_ ? 1 : 0);
  if (txn.done) txn.done(result);
}

void Link::fail_later(Txn txn, LinkError err) {
  auto shared = std::make_shared<Txn>(std::move(txn));
  ++failing_;
  sched_.schedule_after(0, [this, shared, err] {
    --failing_;
    TransactResult r;
    r.error = err;
    r.issued = shared->issued;
    r.completed = sched_.now();
    finish(std::move(*shared), std::move(r));
  });
}

void Link::fail_all(LinkError err) {
  std::vector<Txn> victims;
  if (prio_active_) victims.push_back(std::move(*prio_active_));
  prio_active_.reset();
  if (normal_active_) victims.push_back(std::move(*normal_active_));
  normal_active_.reset();
  for (auto& t : normal_queue_) victims.push_back(std::move(t));
  normal_queue_.clear();
  // frames still queued on the forward wire belong to the failed transactions
  forward_.normal.clear();
  forward_.prio_waiting.reset();
  for (auto& t : victims) {
    TransactResult r;
    r.error = err;
    r.issued = t.issued;
    r.completed = sched_.now();
    finish(std::move(t), std::move(r));
  }
}

void Link::set_link_broken(Direction dir, bool broken) {
  wire(dir == Direction::kTx ? WireId::kForward : WireId::kReturn).broken = broken;
  const sim::TimeNs period = params_.detect_period_ns;
  const sim::TimeNs detect_at = (sched_.now() / period + 1) * period;
  sched_.schedule_at(detect_at, [this, dir, broken] { apply_detected(dir, broken); });
}

void Link::apply_detected(Direction dir, bool broken) {
  if (dir == Direction::kTx) {
    state_.tx_broken = broken;
  } else {
    rx_physical_ = broken;
    if (!broken) rx_timeout_latched_ = false;
    state_.rx_broken = rx_physical_ || rx_timeout_latched_;
  }
  slave_.link_flags_changed(state_.tx_broken, state_.rx_broken);
  if (dir == Direction::kTx && broken) fail_all(LinkError::kLinkDown);
  notify();
}

void Link::inject_bit_error(Direction dir, std::size_t bit) {
  wire(dir == Direction::kTx ? WireId::kForward : WireId::kReturn).flip_bit = bit;
}

void Link::notify() {
  for (auto& obs : observers_) obs(state_);
}

}  // namespace pscsim::link
