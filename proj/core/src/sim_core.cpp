#include "pscsim/sim_core.hpp"

#include <algorithm>
#include <string>

namespace pscsim::sim {

void CommandQueue::post(Command cmd) {
  std::lock_guard lock(mu_);
  pending_.push_back(std::move(cmd));
}

std::size_t CommandQueue::drain() {
  std::vector<Command> batch;
  {
    std::lock_guard lock(mu_);
    batch.swap(pending_);
  }
  for (auto& cmd : batch) cmd();
  return batch.size();
}

bool CommandQueue::empty() const {
  std::lock_guard lock(mu_);
  return pending_.empty();
}

EventHandle Scheduler::schedule_at(TimeNs due, Action action) {
  if (due < now_) {
    throw SchedulingError("event due at " + std::to_string(due) + " ns is before now (" +
                          std::to_string(now_) + " ns)");
  }
  const std::uint64_t seq = next_seq_++;
  heap_.push_back(Key{due, seq});
  std::push_heap(heap_.begin(), heap_.end(), std::greater<>{});
  actions_.emplace(seq, std::move(action));
  ++scheduled_;
  return EventHandle{seq};
}

bool Scheduler::cancel(EventHandle handle) {
  if (!handle.valid()) return false;
  if (actions_.erase(handle.seq) == 0) return false;
  ++cancelled_;
  return true;
}

void Scheduler::drop_cancelled_head() {
  while (!heap_.empty() && !actions_.contains(heap_.front().seq)) {
    std::pop_heap(heap_.begin(), heap_.end(), std::greater<>{});
    heap_.pop_back();
  }
}

std::optional<TimeNs> Scheduler::next_due() {
  drop_cancelled_head();
  if (heap_.empty()) return std::nullopt;
  return heap_.front().due;
}

void Scheduler::fire_head() {
  std::pop_heap(heap_.begin(), heap_.end(), std::greater<>{});
  const Key key = heap_.back();
  heap_.pop_back();
  auto it = actions_.find(key.seq);
  Action action = std::move(it->second);
  actions_.erase(it);
  now_ = key.due;
  ++fired_;
  if (trace_) trace_(key.due, key.seq);
  action();
}

bool Scheduler::step() {
  commands_.drain();
  drop_cancelled_head();
  if (heap_.empty()) return false;
  fire_head();
  return true;
}

std::size_t Scheduler::advance_until(TimeNs t_end) {
  if (t_end < now_) {
    throw SchedulingError("advance_until target " + std::to_string(t_end) +
                          " ns is before now (" + std::to_string(now_) + " ns)");
  }
  std::size_t count = 0;
  for (;;) {
    commands_.drain();
    drop_cancelled_head();
    if (heap_.empty() || heap_.front().due > t_end) break;
    fire_head();
    ++count;
  }
  now_ = t_end;
  return count;
}

PeriodicTimer::PeriodicTimer(Scheduler& sched, TimeNs first, TimeNs period,
                             std::function<void(TimeNs)> fn)
    : sched_(sched), first_(first), period_(period), fn_(std::move(fn)) {
  if (period <= 0) throw SchedulingError("periodic timer needs a positive period");
  arm();
}

PeriodicTimer::~PeriodicTimer() { stop(); }

void PeriodicTimer::stop() {
  sched_.cancel(handle_);
  handle_ = {};
}

void PeriodicTimer::arm() {
  const TimeNs due = first_ + static_cast<TimeNs>(index_) * period_;
  handle_ = sched_.schedule_at(due, [this, due] {
    ++index_;
    arm();
    fn_(due);
  });
}

}  // namespace pscsim::sim
