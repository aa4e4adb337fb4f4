#include <gtest/gtest.h>

#include <string>
#include <thread>
#include <vector>

#include "pscsim/sim_core.hpp"

using namespace pscsim::sim;

TEST(Scheduler, EventAtNowFiresBeforeLaterEvents) {
  Scheduler s;
  std::vector<int> order;
  s.schedule_at(5, [&] { order.push_back(2); });
  s.schedule_at(0, [&] { order.push_back(1); });
  s.advance_until(10);
  EXPECT_EQ(order, (std::vector<int>{1, 2}));
}

TEST(Scheduler, EqualDueFiresInInsertionOrder) {
  Scheduler s;
  std::string seen;
  s.schedule_at(100, [&] { seen += 'a'; });
  s.schedule_at(100, [&] { seen += 'b'; });
  s.schedule_at(100, [&] { seen += 'c'; });
  s.advance_until(100);
  EXPECT_EQ(seen, "abc");
}

TEST(Scheduler, RejectsEventsInThePast) {
  Scheduler s;
  s.advance_until(50);
  EXPECT_THROW(s.schedule_at(49, [] {}), SchedulingError);
  EXPECT_THROW(s.advance_until(10), SchedulingError);
}

TEST(Scheduler, EmptyAdvanceMovesClock) {
  Scheduler s;
  EXPECT_EQ(s.advance_until(1'000'000), 0u);
  EXPECT_EQ(s.now(), 1'000'000);
}

TEST(Scheduler, NowNeverPassesPendingEvent) {
  Scheduler s;
  TimeNs seen = -1;
  s.schedule_at(700, [&] { seen = s.now(); });
  s.advance_until(1000);
  EXPECT_EQ(seen, 700);
}

TEST(Scheduler, PeriodicTickOverOneMillisecond) {
  Scheduler s;
  int n = 0;
  PeriodicTimer t(s, kTickNs, kTickNs, [&](TimeNs) { ++n; });
  s.advance_until(kNsPerMs);
  EXPECT_EQ(n, 50);
}

TEST(Scheduler, PeriodicTimerComputesTimesFromIndex) {
  Scheduler s;
  std::vector<TimeNs> times;
  PeriodicTimer t(s, 3, 7, [&](TimeNs due) {
    EXPECT_EQ(due, s.now());
    times.push_back(due);
  });
  s.advance_until(30);
  EXPECT_EQ(times, (std::vector<TimeNs>{3, 10, 17, 24}));
  t.stop();
  s.advance_until(100);
  EXPECT_EQ(times.size(), 4u);
}

TEST(Scheduler, CancelledEventsDoNotFire) {
  Scheduler s;
  bool fired = false;
  auto h = s.schedule_at(10, [&] { fired = true; });
  EXPECT_TRUE(s.cancel(h));
  EXPECT_FALSE(s.cancel(h));
  s.advance_until(20);
  EXPECT_FALSE(fired);
}

TEST(Scheduler, CountersReconcileAtAllTimes) {
  Scheduler s(7);
  std::vector<EventHandle> handles;
  for (int i = 0; i < 500; ++i) {
    const auto due = static_cast<TimeNs>(s.rng().uniform(0, 10'000));
    handles.push_back(s.schedule_at(due, [&s] {
      if (s.rng().uniform(0, 1) < 0.3) s.schedule_after(17, [] {});
    }));
  }
  for (std::size_t i = 0; i < handles.size(); i += 3) s.cancel(handles[i]);
  for (TimeNs t = 0; t <= 12'000; t += 250) {
    s.advance_until(t);
    EXPECT_EQ(s.scheduled(), s.fired() + s.cancelled() + s.pending());
  }
  EXPECT_EQ(s.pending(), 0u);
}

namespace {

std::vector<std::pair<TimeNs, std::uint64_t>> traced_run(std::uint64_t seed) {
  Scheduler s(seed);
  std::vector<std::pair<TimeNs, std::uint64_t>> trace;
  s.set_trace([&](TimeNs due, std::uint64_t seq) { trace.emplace_back(due, seq); });
  PeriodicTimer tick(s, 0, kTickNs, [&](TimeNs) {
    if (s.rng().uniform(0, 1) < 0.1) s.schedule_after(static_cast<TimeNs>(s.rng().uniform(0, 50'000)), [] {});
  });
  s.advance_until(10 * kNsPerMs);
  return trace;
}

}  // namespace

TEST(Scheduler, SameSeedGivesIdenticalTrace) {
  const auto a = traced_run(42);
  const auto b = traced_run(42);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, traced_run(43));
}

TEST(CommandQueue, DrainedBetweenEventsOnSimThread) {
  Scheduler s;
  std::vector<TimeNs> ran_at;
  std::thread producer([&] { s.commands().post([&] { ran_at.push_back(s.now()); }); });
  producer.join();
  s.schedule_at(100, [] {});
  s.advance_until(200);
  ASSERT_EQ(ran_at.size(), 1u);
  EXPECT_EQ(ran_at[0], 0);
  EXPECT_TRUE(s.commands().empty());
}

TEST(Rng, SeededSequenceRepeats) {
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  EXPECT_EQ(a.normal(0.0), 0.0);
}
