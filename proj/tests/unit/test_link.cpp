#include <gtest/gtest.h>

#include <random>

#include "bench.hpp"

using namespace pscsim;
using link::Direction;
using link::Frame;
using link::LinkError;
using link::Opcode;
using link::Priority;
using link::TransactResult;
using testing_support::Bench;
namespace reg = psc::reg;

namespace {

Frame write_req(psc::Address addr, float value) {
  Frame f;
  f.opcode = Opcode::kWrite;
  f.addr = addr;
  f.payload = {psc::float_to_word(value)};
  return f;
}

Frame read_req(psc::Address addr) {
  Frame f;
  f.opcode = Opcode::kRead;
  f.addr = addr;
  return f;
}

void drain(Bench& b) {
  while (b.sched.step()) {
  }
}

bool reconciles(const link::Link& l) {
  return l.issued_total() == l.completed_ok() + l.completed_error() + l.in_flight();
}

}  // namespace

TEST(Link, WireTimesAtFiveMegabit) {
  Bench b("corrector", 1, {}, false);
  EXPECT_EQ(b.link->wire_time(32), 6'400);
  EXPECT_EQ(b.link->wire_time(72), 14'400);
}

// 72-bit request + 4 us processing + 32-bit ACK = 24.8 us on an idle link.
TEST(Link, SingleWriteLatencyIdle) {
  for (auto prio : {Priority::kNormal, Priority::kHigh}) {
    Bench b("corrector", 1, {}, false);
    std::optional<TransactResult> r;
    b.link->transact(write_req(reg::kISet, 1.5f), prio, [&](const TransactResult& x) { r = x; });
    drain(b);
    ASSERT_TRUE(r && r->ok());
    EXPECT_EQ(r->response.opcode, Opcode::kAck);
    EXPECT_EQ(r->latency(), 24'800);
    EXPECT_EQ(b.ctrl->setpoint(), 1.5f);
  }
  // a read: 32-bit request, 72-bit answer
  Bench b("corrector", 1, {}, false);
  b.ctrl->reg_write(reg::kISet, psc::float_to_word(0.25f));
  std::optional<TransactResult> r;
  b.link->transact(read_req(reg::kISet), Priority::kNormal, [&](const TransactResult& x) { r = x; });
  drain(b);
  ASSERT_TRUE(r && r->ok());
  EXPECT_EQ(r->latency(), 24'800);
  EXPECT_EQ(r->response.payload, (std::vector<std::uint32_t>{psc::float_to_word(0.25f)}));
}

TEST(Link, NormalThroughputAtLeastFortyThousandPerSecond) {
  Bench b("corrector", 1, {}, false);
  long done = 0;
  long bad = 0;
  std::function<void(const TransactResult&)> next;
  float v = 0.0f;
  auto issue = [&] {
    v += 1e-4f;
    b.link->transact(write_req(reg::kISet, v), Priority::kNormal, next);
  };
  next = [&](const TransactResult& r) {
    if (!r.ok() || r.nak()) ++bad;
    ++done;
    issue();
  };
  for (int k = 0; k < 4; ++k) issue();  // keep the queue non-empty
  b.sched.advance_until(sim::kNsPerSec);
  EXPECT_EQ(bad, 0);
  EXPECT_GE(done, 40'000);
  EXPECT_LE(done, 40'323);  // 1 s / 24.8 us
  EXPECT_GE(done, 10'000);
}

// Priority single-register writes under a saturated normal stream.
TEST(Link, PriorityLatencyUnderSaturation) {
  Bench b("corrector", 1, {}, false);
  std::function<void(const TransactResult&)> again;
  long normal_done = 0;
  long normal_bad = 0;
  again = [&](const TransactResult& r) {
    if (!r.ok() || r.nak()) ++normal_bad;
    ++normal_done;
    b.link->transact(write_req(reg::kWfOffset, 0.5f), Priority::kNormal, again, link::Origin::kPoll);
  };
  for (int k = 0; k < 4; ++k)
    b.link->transact(write_req(reg::kWfOffset, 0.5f), Priority::kNormal, again, link::Origin::kPoll);

  std::mt19937_64 rng(99);
  const int n = 10'000;
  sim::TimeNs t = 1'000;
  sim::TimeNs worst = 0;
  long prio_ok = 0;
  float last = 0.0f;
  for (int k = 0; k < n; ++k) {
    t += 30'000 + static_cast<sim::TimeNs>(rng() % 170'000);
    const float value = static_cast<float>(static_cast<int>(rng() % 6000) - 3000) * 1e-3f;
    last = value;
    b.sched.schedule_at(t, [&, value] {
      b.link->transact(
          write_req(reg::kISet, value), Priority::kHigh,
          [&](const TransactResult& r) {
            worst = std::max(worst, r.latency());
            if (r.ok() && !r.nak() && r.latency() <= 30'000) ++prio_ok;
          },
          link::Origin::kFeedback);
    });
  }
  b.sched.advance_until(t + 100'000);
  EXPECT_EQ(prio_ok, n);
  EXPECT_LE(worst, 30'000);
  EXPECT_EQ(b.ctrl->setpoint(), last);
  EXPECT_EQ(normal_bad, 0);
  EXPECT_GT(normal_done, 10'000);
  EXPECT_GT(b.link->state().aborted_frames, 0u);
  EXPECT_EQ(b.link->issued(Priority::kHigh, link::Origin::kFeedback), static_cast<std::uint64_t>(n));
  EXPECT_EQ(b.link->issued(Priority::kNormal, link::Origin::kFeedback), 0u);
  EXPECT_TRUE(reconciles(*b.link));
}

TEST(Link, SecondPriorityWhileBusyIsRejected) {
  Bench b("corrector", 1, {}, false);
  std::vector<LinkError> errs;
  auto cb = [&](const TransactResult& r) { errs.push_back(r.error); };
  b.link->transact(write_req(reg::kISet, 1.0f), Priority::kHigh, cb);
  b.link->transact(write_req(reg::kISet, 2.0f), Priority::kHigh, cb);
  drain(b);
  ASSERT_EQ(errs.size(), 2u);
  EXPECT_EQ(errs[0], LinkError::kPriorityBusy);
  EXPECT_EQ(errs[1], LinkError::kNone);
  EXPECT_EQ(b.ctrl->setpoint(), 1.0f);
}

TEST(Link, NakCarriesReason) {
  Bench b("corrector", 1, {}, false);
  std::optional<TransactResult> r;
  b.link->transact(write_req(reg::kIRead, 1.0f), Priority::kNormal, [&](const TransactResult& x) { r = x; });
  drain(b);
  ASSERT_TRUE(r && r->nak());
  EXPECT_EQ(r->response.payload, (std::vector<std::uint32_t>{static_cast<std::uint32_t>(psc::Nak::kReadOnly)}));
  EXPECT_EQ(b.link->state().nak_count, 1u);
}

// A break that happens between ticks is seen at the next tick boundary.
TEST(Link, TxBreakDetectedAtNextTickAndFailsPending) {
  Bench b("corrector", 1, {}, false);
  std::vector<TransactResult> res;
  auto cb = [&](const TransactResult& r) { res.push_back(r); };
  b.sched.schedule_at(30'000, [&] {
    b.link->transact(write_req(reg::kISet, 1.0f), Priority::kNormal, cb);
    b.link->transact(write_req(reg::kISet, 2.0f), Priority::kNormal, cb);
    b.link->set_link_broken(Direction::kTx, true);
  });
  std::vector<std::pair<sim::TimeNs, bool>> seen;
  b.link->add_state_observer([&](const link::LinkState& s) { seen.emplace_back(b.sched.now(), s.tx_broken); });
  b.sched.advance_until(39'999);
  EXPECT_FALSE(b.link->state().tx_broken);
  b.sched.advance_until(40'000);
  EXPECT_TRUE(b.link->state().tx_broken);
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_EQ(seen[0].first, 40'000);
  EXPECT_NE(b.ctrl->reg_read(reg::kStatus) & psc::status::kTxBroken, 0u);
  ASSERT_EQ(res.size(), 2u);
  EXPECT_EQ(res[0].error, LinkError::kLinkDown);
  EXPECT_EQ(res[1].error, LinkError::kLinkDown);
  EXPECT_EQ(b.ctrl->setpoint(), 0.0f);

  b.link->transact(write_req(reg::kISet, 1.0f), Priority::kHigh, cb);
  drain(b);
  EXPECT_EQ(res.back().error, LinkError::kLinkDown);

  b.link->set_link_broken(Direction::kTx, false);
  drain(b);
  EXPECT_FALSE(b.link->state().tx_broken);
  b.link->transact(write_req(reg::kISet, 1.0f), Priority::kNormal, cb);
  drain(b);
  EXPECT_TRUE(res.back().ok());
  EXPECT_TRUE(reconciles(*b.link));
}

TEST(Link, RxBreakTimesOutAndLatches) {
  Bench b("corrector", 1, {}, false);
  std::vector<TransactResult> res;
  auto cb = [&](const TransactResult& r) { res.push_back(r); };
  b.link->set_link_broken(Direction::kRx, true);
  b.sched.advance_until(20'000);
  EXPECT_TRUE(b.link->state().rx_broken);
  EXPECT_NE(b.ctrl->reg_read(reg::kStatus) & psc::status::kRxBroken, 0u);

  b.link->transact(write_req(reg::kISet, 1.0f), Priority::kNormal, cb);
  drain(b);
  ASSERT_EQ(res.size(), 1u);
  EXPECT_EQ(res[0].error, LinkError::kTimeout);
  EXPECT_EQ(res[0].latency(), 3 * 32'800);  // budget assumes a one-word (NAK) answer
  EXPECT_EQ(b.ctrl->setpoint(), 1.0f);  // the request got through
  EXPECT_EQ(b.link->state().timeouts, 1u);

  b.link->set_link_broken(Direction::kRx, false);
  drain(b);
  EXPECT_FALSE(b.link->state().rx_broken);
  b.link->transact(read_req(reg::kISet), Priority::kNormal, cb);
  drain(b);
  EXPECT_TRUE(res.back().ok());
}

// A corrupted frame is dropped by the receiver: the CRC counter moves, the
// transaction times out and the timeout latches rx_broken until the next good
// answer.
TEST(Link, BitErrorCountsCrcAndTimesOut) {
  Bench b("corrector", 1, {}, false);
  std::vector<TransactResult> res;
  auto cb = [&](const TransactResult& r) { res.push_back(r); };
  b.link->inject_bit_error(Direction::kTx, 40);
  b.link->transact(write_req(reg::kISet, 1.0f), Priority::kNormal, cb);
  drain(b);
  ASSERT_EQ(res.size(), 1u);
  EXPECT_EQ(res[0].error, LinkError::kTimeout);
  EXPECT_EQ(b.link->state().crc_err_count, 1u);
  EXPECT_EQ(b.ctrl->setpoint(), 0.0f);
  EXPECT_TRUE(b.link->state().rx_broken);

  b.link->inject_bit_error(Direction::kRx, 3);
  b.link->transact(write_req(reg::kISet, 2.0f), Priority::kNormal, cb);
  drain(b);
  EXPECT_EQ(res.back().error, LinkError::kTimeout);
  EXPECT_EQ(b.link->state().crc_err_count, 2u);
  EXPECT_EQ(b.ctrl->setpoint(), 2.0f);

  b.link->transact(write_req(reg::kISet, 3.0f), Priority::kNormal, cb);
  drain(b);
  EXPECT_TRUE(res.back().ok());
  EXPECT_FALSE(b.link->state().rx_broken);
  EXPECT_TRUE(reconciles(*b.link));
}

TEST(Link, PreemptedNormalFrameIsRetransmitted) {
  Bench b("corrector", 1, {}, false);
  std::vector<std::pair<char, TransactResult>> res;
  Frame block;
  block.opcode = Opcode::kBlockWrite;
  block.addr = reg::kWfOffset;
  block.payload = {psc::float_to_word(0.5f), psc::float_to_word(2.0f)};
  b.link->transact(block, Priority::kNormal, [&](const TransactResult& r) { res.emplace_back('n', r); });
  b.sched.schedule_at(5'000, [&] {
    b.link->transact(write_req(reg::kISet, 1.0f), Priority::kHigh,
                     [&](const TransactResult& r) { res.emplace_back('p', r); });
  });
  drain(b);
  ASSERT_EQ(res.size(), 2u);
  EXPECT_EQ(res[0].first, 'p');
  EXPECT_EQ(res[0].second.latency(), 24'800);
  EXPECT_EQ(res[1].first, 'n');
  EXPECT_TRUE(res[1].second.ok());
  EXPECT_EQ(b.link->state().aborted_frames, 1u);
  EXPECT_EQ(b.ctrl->reg_read(reg::kWfOffset), psc::float_to_word(0.5f));
  EXPECT_EQ(b.ctrl->reg_read(reg::kWfScale), psc::float_to_word(2.0f));
}

TEST(ControllerSlave, BlockOperations) {
  Bench b("corrector", 1, {}, false);
  psc::ControllerSlave& s = *b.slave;
  Frame rd;
  rd.opcode = Opcode::kBlockRead;
  rd.addr = reg::kMode;
  rd.payload = {9};
  b.ctrl->reg_write(reg::kISet, psc::float_to_word(1.25f));
  auto r = s.service(rd);
  ASSERT_EQ(r.opcode, Opcode::kAck);
  ASSERT_EQ(r.payload.size(), 9u);
  EXPECT_EQ(r.payload[1], psc::float_to_word(1.25f));
  EXPECT_EQ(r.payload[7], psc::float_to_word(1.0f));  // WF_SCALE default

  rd.payload = {0};
  EXPECT_EQ(s.service(rd).opcode, Opcode::kNak);
  rd.addr = 0xFF;
  rd.payload = {2};
  EXPECT_EQ(s.service(rd).opcode, Opcode::kNak);

  // download through the FIFO port
  s.service(write_req(reg::kDlCtrl, 0.0f));
  Frame ctrl;
  ctrl.opcode = Opcode::kWrite;
  ctrl.addr = reg::kDlCtrl;
  ctrl.payload = {static_cast<std::uint32_t>(psc::DlCommand::kBeginVolatile)};
  EXPECT_EQ(s.service(ctrl).opcode, Opcode::kAck);
  Frame data;
  data.opcode = Opcode::kBlockWrite;
  data.addr = reg::kDlData;
  for (float v : {0.0f, 1.0f, 2.0f, 1.0f}) data.payload.push_back(psc::float_to_word(v));
  EXPECT_EQ(s.service(data).opcode, Opcode::kAck);
  ctrl.payload = {static_cast<std::uint32_t>(psc::DlCommand::kCommit)};
  EXPECT_EQ(s.service(ctrl).opcode, Opcode::kAck);
  EXPECT_EQ(b.ctrl->waveform()->points, (std::vector<double>{0.0, 1.0, 2.0, 1.0}));

  // block write stops at the first NAK
  Frame bw;
  bw.opcode = Opcode::kBlockWrite;
  bw.addr = reg::kISet;
  bw.payload = {psc::float_to_word(0.5f), psc::float_to_word(9.0f)};
  r = s.service(bw);
  EXPECT_EQ(r.opcode, Opcode::kNak);
  EXPECT_EQ(r.addr, reg::kIRead);
  EXPECT_EQ(b.ctrl->setpoint(), 0.5f);

  Frame odd;
  odd.opcode = Opcode::kAck;
  EXPECT_EQ(s.service(odd).opcode, Opcode::kNak);
}
