#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pscsim/machine.hpp"
#include "rig.hpp"

using namespace pscsim;
using namespace pscsim::machine;
using testing_support::Rig;

namespace {

double rel_err(double got, double want) {
  const double scale = std::max(1.0, std::abs(want));
  return std::abs(got - want) / scale;
}

OpticKnobs random_knobs(std::mt19937_64& rng, double e0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  OpticKnobs q;
  q.e = e0 * (1.0 + 0.05 * u(rng));
  q.dq = {0.1 * u(rng), 0.1 * u(rng), 2.0 * u(rng), 2.0 * u(rng)};
  return q;
}

struct MachineRig {
  Rig rig;
  MachineConfig cfg;
  std::unique_ptr<MachineLayer> layer;

  explicit MachineRig(MachineConfig c, double i0 = 50.0) : cfg(std::move(c)) {
    for (const auto& f : cfg.families)
      for (const auto& m : f.members) rig.add(m.ps, "quadrupole", i0);
    layer = std::make_unique<MachineLayer>(*rig.server, cfg);
    rig.server->start(0);
  }
};

MachineConfig two_families() {
  return parse_machine_config(R"({
    "families": [
      {"name": "QA", "members": [{"ps": "QA-1"}, {"ps": "QA-2", "offset": 0.5, "scale": 1.01}]},
      {"name": "QB", "members": ["QB-1"]}
    ],
    "optic": {"E0": 2.4, "I0": {"QA": 100.0, "QB": 50.0},
              "M": {"QA": [2.0, 0, 0, 0], "QB": [0, -3.0, 0.1, 0]}}
  })");
}

}  // namespace

// ---------------------------------------------------------------------------
// optic arithmetic

TEST(Optic, TheoreticalPointGivesI0) {
  auto model = *toy_machine(7).optic;
  model.g.assign(model.size(), 1.0);
  OpticKnobs q;
  q.e = model.e0;
  const auto cur = optic_currents(model, q);
  ASSERT_EQ(cur.size(), 40u);
  for (std::size_t f = 0; f < cur.size(); ++f) EXPECT_EQ(cur[f], model.i0[f]);
}

TEST(Optic, SingleKnobArithmetic) {
  const auto cfg = two_families();
  OpticKnobs q;
  q.e = 2.4;
  q.dq[0] = 0.05;
  const auto cur = optic_currents(*cfg.optic, q);
  EXPECT_DOUBLE_EQ(cur[0], 100.1);
  EXPECT_DOUBLE_EQ(cur[1], 50.0);
  q.e = 2.4 * 1.1;
  EXPECT_DOUBLE_EQ(optic_currents(*cfg.optic, q)[1], 55.0);
}

TEST(Optic, MatchesBruteForceOnFortyFamilies) {
  const auto model = *toy_machine(11).optic;
  ASSERT_EQ(model.size(), 40u);
  std::mt19937_64 rng(3);
  double worst = 0.0;
  for (int trial = 0; trial < 2000; ++trial) {
    const auto q = random_knobs(rng, model.e0);
    const auto got = optic_currents(model, q);
    const auto want = oracle::optic_brute(model.e0, model.i0, model.m, model.g, q.e, q.dq);
    for (std::size_t f = 0; f < got.size(); ++f) worst = std::max(worst, rel_err(got[f], want[f]));
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Optic, SuperpositionAtFixedEnergy) {
  const auto model = *toy_machine(12).optic;
  std::mt19937_64 rng(4);
  OpticKnobs base;
  base.e = model.e0;
  const auto i_base = oracle::optic_brute(model.e0, model.i0, model.m, model.g, base.e, base.dq);
  double worst = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    auto a = random_knobs(rng, model.e0);
    auto b = random_knobs(rng, model.e0);
    a.e = b.e = model.e0;
    OpticKnobs ab = base;
    for (std::size_t k = 0; k < kKnobCount; ++k) ab.dq[k] = a.dq[k] + b.dq[k];
    const auto ia = optic_currents(model, a);
    const auto ib = optic_currents(model, b);
    const auto iab = optic_currents(model, ab);
    for (std::size_t f = 0; f < model.size(); ++f) {
      const double lhs = (ia[f] - i_base[f]) + (ib[f] - i_base[f]);
      const double rhs = iab[f] - i_base[f];
      worst = std::max(worst, rel_err(lhs, rhs) * std::max(1.0, std::abs(rhs)) / std::max(1.0, std::abs(iab[f])));
    }
  }
  EXPECT_LT(worst, 1e-12);
}

// ---------------------------------------------------------------------------
// config

TEST(MachineConfig, ToyMachineRoundTripsAndLoads) {
  const auto cfg = toy_machine(5);
  ASSERT_EQ(cfg.families.size(), 40u);
  int quads = 0, sext = 0;
  for (const auto& f : cfg.families) (f.name.rfind("QF", 0) == 0 ? quads : sext)++;
  EXPECT_EQ(quads, 31);
  EXPECT_EQ(sext, 9);
  const auto back = parse_machine_config(machine_config_to_json(cfg));
  ASSERT_TRUE(back.optic);
  EXPECT_EQ(back.optic->families, cfg.optic->families);
  EXPECT_EQ(back.optic->i0, cfg.optic->i0);
  EXPECT_EQ(back.optic->m, cfg.optic->m);
  EXPECT_EQ(back.families[3].members[1].offset, cfg.families[3].members[1].offset);
}

TEST(MachineConfig, Errors) {
  auto code_of = [](const char* text) {
    try {
      parse_machine_config(text);
    } catch (const MachineConfigError& e) {
      return e.code();
    }
    return std::string("none");
  };
  EXPECT_EQ(code_of(R"({"families":[{"name":"A","members":["P1"]},{"name":"B","members":["P1"]}]})"),
            "duplicate_member");
  EXPECT_EQ(code_of(R"({"families":[{"name":"A","members":["P1","P1"]}]})"), "duplicate_member");
  EXPECT_EQ(code_of(R"({"families":[{"name":"A","members":["P1"]}],
                        "optic":{"E0":1,"I0":{"A":1},"M":{"A":[1,2,3]}}})"),
            "dimension");
  EXPECT_EQ(code_of(R"({"families":[{"name":"A","members":["P1"]},{"name":"B","members":["P2"]}],
                        "optic":{"E0":1,"I0":{"A":1,"B":2},"M":{"A":[1,2,3,4]}}})"),
            "dimension");
  EXPECT_EQ(code_of(R"({"families":[{"name":"A","members":["P1"]}],
                        "optic":{"E0":1,"I0":{"Z":1},"M":{"Z":[1,2,3,4]}}})"),
            "unknown_family");
  EXPECT_EQ(code_of(R"({"families":[{"name":"A","members":["P1"]}],
                        "optic":{"E0":1,"I0":{"A":1},"M":{"A":[1,2,3,4]},"g":{"A":0}}})"),
            "schema");
  EXPECT_EQ(code_of(R"({"families":)"), "schema");
  EXPECT_EQ(code_of(R"({"families":[{"name":"A","members":[]}]})"), "schema");
}

// ---------------------------------------------------------------------------
// machine layer

TEST(MachineLayer, FamilyPutAppliesOffsetAndScale) {
  MachineRig m(two_families());
  auto res = m.rig.put("QA:I-SET", 80.0);
  ASSERT_TRUE(res.ok) << res.error;
  EXPECT_EQ(std::get<double>(m.rig.get("QA-1:I-SET")), 80.0);
  EXPECT_NEAR(std::get<double>(m.rig.get("QA-2:I-SET")), 1.01 * 80.0 + 0.5, 1e-5);
  EXPECT_EQ(std::get<double>(m.rig.get("QA:I-SET")), 80.0);
  m.rig.run_for(2 * sim::kNsPerSec);
  // family read-back is expressed in family units
  EXPECT_NEAR(std::get<double>(m.rig.get("QA:I-READ")), 80.0, 1e-3);
  EXPECT_EQ(std::get<std::string>(m.rig.get("QA:COMPARE")), "ok");
  EXPECT_EQ(std::get<std::string>(m.rig.get("QA:MODE")), "on");
}

TEST(MachineLayer, FamilyChannelsMirrorPsChannels) {
  MachineRig m(two_families());
  const auto& ps = chan::ps_channel_suffixes();
  for (const auto& s : MachineLayer::family_suffixes()) {
    EXPECT_NE(std::find(ps.begin(), ps.end(), s), ps.end()) << s;
    EXPECT_TRUE(m.rig.server->has("QA:" + s)) << s;
    // same value type as the single-PS channel
    EXPECT_EQ(m.rig.get("QA:" + s).index(), m.rig.get("QA-1:" + s).index()) << s;
  }
}

TEST(MachineLayer, RejectedFamilyPutIsAtomic) {
  MachineRig m(two_families());
  // QA-2 would need 1.01 * 119 + 0.5 > 120 A
  auto res = m.rig.put("QA:I-SET", 119.0);
  EXPECT_FALSE(res.ok);
  EXPECT_EQ(res.error, "out_of_range");
  EXPECT_EQ(std::get<double>(m.rig.get("QA-1:I-SET")), 50.0);
  EXPECT_EQ(std::get<double>(m.rig.get("QA-2:I-SET")), 50.0);

  m.rig.unit("QA-2").ctrl->set_local(true);
  m.rig.run_for(200 * sim::kNsPerMs);
  res = m.rig.put("QA:I-SET", 60.0);
  EXPECT_EQ(res.error, "member_not_ready");
  EXPECT_EQ(std::get<double>(m.rig.get("QA-1:I-SET")), 50.0);
  EXPECT_EQ(std::get<double>(m.rig.get("QA:I-SET")), 0.0);
  // refused before any member write, so no NAK and no local-mode alarm
  EXPECT_EQ(std::get<bool>(m.rig.get("QA-2:LOCAL")), true);
  EXPECT_EQ(std::get<std::string>(m.rig.get("QA:ALARM")), "");
}

TEST(MachineLayer, AggregatesWorstMember) {
  MachineRig m(two_families());
  m.rig.run_for(300 * sim::kNsPerMs);
  EXPECT_EQ(std::get<std::string>(m.rig.get("QA:HYST-STATE")), "off_branch");
  ASSERT_TRUE(m.rig.server->standardize("QA-1").ok);
  ASSERT_TRUE(m.rig.server->standardize("QA-2").ok);
  m.rig.run_for(200 * sim::kNsPerMs);
  EXPECT_EQ(std::get<std::int64_t>(m.rig.get("QA:CYCLE-CMD")), 1);
  EXPECT_EQ(std::get<std::string>(m.rig.get("QA:RAMP-STATE")), "cycling");
  m.rig.run_for(90 * sim::kNsPerSec);
  EXPECT_EQ(std::get<std::string>(m.rig.get("QA:HYST-STATE")), "on_branch");
  EXPECT_EQ(std::get<std::string>(m.rig.get("QA:RAMP-STATE")), "done");

  m.rig.unit("QA-2").link->set_link_broken(link::Direction::kRx, true);
  m.rig.run_for(100'000);
  EXPECT_EQ(m.rig.server->get("QA:ALARM").alarm, chan::Severity::kMajor);
  m.rig.unit("QA-2").link->set_link_broken(link::Direction::kRx, false);
  m.rig.run_for(300 * sim::kNsPerMs);
  EXPECT_EQ(m.rig.server->get("QA:ALARM").alarm, chan::Severity::kNone);
}

TEST(MachineLayer, OpticPutSmallIsDirectLargeIsRamp) {
  MachineRig m(two_families(), 0.0);
  OpticKnobs q;
  q.e = 2.4;
  std::optional<chan::PutResult> res;
  m.layer->optic_put(q, [&](const chan::PutResult& r) { res = r; });
  ASSERT_TRUE(res && res->ok) << (res ? res->error : "no reply");
  ASSERT_TRUE(m.layer->last_ramp());
  m.rig.run_for(1500 * sim::kNsPerMs);
  EXPECT_EQ(m.rig.server->job(*m.layer->last_ramp())->state, chan::JobState::kDone);
  EXPECT_EQ(std::get<double>(m.rig.get("QA-1:I-SET")), 100.0);
  EXPECT_NEAR(std::get<double>(m.rig.get("QA-2:I-SET")), 101.5, 1e-5);
  EXPECT_EQ(std::get<double>(m.rig.get("QB-1:I-SET")), 50.0);
  EXPECT_EQ(std::get<double>(m.rig.get("QA:I-SET")), 100.0);

  // 0.05 tune units move QA by 0.1 A, below 1% of 120 A
  ASSERT_TRUE(m.rig.put("OPTIC:DNUX", 0.05).ok);
  EXPECT_EQ(std::get<double>(m.rig.get("QA-1:I-SET")), 100.0);
  res.reset();
  auto put = m.rig.put("OPTIC:APPLY", true);
  ASSERT_TRUE(put.ok) << put.error;
  EXPECT_FALSE(m.layer->last_ramp());
  EXPECT_NEAR(std::get<double>(m.rig.get("QA-1:I-SET")), 100.1, 1e-5);
  EXPECT_EQ(m.layer->knobs().dq[0], 0.05);

  // rejected transition leaves every member untouched
  q.e = 2.4 * 1.3;
  res.reset();
  m.layer->optic_put(q, [&](const chan::PutResult& r) { res = r; });
  ASSERT_TRUE(res);
  EXPECT_EQ(res->error, "out_of_range");
  EXPECT_NEAR(std::get<double>(m.rig.get("QA-1:I-SET")), 100.1, 1e-5);
  EXPECT_EQ(m.layer->knobs().dq[0], 0.05);
  EXPECT_EQ(m.layer->knobs().e, 2.4);
}

TEST(MachineLayer, ToyMachineOpticMatchesOracleOnMembers) {
  auto cfg = toy_machine(21, 1);
  MachineRig m(cfg, 0.0);
  const auto& model = *cfg.optic;
  OpticKnobs q;
  q.e = model.e0 * 1.01;
  q.dq = {0.03, -0.02, 0.5, -0.4};
  std::optional<chan::PutResult> res;
  m.layer->optic_put(q, [&](const chan::PutResult& r) { res = r; });
  ASSERT_TRUE(res && res->ok) << (res ? res->error : "no reply");
  m.rig.run_for(1200 * sim::kNsPerMs);
  const auto want = oracle::optic_brute(model.e0, model.i0, model.m, model.g, q.e, q.dq);
  for (std::size_t f = 0; f < model.size(); ++f) {
    const auto& mem = cfg.families[f].members[0];
    const double target = mem.scale * want[f] + mem.offset;
    EXPECT_EQ(std::get<double>(m.rig.get(mem.ps + ":I-SET")), static_cast<double>(static_cast<float>(target)))
        << mem.ps;
  }
}
