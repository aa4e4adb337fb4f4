#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "pscsim/protocol.hpp"
#include "rig.hpp"

using namespace pscsim;
using json = nlohmann::json;
using testing_support::Rig;

namespace {

struct Client {
  Rig rig;
  std::vector<json> out;
  std::unique_ptr<proto::Session> session;

  Client() {
    rig.add("SR-QF01", "quadrupole", 40.0);
    rig.server->start(0);
    session = std::make_unique<proto::Session>(*rig.server, [this](std::string s) {
      EXPECT_EQ(s.find('\n'), std::string::npos);
      out.push_back(json::parse(s));
    });
  }

  json request(const std::string& line) {
    const auto before = out.size();
    session->handle_line(line);
    for (int i = 0; i < 100 && out.size() == before; ++i) rig.run_for(10'000);
    if (out.size() == before) return json();
    return out.back();
  }
};

}  // namespace

TEST(Protocol, GetReply) {
  Client c;
  const auto r = c.request(R"({"op":"get","name":"SR-QF01:I-SET","id":7})");
  EXPECT_EQ(r["id"], 7);
  EXPECT_EQ(r["ok"], true);
  EXPECT_NEAR(r["value"].get<double>(), 40.0, 1e-4);
  EXPECT_TRUE(r["error"].is_null());
  EXPECT_EQ(r.size(), 4u);
}

TEST(Protocol, PutRoundTrip) {
  Client c;
  const auto r = c.request(R"({"op":"put","name":"SR-QF01:I-SET","value":41.5,"id":"a"})");
  EXPECT_EQ(r["id"], "a");
  EXPECT_EQ(r["ok"], true);
  EXPECT_TRUE(r["value"].is_null());
  const auto g = c.request(R"({"op":"get","name":"SR-QF01:I-SET","id":"b"})");
  EXPECT_NEAR(g["value"].get<double>(), 41.5, 1e-4);
}

TEST(Protocol, ErrorReplies) {
  Client c;
  EXPECT_EQ(c.request("not json")["error"], "bad_request");
  EXPECT_TRUE(c.out.back()["id"].is_null());
  EXPECT_EQ(c.request("[1,2]")["error"], "bad_request");
  EXPECT_EQ(c.request(R"({"id":1})")["error"], "bad_request");
  EXPECT_EQ(c.request(R"({"op":"frobnicate","name":"x","id":2})")["error"], "bad_request");
  EXPECT_EQ(c.request(R"({"op":"get","id":3})")["error"], "bad_request");
  EXPECT_EQ(c.request(R"({"op":"put","name":"SR-QF01:I-SET","id":4})")["error"], "bad_request");
  EXPECT_EQ(c.request(R"({"op":"put","name":"SR-QF01:I-SET","value":null,"id":5})")["error"], "type_mismatch");
  const auto r = c.request(R"({"op":"get","name":"NOPE","id":6})");
  EXPECT_EQ(r["ok"], false);
  EXPECT_EQ(r["error"], "no_such_channel");
  EXPECT_EQ(r["id"], 6);
  EXPECT_EQ(c.request(R"({"op":"unmonitor","name":"SR-QF01:I-SET","id":8})")["error"], "not_monitored");
  EXPECT_EQ(c.request(R"({"op":"unmonitor","name":"NOPE","id":9})")["error"], "no_such_channel");
  // blank lines get no reply
  const auto n = c.out.size();
  c.session->handle_line("  \r");
  EXPECT_EQ(c.out.size(), n);
}

TEST(Protocol, MonitorEvents) {
  Client c;
  const auto r = c.request(R"({"op":"monitor","name":"SR-QF01:I-SET","id":1})");
  EXPECT_EQ(r["ok"], true);
  EXPECT_NEAR(r["value"].get<double>(), 40.0, 1e-4);
  EXPECT_EQ(c.session->subscriptions(), 1u);
  // a second monitor of the same channel does not double the events
  c.request(R"({"op":"monitor","name":"SR-QF01:I-SET","id":2})");
  EXPECT_EQ(c.session->subscriptions(), 1u);

  c.out.clear();
  c.session->handle_line(R"({"op":"put","name":"SR-QF01:I-SET","value":45.0,"id":3})");
  c.rig.run_for(sim::kNsPerMs);
  int updates = 0;
  for (const auto& m : c.out) {
    if (!m.contains("ev")) continue;
    ++updates;
    EXPECT_EQ(m["ev"], "update");
    EXPECT_EQ(m["name"], "SR-QF01:I-SET");
    EXPECT_NEAR(m["value"].get<double>(), 45.0, 1e-4);
    EXPECT_EQ(m["alarm"], "none");
    EXPECT_GT(m["t_ns"].get<std::int64_t>(), 0);
  }
  EXPECT_EQ(updates, 1);

  EXPECT_EQ(c.request(R"({"op":"unmonitor","name":"SR-QF01:I-SET","id":4})")["ok"], true);
  EXPECT_EQ(c.session->subscriptions(), 0u);
  c.out.clear();
  c.session->handle_line(R"({"op":"put","name":"SR-QF01:I-SET","value":46.0,"id":5})");
  c.rig.run_for(sim::kNsPerMs);
  for (const auto& m : c.out) EXPECT_FALSE(m.contains("ev"));
}

TEST(Protocol, ListFiltersByPrefix) {
  Client c;
  const auto all = c.request(R"({"op":"list","id":1})");
  ASSERT_TRUE(all["value"].is_array());
  EXPECT_EQ(all["value"].size(), c.rig.server->names().size());
  const auto some = c.request(R"({"op":"list","name":"SR-QF01:I-","id":2})");
  for (const auto& n : some["value"]) EXPECT_EQ(n.get<std::string>().rfind("SR-QF01:I-", 0), 0u);
  EXPECT_GE(some["value"].size(), 2u);
}

TEST(Protocol, CloseDropsSubscriptionsAndReplies) {
  Client c;
  c.request(R"({"op":"monitor","name":"SR-QF01:I-SET","id":1})");
  c.session->handle_line(R"({"op":"put","name":"SR-QF01:I-SET","value":42.0,"id":2})");
  c.session->close();
  EXPECT_EQ(c.session->subscriptions(), 0u);
  const auto n = c.out.size();
  c.rig.run_for(sim::kNsPerMs);
  EXPECT_EQ(c.out.size(), n);
  c.session->handle_line(R"({"op":"get","name":"SR-QF01:I-SET","id":3})");
  EXPECT_EQ(c.out.size(), n);
}

TEST(Protocol, Encoders) {
  EXPECT_EQ(proto::encode_value(chan::Value{true}), "true");
  EXPECT_EQ(proto::encode_value(chan::Value{std::int64_t{3}}), "3");
  EXPECT_EQ(proto::encode_value(chan::Value{std::string("on")}), "\"on\"");
  EXPECT_EQ(proto::encode_value(chan::Value{std::nan("")}), "null");
  const auto r = json::parse(proto::encode_reply("12", false, "null", "timeout"));
  EXPECT_EQ(r, json({{"id", 12}, {"ok", false}, {"value", nullptr}, {"error", "timeout"}}));
  chan::Update u;
  u.name = "X";
  u.value = 1.5;
  u.alarm = chan::Severity::kMajor;
  u.t_ns = 20'000;
  const auto e = json::parse(proto::encode_update(u));
  EXPECT_EQ(e, json({{"ev", "update"}, {"name", "X"}, {"value", 1.5}, {"alarm", "major"}, {"t_ns", 20000}}));
}
