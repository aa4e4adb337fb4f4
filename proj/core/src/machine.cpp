#include "pscsim/machine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pscsim/channel_server.hpp"

namespace pscsim::machine {

using nlohmann::json;

void OpticModel::validate() const {
  if (!(e0 > 0.0) || !std::isfinite(e0)) throw MachineConfigError("schema", "E0 must be > 0");
  const std::size_t n = families.size();
  if (i0.size() != n || m.size() != n || g.size() != n)
    throw MachineConfigError("dimension", "optic arrays must have one entry per family");
  for (std::size_t f = 0; f < n; ++f) {
    if (!std::isfinite(i0[f])) throw MachineConfigError("schema", "I0 of " + families[f] + " not finite");
    if (!(g[f] > 0.0) || !std::isfinite(g[f]))
      throw MachineConfigError("schema", "gradient of " + families[f] + " must be > 0");
    for (double v : m[f])
      if (!std::isfinite(v)) throw MachineConfigError("schema", "M row of " + families[f] + " not finite");
  }
}

std::vector<double> optic_currents(const OpticModel& model, const OpticKnobs& q) {
  std::vector<double> out(model.size());
  const double ratio = q.e / model.e0;
  for (std::size_t f = 0; f < model.size(); ++f) {
    double acc = model.i0[f];
    for (std::size_t k = 0; k < kKnobCount; ++k) acc += model.m[f][k] * q.dq[k];
    out[f] = model.g[f] * ratio * acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// config file

namespace {

double number_field(const json& j, const char* key, double fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number()) throw MachineConfigError("schema", where + "." + key + " must be a number");
  return j[key].get<double>();
}

}  // namespace

MachineConfig parse_machine_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw MachineConfigError("schema", e.what());
  }
  if (!j.is_object()) throw MachineConfigError("schema", "machine config must be an object");
  MachineConfig cfg;

  if (j.contains("families")) {
    if (!j["families"].is_array()) throw MachineConfigError("schema", "families must be an array");
    std::set<std::string> names;
    std::set<std::string> members;
    for (const auto& fj : j["families"]) {
      if (!fj.is_object() || !fj.contains("name") || !fj["name"].is_string())
        throw MachineConfigError("schema", "family needs a name");
      FamilySpec fam;
      fam.name = fj["name"].get<std::string>();
      if (!names.insert(fam.name).second)
        throw MachineConfigError("schema", "duplicate family " + fam.name);
      if (!fj.contains("members") || !fj["members"].is_array() || fj["members"].empty())
        throw MachineConfigError("schema", "family " + fam.name + " needs members");
      for (const auto& mj : fj["members"]) {
        FamilyMember m;
        if (mj.is_string()) {
          m.ps = mj.get<std::string>();
        } else if (mj.is_object() && mj.contains("ps") && mj["ps"].is_string()) {
          m.ps = mj["ps"].get<std::string>();
          m.offset = number_field(mj, "offset", 0.0, fam.name);
          m.scale = number_field(mj, "scale", 1.0, fam.name);
        } else {
          throw MachineConfigError("schema", "member of " + fam.name + " needs a ps id");
        }
        if (!std::isfinite(m.offset) || !std::isfinite(m.scale))
          throw MachineConfigError("schema", "member " + m.ps + " offset/scale not finite");
        if (!members.insert(m.ps).second)
          throw MachineConfigError("duplicate_member", m.ps + " is listed more than once");
        fam.members.push_back(std::move(m));
      }
      fam.set_value = number_field(fj, "set_value", 0.0, fam.name);
      cfg.families.push_back(std::move(fam));
    }
  }

  if (j.contains("optic") && !j["optic"].is_null()) {
    const auto& oj = j["optic"];
    if (!oj.is_object()) throw MachineConfigError("schema", "optic must be an object");
    if (!oj.contains("I0") || !oj["I0"].is_object() || !oj.contains("M") || !oj["M"].is_object())
      throw MachineConfigError("schema", "optic needs I0 and M objects");
    OpticModel model;
    model.e0 = number_field(oj, "E0", 0.0, "optic");
    std::set<std::string> known;
    for (const auto& f : cfg.families) known.insert(f.name);
    for (const auto& [name, _] : oj["I0"].items())
      if (!known.count(name)) throw MachineConfigError("unknown_family", "I0 names " + name);
    for (const auto& [name, _] : oj["M"].items())
      if (!known.count(name)) throw MachineConfigError("unknown_family", "M names " + name);
    if (oj.contains("g")) {
      if (!oj["g"].is_object()) throw MachineConfigError("schema", "g must be an object");
      for (const auto& [name, _] : oj["g"].items())
        if (!oj["I0"].contains(name)) throw MachineConfigError("unknown_family", "g names " + name);
    }
    if (oj["M"].size() != oj["I0"].size())
      throw MachineConfigError("dimension", "M has " + std::to_string(oj["M"].size()) +
                                                " rows, expected " + std::to_string(oj["I0"].size()));
    for (const auto& fam : cfg.families) {
      if (!oj["I0"].contains(fam.name)) continue;
      if (!oj["I0"][fam.name].is_number()) throw MachineConfigError("schema", "I0 of " + fam.name);
      if (!oj["M"].contains(fam.name))
        throw MachineConfigError("dimension", "M has no row for " + fam.name);
      const auto& row = oj["M"][fam.name];
      if (!row.is_array() || row.size() != kKnobCount)
        throw MachineConfigError("dimension", "M row of " + fam.name + " must have 4 entries");
      std::array<double, kKnobCount> r{};
      for (std::size_t k = 0; k < kKnobCount; ++k) {
        if (!row[k].is_number()) throw MachineConfigError("schema", "M row of " + fam.name);
        r[k] = row[k].get<double>();
      }
      model.families.push_back(fam.name);
      model.i0.push_back(oj["I0"][fam.name].get<double>());
      model.m.push_back(r);
      double g = 1.0;
      if (oj.contains("g") && oj["g"].contains(fam.name)) {
        if (!oj["g"][fam.name].is_number()) throw MachineConfigError("schema", "g of " + fam.name);
        g = oj["g"][fam.name].get<double>();
      }
      model.g.push_back(g);
    }
    model.validate();
    cfg.optic = std::move(model);
  }
  return cfg;
}

MachineConfig load_machine_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MachineConfigError("schema", "cannot open machine config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_machine_config(ss.str());
}

std::string machine_config_to_json(const MachineConfig& cfg) {
  json j;
  j["families"] = json::array();
  for (const auto& f : cfg.families) {
    json fj;
    fj["name"] = f.name;
    fj["members"] = json::array();
    for (const auto& m : f.members) fj["members"].push_back({{"ps", m.ps}, {"offset", m.offset}, {"scale", m.scale}});
    j["families"].push_back(fj);
  }
  if (cfg.optic) {
    const auto& o = *cfg.optic;
    json oj;
    oj["E0"] = o.e0;
    for (std::size_t f = 0; f < o.size(); ++f) {
      oj["I0"][o.families[f]] = o.i0[f];
      oj["M"][o.families[f]] = o.m[f];
      oj["g"][o.families[f]] = o.g[f];
    }
    j["optic"] = oj;
  }
  return j.dump(1);
}

MachineConfig toy_machine(std::uint64_t seed, std::size_t members_per_family) {
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  MachineConfig cfg;
  OpticModel model;
  model.e0 = 2.4;
  auto add = [&](const std::string& prefix, int count, double i_lo, double i_hi, double m_span) {
    for (int f = 1; f <= count; ++f) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%s%02d", prefix.c_str(), f);
      FamilySpec fam;
      fam.name = buf;
      for (std::size_t k = 1; k <= members_per_family; ++k) {
        FamilyMember m;
        m.ps = fam.name + "-" + std::to_string(k);
        m.offset = uni(-0.5, 0.5);
        m.scale = uni(0.99, 1.01);
        fam.members.push_back(m);
      }
      model.families.push_back(fam.name);
      model.i0.push_back(uni(i_lo, i_hi));
      std::array<double, kKnobCount> row{};
      for (auto& v : row) v = uni(-m_span, m_span);
      model.m.push_back(row);
      model.g.push_back(uni(0.97, 1.03));
      cfg.families.push_back(std::move(fam));
    }
  };
  add("QF", 31, 40.0, 90.0, 20.0);
  add("SX", 9, 20.0, 60.0, 10.0);
  cfg.optic = std::move(model);
  return cfg;
}

// ---------------------------------------------------------------------------
// machine layer

namespace {

struct Join {
  chan::Reply reply;
  std::size_t remaining = 0;
  std::string error;

  void done(const chan::PutResult& r) {
    if (!r.ok && error.empty()) error = r.error;
    if (--remaining == 0 && reply)
      reply(error.empty() ? chan::PutResult::success() : chan::PutResult::failure(error));
  }
};

int compare_rank(const std::string& s) {
  if (s == "alarm") return 3;
  if (s == "off") return 2;
  if (s == "suppressed") return 1;
  return 0;
}

int ramp_rank(const std::string& s) {
  if (s == "cycling") return 5;
  if (s == "ramping") return 4;
  if (s == "pending") return 3;
  if (s == "failed") return 2;
  if (s == "done") return 1;
  return 0;
}

std::string str(const chan::GetResult& r) {
  const auto* s = std::get_if<std::string>(&r.value);
  return s ? *s : std::string();
}

}  // namespace

const std::vector<std::string>& MachineLayer::family_suffixes() {
  static const std::vector<std::string> s = {"I-SET",     "I-READ", "MODE",  "COMPARE",
                                             "HYST-STATE", "CYCLE-CMD", "ALARM", "RAMP-STATE"};
  return s;
}

MachineLayer::MachineLayer(chan::ChannelServer& server, MachineConfig cfg, double ramp_duration_s)
    : server_(server), cfg_(std::move(cfg)), ramp_duration_s_(ramp_duration_s) {
  for (std::size_t f = 0; f < cfg_.families.size(); ++f) {
    const auto& fam = cfg_.families[f];
    if (!family_index_.emplace(fam.name, f).second)
      throw MachineConfigError("schema", "duplicate family " + fam.name);
    for (const auto& m : fam.members) {
      if (!server_.has_ps(m.ps)) throw MachineConfigError("schema", "family " + fam.name + " names unknown PS " + m.ps);
      if (!ps_family_.emplace(m.ps, f).second)
        throw MachineConfigError("duplicate_member", m.ps + " belongs to two families");
    }
  }
  if (cfg_.optic) {
    cfg_.optic->validate();
    for (const auto& name : cfg_.optic->families)
      if (!family_index_.count(name)) throw MachineConfigError("unknown_family", name);
    knobs_.e = cfg_.optic->e0;
  }
  pending_ = knobs_;
  register_channels();
}

const FamilySpec& MachineLayer::family(const std::string& name) const {
  auto it = family_index_.find(name);
  if (it == family_index_.end()) throw std::out_of_range("unknown family " + name);
  return cfg_.families[it->second];
}

void MachineLayer::register_channels() {
  for (std::size_t f = 0; f < cfg_.families.size(); ++f) {
    const std::string base = cfg_.families[f].name + ":";
    server_.add_soft(base + "I-SET", cfg_.families[f].set_value,
                     [this, f](const chan::Value& v, chan::Reply reply) {
                       auto n = chan::as_number(v);
                       if (!n || !std::isfinite(*n)) return reply(chan::PutResult::failure("type_mismatch"));
                       family_put(cfg_.families[f].name, *n, std::move(reply));
                     });
    server_.add_soft(base + "I-READ", 0.0);
    server_.add_soft(base + "MODE", std::string("off"), [this, f](const chan::Value& v, chan::Reply reply) {
      const auto& fam = cfg_.families[f];
      auto join = std::make_shared<Join>();
      join->reply = std::move(reply);
      join->remaining = fam.members.size();
      for (const auto& m : fam.members)
        server_.put(m.ps + ":MODE", v, [join](const chan::PutResult& r) { join->done(r); });
    });
    server_.add_soft(base + "COMPARE", std::string("off"));
    server_.add_soft(base + "HYST-STATE", std::string("on_branch"));
    server_.add_soft(base + "CYCLE-CMD", std::int64_t{0}, [this, f](const chan::Value& v, chan::Reply reply) {
      auto b = chan::as_bool(v);
      if (!b) return reply(chan::PutResult::failure("type_mismatch"));
      if (!*b) return reply(chan::PutResult::success());
      const auto& fam = cfg_.families[f];
      for (const auto& m : fam.members) {
        if (!server_.ps_ready(m.ps)) return reply(chan::PutResult::failure("member_not_ready"));
        if (server_.ps_busy(m.ps)) return reply(chan::PutResult::failure("busy"));
      }
      std::string error;
      for (const auto& m : fam.members) {
        auto s = server_.standardize(m.ps);
        if (!s.ok && error.empty()) error = s.error;
      }
      reply(error.empty() ? chan::PutResult::success() : chan::PutResult::failure(error));
    });
    server_.add_soft(base + "ALARM", std::string());
    server_.add_soft(base + "RAMP-STATE", std::string("idle"));

    for (const auto& m : cfg_.families[f].members) {
      for (const char* suffix : {"I-READ", "MODE", "COMPARE", "HYST-STATE", "CYCLE-CMD", "ALARM", "RAMP-STATE"})
        server_.monitor(m.ps + ":" + suffix, [this, f](const chan::Update&) { refresh(f); });
    }
    refresh(f);
  }

  if (!cfg_.optic) return;
  const char* knob_names[] = {"OPTIC:DNUX", "OPTIC:DNUY", "OPTIC:DXIX", "OPTIC:DXIY"};
  server_.add_soft("OPTIC:E", knobs_.e, [this](const chan::Value& v, chan::Reply reply) {
    auto n = chan::as_number(v);
    if (!n || !(*n > 0.0) || !std::isfinite(*n)) return reply(chan::PutResult::failure("invalid_value"));
    pending_.e = *n;
    server_.set_soft("OPTIC:E", *n);
    reply(chan::PutResult::success());
  });
  for (std::size_t k = 0; k < kKnobCount; ++k) {
    const std::string name = knob_names[k];
    server_.add_soft(name, 0.0, [this, k, name](const chan::Value& v, chan::Reply reply) {
      auto n = chan::as_number(v);
      if (!n || !std::isfinite(*n)) return reply(chan::PutResult::failure("type_mismatch"));
      pending_.dq[k] = *n;
      server_.set_soft(name, *n);
      reply(chan::PutResult::success());
    });
  }
  server_.add_soft("OPTIC:APPLY", std::int64_t{0}, [this](const chan::Value& v, chan::Reply reply) {
    auto b = chan::as_bool(v);
    if (!b) return reply(chan::PutResult::failure("type_mismatch"));
    if (!*b) return reply(chan::PutResult::success());
    optic_put(pending_, std::move(reply));
  });
}

void MachineLayer::refresh(std::size_t f) {
  const auto& fam = cfg_.families[f];
  const std::string base = fam.name + ":";
  double read_sum = 0.0;
  std::string mode;
  bool mixed = false;
  std::string compare = "ok";
  bool off_branch = false;
  std::int64_t cycling = 0;
  chan::Severity worst = chan::Severity::kNone;
  std::string reasons;
  std::string ramp = "idle";
  for (const auto& m : fam.members) {
    const std::string p = m.ps + ":";
    if (auto n = chan::as_number(server_.get(p + "I-READ").value)) read_sum += (*n - m.offset) / m.scale;
    const std::string md = str(server_.get(p + "MODE"));
    if (mode.empty()) mode = md;
    else if (md != mode) mixed = true;
    const std::string c = str(server_.get(p + "COMPARE"));
    if (compare_rank(c) > compare_rank(compare)) compare = c;
    if (str(server_.get(p + "HYST-STATE")) == "off_branch") off_branch = true;
    const auto cycle = server_.get(p + "CYCLE-CMD");
    if (const auto* cc = std::get_if<std::int64_t>(&cycle.value)) cycling = std::max(cycling, *cc);
    const auto alarm = server_.get(p + "ALARM");
    if (alarm.alarm > worst) worst = alarm.alarm;
    const std::string reason = str(alarm);
    if (!reason.empty()) {
      if (!reasons.empty()) reasons += ';';
      reasons += m.ps + ":" + reason;
    }
    const std::string r = str(server_.get(p + "RAMP-STATE"));
    if (ramp_rank(r) > ramp_rank(ramp)) ramp = r;
  }
  if (ramp == "done") {
    for (const auto& m : fam.members)
      if (str(server_.get(m.ps + ":RAMP-STATE")) != "done") ramp = "idle";
  }
  server_.set_soft(base + "I-READ", read_sum / static_cast<double>(fam.members.size()));
  server_.set_soft(base + "MODE", mixed ? std::string("mixed") : mode);
  server_.set_soft(base + "COMPARE", compare, compare == "alarm" ? chan::Severity::kMinor : chan::Severity::kNone);
  server_.set_soft(base + "HYST-STATE", std::string(off_branch ? "off_branch" : "on_branch"));
  server_.set_soft(base + "CYCLE-CMD", cycling);
  server_.set_soft(base + "ALARM", reasons, worst);
  server_.set_soft(base + "RAMP-STATE", ramp);
}

void MachineLayer::set_family_value(std::size_t f, double value) {
  cfg_.families[f].set_value = value;
  server_.set_soft(cfg_.families[f].name + ":I-SET", value);
}

std::optional<std::string> MachineLayer::check_targets(const std::vector<Target>& targets) const {
  for (const auto& t : targets) {
    const auto& p = server_.ps_class(t.ps).params;
    if (!std::isfinite(t.current) || t.current < p.i_min() || t.current > p.i_max) return "out_of_range";
  }
  for (const auto& t : targets) {
    if (!server_.ps_ready(t.ps)) return "member_not_ready";
    if (server_.ps_busy(t.ps)) return "busy";
  }
  return std::nullopt;
}

void MachineLayer::apply_direct(std::vector<Target> targets, chan::Reply reply) {
  if (targets.empty()) return reply(chan::PutResult::success());
  auto join = std::make_shared<Join>();
  join->reply = std::move(reply);
  join->remaining = targets.size();
  for (const auto& t : targets)
    server_.put(t.ps + ":I-SET", t.current, [join](const chan::PutResult& r) { join->done(r); });
}

void MachineLayer::family_put(const std::string& name, double value, chan::Reply reply) {
  auto it = family_index_.find(name);
  if (it == family_index_.end()) return reply(chan::PutResult::failure("no_such_family"));
  const auto& fam = cfg_.families[it->second];
  std::vector<Target> targets;
  for (const auto& m : fam.members) targets.push_back({m.ps, m.current(value)});
  if (auto err = check_targets(targets)) return reply(chan::PutResult::failure(*err));
  set_family_value(it->second, value);
  apply_direct(std::move(targets), std::move(reply));
}

void MachineLayer::optic_put(const OpticKnobs& q, chan::Reply reply) {
  if (!cfg_.optic) return reply(chan::PutResult::failure("no_optic"));
  if (!(q.e > 0.0) || !std::isfinite(q.e)) return reply(chan::PutResult::failure("invalid_value"));
  const auto& model = *cfg_.optic;
  const auto values = optic_currents(model, q);
  std::vector<Target> targets;
  bool large = false;
  for (std::size_t f = 0; f < model.size(); ++f) {
    const auto& fam = cfg_.families[family_index_.at(model.families[f])];
    for (const auto& m : fam.members) {
      const double cur = m.current(values[f]);
      targets.push_back({m.ps, cur});
      const double i_max = server_.ps_class(m.ps).params.i_max;
      if (std::abs(cur - server_.set_current(m.ps)) > 0.01 * i_max) large = true;
    }
  }
  if (auto err = check_targets(targets)) return reply(chan::PutResult::failure(*err));

  knobs_ = q;
  pending_ = q;
  for (std::size_t f = 0; f < model.size(); ++f) set_family_value(family_index_.at(model.families[f]), values[f]);
  server_.set_soft("OPTIC:E", q.e);
  const char* knob_names[] = {"OPTIC:DNUX", "OPTIC:DNUY", "OPTIC:DXIX", "OPTIC:DXIY"};
  for (std::size_t k = 0; k < kKnobCount; ++k) server_.set_soft(knob_names[k], q.dq[k]);

  if (!large) {
    last_ramp_.reset();
    return apply_direct(std::move(targets), std::move(reply));
  }
  chan::RampRequest req;
  req.duration_s = ramp_duration_s_;
  for (auto& t : targets) {
    req.members.push_back(t.ps);
    req.targets.push_back(t.current);
  }
  auto started = server_.sync_ramp(req);
  if (!started.ok) return reply(chan::PutResult::failure(started.error));
  last_ramp_ = started.job;
  reply(chan::PutResult::success());
}

}  // namespace pscsim::machine
