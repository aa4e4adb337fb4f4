#include "pscsim/scenario.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace pscsim::scenario {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(FaultKind k) {
  switch (k) {
    case FaultKind::kResistanceChange: return "resistance_change";
    case FaultKind::kSwapWith: return "swap_with";
    case FaultKind::kLinkBreak: return "link_break";
    case FaultKind::kLinkRestore: return "link_restore";
    case FaultKind::kLocal: return "local";
    case FaultKind::kBitError: return "bit_error";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// parsing

namespace {

[[noreturn]] void fail(const std::string& what) { throw ScenarioError("schema: " + what); }

double num(const json& j, const char* key, double dflt, const std::string& ctx) {
  if (!j.contains(key) || j[key].is_null()) return dflt;
  if (!j[key].is_number()) fail(ctx + "." + key + " must be a number");
  const double v = j[key].get<double>();
  if (!std::isfinite(v)) fail(ctx + "." + key + " must be finite");
  return v;
}

std::optional<double> opt_num(const json& j, const char* key, const std::string& ctx) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return num(j, key, 0.0, ctx);
}

std::string str(const json& j, const char* key, const std::string& ctx, bool required = true) {
  if (!j.contains(key) || j[key].is_null()) {
    if (required) fail(ctx + " needs '" + key + "'");
    return {};
  }
  if (!j[key].is_string()) fail(ctx + "." + key + " must be a string");
  return j[key].get<std::string>();
}

bool flag(const json& j, const char* key, bool dflt, const std::string& ctx) {
  if (!j.contains(key) || j[key].is_null()) return dflt;
  if (!j[key].is_boolean()) fail(ctx + "." + key + " must be true or false");
  return j[key].get<bool>();
}

void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& ctx) {
  for (const auto& [k, _] : j.items()) {
    bool known = false;
    for (const char* allowed : keys) known = known || k == allowed;
    if (!known) fail(ctx + " has unknown key '" + k + "'");
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ScenarioError("io: cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(base) / p).string();
}

PsClass parse_class(const std::string& name, const json& j, const std::map<std::string, PsClass>& known) {
  const std::string ctx = "classes." + name;
  if (!j.is_object()) fail(ctx + " must be an object");
  only_keys(j, {"base", "R", "L", "I_max", "V_max", "quadrants", "f_c", "noise_sigma", "ramp_rate",
                "hysteresis_tracked", "compare_tol_ppm", "cycles"},
            ctx);
  PsClass c;
  if (j.contains("base")) {
    const std::string base = str(j, "base", ctx);
    auto it = known.find(base);
    if (it == known.end()) fail(ctx + ".base names unknown class '" + base + "'");
    c = it->second;
  } else if (auto it = known.find(name); it != known.end()) {
    c = it->second;
  } else {
    for (const char* k : {"R", "L", "I_max", "V_max", "quadrants"})
      if (!j.contains(k)) fail(ctx + " needs '" + k + "' (or a base class)");
  }
  c.name = name;
  c.params.class_name = name;
  c.params.resistance = num(j, "R", c.params.resistance, ctx);
  c.params.inductance = num(j, "L", c.params.inductance, ctx);
  c.params.i_max = num(j, "I_max", c.params.i_max, ctx);
  c.params.v_max = num(j, "V_max", c.params.v_max, ctx);
  c.params.quadrants = static_cast<int>(num(j, "quadrants", c.params.quadrants, ctx));
  c.f_c = num(j, "f_c", c.f_c, ctx);
  c.noise_sigma = num(j, "noise_sigma", c.noise_sigma, ctx);
  c.ramp_rate = num(j, "ramp_rate", c.ramp_rate, ctx);
  c.hysteresis_tracked = flag(j, "hysteresis_tracked", c.hysteresis_tracked, ctx);
  c.compare_tol_ppm = num(j, "compare_tol_ppm", c.compare_tol_ppm, ctx);
  c.cycles = static_cast<int>(num(j, "cycles", c.cycles, ctx));
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    fail(ctx + ": " + e.what());
  }
  return c;
}

link::LinkParams parse_link(const json& j, const std::string& ctx) {
  link::LinkParams p;
  if (!j.is_object()) fail(ctx + ".link must be an object");
  only_keys(j, {"bitrate_hz", "t_proc_us", "timeout_factor"}, ctx + ".link");
  p.bitrate_hz = num(j, "bitrate_hz", p.bitrate_hz, ctx + ".link");
  p.t_proc_ns = sim::from_seconds(num(j, "t_proc_us", static_cast<double>(p.t_proc_ns) / 1e3, ctx + ".link") * 1e-6);
  p.timeout_factor = num(j, "timeout_factor", p.timeout_factor, ctx + ".link");
  if (!(p.bitrate_hz > 0.0) || p.t_proc_ns < 0 || !(p.timeout_factor >= 1.0))
    fail(ctx + ".link parameters out of range");
  return p;
}

std::vector<PsSpec> parse_ps(const json& j, std::size_t idx) {
  const std::string ctx = "ps[" + std::to_string(idx) + "]";
  if (!j.is_object()) fail(ctx + " must be an object");
  only_keys(j, {"id", "id_prefix", "count", "first", "digits", "class", "R", "L", "noise_sigma", "R_nom",
                "link", "on", "I_set"},
            ctx);
  PsSpec base;
  base.cls = str(j, "class", ctx);
  base.resistance = opt_num(j, "R", ctx);
  base.inductance = opt_num(j, "L", ctx);
  base.noise_sigma = opt_num(j, "noise_sigma", ctx);
  base.r_nominal = opt_num(j, "R_nom", ctx);
  if (j.contains("link")) base.link = parse_link(j["link"], ctx);
  base.on = flag(j, "on", false, ctx);
  base.i_set = num(j, "I_set", 0.0, ctx);

  std::vector<PsSpec> out;
  if (j.contains("id")) {
    base.id = str(j, "id", ctx);
    if (base.id.empty()) fail(ctx + ".id is empty");
    out.push_back(base);
    return out;
  }
  const std::string prefix = str(j, "id_prefix", ctx + " (id or id_prefix)");
  const double count = num(j, "count", -1.0, ctx);
  if (count < 1 || count != std::floor(count)) fail(ctx + ".count must be a positive integer");
  const int first = static_cast<int>(num(j, "first", 1.0, ctx));
  const int digits = static_cast<int>(num(j, "digits", 3.0, ctx));
  for (int k = 0; k < static_cast<int>(count); ++k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*d", digits, first + k);
    PsSpec s = base;
    s.id = prefix + buf;
    out.push_back(std::move(s));
  }
  return out;
}

link::Direction parse_direction(const std::string& s, const std::string& ctx) {
  if (s == "tx") return link::Direction::kTx;
  if (s == "rx") return link::Direction::kRx;
  fail(ctx + ".direction must be tx or rx");
}

std::vector<FaultSpec> parse_fault(const json& j, std::size_t idx) {
  const std::string ctx = "faults[" + std::to_string(idx) + "]";
  if (!j.is_object()) fail(ctx + " must be an object");
  only_keys(j, {"t", "ps", "kind", "args"}, ctx);
  FaultSpec f;
  f.t = num(j, "t", 0.0, ctx);
  f.ps = str(j, "ps", ctx);
  const std::string kind = str(j, "kind", ctx);
  const json args = j.contains("args") ? j["args"] : json::object();
  if (!args.is_object()) fail(ctx + ".args must be an object");
  std::vector<FaultSpec> out;
  if (kind == "resistance_change") {
    f.kind = FaultKind::kResistanceChange;
    f.resistance = num(args, "R", -1.0, ctx + ".args");
    if (!(f.resistance > 0.0)) fail(ctx + ".args.R must be > 0");
  } else if (kind == "swap_with") {
    f.kind = FaultKind::kSwapWith;
    f.other = str(args, "other", ctx + ".args");
  } else if (kind == "link_break" || kind == "link_restore") {
    f.kind = kind == "link_break" ? FaultKind::kLinkBreak : FaultKind::kLinkRestore;
    const std::string dir = args.contains("direction") ? str(args, "direction", ctx + ".args") : "both";
    if (dir == "both") {
      f.direction = link::Direction::kTx;
      out.push_back(f);
      f.direction = link::Direction::kRx;
    } else {
      f.direction = parse_direction(dir, ctx + ".args");
    }
  } else if (kind == "local") {
    f.kind = FaultKind::kLocal;
    f.on = flag(args, "on", true, ctx + ".args");
  } else if (kind == "bit_error") {
    f.kind = FaultKind::kBitError;
    f.direction = parse_direction(args.contains("direction") ? str(args, "direction", ctx + ".args") : "tx",
                                  ctx + ".args");
    f.bit = static_cast<std::size_t>(num(args, "bit", 0.0, ctx + ".args"));
  } else {
    fail(ctx + ".kind '" + kind + "' is not a known fault");
  }
  out.push_back(f);
  return out;
}

chan::Value json_to_value(const json& v, const std::string& ctx) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_number_integer()) return v.get<std::int64_t>();
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) return v.get<std::string>();
  if (v.is_object() || v.is_array()) return v.dump();
  fail(ctx + " has no usable value");
}

std::vector<std::string> string_list(const json& j, const char* key, const std::string& ctx) {
  if (!j.contains(key) || !j[key].is_array()) fail(ctx + "." + key + " must be an array of strings");
  std::vector<std::string> out;
  for (const auto& e : j[key]) {
    if (!e.is_string()) fail(ctx + "." + key + " must be an array of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

std::vector<double> number_list(const json& j, const char* key, const std::string& ctx) {
  if (!j.contains(key) || !j[key].is_array()) fail(ctx + "." + key + " must be an array of numbers");
  std::vector<double> out;
  for (const auto& e : j[key]) {
    if (!e.is_number()) fail(ctx + "." + key + " must be an array of numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

chan::RampRequest parse_ramp(const json& j, const std::string& ctx) {
  if (!j.is_object()) fail(ctx + " must be an object");
  chan::RampRequest r;
  r.members = string_list(j, "members", ctx);
  r.targets = number_list(j, "targets", ctx);
  r.duration_s = num(j, "duration", 1.0, ctx);
  return r;
}

machine::OpticKnobs parse_knobs(const json& j, const std::string& ctx, const machine::OpticKnobs& dflt) {
  if (!j.is_object()) fail(ctx + " must be an object");
  only_keys(j, {"E", "dnux", "dnuy", "dxix", "dxiy"}, ctx);
  machine::OpticKnobs q = dflt;
  q.e = num(j, "E", q.e, ctx);
  q.dq[0] = num(j, "dnux", q.dq[0], ctx);
  q.dq[1] = num(j, "dnuy", q.dq[1], ctx);
  q.dq[2] = num(j, "dxix", q.dq[2], ctx);
  q.dq[3] = num(j, "dxiy", q.dq[3], ctx);
  return q;
}

CommandSpec parse_command(const json& j, std::size_t idx) {
  const std::string ctx = "commands[" + std::to_string(idx) + "]";
  if (!j.is_object()) fail(ctx + " must be an object");
  only_keys(j, {"t", "put", "cycle", "ramp", "trigger", "optic"}, ctx);
  CommandSpec c;
  c.t = num(j, "t", 0.0, ctx);
  int kinds = 0;
  if (j.contains("put")) {
    ++kinds;
    c.kind = CommandKind::kPut;
    const auto& p = j["put"];
    if (!p.is_object() || !p.contains("value")) fail(ctx + ".put needs name and value");
    c.name = str(p, "name", ctx + ".put");
    c.value = json_to_value(p["value"], ctx + ".put.value");
  }
  if (j.contains("cycle")) {
    ++kinds;
    c.kind = CommandKind::kCycle;
    c.name = str(j, "cycle", ctx);
  }
  if (j.contains("trigger")) {
    ++kinds;
    c.kind = CommandKind::kTrigger;
    c.name = str(j, "trigger", ctx);
  }
  if (j.contains("ramp")) {
    ++kinds;
    c.kind = CommandKind::kRamp;
    c.ramp = parse_ramp(j["ramp"], ctx + ".ramp");
  }
  if (j.contains("optic")) {
    ++kinds;
    c.kind = CommandKind::kOptic;
    c.optic = parse_knobs(j["optic"], ctx + ".optic", machine::OpticKnobs{});
    c.name = j["optic"].dump();
  }
  if (kinds != 1) fail(ctx + " needs exactly one of put, cycle, ramp, trigger, optic");
  return c;
}

psc::Address parse_register(const json& v, const std::string& ctx) {
  static const std::map<std::string, psc::Address> names = {
      {"I_SET", psc::reg::kISet},     {"I_READ", psc::reg::kIRead},       {"R_LOAD", psc::reg::kRLoad},
      {"V_OUT", psc::reg::kVOut},     {"WF_OFFSET", psc::reg::kWfOffset}, {"WF_SCALE", psc::reg::kWfScale},
  };
  if (v.is_number_integer()) {
    const auto a = v.get<std::int64_t>();
    if (a < 0 || a > 255) fail(ctx + " register address out of range");
    return static_cast<psc::Address>(a);
  }
  if (v.is_string()) {
    auto it = names.find(v.get<std::string>());
    if (it != names.end()) return it->second;
  }
  fail(ctx + " must be a register name (I_SET, I_READ, R_LOAD, V_OUT, WF_OFFSET, WF_SCALE) or address");
}

orbit::FeedbackConfig parse_feedback(const json& j) {
  const std::string ctx = "feedback";
  if (!j.is_object()) fail(ctx + " must be an object");
  only_keys(j, {"correctors", "bpms", "R_om", "d", "noise_sigma", "alpha", "enabled", "period_ms", "source"}, ctx);
  orbit::FeedbackConfig f;
  f.correctors = string_list(j, "correctors", ctx);
  f.bpms = string_list(j, "bpms", ctx);
  if (!j.contains("R_om")) fail(ctx + " needs R_om");
  const auto& rj = j["R_om"];
  if (rj.is_string() && rj.get<std::string>() == "identity") {
    if (f.bpms.size() != f.correctors.size()) fail(ctx + ": identity R_om needs as many BPMs as correctors");
    f.r_om = orbit::Matrix::identity(f.correctors.size());
  } else {
    if (!rj.is_array() || rj.size() != f.bpms.size()) fail(ctx + ".R_om must have one row per BPM");
    f.r_om = orbit::Matrix(f.bpms.size(), f.correctors.size());
    for (std::size_t r = 0; r < rj.size(); ++r) {
      if (!rj[r].is_array() || rj[r].size() != f.correctors.size())
        fail(ctx + ".R_om rows must have one entry per corrector");
      for (std::size_t c = 0; c < f.correctors.size(); ++c) {
        if (!rj[r][c].is_number()) fail(ctx + ".R_om entries must be numbers");
        f.r_om(r, c) = rj[r][c].get<double>();
      }
    }
  }
  if (j.contains("d")) {
    if (j["d"].is_number()) {
      f.d.assign(f.bpms.size(), j["d"].get<double>());
    } else {
      f.d = number_list(j, "d", ctx);
    }
  }
  f.noise_sigma = num(j, "noise_sigma", f.noise_sigma, ctx);
  f.alpha = num(j, "alpha", f.alpha, ctx);
  f.enabled = flag(j, "enabled", f.enabled, ctx);
  f.period_ns = sim::from_seconds(num(j, "period_ms", 1.0, ctx) * 1e-3);
  const std::string src = j.contains("source") ? str(j, "source", ctx) : "setpoint";
  if (src == "setpoint") {
    f.source = orbit::OrbitSource::kSetpoint;
  } else if (src == "plant") {
    f.source = orbit::OrbitSource::kPlant;
  } else {
    fail(ctx + ".source must be setpoint or plant");
  }
  try {
    f.validate();
  } catch (const std::invalid_argument& e) {
    fail(std::string(ctx) + ": " + e.what());
  }
  return f;
}

}  // namespace

Scenario parse_scenario(std::string_view json_text, const std::string& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ScenarioError(std::string("parse: ") + e.what());
  }
  if (!j.is_object()) fail("scenario must be a JSON object");
  only_keys(j, {"name", "classes", "ps", "machine", "machine_ps", "family_ramp_s", "feedback", "waveforms",
                "commands", "faults", "dac", "server", "run"},
            "scenario");
  Scenario sc;
  sc.name = str(j, "name", "scenario", false);
  sc.classes = default_classes();

  if (j.contains("classes")) {
    if (!j["classes"].is_object()) fail("classes must be an object");
    for (const auto& [name, cj] : j["classes"].items()) sc.classes[name] = parse_class(name, cj, sc.classes);
  }

  if (j.contains("ps")) {
    if (!j["ps"].is_array()) fail("ps must be an array");
    for (std::size_t i = 0; i < j["ps"].size(); ++i)
      for (auto& p : parse_ps(j["ps"][i], i)) sc.ps.push_back(std::move(p));
  }

  if (j.contains("machine") && !j["machine"].is_null()) {
    const auto& mj = j["machine"];
    try {
      if (mj.is_string()) {
        sc.machine = machine::load_machine_config(resolve(base_dir, mj.get<std::string>()));
      } else if (mj.is_object() && mj.contains("toy")) {
        const auto& t = mj["toy"];
        sc.machine = machine::toy_machine(static_cast<std::uint64_t>(num(t, "seed", 1.0, "machine.toy")),
                                          static_cast<std::size_t>(num(t, "members_per_family", 2.0, "machine.toy")));
      } else if (mj.is_object()) {
        sc.machine = machine::parse_machine_config(mj.dump());
      } else {
        fail("machine must be a path or an object");
      }
    } catch (const machine::MachineConfigError& e) {
      throw ScenarioError(std::string("machine: ") + e.what());
    }
    sc.family_ramp_s = num(j, "family_ramp_s", 1.0, "scenario");

    // members not declared as PS are created from machine_ps when given
    std::set<std::string> declared;
    for (const auto& p : sc.ps) declared.insert(p.id);
    if (j.contains("machine_ps")) {
      const auto& aj = j["machine_ps"];
      if (!aj.is_object()) fail("machine_ps must be an object");
      only_keys(aj, {"class", "on", "link"}, "machine_ps");
      PsSpec tmpl;
      tmpl.cls = str(aj, "class", "machine_ps");
      tmpl.on = flag(aj, "on", true, "machine_ps");
      if (aj.contains("link")) tmpl.link = parse_link(aj["link"], "machine_ps");
      std::map<std::string, double> family_value;
      if (sc.machine->optic) {
        const auto currents = machine::optic_currents(*sc.machine->optic,
                                                      machine::OpticKnobs{sc.machine->optic->e0, {}});
        for (std::size_t f = 0; f < currents.size(); ++f) family_value[sc.machine->optic->families[f]] = currents[f];
      }
      for (auto& fam : sc.machine->families) {
        if (auto it = family_value.find(fam.name); it != family_value.end()) fam.set_value = it->second;
        for (const auto& m : fam.members) {
          if (declared.count(m.ps)) continue;
          PsSpec s = tmpl;
          s.id = m.ps;
          s.i_set = m.current(fam.set_value);
          sc.ps.push_back(std::move(s));
          declared.insert(m.ps);
        }
      }
    }
  }

  if (j.contains("feedback") && !j["feedback"].is_null()) sc.feedback = parse_feedback(j["feedback"]);

  if (j.contains("waveforms")) {
    if (!j["waveforms"].is_array()) fail("waveforms must be an array");
    for (std::size_t i = 0; i < j["waveforms"].size(); ++i) {
      const auto& wj = j["waveforms"][i];
      const std::string ctx = "waveforms[" + std::to_string(i) + "]";
      if (!wj.is_object()) fail(ctx + " must be an object");
      only_keys(wj, {"ps", "file", "waveform", "target", "arm", "trigger_at"}, ctx);
      WaveformSpec w;
      w.ps = str(wj, "ps", ctx);
      try {
        if (wj.contains("file")) {
          w.waveform = psc::load_waveform_file(resolve(base_dir, str(wj, "file", ctx)));
        } else if (wj.contains("waveform")) {
          w.waveform = psc::parse_waveform(wj["waveform"].dump());
        } else {
          fail(ctx + " needs file or waveform");
        }
      } catch (const psc::WaveformError& e) {
        throw ScenarioError(ctx + ": " + std::string(psc::to_string(e.code())) + ": " + e.what());
      }
      const std::string target = wj.contains("target") ? str(wj, "target", ctx) : "volatile";
      if (target == "persistent") {
        w.target = psc::WaveformTarget::kPersistent;
      } else if (target != "volatile") {
        fail(ctx + ".target must be volatile or persistent");
      }
      w.arm = flag(wj, "arm", false, ctx);
      w.trigger_at = opt_num(wj, "trigger_at", ctx);
      sc.waveforms.push_back(std::move(w));
    }
  }

  if (j.contains("commands")) {
    if (!j["commands"].is_array()) fail("commands must be an array");
    for (std::size_t i = 0; i < j["commands"].size(); ++i) sc.commands.push_back(parse_command(j["commands"][i], i));
  }

  if (j.contains("faults")) {
    if (!j["faults"].is_array()) fail("faults must be an array");
    for (std::size_t i = 0; i < j["faults"].size(); ++i)
      for (auto& f : parse_fault(j["faults"][i], i)) sc.faults.push_back(std::move(f));
  }

  if (j.contains("dac")) {
    if (!j["dac"].is_array()) fail("dac must be an array");
    for (std::size_t i = 0; i < j["dac"].size(); ++i) {
      const auto& dj = j["dac"][i];
      const std::string ctx = "dac[" + std::to_string(i) + "]";
      if (!dj.is_object()) fail(ctx + " must be an object");
      only_keys(dj, {"ps", "dac", "source", "offset", "scale", "path"}, ctx);
      DacTap t;
      t.ps = str(dj, "ps", ctx);
      const std::string which = dj.contains("dac") ? str(dj, "dac", ctx) : "A";
      if (which == "B") {
        t.dac = psc::Dac::kB;
      } else if (which != "A") {
        fail(ctx + ".dac must be A or B");
      }
      if (!dj.contains("source")) fail(ctx + " needs source");
      t.source = parse_register(dj["source"], ctx + ".source");
      t.offset = num(dj, "offset", 0.0, ctx);
      t.scale = num(dj, "scale", 1.0, ctx);
      t.path = str(dj, "path", ctx, false);
      sc.taps.push_back(std::move(t));
    }
  }

  if (j.contains("server")) {
    const auto& s = j["server"];
    if (!s.is_object()) fail("server must be an object");
    only_keys(s, {"poll_ms", "alarm_ms", "ramp_step_ms", "r_band", "r_strikes"}, "server");
    auto ms = [&](const char* k, sim::TimeNs d) {
      return sim::from_seconds(num(s, k, static_cast<double>(d) / 1e6, "server") * 1e-3);
    };
    sc.server.poll_period = ms("poll_ms", sc.server.poll_period);
    sc.server.alarm_period = ms("alarm_ms", sc.server.alarm_period);
    sc.server.ramp_step = ms("ramp_step_ms", sc.server.ramp_step);
    sc.server.r_band = num(s, "r_band", sc.server.r_band, "server");
    sc.server.r_strikes = static_cast<int>(num(s, "r_strikes", sc.server.r_strikes, "server"));
    if (sc.server.poll_period <= 0 || sc.server.alarm_period <= 0 || sc.server.ramp_step <= 0 ||
        !(sc.server.r_band > 0.0) || sc.server.r_strikes < 1)
      fail("server parameters out of range");
  }

  if (j.contains("run")) {
    const auto& r = j["run"];
    if (!r.is_object()) fail("run must be an object");
    only_keys(r, {"until", "seed", "metrics_path", "metrics_period_ms", "state_dir"}, "run");
    sc.run.until = num(r, "until", sc.run.until, "run");
    if (r.contains("seed")) {
      if (!r["seed"].is_number_unsigned()) fail("run.seed must be a non-negative integer");
      sc.run.seed = r["seed"].get<std::uint64_t>();
    }
    sc.run.metrics_path = str(r, "metrics_path", "run", false);
    sc.run.metrics_period_ms = num(r, "metrics_period_ms", sc.run.metrics_period_ms, "run");
    sc.run.state_dir = str(r, "state_dir", "run", false);
  }

  sc.validate();
  return sc;
}

void Scenario::validate() const {
  if (!(run.until > 0.0)) fail("run.until must be > 0");
  const double period_ns = run.metrics_period_ms * 1e6;
  if (!(period_ns >= static_cast<double>(sim::kTickNs)) ||
      std::fmod(period_ns, static_cast<double>(sim::kTickNs)) != 0.0)
    fail("run.metrics_period_ms must be a positive multiple of the 0.02 ms tick");

  std::set<std::string> ids;
  for (const auto& p : ps) {
    if (!ids.insert(p.id).second) fail("duplicate PS id '" + p.id + "'");
    auto it = classes.find(p.cls);
    if (it == classes.end()) fail("PS " + p.id + " has unknown class '" + p.cls + "'");
    const auto& cls = it->second;
    if (p.resistance && !(*p.resistance > 0.0)) fail("PS " + p.id + ": R must be > 0");
    if (p.inductance && !(*p.inductance > 0.0)) fail("PS " + p.id + ": L must be > 0");
    if (p.r_nominal && !(*p.r_nominal > 0.0)) fail("PS " + p.id + ": R_nom must be > 0");
    if (p.noise_sigma && *p.noise_sigma < 0.0) fail("PS " + p.id + ": noise_sigma must be >= 0");
    if (p.i_set < cls.params.i_min() || p.i_set > cls.params.i_max)
      fail("PS " + p.id + ": I_set outside the class range");
  }
  auto need = [&](const std::string& id, const std::string& ctx) {
    if (!ids.count(id)) fail(ctx + " names unknown PS '" + id + "'");
  };
  auto in_window = [&](double t, const std::string& ctx) {
    if (!(t >= 0.0 && t <= run.until)) fail(ctx + " time " + std::to_string(t) + " s is outside the run window");
  };

  if (machine) {
    for (const auto& fam : machine->families)
      for (const auto& m : fam.members) need(m.ps, "family " + fam.name);
  }
  if (feedback) {
    for (const auto& c : feedback->correctors) need(c, "feedback");
  }
  for (const auto& w : waveforms) {
    need(w.ps, "waveform");
    if (w.trigger_at) in_window(*w.trigger_at, "waveform trigger");
  }
  for (const auto& f : faults) {
    need(f.ps, "fault");
    if (f.kind == FaultKind::kSwapWith) need(f.other, "fault swap_with");
    in_window(f.t, "fault");
  }
  for (const auto& c : commands) {
    in_window(c.t, "command");
    if (c.kind == CommandKind::kTrigger) need(c.name, "command");
    if (c.kind == CommandKind::kCycle) {
      const bool family = machine && std::any_of(machine->families.begin(), machine->families.end(),
                                                 [&](const machine::FamilySpec& f) { return f.name == c.name; });
      if (!family) need(c.name, "command");
    }
    if (c.kind == CommandKind::kOptic && !(machine && machine->optic)) fail("optic command without an optic model");
  }
  for (const auto& t : taps) need(t.ps, "dac tap");
}

void apply_seed_override(Scenario& sc) {
  const char* env = std::getenv("PSC_SIM_SEED");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0') throw ScenarioError("PSC_SIM_SEED is not a non-negative integer");
  sc.run.seed = v;
}

Scenario load_scenario(const std::string& path) {
  const std::string text = read_file(path);
  const std::string base = fs::path(path).parent_path().string();
  Scenario sc = parse_scenario(text, base.empty() ? "." : base);
  apply_seed_override(sc);
  return sc;
}

// ---------------------------------------------------------------------------
// facility

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

Facility::Facility(Scenario sc, std::ostream* metrics) : sc_(std::move(sc)), sched_(sc_.run.seed) {
  sc_.validate();
  metrics_period_ = sim::from_seconds(sc_.run.metrics_period_ms * 1e-3);
  if (metrics != nullptr) {
    metrics_ = metrics;
  } else if (!sc_.run.metrics_path.empty()) {
    auto f = std::make_unique<std::ofstream>(sc_.run.metrics_path, std::ios::binary | std::ios::trunc);
    if (!*f) throw ScenarioError("io: cannot write metrics to " + sc_.run.metrics_path);
    owned_metrics_ = std::move(f);
    metrics_ = owned_metrics_.get();
  }
  if (metrics_ != nullptr) *metrics_ << kMetricsHeader << '\n';

  build_units();
  build_channels();
  build_machine();
  build_feedback();
  register_system_channels();
  schedule_events();
}

Facility::~Facility() { flush_metrics(); }

PsUnit& Facility::unit(const std::string& id) {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::out_of_range("unknown PS " + id);
  return *units_[it->second];
}

void Facility::build_units() {
  const double dt = sim::to_seconds(sim::kTickNs);
  bus_ = std::make_unique<psc::TickBus>(sched_, 0);
  for (const auto& spec : sc_.ps) {
    auto u = std::make_unique<PsUnit>();
    u->id = spec.id;
    u->cls = sc_.classes.at(spec.cls);
    plant::PlantParams params = u->cls.params;
    if (spec.resistance) params.resistance = *spec.resistance;
    if (spec.inductance) params.inductance = *spec.inductance;
    const double noise = spec.noise_sigma.value_or(u->cls.noise_sigma);
    try {
      params.validate();
    } catch (const std::invalid_argument& e) {
      throw ScenarioError("PS " + spec.id + ": " + e.what());
    }
    u->magnet = std::make_unique<plant::Magnet>(params, dt);
    // a PS that starts on is already regulating at its set current
    if (spec.on) u->magnet->set_state({spec.i_set, spec.i_set * params.resistance});
    auto cfg = psc::ControllerConfig::tuned(params, u->cls.f_c, noise);
    if (!sc_.run.state_dir.empty()) cfg.state_path = (fs::path(sc_.run.state_dir) / (spec.id + ".json")).string();
    u->controller = std::make_unique<psc::Controller>(spec.id, u->magnet.get(), cfg, sched_);
    u->slave = std::make_unique<psc::ControllerSlave>(*u->controller);
    u->link = std::make_unique<link::Link>(spec.id, sched_, *u->slave, spec.link);

    auto& c = *u->controller;
    c.reg_write(psc::reg::kISet, psc::float_to_word(static_cast<float>(spec.i_set)), psc::Origin::kFrontPanel);
    if (spec.on) c.reg_write(psc::reg::kMode, static_cast<psc::Word>(psc::Mode::kOn), psc::Origin::kFrontPanel);

    bus_->add(u->controller.get());
    index_.emplace(spec.id, units_.size());
    units_.push_back(std::move(u));
  }

  for (const auto& w : sc_.waveforms) {
    auto& c = *unit(w.ps).controller;
    try {
      c.load_waveform(w.waveform, w.target);
    } catch (const psc::WaveformError& e) {
      throw ScenarioError("waveform for " + w.ps + ": " + std::string(psc::to_string(e.code())) + ": " + e.what());
    }
    if (w.arm) c.reg_write(psc::reg::kTrigArm, 1, psc::Origin::kFrontPanel);
  }

  for (const auto& t : sc_.taps) {
    TapState ts;
    ts.spec = t;
    if (!t.path.empty()) {
      auto f = std::make_unique<std::ofstream>(t.path, std::ios::binary | std::ios::trunc);
      if (!*f) throw ScenarioError("io: cannot write dac tap to " + t.path);
      *f << "t_ns,value\n";
      ts.out = std::move(f);
    }
    const psc::Nak nak = unit(t.ps).controller->assign_dac(t.dac, t.source, t.offset, t.scale);
    if (nak != psc::Nak::kNone)
      throw ScenarioError("dac tap on " + t.ps + ": " + std::string(psc::to_string(nak)));
    taps_.push_back(std::move(ts));
  }
  for (auto& u : units_) {
    std::vector<std::size_t> mine;
    for (std::size_t i = 0; i < taps_.size(); ++i)
      if (taps_[i].spec.ps == u->id) mine.push_back(i);
    if (mine.empty()) continue;
    u->controller->set_dac_sink([this, mine](sim::TimeNs t, psc::Dac d, double v) {
      for (std::size_t i : mine) {
        auto& tap = taps_[i];
        if (tap.spec.dac != d) continue;
        tap.samples.push_back({t, v});
        if (tap.out) *tap.out << t << ',' << fmt_double(v) << '\n';
      }
    });
  }

  bus_->set_post_tick([this](sim::TimeNs t) { on_tick(t); });
}

std::array<psc::Word, 9> Facility::boot_readback(const PsUnit& u) const {
  std::array<psc::Word, 9> regs{};
  for (psc::Address a = 0; a < regs.size(); ++a) regs[a] = u.controller->reg_read(a);
  return regs;
}

void Facility::build_channels() {
  server_ = std::make_unique<chan::ChannelServer>(sched_, sc_.server);
  std::map<std::string, double> r_nom;
  for (const auto& spec : sc_.ps) r_nom[spec.id] = spec.r_nominal.value_or(spec.resistance.value_or(0.0));
  for (auto& u : units_) {
    chan::PsBinding b;
    b.id = u->id;
    b.link = u->link.get();
    b.cls = u->cls;
    b.r_nominal = r_nom[u->id];
    server_->add_ps(std::move(b));
    server_->prime(u->id, boot_readback(*u));
  }
}

void Facility::build_machine() {
  if (!sc_.machine) return;
  try {
    machine_ = std::make_unique<machine::MachineLayer>(*server_, *sc_.machine, sc_.family_ramp_s);
  } catch (const machine::MachineConfigError& e) {
    throw ScenarioError(std::string("machine: ") + e.what());
  }
}

void Facility::build_feedback() {
  if (!sc_.feedback) return;
  std::vector<orbit::CorrectorPort> ports;
  for (const auto& id : sc_.feedback->correctors) {
    auto& u = unit(id);
    orbit::CorrectorPort p;
    p.ps = id;
    p.link = u.link.get();
    p.lsb = u.cls.lsb();
    p.i_min = u.cls.params.i_min();
    p.i_max = u.cls.params.i_max;
    p.initial = u.controller->setpoint();
    PsUnit* up = &u;
    p.plant_current = [up] { return up->magnet->state().current; };
    ports.push_back(std::move(p));
  }
  try {
    feedback_ = std::make_unique<orbit::OrbitFeedback>(sched_, *sc_.feedback, std::move(ports));
  } catch (const orbit::SingularResponse& e) {
    throw ScenarioError(std::string("feedback: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(std::string("feedback: ") + e.what());
  }
  feedback_->attach(*server_);
}

void Facility::register_system_channels() {
  server_->add_soft("SYS:HEARTBEAT", std::int64_t{0});
  server_->add_soft("SYS:RAMP", std::int64_t{0}, [this](const chan::Value& v, chan::Reply reply) {
    const auto* text = std::get_if<std::string>(&v);
    if (text == nullptr) return reply(chan::PutResult::failure("type_mismatch"));
    chan::RampRequest req;
    try {
      req = parse_ramp(json::parse(*text), "ramp");
    } catch (const std::exception&) {
      return reply(chan::PutResult::failure("invalid_value"));
    }
    // family names expand to their members
    chan::RampRequest flat;
    flat.duration_s = req.duration_s;
    for (std::size_t i = 0; i < req.members.size() && i < req.targets.size(); ++i) {
      if (machine_ && machine_->has_family(req.members[i])) {
        for (const auto& m : machine_->family(req.members[i]).members) {
          flat.members.push_back(m.ps);
          flat.targets.push_back(m.current(req.targets[i]));
        }
      } else {
        flat.members.push_back(req.members[i]);
        flat.targets.push_back(req.targets[i]);
      }
    }
    if (req.members.size() != req.targets.size()) return reply(chan::PutResult::failure("dimension"));
    const auto started = server_->sync_ramp(flat);
    if (!started.ok) return reply(chan::PutResult::failure(started.error));
    server_->set_soft("SYS:RAMP", static_cast<std::int64_t>(started.job));
    reply(chan::PutResult::success());
  });
}

void Facility::schedule_events() {
  server_->start(0);
  if (feedback_) feedback_->start(0);
  heartbeat_ = std::make_unique<sim::PeriodicTimer>(sched_, 0, sim::kNsPerSec, [this](sim::TimeNs t) {
    server_->set_soft("SYS:HEARTBEAT", static_cast<std::int64_t>(t));
  });
  for (const auto& w : sc_.waveforms) {
    if (!w.trigger_at) continue;
    auto* c = unit(w.ps).controller.get();
    sched_.schedule_at(sim::from_seconds(*w.trigger_at), [c] { c->fire_trigger(); });
  }
  for (const auto& f : sc_.faults)
    sched_.schedule_at(sim::from_seconds(f.t), [this, f] { apply_fault(f); });
  for (const auto& c : sc_.commands)
    sched_.schedule_at(sim::from_seconds(c.t), [this, c] { run_command(c); });
}

void Facility::apply_fault(const FaultSpec& f) {
  auto& u = unit(f.ps);
  switch (f.kind) {
    case FaultKind::kResistanceChange:
      u.magnet->apply(plant::ResistanceChange{f.resistance});
      break;
    case FaultKind::kSwapWith: {
      auto& o = unit(f.other);
      if (&o == &u) break;
      std::swap(u.magnet, o.magnet);
      u.controller->set_magnet(u.magnet.get());
      o.controller->set_magnet(o.magnet.get());
      break;
    }
    case FaultKind::kLinkBreak:
      u.link->set_link_broken(f.direction, true);
      break;
    case FaultKind::kLinkRestore:
      u.link->set_link_broken(f.direction, false);
      break;
    case FaultKind::kLocal:
      u.controller->set_local(f.on);
      break;
    case FaultKind::kBitError:
      u.link->inject_bit_error(f.direction, f.bit);
      break;
  }
}

void Facility::run_command(const CommandSpec& c) {
  const sim::TimeNs t = sched_.now();
  auto record = [this, t](std::string what) {
    return [this, t, what = std::move(what)](const chan::PutResult& r) {
      command_log_.push_back({t, what, r.ok, r.error});
    };
  };
  switch (c.kind) {
    case CommandKind::kPut:
      server_->put(c.name, c.value, record("put " + c.name + " " + chan::value_to_string(c.value)));
      break;
    case CommandKind::kCycle: {
      // family names go through their CYCLE-CMD channel
      if (machine_ && machine_->has_family(c.name)) {
        server_->put(c.name + ":CYCLE-CMD", std::int64_t{1}, record("cycle " + c.name));
        break;
      }
      const auto r = server_->standardize(c.name);
      command_log_.push_back({t, "cycle " + c.name, r.ok, r.error});
      break;
    }
    case CommandKind::kRamp: {
      const auto r = server_->sync_ramp(c.ramp);
      command_log_.push_back({t, "ramp", r.ok, r.error});
      break;
    }
    case CommandKind::kTrigger:
      unit(c.name).controller->fire_trigger();
      command_log_.push_back({t, "trigger " + c.name, true, {}});
      break;
    case CommandKind::kOptic:
      if (!machine_) {
        command_log_.push_back({t, "optic", false, "no_machine"});
        break;
      }
      machine_->optic_put(c.optic, record("optic " + c.name));
      break;
  }
}

void Facility::on_tick(sim::TimeNs t) {
  if (t % metrics_period_ != 0) return;
  write_metrics(t);
  check_invariants();
}

void Facility::write_metrics(sim::TimeNs t) {
  if (metrics_ == nullptr) return;
  for (const auto& u : units_) {
    const auto& c = *u->controller;
    line_.clear();
    line_ += std::to_string(t);
    line_ += ',';
    line_ += u->id;
    line_ += ',';
    line_ += fmt_double(c.effective_setpoint());
    line_ += ',';
    line_ += fmt_double(c.measured_current());
    line_ += ',';
    line_ += fmt_double(c.output_voltage());
    line_ += ',';
    line_ += fmt_double(c.resistance_estimate());
    line_ += ',';
    line_ += std::to_string(c.status());
    line_ += ',';
    line_ += chan::to_string(server_->alarm_of(u->id));
    line_ += '\n';
    *metrics_ << line_;
    ++metrics_rows_;
  }
}

void Facility::flush_metrics() {
  if (metrics_ != nullptr) metrics_->flush();
  for (auto& tap : taps_)
    if (tap.out) tap.out->flush();
}

void Facility::note_violation(std::string what) { violations_.push_back({sched_.now(), std::move(what)}); }

void Facility::check_invariants() {
  const sim::TimeNs now = sched_.now();
  if (now < last_check_) note_violation("virtual time went backwards");
  last_check_ = now;

  if (sched_.scheduled() != sched_.fired() + sched_.cancelled() + sched_.pending())
    note_violation("scheduler counters do not reconcile");

  constexpr double eps = 1e-9;
  for (const auto& u : units_) {
    const auto& p = u->magnet->params();
    const auto& s = u->magnet->state();
    if (!std::isfinite(s.current) || !std::isfinite(s.applied_voltage)) {
      note_violation(u->id + ": plant state not finite");
      continue;
    }
    if (std::abs(s.applied_voltage) > p.v_max * (1.0 + eps)) note_violation(u->id + ": |V| above V_max");
    if (p.quadrants != 4 && s.current < -eps) note_violation(u->id + ": negative current on a unipolar converter");
    if (p.quadrants == 1 && s.applied_voltage < -eps) note_violation(u->id + ": negative voltage on a 1-quadrant converter");
    const double i_read = u->controller->measured_current();
    if (std::abs(i_read) > u->controller->config().adc.i_max * (1.0 + eps))
      note_violation(u->id + ": ADC reading outside full scale");
    const auto& l = *u->link;
    if (l.issued_total() != l.completed_ok() + l.completed_error() + l.in_flight())
      note_violation(u->id + ": link transaction counters do not reconcile");
    if (l.issued(link::Priority::kNormal, link::Origin::kFeedback) != 0)
      note_violation(u->id + ": feedback write on the normal path");
  }

  const auto& log = server_->alarm_log();
  for (; alarm_log_checked_ < log.size(); ++alarm_log_checked_) {
    const auto& ev = log[alarm_log_checked_];
    auto& raised = alarm_raised_[{ev.ps, static_cast<int>(ev.condition)}];
    if (raised == ev.raised)
      note_violation(ev.ps + ": alarm " + std::string(chan::to_string(ev.condition)) + " transition repeated");
    raised = ev.raised;
  }
}

void Facility::run_until(sim::TimeNs t) {
  if (t > sched_.now()) sched_.advance_until(t);
  check_invariants();
}

void Facility::run_paced(double pace, const std::atomic<bool>& stop, std::optional<sim::TimeNs> end) {
  using clock = std::chrono::steady_clock;
  const auto wall0 = clock::now();
  const sim::TimeNs v0 = sched_.now();
  // virtual time moves in slices so commands from the network are picked up promptly
  constexpr sim::TimeNs kSlice = sim::kNsPerMs;
  while (!stop.load()) {
    if (end && sched_.now() >= *end) break;
    sim::TimeNs target = sched_.now() + kSlice;
    if (pace > 0.0) {
      const double wall_s = std::chrono::duration<double>(clock::now() - wall0).count();
      target = std::min(target, v0 + sim::from_seconds(wall_s * pace));
    }
    if (end) target = std::min(target, *end);
    if (target > sched_.now()) {
      sched_.advance_until(target);
    } else {
      sched_.commands().drain();
      std::this_thread::sleep_for(std::chrono::microseconds(500));
    }
  }
  check_invariants();
  flush_metrics();
}

}  // namespace pscsim::scenario
