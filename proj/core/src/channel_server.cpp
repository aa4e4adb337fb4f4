#include "pscsim/channel_server.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "pscsim/waveform.hpp"

namespace pscsim::chan {

using psc::Address;
using psc::Word;
namespace reg = psc::reg;
namespace status = psc::status;

namespace {

constexpr std::size_t kPollWords = 9;

std::string mode_name(Word w) {
  switch (static_cast<psc::Mode>(w)) {
    case psc::Mode::kOff: return "off";
    case psc::Mode::kOn: return "on";
    case psc::Mode::kLocal: return "local";
  }
  return "off";
}

std::optional<Word> parse_mode(const Value& v) {
  if (const auto* s = std::get_if<std::string>(&v)) {
    if (*s == "off") return 0;
    if (*s == "on") return 1;
    if (*s == "local") return 2;
    return std::nullopt;
  }
  if (const auto* b = std::get_if<bool>(&v)) return *b ? 1u : 0u;
  if (auto n = as_number(v)) {
    if (*n == 0.0 || *n == 1.0 || *n == 2.0) return static_cast<Word>(*n);
  }
  return std::nullopt;
}

std::string hyst_name(const HysteresisState& h) { return h.on_branch ? "on_branch" : "off_branch"; }

}  // namespace

std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::kLinkTx: return "link_tx";
    case Condition::kLinkRx: return "link_rx";
    case Condition::kResistance: return "resistance";
    case Condition::kFault: return "fault";
    case Condition::kCompare: return "compare";
    case Condition::kLocalMode: return "local_mode";
    case Condition::kRamp: return "ramp";
  }
  return "unknown";
}

Severity severity_of(Condition c) {
  switch (c) {
    case Condition::kLinkTx:
    case Condition::kLinkRx:
    case Condition::kResistance:
    case Condition::kFault:
      return Severity::kMajor;
    default:
      return Severity::kMinor;
  }
}

std::string_view to_string(JobState s) {
  switch (s) {
    case JobState::kPending: return "pending";
    case JobState::kRunning: return "running";
    case JobState::kDone: return "done";
    case JobState::kFailed: return "failed";
  }
  return "unknown";
}

ChannelServer::ChannelServer(sim::Scheduler& sched, ChannelServerConfig cfg)
    : sched_(sched), cfg_(cfg) {
  if (cfg_.poll_period <= 0 || cfg_.alarm_period <= 0 || cfg_.ramp_step <= 0)
    throw std::invalid_argument("channel server periods must be positive");
}

ChannelServer::~ChannelServer() = default;

// ---------------------------------------------------------------------------
// registration

void ChannelServer::add_ps(PsBinding binding) {
  if (binding.link == nullptr) throw std::invalid_argument("PS " + binding.id + " has no link");
  if (ps_index_.count(binding.id)) throw std::invalid_argument("duplicate PS id " + binding.id);
  binding.cls.validate();
  if (binding.r_nominal <= 0.0) binding.r_nominal = binding.cls.params.resistance;

  const int idx = static_cast<int>(ps_.size());
  auto rt = std::make_unique<PsRuntime>();
  rt->hyst = HysteresisTracker(binding.cls.hysteresis_tracked);
  rt->regs[reg::kWfScale] = psc::float_to_word(1.0f);
  rt->binding = std::move(binding);

  const auto& suffixes = ps_channel_suffixes();
  for (std::size_t i = 0; i < suffixes.size(); ++i) {
    const std::string name = rt->binding.id + ":" + suffixes[i];
    if (channels_.count(name)) throw std::invalid_argument("duplicate channel " + name);
    Channel ch;
    ch.name = name;
    ch.field = static_cast<Field>(i);
    ch.ps = idx;
    auto [it, _] = channels_.emplace(name, std::move(ch));
    rt->ch[i] = &it->second;
  }
  auto& c = rt->ch;
  c[static_cast<int>(Field::kISet)]->value = 0.0;
  c[static_cast<int>(Field::kIRead)]->value = 0.0;
  c[static_cast<int>(Field::kMode)]->value = std::string("off");
  c[static_cast<int>(Field::kStatus)]->value = std::int64_t{0};
  c[static_cast<int>(Field::kCompare)]->value = std::string("off");
  c[static_cast<int>(Field::kHyst)]->value = hyst_name(rt->hyst.state());
  c[static_cast<int>(Field::kCycleCmd)]->value = std::int64_t{0};
  c[static_cast<int>(Field::kRLoad)]->value = 0.0;
  c[static_cast<int>(Field::kVOut)]->value = 0.0;
  c[static_cast<int>(Field::kLinkTxOk)]->value = true;
  c[static_cast<int>(Field::kLinkRxOk)]->value = true;
  c[static_cast<int>(Field::kLocal)]->value = false;
  c[static_cast<int>(Field::kWfOffset)]->value = 0.0;
  c[static_cast<int>(Field::kWfScale)]->value = 1.0;
  c[static_cast<int>(Field::kWfLoad)]->value = std::string();
  c[static_cast<int>(Field::kTrigArm)]->value = false;
  c[static_cast<int>(Field::kAlarm)]->value = std::string();
  c[static_cast<int>(Field::kRampState)]->value = std::string("idle");

  rt->binding.link->add_state_observer(
      [this, idx](const link::LinkState& st) { on_link_state(*ps_[idx], st); });
  ps_index_.emplace(rt->binding.id, idx);
  ps_.push_back(std::move(rt));
}

void ChannelServer::prime(const std::string& id, const std::array<Word, 9>& regs) {
  auto& ps = ps_rt(id);
  ps.regs = regs;
  ps.primed = true;
  ps.hyst.set_changed(reg_float(ps, reg::kISet));
  refresh_ps_channels(ps);
}

void ChannelServer::start(sim::TimeNs first) {
  poll_timer_ = std::make_unique<sim::PeriodicTimer>(sched_, first, cfg_.poll_period,
                                                     [this](sim::TimeNs) { poll_all(); });
  alarm_timer_ = std::make_unique<sim::PeriodicTimer>(sched_, first + cfg_.alarm_period,
                                                      cfg_.alarm_period,
                                                      [this](sim::TimeNs) { alarm_scan(); });
}

void ChannelServer::add_soft(const std::string& name, Value initial, PutHandler handler) {
  if (channels_.count(name)) throw std::invalid_argument("duplicate channel " + name);
  Channel ch;
  ch.name = name;
  ch.value = std::move(initial);
  ch.handler = std::move(handler);
  channels_.emplace(name, std::move(ch));
}

void ChannelServer::set_soft(const std::string& name, const Value& value, Severity alarm) {
  publish(channel(name), value, alarm);
}

// ---------------------------------------------------------------------------
// access

std::vector<std::string> ChannelServer::names() const {
  std::vector<std::string> out;
  out.reserve(channels_.size());
  for (const auto& [name, _] : channels_) out.push_back(name);
  return out;
}

GetResult ChannelServer::get(const std::string& name) const {
  auto it = channels_.find(name);
  if (it == channels_.end()) return {false, {}, Severity::kNone, "no_such_channel"};
  return {true, it->second.value, it->second.alarm, {}};
}

std::optional<SubscriptionId> ChannelServer::monitor(const std::string& name, Monitor cb) {
  auto it = channels_.find(name);
  if (it == channels_.end()) return std::nullopt;
  const SubscriptionId id = next_sub_++;
  it->second.monitors.emplace_back(id, std::move(cb));
  subscriptions_.emplace(id, name);
  return id;
}

bool ChannelServer::unmonitor(SubscriptionId id) {
  auto it = subscriptions_.find(id);
  if (it == subscriptions_.end()) return false;
  auto& mons = channels_.at(it->second).monitors;
  mons.erase(std::remove_if(mons.begin(), mons.end(), [id](const auto& m) { return m.first == id; }),
             mons.end());
  subscriptions_.erase(it);
  return true;
}

void ChannelServer::put(const std::string& name, const Value& value, Reply reply) {
  auto done = [reply = std::move(reply)](const PutResult& r) {
    if (reply) reply(r);
  };
  auto it = channels_.find(name);
  if (it == channels_.end()) return done(PutResult::failure("no_such_channel"));
  Channel& ch = it->second;
  if (ch.field == Field::kSoft) {
    if (!ch.handler) return done(PutResult::failure("read_only"));
    return ch.handler(value, std::move(done));
  }
  put_register(*ps_[ch.ps], ch.field, value, std::move(done));
}

// ---------------------------------------------------------------------------
// publishing

ChannelServer::Channel& ChannelServer::channel(const std::string& name) {
  auto it = channels_.find(name);
  if (it == channels_.end()) throw std::out_of_range("no channel " + name);
  return it->second;
}

void ChannelServer::publish(Channel& ch, const Value& v, Severity alarm) {
  if (ch.value == v && ch.alarm == alarm) return;
  ch.value = v;
  ch.alarm = alarm;
  if (ch.monitors.empty()) return;
  const Update u{ch.name, v, alarm, sched_.now()};
  // a callback may unsubscribe, so iterate over a snapshot
  auto mons = ch.monitors;
  for (auto& [id, cb] : mons) cb(u);
}

void ChannelServer::publish(PsRuntime& ps, Field f, const Value& v, Severity alarm) {
  publish(*ps.ch[static_cast<int>(f)], v, alarm);
}

double ChannelServer::reg_float(const PsRuntime& ps, Address a) const {
  return static_cast<double>(psc::word_to_float(ps.regs[a]));
}

bool ChannelServer::is_on(const PsRuntime& ps) const {
  return ps.regs[reg::kMode] != static_cast<Word>(psc::Mode::kOff);
}

bool ChannelServer::is_local(const PsRuntime& ps) const {
  return ps.regs[reg::kMode] == static_cast<Word>(psc::Mode::kLocal) ||
         (ps.regs[reg::kStatus] & status::kLocal) != 0;
}

void ChannelServer::refresh_ps_channels(PsRuntime& ps) {
  const Word st = ps.regs[reg::kStatus];
  const bool fault = (st & status::kFault) != 0;
  set_condition(ps, Condition::kFault, fault);
  if (!is_local(ps)) set_condition(ps, Condition::kLocalMode, false);

  publish(ps, Field::kISet, reg_float(ps, reg::kISet));
  publish(ps, Field::kIRead, reg_float(ps, reg::kIRead));
  publish(ps, Field::kMode, mode_name(ps.regs[reg::kMode]));
  publish(ps, Field::kStatus, static_cast<std::int64_t>(st), fault ? Severity::kMajor : Severity::kNone);
  publish(ps, Field::kRLoad, reg_float(ps, reg::kRLoad),
          ps.conditions[static_cast<int>(Condition::kResistance)] ? Severity::kMajor : Severity::kNone);
  publish(ps, Field::kVOut, reg_float(ps, reg::kVOut));
  publish(ps, Field::kLocal, is_local(ps));
  publish(ps, Field::kWfOffset, reg_float(ps, reg::kWfOffset));
  publish(ps, Field::kWfScale, reg_float(ps, reg::kWfScale));
  publish(ps, Field::kTrigArm, ps.regs[reg::kTrigArm] != 0);
  publish(ps, Field::kCompare, std::string(to_string(ps.compare)),
          ps.compare == CompareFlag::kAlarm ? Severity::kMinor : Severity::kNone);
  publish(ps, Field::kHyst, hyst_name(ps.hyst.state()));
}

void ChannelServer::set_condition(PsRuntime& ps, Condition c, bool active) {
  auto& slot = ps.conditions[static_cast<int>(c)];
  if (slot == active) return;
  slot = active;
  alarm_log_.push_back({sched_.now(), ps.binding.id, c, active});

  Severity worst = Severity::kNone;
  std::string reason;
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    if (!ps.conditions[i]) continue;
    const auto cond = static_cast<Condition>(i);
    worst = std::max(worst, severity_of(cond));
    if (!reason.empty()) reason += ',';
    reason += to_string(cond);
  }
  publish(ps, Field::kAlarm, reason, worst);
  if (c == Condition::kResistance) {
    publish(ps, Field::kRLoad, reg_float(ps, reg::kRLoad), active ? Severity::kMajor : Severity::kNone);
  }
}

// ---------------------------------------------------------------------------
// register writes

void ChannelServer::write_reg(PsRuntime& ps, Address addr, Word word, link::Priority prio,
                              link::Origin origin, std::function<void(const PutResult&)> done) {
  auto* lk = ps.binding.link;
  if (prio == link::Priority::kHigh && lk->state().priority_busy) prio = link::Priority::kNormal;
  link::Frame f;
  f.opcode = link::Opcode::kWrite;
  f.addr = addr;
  f.payload = {word};
  const int idx = ps_index_.at(ps.binding.id);
  lk->transact(
      std::move(f), prio,
      [this, idx, done = std::move(done)](const link::TransactResult& r) {
        if (!r.ok()) return done(PutResult::failure(std::string(link::to_string(r.error))));
        if (r.nak()) {
          const auto reason = r.response.payload.empty()
                                  ? psc::Nak::kInvalidValue
                                  : static_cast<psc::Nak>(r.response.payload[0]);
          if (reason == psc::Nak::kLocal) set_condition(*ps_[idx], Condition::kLocalMode, true);
          return done(PutResult::failure(std::string(psc::to_string(reason))));
        }
        done(PutResult::success());
      },
      origin);
}

void ChannelServer::after_iset_ack(PsRuntime& ps, double value, bool track_hysteresis) {
  ps.regs[reg::kISet] = psc::float_to_word(static_cast<float>(value));
  ps.iset_acked_at = sched_.now();
  if (track_hysteresis) ps.hyst.set_changed(value);
  publish(ps, Field::kISet, reg_float(ps, reg::kISet));
  publish(ps, Field::kHyst, hyst_name(ps.hyst.state()));
}

void ChannelServer::put_register(PsRuntime& ps, Field f, const Value& v, Reply reply) {
  const int idx = ps_index_.at(ps.binding.id);
  auto float_put = [&](Address addr) {
    auto n = as_number(v);
    if (!n || !std::isfinite(*n)) return reply(PutResult::failure("type_mismatch"));
    const double value = *n;
    write_reg(ps, addr, psc::float_to_word(static_cast<float>(value)), link::Priority::kNormal,
              link::Origin::kClient, [this, idx, addr, value, reply](const PutResult& r) {
                auto& p = *ps_[idx];
                if (r.ok) {
                  if (addr == reg::kISet) {
                    after_iset_ack(p, value, true);
                  } else {
                    p.regs[addr] = psc::float_to_word(static_cast<float>(value));
                    refresh_ps_channels(p);
                  }
                }
                reply(r);
              });
  };

  switch (f) {
    case Field::kISet: return float_put(reg::kISet);
    case Field::kWfOffset: return float_put(reg::kWfOffset);
    case Field::kWfScale: return float_put(reg::kWfScale);
    case Field::kMode: {
      auto w = parse_mode(v);
      if (!w) return reply(PutResult::failure("type_mismatch"));
      const Word word = *w;
      return write_reg(ps, reg::kMode, word, link::Priority::kNormal, link::Origin::kClient,
                       [this, idx, word, reply](const PutResult& r) {
                         auto& p = *ps_[idx];
                         if (r.ok) {
                           p.regs[reg::kMode] = word;
                           if (word != static_cast<Word>(psc::Mode::kLocal))
                             p.regs[reg::kStatus] &= ~status::kLocal;
                           refresh_ps_channels(p);
                         }
                         reply(r);
                       });
    }
    case Field::kTrigArm: {
      auto b = as_bool(v);
      if (!b) return reply(PutResult::failure("type_mismatch"));
      const Word word = *b ? 1u : 0u;
      return write_reg(ps, reg::kTrigArm, word, link::Priority::kNormal, link::Origin::kClient,
                       [this, idx, word, reply](const PutResult& r) {
                         if (r.ok) {
                           ps_[idx]->regs[reg::kTrigArm] = word;
                           refresh_ps_channels(*ps_[idx]);
                         }
                         reply(r);
                       });
    }
    case Field::kCycleCmd: {
      auto b = as_bool(v);
      if (!b) return reply(PutResult::failure("type_mismatch"));
      if (!*b) return reply(PutResult::success());
      auto started = standardize(ps.binding.id);
      return reply(started.ok ? PutResult::success() : PutResult::failure(started.error));
    }
    case Field::kWfLoad: {
      const auto* s = std::get_if<std::string>(&v);
      if (s == nullptr) return reply(PutResult::failure("type_mismatch"));
      return load_waveform(ps, *s, std::move(reply));
    }
    default:
      return reply(PutResult::failure("read_only"));
  }
}

void ChannelServer::load_waveform(PsRuntime& ps, const std::string& spec, Reply reply) {
  psc::Waveform wf;
  bool persistent = false;
  try {
    std::string text = spec;
    const auto first = spec.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return reply(PutResult::failure("type_mismatch"));
    if (spec[first] != '{') {
      wf = psc::load_waveform_file(spec);
    } else {
      auto j = nlohmann::json::parse(spec);
      if (j.is_object() && j.contains("target")) {
        persistent = j["target"] == "persistent";
        j.erase("target");
      }
      wf = psc::parse_waveform(j.dump());
    }
    const auto& p = ps.binding.cls.params;
    psc::validate_waveform(wf, p.i_min(), p.i_max);
  } catch (const psc::WaveformError& e) {
    return reply(PutResult::failure(std::string(psc::to_string(e.code()))));
  } catch (const std::exception&) {
    return reply(PutResult::failure("schema"));
  }

  struct Download {
    Reply reply;
    std::string error;
    std::size_t outstanding = 0;
    std::string name;
    psc::Waveform wf;
  };
  auto dl = std::make_shared<Download>();
  dl->reply = std::move(reply);
  dl->name = wf.name.empty() ? "inline" : wf.name;
  const int idx = ps_index_.at(ps.binding.id);
  auto* lk = ps.binding.link;

  auto on_done = [this, idx, dl](const link::TransactResult& r) {
    if (dl->error.empty()) {
      if (!r.ok()) {
        dl->error = std::string(link::to_string(r.error));
      } else if (r.nak()) {
        const auto reason = r.response.payload.empty() ? psc::Nak::kInvalidValue
                                                       : static_cast<psc::Nak>(r.response.payload[0]);
        dl->error = std::string(psc::to_string(reason));
        if (reason == psc::Nak::kLocal) set_condition(*ps_[idx], Condition::kLocalMode, true);
      }
    }
    if (--dl->outstanding != 0) return;
    auto& p = *ps_[idx];
    if (dl->error.empty()) {
      p.wf_name = dl->name;
      p.regs[reg::kWfOffset] = psc::float_to_word(static_cast<float>(dl->wf.offset));
      p.regs[reg::kWfScale] = psc::float_to_word(static_cast<float>(dl->wf.scale));
      publish(p, Field::kWfLoad, p.wf_name);
      refresh_ps_channels(p);
      dl->reply(PutResult::success());
    } else {
      dl->reply(PutResult::failure(dl->error));
    }
  };

  auto send = [&](link::Opcode op, Address addr, std::vector<std::uint32_t> payload) {
    link::Frame f;
    f.opcode = op;
    f.addr = addr;
    f.payload = std::move(payload);
    ++dl->outstanding;
    lk->transact(std::move(f), link::Priority::kNormal, on_done, link::Origin::kDownload);
  };

  const auto begin = persistent ? psc::DlCommand::kBeginPersistent : psc::DlCommand::kBeginVolatile;
  send(link::Opcode::kWrite, reg::kWfOffset, {psc::float_to_word(static_cast<float>(wf.offset))});
  send(link::Opcode::kWrite, reg::kWfScale, {psc::float_to_word(static_cast<float>(wf.scale))});
  send(link::Opcode::kWrite, reg::kDlLoop, {wf.loop_mode == psc::LoopMode::kLoop ? 1u : 0u});
  send(link::Opcode::kWrite, reg::kDlCtrl, {static_cast<Word>(begin)});
  for (std::size_t i = 0; i < wf.points.size(); i += link::kMaxPayloadWords) {
    const std::size_t end = std::min(wf.points.size(), i + link::kMaxPayloadWords);
    std::vector<std::uint32_t> words;
    words.reserve(end - i);
    for (std::size_t k = i; k < end; ++k) words.push_back(psc::float_to_word(static_cast<float>(wf.points[k])));
    send(link::Opcode::kBlockWrite, reg::kDlData, std::move(words));
  }
  dl->wf = std::move(wf);
  send(link::Opcode::kWrite, reg::kDlCtrl, {static_cast<Word>(psc::DlCommand::kCommit)});
}

// ---------------------------------------------------------------------------
// polling and alarms

void ChannelServer::poll_all() {
  for (auto& ps : ps_) poll(*ps);
}

void ChannelServer::poll(PsRuntime& ps) {
  if (ps.poll_outstanding) return;
  ps.poll_outstanding = true;
  link::Frame f;
  f.opcode = link::Opcode::kBlockRead;
  f.addr = reg::kMode;
  f.payload = {static_cast<std::uint32_t>(kPollWords)};
  const int idx = ps_index_.at(ps.binding.id);
  const sim::TimeNs issued = sched_.now();
  ps.binding.link->transact(
      std::move(f), link::Priority::kNormal,
      [this, idx, issued](const link::TransactResult& r) { on_poll(*ps_[idx], issued, r); },
      link::Origin::kPoll);
}

void ChannelServer::on_poll(PsRuntime& ps, sim::TimeNs issued, const link::TransactResult& r) {
  ps.poll_outstanding = false;
  if (!r.ok() || r.nak() || r.response.payload.size() != kPollWords) return;
  const Word iset_cached = ps.regs[reg::kISet];
  for (std::size_t i = 0; i < kPollWords; ++i) ps.regs[i] = r.response.payload[i];
  // a priority write acknowledged after this poll was issued is fresher
  if (ps.iset_acked_at > issued) ps.regs[reg::kISet] = iset_cached;
  ps.primed = true;
  ++polls_completed_;

  const bool suppressed = (ps.regs[reg::kStatus] & status::kWaveformRunning) != 0 || ps.job.has_value();
  ps.compare = evaluate_compare(reg_float(ps, reg::kISet), reg_float(ps, reg::kIRead),
                                ps.binding.cls.compare_threshold(), is_on(ps), suppressed);
  set_condition(ps, Condition::kCompare, ps.compare == CompareFlag::kAlarm);
  refresh_ps_channels(ps);
}

void ChannelServer::alarm_scan() {
  for (auto& p : ps_) {
    auto& ps = *p;
    const bool valid = is_on(ps) && (ps.regs[reg::kStatus] & status::kRValid) != 0;
    if (!valid) continue;
    const double r = reg_float(ps, reg::kRLoad);
    const double nom = ps.binding.r_nominal;
    if (std::abs(r - nom) > cfg_.r_band * nom) {
      ++ps.r_strikes;
    } else {
      ps.r_strikes = 0;
    }
    set_condition(ps, Condition::kResistance, ps.r_strikes >= cfg_.r_strikes);
  }
}

void ChannelServer::on_link_state(PsRuntime& ps, const link::LinkState& st) {
  ps.tx_broken = st.tx_broken;
  ps.rx_broken = st.rx_broken;
  set_condition(ps, Condition::kLinkTx, st.tx_broken);
  set_condition(ps, Condition::kLinkRx, st.rx_broken);
  publish(ps, Field::kLinkTxOk, !st.tx_broken, st.tx_broken ? Severity::kMajor : Severity::kNone);
  publish(ps, Field::kLinkRxOk, !st.rx_broken, st.rx_broken ? Severity::kMajor : Severity::kNone);
}

// ---------------------------------------------------------------------------
// ramps and cycles

JobStart ChannelServer::standardize(const std::string& id) {
  auto it = ps_index_.find(id);
  if (it == ps_index_.end()) return {false, "no_such_ps", 0};
  auto& ps = *ps_[it->second];
  if (!is_on(ps)) return {false, "not_on", 0};
  if (is_local(ps)) return {false, "local_mode", 0};
  if (ps.tx_broken || ps.rx_broken) return {false, "link_down", 0};
  if (ps.job) return {false, "busy", 0};
  const auto& cls = ps.binding.cls;
  auto program = standardize_program(reg_float(ps, reg::kISet), cls.params.i_min(), cls.params.i_max,
                                     cls.ramp_rate, cls.cycles, sim::to_seconds(cfg_.ramp_step));
  return start_job(JobKind::kCycle, {it->second}, {std::move(program)}, sched_.now());
}

JobStart ChannelServer::sync_ramp(const RampRequest& req) {
  if (req.members.empty()) return {false, "invalid_value", 0};
  if (req.members.size() != req.targets.size()) return {false, "dimension", 0};
  const double step_s = sim::to_seconds(cfg_.ramp_step);
  if (!(req.duration_s >= step_s - 1e-12)) return {false, "invalid_duration", 0};
  std::vector<int> idx;
  std::set<std::string> seen;
  for (const auto& m : req.members) {
    auto it = ps_index_.find(m);
    if (it == ps_index_.end()) return {false, "no_such_ps", 0};
    if (!seen.insert(m).second) return {false, "duplicate_member", 0};
    idx.push_back(it->second);
  }
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& ps = *ps_[idx[i]];
    if (!ps_ready(ps.binding.id)) return {false, "member_not_ready", 0};
    if (ps.job) return {false, "busy", 0};
    const double t = req.targets[i];
    const auto& p = ps.binding.cls.params;
    if (!std::isfinite(t) || t < p.i_min() || t > p.i_max) return {false, "out_of_range", 0};
  }
  const auto n = static_cast<std::size_t>(std::max<long long>(1, std::llround(req.duration_s / step_s)));
  std::vector<std::vector<double>> values;
  for (std::size_t i = 0; i < idx.size(); ++i)
    values.push_back(linear_ramp(reg_float(*ps_[idx[i]], reg::kISet), req.targets[i], n));
  const sim::TimeNs t0 = std::max(sched_.now(), req.t0.value_or(sched_.now()));
  return start_job(JobKind::kRamp, std::move(idx), std::move(values), t0);
}

JobStart ChannelServer::start_job(JobKind kind, std::vector<int> members,
                                  std::vector<std::vector<double>> values, sim::TimeNs t0) {
  RampJob job;
  job.id = next_job_++;
  job.kind = kind;
  job.values = std::move(values);
  job.t0 = t0;
  job.first_issue.assign(members.size(), -1);
  for (int m : members) {
    auto& ps = *ps_[m];
    job.members.push_back(ps.binding.id);
    ps.job = job.id;
    publish(ps, Field::kRampState, std::string("pending"));
    if (kind == JobKind::kCycle) publish(ps, Field::kCycleCmd, std::int64_t{1});
  }
  const std::uint64_t id = job.id;
  jobs_.emplace(id, std::move(job));
  sched_.schedule_at(t0, [this, id] { job_step(id); });
  return {true, {}, id};
}

void ChannelServer::job_step(std::uint64_t id) {
  auto& job = jobs_.at(id);
  if (job.state == JobState::kDone || job.state == JobState::kFailed) return;
  const std::size_t k = job.next_step++;
  if (job.state == JobState::kPending) {
    job.state = JobState::kRunning;
    for (const auto& m : job.members)
      publish(ps_rt(m), Field::kRampState, std::string(job.kind == JobKind::kCycle ? "cycling" : "ramping"));
  }
  const auto prio = job.kind == JobKind::kRamp ? link::Priority::kHigh : link::Priority::kNormal;
  for (std::size_t i = 0; i < job.members.size(); ++i) {
    auto& ps = ps_rt(job.members[i]);
    const double value = job.values[i][k];
    if (k == 0) job.first_issue[i] = sched_.now();
    ++job.outstanding;
    const int idx = ps_index_.at(job.members[i]);
    write_reg(ps, reg::kISet, psc::float_to_word(static_cast<float>(value)), prio, link::Origin::kRamp,
              [this, id, idx, k](const PutResult& r) { job_write_done(id, idx, k, r); });
  }
  if (job.next_step < job.steps())
    sched_.schedule_at(job.t0 + static_cast<sim::TimeNs>(job.next_step) * cfg_.ramp_step,
                       [this, id] { job_step(id); });
}

void ChannelServer::job_write_done(std::uint64_t id, int idx, std::size_t step, const PutResult& r) {
  auto& job = jobs_.at(id);
  --job.outstanding;
  if (job.state != JobState::kRunning) return;
  if (!r.ok) return finish_job(job, JobState::kFailed, r.error);
  auto& ps = *ps_[idx];
  const auto pos = static_cast<std::size_t>(
      std::find(job.members.begin(), job.members.end(), ps.binding.id) - job.members.begin());
  after_iset_ack(ps, job.values[pos][step], job.kind == JobKind::kRamp);
  if (job.next_step == job.steps() && job.outstanding == 0) finish_job(job, JobState::kDone, {});
}

void ChannelServer::finish_job(RampJob& job, JobState state, std::string error) {
  job.state = state;
  job.error = std::move(error);
  for (std::size_t i = 0; i < job.members.size(); ++i) {
    auto& ps = ps_rt(job.members[i]);
    if (ps.job == job.id) ps.job.reset();
    publish(ps, Field::kRampState, std::string(to_string(state)));
    set_condition(ps, Condition::kRamp, state == JobState::kFailed);
    if (job.kind == JobKind::kCycle) {
      if (state == JobState::kDone) ps.hyst.standardized(job.values[i].back());
      publish(ps, Field::kCycleCmd, std::int64_t{0});
      publish(ps, Field::kHyst, hyst_name(ps.hyst.state()));
    }
  }
  for (auto& obs : job_observers_) obs(job);
}

const RampJob* ChannelServer::job(std::uint64_t id) const {
  auto it = jobs_.find(id);
  return it == jobs_.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------------------
// introspection

ChannelServer::PsRuntime& ChannelServer::ps_rt(const std::string& ps) {
  auto it = ps_index_.find(ps);
  if (it == ps_index_.end()) throw std::out_of_range("unknown PS " + ps);
  return *ps_[it->second];
}

const ChannelServer::PsRuntime& ChannelServer::ps_rt(const std::string& ps) const {
  auto it = ps_index_.find(ps);
  if (it == ps_index_.end()) throw std::out_of_range("unknown PS " + ps);
  return *ps_[it->second];
}

std::vector<std::string> ChannelServer::ps_ids() const {
  std::vector<std::string> out;
  for (const auto& p : ps_) out.push_back(p->binding.id);
  return out;
}

const PsClass& ChannelServer::ps_class(const std::string& ps) const { return ps_rt(ps).binding.cls; }
double ChannelServer::r_nominal(const std::string& ps) const { return ps_rt(ps).binding.r_nominal; }
double ChannelServer::set_current(const std::string& ps) const {
  return reg_float(ps_rt(ps), reg::kISet);
}

bool ChannelServer::ps_ready(const std::string& id) const {
  const auto& ps = ps_rt(id);
  return is_on(ps) && !is_local(ps) && !ps.tx_broken && !ps.rx_broken;
}

bool ChannelServer::ps_busy(const std::string& id) const { return ps_rt(id).job.has_value(); }

Severity ChannelServer::alarm_of(const std::string& id) const {
  const auto& ps = ps_rt(id);
  Severity worst = Severity::kNone;
  for (std::size_t i = 0; i < kConditionCount; ++i)
    if (ps.conditions[i]) worst = std::max(worst, severity_of(static_cast<Condition>(i)));
  return worst;
}

std::string ChannelServer::alarm_reason(const std::string& id) const {
  const auto& v = ps_rt(id).ch[static_cast<int>(Field::kAlarm)]->value;
  return std::get<std::string>(v);
}

bool ChannelServer::condition_active(const std::string& id, Condition c) const {
  return ps_rt(id).conditions[static_cast<int>(c)];
}

HysteresisState ChannelServer::hysteresis(const std::string& id) const { return ps_rt(id).hyst.state(); }
CompareFlag ChannelServer::compare(const std::string& id) const { return ps_rt(id).compare; }

}  // namespace pscsim::chan
