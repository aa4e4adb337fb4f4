#include "pscsim/orbit_feedback.hpp"

#include <algorithm>
#include <cmath>

#include "pscsim/channel_server.hpp"
#include "pscsim/psc_registers.hpp"

namespace pscsim::orbit {

std::string_view to_string(FeedbackState s) {
  switch (s) {
    case FeedbackState::kOff: return "off";
    case FeedbackState::kRunning: return "running";
    case FeedbackState::kPaused: return "paused";
  }
  return "off";
}

void FeedbackConfig::validate() const {
  if (correctors.empty()) throw std::invalid_argument("feedback needs at least one corrector");
  if (bpms.empty()) throw std::invalid_argument("feedback needs at least one BPM");
  if (r_om.rows() != bpms.size() || r_om.cols() != correctors.size())
    throw std::invalid_argument("feedback R_om must be BPMs x correctors");
  if (!d.empty() && d.size() != bpms.size())
    throw std::invalid_argument("feedback d must have one entry per BPM");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("feedback alpha must be in (0, 1]");
  if (noise_sigma < 0.0) throw std::invalid_argument("feedback noise_sigma must be >= 0");
  if (period_ns <= 0) throw std::invalid_argument("feedback period must be positive");
}

OrbitFeedback::OrbitFeedback(sim::Scheduler& sched, FeedbackConfig cfg, std::vector<CorrectorPort> ports)
    : sched_(sched), cfg_(std::move(cfg)), ports_(std::move(ports)), enabled_(cfg_.enabled) {
  cfg_.validate();
  if (cfg_.d.empty()) cfg_.d.assign(cfg_.bpms.size(), 0.0);
  if (ports_.size() != cfg_.correctors.size())
    throw std::invalid_argument("feedback needs one port per corrector");
  for (const auto& p : ports_)
    if (p.link == nullptr) throw std::invalid_argument("corrector " + p.ps + " has no link");
  p_ = pinv(cfg_.r_om);
  for (const auto& p : ports_) {
    commanded_.push_back(p.initial);
    applied_.push_back(p.initial);
  }
  for (auto& p : ports_)
    p.link->add_state_observer([this](const link::LinkState&) { update_state(); });
}

OrbitFeedback::~OrbitFeedback() = default;

void OrbitFeedback::attach(chan::ChannelServer& server) {
  server_ = &server;
  server.add_soft("FB:ENABLE", enabled_, [this](const chan::Value& v, chan::Reply reply) {
    auto b = chan::as_bool(v);
    if (!b) return reply(chan::PutResult::failure("type_mismatch"));
    set_enabled(*b);
    reply(chan::PutResult::success());
  });
  server.add_soft("FB:STATE", std::string(to_string(state_)));
  server.add_soft("FB:ALARM", std::string());
  server.add_soft("FB:ORBIT-RMS", 0.0);
}

void OrbitFeedback::start(sim::TimeNs first) {
  const sim::TimeNs period = cfg_.period_ns;
  const sim::TimeNs aligned = (first + period - 1) / period * period;
  timer_ = std::make_unique<sim::PeriodicTimer>(sched_, aligned, period, [this](sim::TimeNs t) { step(t); });
  update_state();
}

void OrbitFeedback::set_enabled(bool on) {
  enabled_ = on;
  update_state();
}

bool OrbitFeedback::links_up() const {
  return std::all_of(ports_.begin(), ports_.end(), [](const CorrectorPort& p) {
    return !p.link->state().tx_broken && !p.link->state().rx_broken;
  });
}

void OrbitFeedback::update_state() {
  FeedbackState next = FeedbackState::kOff;
  if (enabled_ && timer_) next = links_up() ? FeedbackState::kRunning : FeedbackState::kPaused;
  if (next == state_) return;
  state_ = next;
  if (state_ == FeedbackState::kRunning) {
    // corrections resume from what the controllers actually hold
    commanded_ = applied_;
  }
  publish();
}

void OrbitFeedback::publish() {
  if (server_ == nullptr) return;
  server_->set_soft("FB:ENABLE", enabled_);
  server_->set_soft("FB:STATE", std::string(to_string(state_)));
  if (state_ == FeedbackState::kPaused) {
    server_->set_soft("FB:ALARM", std::string("link_down"), chan::Severity::kMajor);
  } else {
    server_->set_soft("FB:ALARM", std::string(), chan::Severity::kNone);
  }
}

std::vector<double> OrbitFeedback::orbit() const {
  std::vector<double> src(ports_.size());
  for (std::size_t j = 0; j < ports_.size(); ++j) {
    src[j] = cfg_.source == OrbitSource::kPlant && ports_[j].plant_current ? ports_[j].plant_current()
                                                                           : applied_[j];
  }
  auto y = cfg_.r_om * src;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += cfg_.d[i];
  return y;
}

void OrbitFeedback::step(sim::TimeNs t) {
  if (state_ != FeedbackState::kRunning) return;
  ++steps_;
  auto y = orbit();
  for (auto& v : y) v += sched_.rng().normal(cfg_.noise_sigma);

  StepRecord rec;
  rec.t_ns = t;
  double sq = 0.0;
  for (double v : y) {
    sq += v * v;
    rec.max_abs = std::max(rec.max_abs, std::abs(v));
  }
  rec.rms = std::sqrt(sq / static_cast<double>(y.size()));

  const auto delta = p_ * y;
  for (std::size_t j = 0; j < ports_.size(); ++j) {
    auto& port = ports_[j];
    const double dI = -cfg_.alpha * delta[j];
    if (std::abs(dI) < port.lsb) continue;
    const double next = std::clamp(commanded_[j] + dI, port.i_min, port.i_max);
    if (next == commanded_[j]) continue;
    commanded_[j] = next;
    ++rec.writes;
    ++writes_issued_;

    link::Frame f;
    f.opcode = link::Opcode::kWrite;
    f.addr = psc::reg::kISet;
    const float word_value = static_cast<float>(next);
    f.payload = {psc::float_to_word(word_value)};
    port.link->transact(
        std::move(f), link::Priority::kHigh,
        [this, j, t, word_value](const link::TransactResult& r) {
          if (!r.ok() || r.nak()) {
            ++writes_failed_;
            return;
          }
          applied_[j] = static_cast<double>(word_value);
          max_latency_ = std::max(max_latency_, r.latency());
          max_step_completion_ = std::max(max_step_completion_, r.completed - t);
        },
        link::Origin::kFeedback);
  }
  history_.push_back(rec);
  if (server_ != nullptr && (steps_ % 10 == 1)) server_->set_soft("FB:ORBIT-RMS", rec.rms);
}

}  // namespace pscsim::orbit
