#include "pscsim/controller.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

namespace pscsim::psc {

ControllerConfig ControllerConfig::tuned(const plant::PlantParams& params, double f_c,
                                         double noise_sigma) {
  ControllerConfig cfg;
  const double wc = 2.0 * std::numbers::pi * f_c;
  cfg.f_c = f_c;
  cfg.kp = params.inductance * wc;
  cfg.ki = params.resistance * wc;
  cfg.adc = plant::AdcModel{params.i_max, noise_sigma};
  cfg.dac_lsb = params.v_max / 32768.0;
  return cfg;
}

Controller::Controller(std::string id, plant::Magnet* magnet, ControllerConfig cfg,
                       sim::Scheduler& sched)
    : id_(std::move(id)),
      magnet_(magnet),
      cfg_(std::move(cfg)),
      sched_(sched),
      quantizer_(cfg_.dac_lsb > 0.0 ? cfg_.dac_lsb : 1e-9) {
  if (magnet_ == nullptr) throw std::invalid_argument("controller needs a magnet");
  if (cfg_.tick_ns <= 0) throw std::invalid_argument("controller tick must be positive");
  const double t = sim::to_seconds(cfg_.tick_ns);
  r_alpha_ = -std::expm1(-t / cfg_.r_tau);
  reset_volatile();
  restore_persistent();
}

void Controller::reset_volatile() {
  regs_.fill(0);
  on_ = false;
  local_ = false;
  limit_ = false;
  arm_pending_ = false;
  arm_request_ = false;
  armed_ = false;
  v_prev_ = e_prev_ = 0.0;
  loop_running_ = false;
  quantizer_.reset();
  target_ = measured_ = v_out_ = r_est_ = 0.0;
  r_valid_ = false;
  r_tracking_ = false;
  waveform_.reset();
  trigger_pending_ = false;
  playing_ = false;
  wf_tick_ = 0;
  dl_open_ = false;
  dl_points_.clear();
  dl_loop_ = false;
  dl_status_ = DlStatus::kOk;
  dac_a_ = {};
  dac_b_ = {};
  put_float(reg::kWfScale, 1.0);
  put_float(reg::kKp, cfg_.kp);
  put_float(reg::kKi, cfg_.ki);
  put_float(reg::kDacAScale, 1.0);
  put_float(reg::kDacBScale, 1.0);
  update_registers();
}

void Controller::restore_persistent() {
  if (!cfg_.state_path.empty() && std::filesystem::exists(cfg_.state_path)) {
    std::ifstream in(cfg_.state_path);
    std::stringstream ss;
    ss << in.rdbuf();
    const auto j = nlohmann::json::parse(ss.str(), nullptr, false);
    if (!j.is_discarded() && j.contains("waveform") && j["waveform"].is_object()) {
      flash_ = parse_waveform(j["waveform"].dump());
    }
  }
  if (flash_) {
    waveform_ = flash_;
    put_float(reg::kWfOffset, flash_->offset);
    put_float(reg::kWfScale, flash_->scale);
    regs_[reg::kWfLength] = static_cast<Word>(flash_->points.size());
  }
}

void Controller::save_persistent() const {
  if (cfg_.state_path.empty()) return;
  nlohmann::json j;
  j["format"] = "pscsim-controller-state";
  j["version"] = 1;
  j["id"] = id_;
  j["waveform"] = flash_ ? nlohmann::json::parse(waveform_to_json(*flash_)) : nlohmann::json();
  const std::string tmp = cfg_.state_path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write controller state file " + tmp);
    out << j.dump(1) << '\n';
  }
  std::filesystem::rename(tmp, cfg_.state_path);
}

void Controller::reboot() {
  reset_volatile();
  restore_persistent();
}

Word Controller::reg_read(Address addr) const {
  if (!is_mapped(addr)) return 0;
  return regs_[addr];
}

Nak Controller::reg_write(Address addr, Word word, Origin origin) {
  Nak nak = Nak::kNone;
  if (!is_mapped(addr)) {
    nak = Nak::kUnmapped;
  } else if (!is_writable(addr)) {
    nak = Nak::kReadOnly;
  } else if (local_ && origin == Origin::kRemote && addr != reg::kMode) {
    nak = Nak::kLocal;
  }
  if (nak == Nak::kNone) {
    const float f = word_to_float(word);
    switch (addr) {
      case reg::kMode:
        if (word == static_cast<Word>(Mode::kOff)) {
          on_ = false;
        } else if (word == static_cast<Word>(Mode::kOn)) {
          on_ = true;
          local_ = false;
          status_ &= ~status::kFault;
        } else if (word == static_cast<Word>(Mode::kLocal)) {
          on_ = true;
          local_ = true;
          status_ &= ~status::kFault;
        } else {
          nak = Nak::kInvalidValue;
        }
        break;
      case reg::kISet:
      case reg::kWfOffset:
      case reg::kDacAOffset:
      case reg::kDacBOffset:
        if (!std::isfinite(f)) nak = Nak::kInvalidValue;
        else regs_[addr] = word;
        if (nak == Nak::kNone && addr == reg::kDacAOffset) dac_a_.offset = f;
        if (nak == Nak::kNone && addr == reg::kDacBOffset) dac_b_.offset = f;
        break;
      case reg::kWfScale:
      case reg::kDacAScale:
      case reg::kDacBScale:
        if (!std::isfinite(f)) nak = Nak::kInvalidValue;
        else regs_[addr] = word;
        if (nak == Nak::kNone && addr == reg::kDacAScale) dac_a_.scale = f;
        if (nak == Nak::kNone && addr == reg::kDacBScale) dac_b_.scale = f;
        break;
      case reg::kTrigArm:
        arm_request_ = word != 0;
        arm_pending_ = true;
        break;
      case reg::kDacASource:
      case reg::kDacBSource: {
        if (word > 0xFF || !is_analog(static_cast<Address>(word))) {
          nak = Nak::kNotAnalog;
        } else {
          auto& d = addr == reg::kDacASource ? dac_a_ : dac_b_;
          d.source = static_cast<Address>(word);
          d.assigned = true;
          regs_[addr] = word;
        }
        break;
      }
      case reg::kDlCtrl:
      case reg::kDlData:
      case reg::kDlLoop:
        nak = handle_download(addr, word);
        break;
      default:
        nak = Nak::kReadOnly;
        break;
    }
  }
  if (nak == Nak::kNone) {
    ++writes_ok_;
    if (write_observer_) write_observer_(sched_.now(), addr, word);
  } else {
    ++writes_rejected_;
  }
  update_registers();
  return nak;
}

Nak Controller::handle_download(Address addr, Word word) {
  if (addr == reg::kDlLoop) {
    if (word > 1) return Nak::kInvalidValue;
    dl_loop_ = word == 1;
    regs_[addr] = word;
    return Nak::kNone;
  }
  if (addr == reg::kDlData) {
    if (!dl_open_) return Nak::kInvalidValue;
    // one past the limit is kept so commit can report too_long
    if (dl_points_.size() <= kMaxWaveformPoints) dl_points_.push_back(word_to_float(word));
    return Nak::kNone;
  }
  switch (static_cast<DlCommand>(word)) {
    case DlCommand::kAbort:
      dl_open_ = false;
      dl_points_.clear();
      return Nak::kNone;
    case DlCommand::kBeginVolatile:
    case DlCommand::kBeginPersistent:
      dl_open_ = true;
      dl_points_.clear();
      dl_target_ = static_cast<DlCommand>(word) == DlCommand::kBeginPersistent
                       ? WaveformTarget::kPersistent
                       : WaveformTarget::kVolatile;
      return Nak::kNone;
    case DlCommand::kCommit: {
      if (!dl_open_) {
        dl_status_ = DlStatus::kNoSession;
        return Nak::kInvalidValue;
      }
      Waveform wf;
      wf.name = "download";
      wf.points = std::move(dl_points_);
      wf.offset = get_float(reg::kWfOffset);
      wf.scale = get_float(reg::kWfScale);
      wf.loop_mode = dl_loop_ ? LoopMode::kLoop : LoopMode::kOnce;
      dl_open_ = false;
      dl_points_.clear();
      try {
        load_waveform(std::move(wf), dl_target_);
        dl_status_ = DlStatus::kOk;
        return Nak::kNone;
      } catch (const WaveformError& e) {
        switch (e.code()) {
          case WaveformErrorCode::kTooShort: dl_status_ = DlStatus::kTooShort; break;
          case WaveformErrorCode::kTooLong: dl_status_ = DlStatus::kTooLong; break;
          case WaveformErrorCode::kNonFinite: dl_status_ = DlStatus::kNonFinite; break;
          default: dl_status_ = DlStatus::kOutOfRange; break;
        }
        return Nak::kInvalidValue;
      }
    }
  }
  return Nak::kInvalidValue;
}

void Controller::load_waveform(Waveform wf, WaveformTarget target) {
  const auto& p = magnet_->params();
  validate_waveform(wf, p.i_min(), p.i_max);
  playing_ = false;
  trigger_pending_ = false;
  put_float(reg::kWfOffset, wf.offset);
  put_float(reg::kWfScale, wf.scale);
  regs_[reg::kWfLength] = static_cast<Word>(wf.points.size());
  if (target == WaveformTarget::kPersistent) {
    flash_ = wf;
    save_persistent();
  }
  waveform_ = std::move(wf);
  ++downloads_;
  update_registers();
}

Nak Controller::assign_dac(Dac d, Address source, double offset, double scale) {
  if (!is_analog(source)) return Nak::kNotAnalog;
  if (!std::isfinite(offset) || !std::isfinite(scale)) return Nak::kInvalidValue;
  auto& a = dac(d);
  a = DacAssignment{source, offset, scale, true};
  const Address base = d == Dac::kA ? reg::kDacASource : reg::kDacBSource;
  regs_[base] = source;
  put_float(base + 1, offset);
  put_float(base + 2, scale);
  return Nak::kNone;
}

void Controller::fire_trigger() {
  if (!armed_ || !waveform_) {
    ++ignored_triggers_;
    update_registers();
    return;
  }
  armed_ = false;
  trigger_pending_ = true;
  update_registers();
}

std::optional<std::size_t> Controller::waveform_index() const {
  if (!playing_ || !waveform_ || wf_tick_ == 0) return std::nullopt;
  const std::uint64_t used = wf_tick_ - 1;
  std::size_t idx = static_cast<std::size_t>(used / kTicksPerPoint);
  if (waveform_->loop_mode == LoopMode::kLoop) idx %= waveform_->points.size();
  return idx;
}

double Controller::next_target() {
  if (trigger_pending_) {
    trigger_pending_ = false;
    playing_ = true;
    wf_tick_ = 0;
    ++wf_starts_;
  }
  if (!playing_ || !waveform_) return setpoint();

  const auto& wf = *waveform_;
  const std::size_t n = wf.points.size();
  const std::uint64_t j = wf_tick_++;
  std::size_t idx = static_cast<std::size_t>(j / kTicksPerPoint);
  const double frac = static_cast<double>(j % kTicksPerPoint) / kTicksPerPoint;
  const double scale = get_float(reg::kWfScale);
  const double offset = get_float(reg::kWfOffset);

  if (wf.loop_mode == LoopMode::kOnce && idx >= n - 1) {
    const double last = scale * wf.points[n - 1] + offset;
    playing_ = false;
    ++wf_done_;
    put_float(reg::kISet, last);
    return last;
  }
  idx %= n;
  const double a = wf.points[idx];
  const double b = wf.points[(idx + 1) % n];
  return scale * (a + frac * (b - a)) + offset;
}

void Controller::trip() {
  on_ = false;
  playing_ = false;
  status_ |= status::kFault;
  ++trips_;
}

void Controller::tick() {
  ++ticks_;
  auto& m = *magnet_;
  const auto& p = m.params();
  const double t = sim::to_seconds(cfg_.tick_ns);

  if (arm_pending_) {
    armed_ = arm_request_;
    arm_pending_ = false;
  }

  if (on_ && std::abs(m.state().current) > cfg_.trip_factor * p.i_max) trip();

  measured_ = plant::measure_current(m.state(), cfg_.adc, &sched_.rng());

  double v_cmd = 0.0;
  if (on_) {
    const double raw = next_target();
    target_ = std::clamp(raw, p.i_min(), p.i_max);
    limit_ = target_ != raw;
    const double e = target_ - measured_;
    if (!loop_running_) {
      // first tick after turn-on: start the integrator from the load the
      // magnet already carries
      loop_running_ = true;
      const double r_hat = cfg_.f_c > 0.0 ? cfg_.ki / (2.0 * std::numbers::pi * cfg_.f_c) : 0.0;
      v_prev_ = r_hat * measured_ + cfg_.kp * e;
      e_prev_ = e;
    }
    const double v_raw = v_prev_ + cfg_.kp * (e - e_prev_) + cfg_.ki * t * e;
    const double v = plant::clamp_voltage(p, v_raw, measured_);
    v_prev_ = v;
    e_prev_ = e;
    if (v != v_raw && cfg_.kp > 0.0 && cfg_.f_c > 0.0) {
      // Anti-windup: while clamped, hold the implicit integrator
      // (v - Kp e) at R times the current expected at the next sample.
      const double wc = 2.0 * std::numbers::pi * cfg_.f_c;
      const double r_hat = cfg_.ki / wc;
      const double l_hat = cfg_.kp / wc;
      const double i_next = measured_ + (v - r_hat * measured_) * t / l_hat;
      e_prev_ = (v - r_hat * i_next) / cfg_.kp;
    }
    v_cmd = plant::clamp_voltage(p, quantizer_.quantize(v), measured_);
  } else {
    loop_running_ = false;
    v_prev_ = e_prev_ = 0.0;
    quantizer_.reset();
    playing_ = false;
    trigger_pending_ = false;
    limit_ = false;
    target_ = 0.0;
  }
  m.step(v_cmd);
  v_out_ = v_cmd;

  r_tracking_ = on_ && std::abs(measured_) > cfg_.r_guard_fraction * p.i_max;
  if (r_tracking_) {
    const double sample = v_out_ / measured_;
    if (!r_valid_) {
      r_est_ = sample;
      r_valid_ = true;
    } else {
      r_est_ += r_alpha_ * (sample - r_est_);
    }
  }

  update_registers();

  const sim::TimeNs now = sched_.now();
  for (Dac d : {Dac::kA, Dac::kB}) {
    auto& a = dac(d);
    if (!a.assigned) continue;
    const double out = a.scale * get_float(a.source) + a.offset;
    put_float(d == Dac::kA ? reg::kDacAOut : reg::kDacBOut, out);
    if (dac_sink_) dac_sink_(now, d, out);
  }
  if (tick_observer_) tick_observer_(now, *this);
}

void Controller::set_local(bool local) {
  local_ = local;
  update_registers();
}

void Controller::set_link_flags(bool tx_broken, bool rx_broken) {
  tx_broken_ = tx_broken;
  rx_broken_ = rx_broken;
  update_registers();
}

void Controller::update_registers() {
  Word s = status_ & status::kFault;
  if (on_) s |= status::kOn;
  if (on_ && !(status_ & status::kFault)) s |= status::kRegulating;
  if (playing_ || trigger_pending_) s |= status::kWaveformRunning;
  if (armed_) s |= status::kTriggerArmed;
  if (tx_broken_) s |= status::kTxBroken;
  if (rx_broken_) s |= status::kRxBroken;
  if (local_) s |= status::kLocal;
  if (limit_) s |= status::kLimit;
  if (r_valid_ && r_tracking_) s |= status::kRValid;
  status_ = s;

  regs_[reg::kMode] = static_cast<Word>(!on_ ? Mode::kOff : local_ ? Mode::kLocal : Mode::kOn);
  regs_[reg::kStatus] = status_;
  put_float(reg::kIRead, measured_);
  put_float(reg::kVOut, v_out_);
  if (r_valid_) put_float(reg::kRLoad, r_est_);
  regs_[reg::kTrigArm] = armed_ ? 1u : 0u;
  regs_[reg::kCntTicks] = static_cast<Word>(ticks_);
  regs_[reg::kCntTriggerIgnored] = static_cast<Word>(ignored_triggers_);
  regs_[reg::kCntTrips] = static_cast<Word>(trips_);
  regs_[reg::kCntWritesAccepted] = static_cast<Word>(writes_ok_);
  regs_[reg::kCntWritesRejected] = static_cast<Word>(writes_rejected_);
  regs_[reg::kCntWaveformStarts] = static_cast<Word>(wf_starts_);
  regs_[reg::kCntWaveformDone] = static_cast<Word>(wf_done_);
  regs_[reg::kCntDownloads] = static_cast<Word>(downloads_);
  regs_[reg::kDlIndex] = static_cast<Word>(dl_points_.size());
  regs_[reg::kDlStatus] = static_cast<Word>(dl_status_);
  regs_[reg::kDlLoop] = dl_loop_ ? 1u : 0u;
}

TickBus::TickBus(sim::Scheduler& sched, sim::TimeNs first)
    : timer_(sched, first, sim::kTickNs, [this](sim::TimeNs t) {
        for (auto* c : controllers_) c->tick();
        if (post_tick_) post_tick_(t);
      }) {}

}  // namespace pscsim::psc
