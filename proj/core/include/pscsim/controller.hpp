#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pscsim/magnet_plant.hpp"
#include "pscsim/psc_registers.hpp"
#include "pscsim/quantizer.hpp"
#include "pscsim/sim_core.hpp"
#include "pscsim/waveform.hpp"

namespace pscsim::psc {

struct ControllerConfig {
  sim::TimeNs tick_ns = sim::kTickNs;
  double kp = 0.0;   // V/A
  double ki = 0.0;   // V/(A s)
  double f_c = 0.0;  // Hz, closed-loop bandwidth the gains were tuned for
  plant::AdcModel adc;
  double dac_lsb = 0.0;               // V, output quantum
  double r_tau = 0.1;                 // s, load-resistance estimator time constant
  double r_guard_fraction = 0.05;     // of I_max
  double trip_factor = 1.05;          // of I_max
  std::string state_path;             // persistent store; empty keeps it in memory

  /// Pole-zero cancelling PI: Kp = L*wc, Ki = R*wc, so the loop is first order.
  static ControllerConfig tuned(const plant::PlantParams& params, double f_c,
                                double noise_sigma = 0.0);
};

enum class Origin { kRemote, kFrontPanel };
enum class WaveformTarget { kVolatile, kPersistent };
enum class Dac { kA, kB };

/// The digital PS controller: regulation loop, register file, waveform engine
/// and onboard diagnostics. Mutated only from the simulation thread.
class Controller {
 public:
  using DacSink = std::function<void(sim::TimeNs, Dac, double)>;
  using WriteObserver = std::function<void(sim::TimeNs, Address, Word)>;
  using TickObserver = std::function<void(sim::TimeNs, const Controller&)>;

  Controller(std::string id, plant::Magnet* magnet, ControllerConfig cfg, sim::Scheduler& sched);

  const std::string& id() const { return id_; }
  const ControllerConfig& config() const { return cfg_; }

  Word reg_read(Address addr) const;
  Nak reg_write(Address addr, Word word, Origin origin = Origin::kRemote);

  /// One 20 us regulation step. Driven by the tick bus.
  void tick();

  /// Optical trigger input. Ignored (and counted) when not armed.
  void fire_trigger();

  /// Throws WaveformError; the persistent target survives reboot().
  void load_waveform(Waveform wf, WaveformTarget target);

  Nak assign_dac(Dac dac, Address source, double offset, double scale);

  void set_local(bool local);
  void set_link_flags(bool tx_broken, bool rx_broken);
  void reboot();

  plant::Magnet& magnet() { return *magnet_; }
  const plant::Magnet& magnet() const { return *magnet_; }
  void set_magnet(plant::Magnet* magnet) { magnet_ = magnet; }

  bool is_on() const { return on_; }
  bool is_local() const { return local_; }
  bool tripped() const { return (status_ & status::kFault) != 0; }
  double setpoint() const { return word_to_float(regs_[reg::kISet]); }
  /// Target the loop regulated to on the last tick (waveform included).
  double effective_setpoint() const { return target_; }
  double measured_current() const { return measured_; }
  double output_voltage() const { return v_out_; }
  double resistance_estimate() const { return r_est_; }
  Word status() const { return status_; }
  bool waveform_running() const { return playing_; }
  /// Index of the set-point currently interpolated from, while playing.
  std::optional<std::size_t> waveform_index() const;
  const std::optional<Waveform>& waveform() const { return waveform_; }
  std::uint64_t ticks() const { return ticks_; }
  std::uint64_t ignored_triggers() const { return ignored_triggers_; }

  void set_dac_sink(DacSink sink) { dac_sink_ = std::move(sink); }
  void set_write_observer(WriteObserver obs) { write_observer_ = std::move(obs); }
  void set_tick_observer(TickObserver obs) { tick_observer_ = std::move(obs); }

 private:
  struct DacAssignment {
    Address source = 0;
    double offset = 0.0;
    double scale = 1.0;
    bool assigned = false;
  };

  void reset_volatile();
  void restore_persistent();
  void save_persistent() const;
  double next_target();
  void trip();
  void update_registers();
  void put_float(Address addr, double v) { regs_[addr] = float_to_word(static_cast<float>(v)); }
  double get_float(Address addr) const { return word_to_float(regs_[addr]); }
  Nak handle_download(Address addr, Word word);
  DacAssignment& dac(Dac d) { return d == Dac::kA ? dac_a_ : dac_b_; }

  std::string id_;
  plant::Magnet* magnet_;
  ControllerConfig cfg_;
  sim::Scheduler& sched_;

  std::array<Word, kRegisterCount> regs_{};
  Word status_ = 0;
  bool on_ = false;
  bool local_ = false;
  bool tx_broken_ = false;
  bool rx_broken_ = false;
  bool limit_ = false;
  bool arm_pending_ = false;
  bool arm_request_ = false;
  bool armed_ = false;

  // regulation
  double v_prev_ = 0.0;
  bool loop_running_ = false;
  double e_prev_ = 0.0;
  ErrorFeedbackQuantizer quantizer_;
  double target_ = 0.0;
  double measured_ = 0.0;
  double v_out_ = 0.0;
  double r_est_ = 0.0;
  bool r_valid_ = false;
  bool r_tracking_ = false;  // guard held on the last tick
  double r_alpha_ = 0.0;

  // waveform engine
  std::optional<Waveform> waveform_;
  std::optional<Waveform> flash_;
  bool trigger_pending_ = false;
  bool playing_ = false;
  std::uint64_t wf_tick_ = 0;

  // download window
  bool dl_open_ = false;
  WaveformTarget dl_target_ = WaveformTarget::kVolatile;
  std::vector<double> dl_points_;
  bool dl_loop_ = false;
  DlStatus dl_status_ = DlStatus::kOk;

  DacAssignment dac_a_;
  DacAssignment dac_b_;

  std::uint64_t ticks_ = 0;
  std::uint64_t ignored_triggers_ = 0;
  std::uint64_t trips_ = 0;
  std::uint64_t writes_ok_ = 0;
  std::uint64_t writes_rejected_ = 0;
  std::uint64_t wf_starts_ = 0;
  std::uint64_t wf_done_ = 0;
  std::uint64_t downloads_ = 0;

  DacSink dac_sink_;
  WriteObserver write_observer_;
  TickObserver tick_observer_;
};

/// Drives every registered controller from one 50 kHz event, in
/// registration order. All controllers therefore tick phase-aligned.
class TickBus {
 public:
  explicit TickBus(sim::Scheduler& sched, sim::TimeNs first = 0);

  void add(Controller* c) { controllers_.push_back(c); }
  /// Hook run after all controllers ticked at time t.
  void set_post_tick(std::function<void(sim::TimeNs)> hook) { post_tick_ = std::move(hook); }

 private:
  std::vector<Controller*> controllers_;
  std::function<void(sim::TimeNs)> post_tick_;
  sim::PeriodicTimer timer_;
};

}  // namespace pscsim::psc
