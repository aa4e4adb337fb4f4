#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pscsim/channel.hpp"

namespace pscsim::chan {
class ChannelServer;
}

namespace pscsim::machine {

struct FamilyMember {
  std::string ps;
  double offset = 0.0;  // A
  double scale = 1.0;

  double current(double family_value) const { return scale * family_value + offset; }
};

struct FamilySpec {
  std::string name;
  std::vector<FamilyMember> members;
  double set_value = 0.0;
};

inline constexpr std::size_t kKnobCount = 4;  // dnux, dnuy, dxix, dxiy

/// I_f = g_f * (E / E0) * (I0_f + (M dq)_f), dq = (dnux, dnuy, dxix, dxiy).
struct OpticModel {
  double e0 = 0.0;  // GeV
  std::vector<std::string> families;
  std::vector<double> i0;
  std::vector<std::array<double, kKnobCount>> m;
  std::vector<double> g;

  std::size_t size() const { return families.size(); }
  void validate() const;
};

struct OpticKnobs {
  double e = 0.0;  // GeV
  std::array<double, kKnobCount> dq{};
};

struct MachineConfig {
  std::vector<FamilySpec> families;
  std::optional<OpticModel> optic;
};

class MachineConfigError : public std::runtime_error {
 public:
  MachineConfigError(std::string code, const std::string& what)
      : std::runtime_error(code + ": " + what), code_(std::move(code)) {}
  /// One of schema, duplicate_member, dimension, unknown_family.
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

MachineConfig parse_machine_config(std::string_view json_text);
MachineConfig load_machine_config(const std::string& path);
std::string machine_config_to_json(const MachineConfig& cfg);

/// Family currents in the model's family order.
std::vector<double> optic_currents(const OpticModel& model, const OpticKnobs& q);

/// Test machine: 31 quadrupole and 9 sextupole families of `members_per_family`
/// PS each, with a random but well-conditioned knob matrix.
MachineConfig toy_machine(std::uint64_t seed, std::size_t members_per_family = 2);

/// Family and optic databases on top of the channel server. Registers the
/// family channels (same suffixes as a single PS) and the OPTIC:* channels.
class MachineLayer {
 public:
  MachineLayer(chan::ChannelServer& server, MachineConfig cfg, double ramp_duration_s = 1.0);
  MachineLayer(const MachineLayer&) = delete;
  MachineLayer& operator=(const MachineLayer&) = delete;

  void family_put(const std::string& family, double value, chan::Reply reply);
  void optic_put(const OpticKnobs& q, chan::Reply reply);

  const MachineConfig& config() const { return cfg_; }
  const FamilySpec& family(const std::string& name) const;
  bool has_family(const std::string& name) const { return family_index_.count(name) != 0; }
  const OpticKnobs& knobs() const { return knobs_; }
  /// Job id of the last optic transition issued as a ramp, if any.
  std::optional<std::uint64_t> last_ramp() const { return last_ramp_; }

  /// Family suffixes that exist as channels.
  static const std::vector<std::string>& family_suffixes();

 private:
  struct Target {
    std::string ps;
    double current;
  };

  std::optional<std::string> check_targets(const std::vector<Target>& targets) const;
  void apply_direct(std::vector<Target> targets, chan::Reply reply);
  void register_channels();
  void refresh(std::size_t family);
  void set_family_value(std::size_t family, double value);

  chan::ChannelServer& server_;
  MachineConfig cfg_;
  double ramp_duration_s_;
  std::map<std::string, std::size_t> family_index_;
  std::map<std::string, std::size_t> ps_family_;
  OpticKnobs knobs_;
  OpticKnobs pending_;
  std::optional<std::uint64_t> last_ramp_;
};

}  // namespace pscsim::machine
