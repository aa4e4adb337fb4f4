#include "pscsim/psc_registers.hpp"

namespace pscsim::psc {

std::string_view to_string(Nak nak) {
  switch (nak) {
    case Nak::kNone: return "none";
    case Nak::kReadOnly: return "read_only";
    case Nak::kLocal: return "local_mode";
    case Nak::kInvalidValue: return "invalid_value";
    case Nak::kUnmapped: return "unmapped";
    case Nak::kNotAnalog: return "not_analog";
  }
  return "unknown";
}

bool is_analog(Address addr) {
  switch (addr) {
    case reg::kISet:
    case reg::kIRead:
    case reg::kRLoad:
    case reg::kVOut:
    case reg::kWfOffset:
    case reg::kWfScale:
    case reg::kKp:
    case reg::kKi:
    case reg::kDacAOut:
    case reg::kDacBOut:
      return true;
    default:
      return false;
  }
}

bool is_writable(Address addr) {
  switch (addr) {
    case reg::kMode:
    case reg::kISet:
    case reg::kWfOffset:
    case reg::kWfScale:
    case reg::kTrigArm:
    case reg::kDacASource:
    case reg::kDacAOffset:
    case reg::kDacAScale:
    case reg::kDacBSource:
    case reg::kDacBOffset:
    case reg::kDacBScale:
    case reg::kDlCtrl:
    case reg::kDlData:
    case reg::kDlLoop:
      return true;
    default:
      return false;
  }
}

bool is_mapped(Address addr) {
  if (is_writable(addr)) return true;
  if (addr >= reg::kCounterFirst && addr <= reg::kCounterLast) return true;
  switch (addr) {
    case reg::kIRead:
    case reg::kStatus:
    case reg::kRLoad:
    case reg::kVOut:
    case reg::kKp:
    case reg::kKi:
    case reg::kDacAOut:
    case reg::kDacBOut:
    case reg::kDlIndex:
    case reg::kDlStatus:
    case reg::kWfLength:
      return true;
    default:
      return false;
  }
}

}  // namespace pscsim::psc
