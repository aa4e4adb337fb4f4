#pragma once

#include <bit>
#include <cstdint>
#include <optional>
#include <string_view>

namespace pscsim::psc {

using Word = std::uint32_t;
using Address = std::uint8_t;

inline constexpr std::size_t kRegisterCount = 256;

/// Register map of the controller, as seen over the link.
namespace reg {
inline constexpr Address kMode = 0x00;
inline constexpr Address kISet = 0x01;
inline constexpr Address kIRead = 0x02;
inline constexpr Address kStatus = 0x03;
inline constexpr Address kRLoad = 0x04;
inline constexpr Address kVOut = 0x05;
inline constexpr Address kWfOffset = 0x06;
inline constexpr Address kWfScale = 0x07;
inline constexpr Address kTrigArm = 0x08;
inline constexpr Address kKp = 0x0C;
inline constexpr Address kKi = 0x0D;

// Diagnostic DACs: source register, offset, scale; then the live outputs.
inline constexpr Address kDacASource = 0x10;
inline constexpr Address kDacAOffset = 0x11;
inline constexpr Address kDacAScale = 0x12;
inline constexpr Address kDacBSource = 0x13;
inline constexpr Address kDacBOffset = 0x14;
inline constexpr Address kDacBScale = 0x15;
inline constexpr Address kDacAOut = 0x16;
inline constexpr Address kDacBOut = 0x17;

// Diagnostic counters, read-only.
inline constexpr Address kCntTicks = 0x20;
inline constexpr Address kCntTriggerIgnored = 0x21;
inline constexpr Address kCntTrips = 0x22;
inline constexpr Address kCntWritesAccepted = 0x23;
inline constexpr Address kCntWritesRejected = 0x24;
inline constexpr Address kCntWaveformStarts = 0x25;
inline constexpr Address kCntWaveformDone = 0x26;
inline constexpr Address kCntDownloads = 0x27;
inline constexpr Address kCounterFirst = 0x20;
inline constexpr Address kCounterLast = 0x2F;

// Download window.
inline constexpr Address kDlCtrl = 0xF0;
inline constexpr Address kDlIndex = 0xF1;
inline constexpr Address kDlData = 0xF2;  // FIFO port: block writes all land here
inline constexpr Address kDlLoop = 0xF3;
inline constexpr Address kDlStatus = 0xF4;
inline constexpr Address kWfLength = 0xF5;
}  // namespace reg

namespace status {
inline constexpr Word kOn = 1u << 0;
inline constexpr Word kRegulating = 1u << 1;
inline constexpr Word kWaveformRunning = 1u << 2;
inline constexpr Word kTriggerArmed = 1u << 3;
inline constexpr Word kFault = 1u << 4;
inline constexpr Word kTxBroken = 1u << 5;
inline constexpr Word kRxBroken = 1u << 6;
inline constexpr Word kLocal = 1u << 7;
inline constexpr Word kLimit = 1u << 8;
inline constexpr Word kRValid = 1u << 9;
}  // namespace status

enum class Mode : Word { kOff = 0, kOn = 1, kLocal = 2 };

enum class DlCommand : Word { kAbort = 0, kBeginVolatile = 1, kBeginPersistent = 2, kCommit = 3 };

/// Result code of the last download commit, readable at reg::kDlStatus.
enum class DlStatus : Word {
  kOk = 0,
  kTooShort = 1,
  kTooLong = 2,
  kNonFinite = 3,
  kOutOfRange = 4,
  kNoSession = 5,
};

/// Reason carried by a rejected register write.
enum class Nak : Word {
  kNone = 0,
  kReadOnly = 1,
  kLocal = 2,
  kInvalidValue = 3,
  kUnmapped = 4,
  kNotAnalog = 5,
};

std::string_view to_string(Nak nak);

inline Word float_to_word(float f) { return std::bit_cast<Word>(f); }
inline float word_to_float(Word w) { return std::bit_cast<float>(w); }

/// Registers whose content is a binary32 quantity (valid DAC sources).
bool is_analog(Address addr);
/// Registers accepting remote writes.
bool is_writable(Address addr);
/// Registers with a defined meaning (readable with content).
bool is_mapped(Address addr);

}  // namespace pscsim::psc
