#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string_view>
#include <variant>
#include <vector>

namespace pscsim::link {

enum class Opcode : std::uint8_t {
  kRead = 0,
  kWrite = 1,
  kBlockWrite = 2,
  kBlockRead = 3,
  kAck = 6,
  kNak = 7,
};

inline constexpr std::size_t kMaxPayloadWords = 256;

/// Wire unit of the link. The 12-bit count field is the payload length.
///
/// Layout (big-endian):
///   byte 0..2  prio:1 | opcode:3 | addr:8 | count:12
///   byte 3     CRC-8 (poly 0x07, init 0x00) over bytes 0..2
///   then       count x 32-bit words, followed by a CRC-8 over those bytes
///              (the payload block and its CRC are absent when count == 0)
struct Frame {
  bool prio = false;
  Opcode opcode = Opcode::kRead;
  std::uint8_t addr = 0;
  std::vector<std::uint32_t> payload;

  std::size_t count() const { return payload.size(); }
  bool operator==(const Frame&) const = default;
};

enum class DecodeError { kBadLength, kBadHeader, kBadOpcode, kBadPayload, kCountOverflow };

std::string_view to_string(DecodeError e);

class FrameError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::uint8_t crc8(std::span<const std::uint8_t> bytes);

/// Encoded size in bits: 32 + (count > 0 ? 32 count + 8 : 0).
std::size_t frame_bits(std::size_t count);

/// Throws FrameError(count_overflow) when the payload exceeds 256 words.
std::vector<std::uint8_t> encode_frame(const Frame& f);

using DecodeResult = std::variant<Frame, DecodeError>;
DecodeResult decode_frame(std::span<const std::uint8_t> bytes);

}  // namespace pscsim::link
