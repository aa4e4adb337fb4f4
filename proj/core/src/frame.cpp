#include "pscsim/frame.hpp"

#include <array>

namespace pscsim::link {

namespace {

constexpr std::array<std::uint8_t, 256> make_crc_table() {
  std::array<std::uint8_t, 256> table{};
  for (int i = 0; i < 256; ++i) {
    std::uint8_t c = static_cast<std::uint8_t>(i);
    for (int b = 0; b < 8; ++b) c = (c & 0x80) ? static_cast<std::uint8_t>((c << 1) ^ 0x07) : static_cast<std::uint8_t>(c << 1);
    table[i] = c;
  }
  return table;
}

constexpr auto kCrcTable = make_crc_table();

bool valid_opcode(std::uint8_t op) { return op <= 3 || op == 6 || op == 7; }

}  // namespace

std::string_view to_string(DecodeError e) {
  switch (e) {
    case DecodeError::kBadLength: return "bad_length";
    case DecodeError::kBadHeader: return "bad_header";
    case DecodeError::kBadOpcode: return "bad_opcode";
    case DecodeError::kBadPayload: return "bad_payload";
    case DecodeError::kCountOverflow: return "count_overflow";
  }
  return "unknown";
}

std::uint8_t crc8(std::span<const std::uint8_t> bytes) {
  std::uint8_t crc = 0;
  for (auto b : bytes) crc = kCrcTable[crc ^ b];
  return crc;
}

std::size_t frame_bits(std::size_t count) { return 32 + (count > 0 ? 32 * count + 8 : 0); }

std::vector<std::uint8_t> encode_frame(const Frame& f) {
  if (f.count() > kMaxPayloadWords)
    throw FrameError("count_overflow: " + std::to_string(f.count()) + " payload words");
  const auto op = static_cast<std::uint8_t>(f.opcode);
  if (!valid_opcode(op)) throw FrameError("bad_opcode");

  std::vector<std::uint8_t> out;
  out.reserve(frame_bits(f.count()) / 8);
  const std::uint32_t header = (f.prio ? 1u : 0u) << 23 | (static_cast<std::uint32_t>(op) & 0x7u) << 20 |
                               static_cast<std::uint32_t>(f.addr) << 12 |
                               (static_cast<std::uint32_t>(f.count()) & 0xFFFu);
  out.push_back(static_cast<std::uint8_t>(header >> 16));
  out.push_back(static_cast<std::uint8_t>(header >> 8));
  out.push_back(static_cast<std::uint8_t>(header));
  out.push_back(crc8(std::span(out.data(), 3)));
  if (f.count() == 0) return out;
  for (auto w : f.payload) {
    out.push_back(static_cast<std::uint8_t>(w >> 24));
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    out.push_back(static_cast<std::uint8_t>(w >> 8));
    out.push_back(static_cast<std::uint8_t>(w));
  }
  out.push_back(crc8(std::span(out.data() + 4, 4 * f.count())));
  return out;
}

DecodeResult decode_frame(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) return DecodeError::kBadLength;
  if (crc8(bytes.first(3)) != bytes[3]) return DecodeError::kBadHeader;
  const std::uint32_t header = static_cast<std::uint32_t>(bytes[0]) << 16 |
                               static_cast<std::uint32_t>(bytes[1]) << 8 | bytes[2];
  const auto op = static_cast<std::uint8_t>((header >> 20) & 0x7u);
  if (!valid_opcode(op)) return DecodeError::kBadOpcode;
  const std::size_t count = header & 0xFFFu;
  if (count > kMaxPayloadWords) return DecodeError::kCountOverflow;
  const std::size_t expected = frame_bits(count) / 8;
  if (bytes.size() != expected) return DecodeError::kBadLength;

  Frame f;
  f.prio = (header >> 23) & 1u;
  f.opcode = static_cast<Opcode>(op);
  f.addr = static_cast<std::uint8_t>((header >> 12) & 0xFFu);
  if (count == 0) return f;
  const auto body = bytes.subspan(4, 4 * count);
  if (crc8(body) != bytes[4 + 4 * count]) return DecodeError::kBadPayload;
  f.payload.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    f.payload[i] = static_cast<std::uint32_t>(body[4 * i]) << 24 |
                   static_cast<std::uint32_t>(body[4 * i + 1]) << 16 |
                   static_cast<std::uint32_t>(body[4 * i + 2]) << 8 | body[4 * i + 3];
  }
  return f;
}

}  // namespace pscsim::link
