#include "pscsim/controller_slave.hpp"

namespace pscsim::psc {

namespace {

link::Frame reply(link::Opcode op, Address addr, std::vector<std::uint32_t> payload = {}) {
  link::Frame f;
  f.opcode = op;
  f.addr = addr;
  f.payload = std::move(payload);
  return f;
}

link::Frame nak(Address addr, Nak reason) {
  return reply(link::Opcode::kNak, addr, {static_cast<std::uint32_t>(reason)});
}

}  // namespace

link::Frame ControllerSlave::service(const link::Frame& req) {
  const Address addr = req.addr;
  switch (req.opcode) {
    case link::Opcode::kRead:
      return reply(link::Opcode::kAck, addr, {controller_.reg_read(addr)});
    case link::Opcode::kWrite: {
      if (req.payload.size() != 1) return nak(addr, Nak::kInvalidValue);
      const Nak r = controller_.reg_write(addr, req.payload[0]);
      return r == Nak::kNone ? reply(link::Opcode::kAck, addr) : nak(addr, r);
    }
    case link::Opcode::kBlockWrite: {
      if (req.payload.empty()) return nak(addr, Nak::kInvalidValue);
      const bool fifo = addr == reg::kDlData;
      if (!fifo && addr + req.payload.size() > kRegisterCount) return nak(addr, Nak::kUnmapped);
      for (std::size_t i = 0; i < req.payload.size(); ++i) {
        const auto a = static_cast<Address>(fifo ? addr : addr + i);
        const Nak r = controller_.reg_write(a, req.payload[i]);
        if (r != Nak::kNone) return nak(a, r);
      }
      return reply(link::Opcode::kAck, addr);
    }
    case link::Opcode::kBlockRead: {
      if (req.payload.size() != 1) return nak(addr, Nak::kInvalidValue);
      const std::uint32_t n = req.payload[0];
      if (n == 0 || n > link::kMaxPayloadWords || addr + n > kRegisterCount)
        return nak(addr, Nak::kInvalidValue);
      std::vector<std::uint32_t> words(n);
      for (std::uint32_t i = 0; i < n; ++i) words[i] = controller_.reg_read(static_cast<Address>(addr + i));
      return reply(link::Opcode::kAck, addr, std::move(words));
    }
    default:
      return nak(addr, Nak::kInvalidValue);
  }
}

}  // namespace pscsim::psc
