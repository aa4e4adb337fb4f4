#pragma once

#include <cstdint>
#include <memory>
#include <string>

namespace pscsim::chan {
class ChannelServer;
}
namespace pscsim::sim {
class CommandQueue;
}

namespace pscsim::net {

/// Serves the line protocol on one TCP port. A connection that opens with an
/// HTTP GET for /ws is upgraded to WebSocket (one JSON document per text
/// message); anything else is newline-delimited JSON over the raw stream.
///
/// Network I/O runs on a private thread. Requests are posted to the
/// simulation command queue, so protocol sessions only ever run on the
/// thread that drains it. stop() must be called from that thread, after the
/// simulation loop has returned.
class ProtocolServer {
 public:
  ProtocolServer(chan::ChannelServer& server, sim::CommandQueue& commands, std::uint16_t port,
                 const std::string& address = "0.0.0.0");
  ~ProtocolServer();
  ProtocolServer(const ProtocolServer&) = delete;
  ProtocolServer& operator=(const ProtocolServer&) = delete;

  /// Bound port, useful when constructed with port 0.
  std::uint16_t port() const;
  std::size_t connections() const;
  void stop();

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace pscsim::net
