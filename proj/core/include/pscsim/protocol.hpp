#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>

#include "pscsim/channel.hpp"

namespace pscsim::chan {
class ChannelServer;
}

namespace pscsim::proto {

/// One client session of the newline-delimited JSON protocol:
///
///   {"op":"get"|"put"|"monitor"|"unmonitor"|"list","name":..,"value":..,"id":..}
///   -> {"id":..,"ok":..,"value":..,"error":..}
///   monitor events: {"ev":"update","name":..,"value":..,"alarm":..,"t_ns":..}
///
/// Transport independent; every method runs on the simulation thread. The
/// sink receives one JSON document per call, without the trailing newline.
class Session {
 public:
  using Sink = std::function<void(std::string)>;

  Session(chan::ChannelServer& server, Sink sink);
  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  void handle_line(std::string_view line);
  /// Drops every subscription; later replies and events are discarded.
  void close();
  std::size_t subscriptions() const { return subs_.size(); }

 private:
  struct Core {
    Sink sink;
    bool open = true;
  };

  chan::ChannelServer& server_;
  std::shared_ptr<Core> core_;
  std::map<std::string, chan::SubscriptionId> subs_;
};

/// JSON text of a monitor event.
std::string encode_update(const chan::Update& u);
/// JSON text of a reply; `value_json` is already-encoded JSON ("null" for none).
std::string encode_reply(std::string_view id_json, bool ok, std::string_view value_json,
                         std::string_view error);
std::string encode_value(const chan::Value& v);

}  // namespace pscsim::proto
