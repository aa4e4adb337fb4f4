#include "pscsim/protocol.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "pscsim/channel_server.hpp"

namespace pscsim::proto {

using json = nlohmann::json;

namespace {

json to_json(const chan::Value& v) {
  return std::visit(
      [](const auto& x) -> json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, double>) {
          if (!std::isfinite(x)) return nullptr;
        }
        return x;
      },
      v);
}

std::optional<chan::Value> from_json(const json& v) {
  if (v.is_boolean()) return chan::Value{v.get<bool>()};
  if (v.is_number_integer()) return chan::Value{v.get<std::int64_t>()};
  if (v.is_number()) return chan::Value{v.get<double>()};
  if (v.is_string()) return chan::Value{v.get<std::string>()};
  if (v.is_object() || v.is_array()) return chan::Value{v.dump()};
  return std::nullopt;
}

json reply(const json& id, bool ok, json value, const std::string& error) {
  json r = json::object();
  r["id"] = id;
  r["ok"] = ok;
  r["value"] = std::move(value);
  r["error"] = ok ? json(nullptr) : json(error);
  return r;
}

}  // namespace

std::string encode_value(const chan::Value& v) { return to_json(v).dump(); }

std::string encode_update(const chan::Update& u) {
  json e = json::object();
  e["ev"] = "update";
  e["name"] = u.name;
  e["value"] = to_json(u.value);
  e["alarm"] = std::string(chan::to_string(u.alarm));
  e["t_ns"] = u.t_ns;
  return e.dump();
}

std::string encode_reply(std::string_view id_json, bool ok, std::string_view value_json,
                         std::string_view error) {
  return reply(json::parse(id_json), ok, json::parse(value_json), std::string(error)).dump();
}

Session::Session(chan::ChannelServer& server, Sink sink)
    : server_(server), core_(std::make_shared<Core>(Core{std::move(sink), true})) {}

Session::~Session() { close(); }

void Session::close() {
  if (!core_->open) return;
  core_->open = false;
  for (const auto& [_, id] : subs_) server_.unmonitor(id);
  subs_.clear();
}

void Session::handle_line(std::string_view line) {
  if (!core_->open) return;
  auto send = [core = core_](const json& j) {
    if (core->open && core->sink) core->sink(j.dump());
  };

  // blank lines are keep-alives
  if (line.find_first_not_of(" \t\r\n") == std::string_view::npos) return;

  json req;
  try {
    req = json::parse(line);
  } catch (const json::exception&) {
    return send(reply(nullptr, false, nullptr, "bad_request"));
  }
  if (!req.is_object()) return send(reply(nullptr, false, nullptr, "bad_request"));
  const json id = req.contains("id") ? req["id"] : json(nullptr);
  if (!req.contains("op") || !req["op"].is_string()) return send(reply(id, false, nullptr, "bad_request"));
  const std::string op = req["op"].get<std::string>();

  if (op == "list") {
    json names = json::array();
    const std::string prefix = req.contains("name") && req["name"].is_string() ? req["name"].get<std::string>() : "";
    for (const auto& n : server_.names())
      if (n.compare(0, prefix.size(), prefix) == 0) names.push_back(n);
    return send(reply(id, true, std::move(names), ""));
  }

  if (!req.contains("name") || !req["name"].is_string()) return send(reply(id, false, nullptr, "bad_request"));
  const std::string name = req["name"].get<std::string>();

  if (op == "get") {
    const auto r = server_.get(name);
    if (!r.ok) return send(reply(id, false, nullptr, r.error));
    return send(reply(id, true, to_json(r.value), ""));
  }

  if (op == "put") {
    if (!req.contains("value")) return send(reply(id, false, nullptr, "bad_request"));
    const auto value = from_json(req["value"]);
    if (!value) return send(reply(id, false, nullptr, "type_mismatch"));
    server_.put(name, *value, [send, id](const chan::PutResult& r) {
      send(reply(id, r.ok, nullptr, r.error));
    });
    return;
  }

  if (op == "monitor") {
    const auto current = server_.get(name);
    if (!current.ok) return send(reply(id, false, nullptr, current.error));
    if (!subs_.count(name)) {
      auto sub = server_.monitor(name, [core = core_](const chan::Update& u) {
        if (core->open && core->sink) core->sink(encode_update(u));
      });
      if (!sub) return send(reply(id, false, nullptr, "no_such_channel"));
      subs_.emplace(name, *sub);
    }
    return send(reply(id, true, to_json(current.value), ""));
  }

  if (op == "unmonitor") {
    auto it = subs_.find(name);
    if (it == subs_.end()) {
      return send(reply(id, false, nullptr, server_.has(name) ? "not_monitored" : "no_such_channel"));
    }
    server_.unmonitor(it->second);
    subs_.erase(it);
    return send(reply(id, true, nullptr, ""));
  }

  send(reply(id, false, nullptr, "bad_request"));
}

}  // namespace pscsim::proto
