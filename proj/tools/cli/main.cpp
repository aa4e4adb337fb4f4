// pscsim: scenario runner, protocol server and thin protocol client.
//
// Exit codes: 0 success, 1 config error, 2 runtime fault, 3 connection error.

#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <boost/asio.hpp>
#include <nlohmann/json.hpp>

#include "protocol_server.hpp"
#include "pscsim/scenario.hpp"

namespace {

using json = nlohmann::json;
namespace asio = boost::asio;
using tcp = asio::ip::tcp;

enum Exit : int { kOk = 0, kConfig = 1, kRuntime = 2, kConnection = 3 };

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

// ---------------------------------------------------------------------------
// run / serve

int report_violations(const pscsim::scenario::Facility& f) {
  const auto& v = f.violations();
  if (v.empty()) return kOk;
  for (std::size_t i = 0; i < v.size() && i < 20; ++i)
    std::cerr << "violation t_ns=" << v[i].t_ns << ": " << v[i].what << "\n";
  std::cerr << v.size() << " invariant violation(s)\n";
  return kRuntime;
}

int cmd_run(const std::string& path, std::optional<double> until, const std::string& metrics) {
  using namespace pscsim::scenario;
  std::unique_ptr<Facility> f;
  try {
    auto sc = load_scenario(path);
    if (until) sc.run.until = *until;
    if (!metrics.empty()) sc.run.metrics_path = metrics;
    sc.validate();
    f = std::make_unique<Facility>(std::move(sc));
  } catch (const ScenarioError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  }
  try {
    f->run();
    f->flush_metrics();
  } catch (const std::exception& e) {
    std::cerr << "runtime fault: " << e.what() << "\n";
    return kRuntime;
  }
  return report_violations(*f);
}

int cmd_serve(const std::string& path, std::uint16_t port, const std::string& bind, double pace,
              std::optional<double> until, const std::string& metrics) {
  using namespace pscsim::scenario;
  std::unique_ptr<Facility> f;
  try {
    auto sc = load_scenario(path);
    if (until) sc.run.until = *until;
    if (!metrics.empty()) sc.run.metrics_path = metrics;
    sc.validate();
    f = std::make_unique<Facility>(std::move(sc));
  } catch (const ScenarioError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  }

  std::unique_ptr<pscsim::net::ProtocolServer> net;
  try {
    net = std::make_unique<pscsim::net::ProtocolServer>(f->server(), f->scheduler().commands(), port, bind);
  } catch (const std::exception& e) {
    std::cerr << "cannot listen on " << bind << ":" << port << ": " << e.what() << "\n";
    return kConnection;
  }
  std::cout << "listening on port " << net->port() << std::endl;

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  // without --until the server keeps running until interrupted
  std::optional<pscsim::sim::TimeNs> end;
  if (until) end = f->until();
  int code = kOk;
  try {
    f->run_paced(pace, g_stop, end);
  } catch (const std::exception& e) {
    std::cerr << "runtime fault: " << e.what() << "\n";
    code = kRuntime;
  }
  net->stop();
  if (code != kOk) return code;
  return report_violations(*f);
}

// ---------------------------------------------------------------------------
// protocol client

struct ClientOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 7070;
  double timeout_s = 10.0;
};

class ConnectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sends one request and waits for the reply with the same id.
json exchange(const ClientOptions& o, json req) {
  asio::io_context ioc;
  tcp::socket sock(ioc);
  tcp::resolver resolver(ioc);
  boost::system::error_code ec;
  const auto endpoints = resolver.resolve(o.host, std::to_string(o.port), ec);
  if (ec) throw ConnectionError("resolve " + o.host + ": " + ec.message());

  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                            std::chrono::duration<double>(o.timeout_s));
  auto run_until_done = [&](bool& done) {
    ioc.restart();
    while (!done && ioc.run_one_until(deadline) > 0) {
    }
    if (!done) {
      sock.close();
      throw ConnectionError("timed out");
    }
  };

  bool done = false;
  asio::async_connect(sock, endpoints, [&](const boost::system::error_code& e, const tcp::endpoint&) {
    ec = e;
    done = true;
  });
  run_until_done(done);
  if (ec) throw ConnectionError("connect " + o.host + ":" + std::to_string(o.port) + ": " + ec.message());

  req["id"] = 1;
  const std::string line = req.dump() + "\n";
  asio::write(sock, asio::buffer(line), ec);
  if (ec) throw ConnectionError("send: " + ec.message());

  std::string buf;
  for (;;) {
    done = false;
    std::size_t n = 0;
    asio::async_read_until(sock, asio::dynamic_buffer(buf), '\n', [&](const boost::system::error_code& e, std::size_t k) {
      ec = e;
      n = k;
      done = true;
    });
    run_until_done(done);
    if (ec) throw ConnectionError("receive: " + ec.message());
    const std::string one = buf.substr(0, n - 1);
    buf.erase(0, n);
    json msg = json::parse(one, nullptr, false);
    if (msg.is_discarded() || msg.contains("ev")) continue;
    if (msg.value("id", json()) == 1) return msg;
  }
}

json parse_value(const std::string& text) {
  json v = json::parse(text, nullptr, false);
  if (v.is_discarded()) return text;
  return v;
}

int client_call(const ClientOptions& o, json req, bool print_value) {
  json reply;
  try {
    reply = exchange(o, std::move(req));
  } catch (const ConnectionError& e) {
    std::cerr << "connection error: " << e.what() << "\n";
    return kConnection;
  }
  if (!reply.value("ok", false)) {
    std::cerr << "error: " << reply.value("error", json("unknown")).dump() << "\n";
    return kRuntime;
  }
  if (print_value) {
    const auto& v = reply["value"];
    if (v.is_string()) {
      std::cout << v.get<std::string>() << "\n";
    } else if (v.is_array()) {
      for (const auto& x : v) std::cout << (x.is_string() ? x.get<std::string>() : x.dump()) << "\n";
    } else {
      std::cout << v.dump() << "\n";
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Power supply control system simulator"};
  app.require_subcommand(1);

  std::string scenario_path;
  std::optional<double> until;
  std::string metrics;
  auto* run = app.add_subcommand("run", "Run a scenario to completion");
  run->add_option("scenario", scenario_path, "Scenario JSON file")->required();
  run->add_option("--until", until, "Virtual end time in seconds");
  run->add_option("--metrics", metrics, "Metrics CSV output path");

  std::uint16_t serve_port = 7070;
  std::string bind = "0.0.0.0";
  double pace = 1.0;
  auto* serve = app.add_subcommand("serve", "Run a scenario with the client protocol listening");
  serve->add_option("scenario", scenario_path, "Scenario JSON file")->required();
  serve->add_option("--port", serve_port, "TCP port; WebSocket clients use /ws on the same port");
  serve->add_option("--bind", bind, "Listen address");
  serve->add_option("--pace", pace, "Virtual seconds per wall second (0 = as fast as possible)");
  serve->add_option("--until", until, "Virtual end time in seconds (default: run until interrupted)");
  serve->add_option("--metrics", metrics, "Metrics CSV output path");

  ClientOptions client;
  auto add_client_opts = [&client](CLI::App* sub) {
    sub->add_option("--host", client.host, "Server host");
    sub->add_option("--port", client.port, "Server port");
    sub->add_option("--timeout", client.timeout_s, "Reply timeout in seconds");
  };

  std::string channel;
  std::string value;
  auto* put = app.add_subcommand("put", "Write a channel");
  put->add_option("channel", channel)->required();
  put->add_option("value", value)->required();
  add_client_opts(put);

  auto* get = app.add_subcommand("get", "Read a channel");
  get->add_option("channel", channel)->required();
  add_client_opts(get);

  auto* list = app.add_subcommand("list", "List channel names");
  std::string prefix;
  list->add_option("prefix", prefix);
  add_client_opts(list);

  std::string ps;
  auto* cycle = app.add_subcommand("cycle", "Start a standardization cycle on a PS or family");
  cycle->add_option("ps", ps)->required();
  add_client_opts(cycle);

  std::string ramp_file;
  auto* ramp = app.add_subcommand("ramp", "Start a synchronized ramp from a JSON file");
  ramp->add_option("file", ramp_file)->required()->check(CLI::ExistingFile);
  add_client_opts(ramp);

  std::string fb_state;
  auto* feedback = app.add_subcommand("feedback", "Switch the orbit feedback on or off");
  feedback->add_option("state", fb_state)->required()->check(CLI::IsMember({"on", "off"}));
  add_client_opts(feedback);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  if (*run) return cmd_run(scenario_path, until, metrics);
  if (*serve) return cmd_serve(scenario_path, serve_port, bind, pace, until, metrics);
  if (*put) return client_call(client, {{"op", "put"}, {"name", channel}, {"value", parse_value(value)}}, false);
  if (*get) return client_call(client, {{"op", "get"}, {"name", channel}}, true);
  if (*list) return client_call(client, {{"op", "list"}, {"name", prefix}}, true);
  if (*cycle) return client_call(client, {{"op", "put"}, {"name", ps + ":CYCLE-CMD"}, {"value", 1}}, false);
  if (*feedback) return client_call(client, {{"op", "put"}, {"name", "FB:ENABLE"}, {"value", fb_state == "on"}}, false);
  if (*ramp) {
    std::ifstream in(ramp_file);
    std::stringstream ss;
    ss << in.rdbuf();
    const json body = json::parse(ss.str(), nullptr, false);
    if (body.is_discarded() || !body.is_object()) {
      std::cerr << "config error: " << ramp_file << " is not a JSON object\n";
      return kConfig;
    }
    return client_call(client, {{"op", "put"}, {"name", "SYS:RAMP"}, {"value", body.dump()}}, false);
  }
  return kConfig;
}
