#include "protocol_server.hpp"

#include <atomic>
#include <deque>
#include <mutex>
#include <optional>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "pscsim/channel_server.hpp"
#include "pscsim/protocol.hpp"
#include "pscsim/sim_core.hpp"

namespace pscsim::net {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

namespace {

constexpr std::size_t kMaxLine = 1 << 20;
constexpr std::size_t kMaxQueued = 1 << 16;

}  // namespace

struct ProtocolServer::Impl {
  chan::ChannelServer& server;
  sim::CommandQueue& commands;
  std::unique_ptr<asio::io_context> ioc = std::make_unique<asio::io_context>();
  std::optional<tcp::acceptor> acceptor;
  std::thread thread;
  std::atomic<std::size_t> live{0};
  bool stopped = false;

  Impl(chan::ChannelServer& s, sim::CommandQueue& q) : server(s), commands(q) {}
  void accept();
};

namespace {

class Connection : public std::enable_shared_from_this<Connection> {
 public:
  Connection(ProtocolServer::Impl& impl, tcp::socket sock) : impl_(impl), sock_(std::move(sock)) { ++impl_.live; }

  ~Connection() {
    --impl_.live;
    if (!session_) return;
    // sessions belong to the simulation thread
    if (impl_.stopped) {
      session_->close();
    } else {
      impl_.commands.post([s = std::move(session_)] { s->close(); });
    }
  }

  void start() { sniff(); }

 private:
  void sniff() {
    sock_.async_read_some(buf_.prepare(4096), [self = shared_from_this()](beast::error_code ec, std::size_t n) {
      if (ec) return;
      self->buf_.commit(n);
      const auto head = beast::buffers_to_string(self->buf_.data());
      const std::string_view get = "GET ";
      const auto k = std::min(head.size(), get.size());
      if (head.compare(0, k, get.substr(0, k)) != 0) {
        self->open_session();
        self->take_lines();
        return self->read_raw();
      }
      if (head.size() < get.size()) return self->sniff();
      self->read_http();
    });
  }

  void read_http() {
    http::async_read(sock_, buf_, req_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (websocket::is_upgrade(self->req_) && self->req_.target() == "/ws") return self->upgrade();
      self->respond();
    });
  }

  void respond() {
    auto res = std::make_shared<http::response<http::string_body>>();
    res->version(req_.version());
    res->set(http::field::content_type, "text/plain");
    if (req_.target() == "/") {
      res->result(http::status::ok);
      res->body() = "pscsim protocol server\nWebSocket endpoint: /ws\n";
    } else {
      res->result(http::status::not_found);
      res->body() = "not found\n";
    }
    res->keep_alive(false);
    res->prepare_payload();
    http::async_write(sock_, *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
      beast::error_code ignored;
      self->sock_.shutdown(tcp::socket::shutdown_both, ignored);
    });
  }

  void upgrade() {
    buf_.consume(buf_.size());
    ws_.emplace(std::move(sock_));
    ws_->text(true);
    ws_->async_accept(req_, [self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->open_session();
      self->read_ws();
    });
  }

  void open_session() {
    std::weak_ptr<Connection> weak = weak_from_this();
    auto* ioc = impl_.ioc.get();
    session_ = std::make_shared<proto::Session>(impl_.server, [weak, ioc](std::string msg) {
      asio::post(*ioc, [weak, msg = std::move(msg)]() mutable {
        if (auto c = weak.lock()) c->send(std::move(msg));
      });
    });
  }

  void read_raw() {
    sock_.async_read_some(buf_.prepare(4096), [self = shared_from_this()](beast::error_code ec, std::size_t n) {
      if (ec) return self->close();
      self->buf_.commit(n);
      self->take_lines();
      if (self->buf_.size() > kMaxLine) return self->close();
      self->read_raw();
    });
  }

  void read_ws() {
    ws_->async_read(buf_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close();
      auto text = beast::buffers_to_string(self->buf_.data());
      self->buf_.consume(self->buf_.size());
      std::size_t start = 0;
      while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        self->deliver(text.substr(start, end - start));
        start = end + 1;
      }
      self->read_ws();
    });
  }

  void take_lines() {
    auto text = beast::buffers_to_string(buf_.data());
    std::size_t used = 0;
    for (auto nl = text.find('\n'); nl != std::string::npos; nl = text.find('\n', used)) {
      deliver(text.substr(used, nl - used));
      used = nl + 1;
    }
    buf_.consume(used);
  }

  void deliver(std::string line) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) return;
    impl_.commands.post([s = session_, line = std::move(line)] { s->handle_line(line); });
  }

  void send(std::string msg) {
    if (closed_) return;
    if (queue_.size() >= kMaxQueued) return close();
    if (!ws_) msg.push_back('\n');
    queue_.push_back(std::move(msg));
    if (queue_.size() == 1) write_next();
  }

  void write_next() {
    auto done = [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close();
      self->queue_.pop_front();
      if (!self->queue_.empty()) self->write_next();
    };
    if (ws_) {
      ws_->async_write(asio::buffer(queue_.front()), std::move(done));
    } else {
      asio::async_write(sock_, asio::buffer(queue_.front()), std::move(done));
    }
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    beast::error_code ignored;
    auto& s = ws_ ? beast::get_lowest_layer(*ws_) : sock_;
    s.shutdown(tcp::socket::shutdown_both, ignored);
    s.close(ignored);
  }

  ProtocolServer::Impl& impl_;
  tcp::socket sock_;
  std::optional<websocket::stream<tcp::socket>> ws_;
  beast::flat_buffer buf_;
  http::request<http::string_body> req_;
  std::shared_ptr<proto::Session> session_;
  std::deque<std::string> queue_;
  bool closed_ = false;
};

}  // namespace

void ProtocolServer::Impl::accept() {
  acceptor->async_accept([this](beast::error_code ec, tcp::socket sock) {
    if (ec == asio::error::operation_aborted) return;
    if (!ec) std::make_shared<Connection>(*this, std::move(sock))->start();
    accept();
  });
}

ProtocolServer::ProtocolServer(chan::ChannelServer& server, sim::CommandQueue& commands, std::uint16_t port,
                               const std::string& address)
    : impl_(std::make_unique<Impl>(server, commands)) {
  const tcp::endpoint ep(asio::ip::make_address(address), port);
  impl_->acceptor.emplace(*impl_->ioc);
  impl_->acceptor->open(ep.protocol());
  impl_->acceptor->set_option(asio::socket_base::reuse_address(true));
  impl_->acceptor->bind(ep);
  impl_->acceptor->listen();
  impl_->accept();
  impl_->thread = std::thread([ioc = impl_->ioc.get()] { ioc->run(); });
}

ProtocolServer::~ProtocolServer() { stop(); }

std::uint16_t ProtocolServer::port() const {
  return impl_->acceptor ? impl_->acceptor->local_endpoint().port() : 0;
}

std::size_t ProtocolServer::connections() const { return impl_->live.load(); }

void ProtocolServer::stop() {
  if (impl_->stopped) return;
  impl_->ioc->stop();
  if (impl_->thread.joinable()) impl_->thread.join();
  impl_->stopped = true;
  // requests already queued still reach their sessions before those close
  impl_->commands.drain();
  impl_->acceptor.reset();
  impl_->ioc.reset();
}

}  // namespace pscsim::net
