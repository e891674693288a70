#include "lslm/server.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <iostream>
#include <mutex>
#include <thread>

#include "lslm/protocol.hpp"

namespace lslm::duplexd {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using nlohmann::json;

json make_manifest(const world::World& world, const LslmModel& model, int default_tick_ms) {
  json lexicon = json::array();
  json commands = json::object();
  const auto& lex = world.lexicon();
  std::vector<int> all_speakers(world.speakers().size());
  for (std::size_t s = 0; s < all_speakers.size(); ++s) all_speakers[s] = static_cast<int>(s);
  for (std::size_t w = 0; w < lex.words.size(); ++w) {
    lexicon.push_back({{"word", lex.words[w]}, {"base", lex.base[w]}});
    json per_speaker = json::object();
    for (int s : all_speakers) per_speaker[std::to_string(s)] = world.render(lex.words[w], s);
    commands[lex.words[w]] = per_speaker;
  }
  json codebook = json::object();
  for (int c = 0; c < vocab::kContextChars; ++c) {
    codebook[std::string(1, static_cast<char>('a' + c))] = world.codebook().entries()[static_cast<std::size_t>(c)];
  }
  const auto& wc = world.config();
  return {{"scenario", world::to_string(wc.scenario)},
          {"world_seed", wc.seed},
          {"mu_frames", wc.mu_frames},
          {"window", wc.window()},
          {"command_frames", world::kCommandFrames},
          {"lexicon", lexicon},
          {"speakers", {{"train", world.train_speakers()}, {"test", world.test_speakers()}, {"all", all_speakers}}},
          {"commands", commands},
          {"codebook", codebook},
          {"listen_alphabet",
           {{"sil", vocab::kSil},
            {"steady", {vocab::kSteadyFirst, vocab::kSteadyLast}},
            {"burst", {vocab::kBurstFirst, vocab::kBurstLast}},
            {"command", {vocab::kCommandFirst, vocab::kCommandLast}}}},
          {"speak_vocab",
           {{"audio_tokens", vocab::kAudioTokens},
            {"bos", vocab::kBos},
            {"eos", vocab::kEos},
            {"irq", vocab::kIrq},
            {"spad", vocab::kSpad}}},
          {"tick_options", {20, 50, 100, 200}},
          {"default_tick_ms", default_tick_ms},
          {"model",
           {{"listening", model.has_listener()},
            {"fusion", model.has_listener() ? json(lslm::to_string(model.config().fusion)) : json(nullptr)},
            {"max_seq_len", model.config().max_seq_len}}}};
}

namespace {

struct Shared {
  const LslmModel* model = nullptr;
  const world::Codebook* codebook = nullptr;
  ServerOptions options;
  std::atomic<std::uint64_t> next_id{1};
  std::atomic<long> started{0};
};

ProtocolContext protocol_context(const Shared& shared) {
  ProtocolContext c;
  c.model = shared.model;
  c.codebook = shared.codebook;
  c.mu_frames = shared.options.mu_frames;
  c.default_tick_ms = shared.options.default_tick_ms;
  return c;
}

// One protocol session over either a raw TCP stream (one JSON message per
// line) or a WebSocket (one JSON message per text frame). All handlers run
// on the connection's strand.
template <typename Stream>
class Connection : public std::enable_shared_from_this<Connection<Stream>> {
 public:
  static constexpr bool kWebSocket = !std::is_same_v<Stream, tcp::socket>;

  Connection(Stream stream, Shared& shared)
      : stream_(std::move(stream)),
        timer_(stream_.get_executor()),
        proto_(protocol_context(shared), shared.next_id.fetch_add(1)),
        shared_(shared) {}

  void start() { read_next(); }

  template <typename Request>
  void accept(Request req) {
    if constexpr (kWebSocket) {
      stream_.text(true);
      auto self = this->shared_from_this();
      auto holder = std::make_shared<Request>(std::move(req));
      stream_.async_accept(*holder, [self, holder](beast::error_code ec) {
        if (!ec) self->read_next();
      });
    }
  }

 private:
  void read_next() {
    if (aborted_) return;
    auto self = this->shared_from_this();
    if constexpr (kWebSocket) {
      stream_.async_read(buffer_, [self](beast::error_code ec, std::size_t) {
        if (ec) return self->abort();
        const std::string line = beast::buffers_to_string(self->buffer_.data());
        self->buffer_.consume(self->buffer_.size());
        self->on_message(line);
      });
    } else {
      asio::async_read_until(stream_, line_buffer_, '\n', [self](beast::error_code ec, std::size_t n) {
        if (ec) return self->abort();
        std::string line(asio::buffers_begin(self->line_buffer_.data()),
                         asio::buffers_begin(self->line_buffer_.data()) + static_cast<std::ptrdiff_t>(n));
        self->line_buffer_.consume(n);
        if (!line.empty() && line.back() == '\n') line.pop_back();
        self->on_message(line);
      });
    }
  }

  void on_message(const std::string& line) {
    const bool was_started = proto_.started();
    send(proto_.handle_line(line));
    if (!was_started && proto_.started()) shared_.started.fetch_add(1);
    if (proto_.realtime_running() && !ticking_) {
      ticking_ = true;
      next_tick_ = std::chrono::steady_clock::now();
      schedule_tick();
    }
    if (proto_.close_requested()) begin_close();
    // Keep draining input after done so late messages are counted, not reset.
    read_next();
  }

  void schedule_tick() {
    next_tick_ += std::chrono::milliseconds(proto_.tick_ms());
    timer_.expires_at(next_tick_);
    auto self = this->shared_from_this();
    timer_.async_wait([self](beast::error_code ec) {
      if (ec || self->closing_) return;
      self->send(self->proto_.tick());
      if (self->proto_.close_requested()) {
        self->begin_close();
      } else {
        self->schedule_tick();
      }
    });
  }

  void send(std::vector<std::string> lines) {
    for (auto& l : lines) {
      if constexpr (!kWebSocket) l.push_back('\n');
      outbox_.push_back(std::move(l));
    }
    if (!writing_) write_next();
  }

  void write_next() {
    if (outbox_.empty()) {
      writing_ = false;
      if (closing_) finish_close();
      return;
    }
    writing_ = true;
    auto self = this->shared_from_this();
    auto done = [self](beast::error_code ec, std::size_t) {
      if (ec) return self->abort();
      self->outbox_.pop_front();
      self->write_next();
    };
    if constexpr (kWebSocket) {
      stream_.async_write(asio::buffer(outbox_.front()), done);
    } else {
      asio::async_write(stream_, asio::buffer(outbox_.front()), done);
    }
  }

  void begin_close() {
    closing_ = true;
    timer_.cancel();
    if (!writing_) finish_close();
  }

  void finish_close() {
    if (closed_) return;
    closed_ = true;
    if constexpr (kWebSocket) {
      auto self = this->shared_from_this();
      stream_.async_close(websocket::close_code::normal, [self](beast::error_code) {});
    } else {
      beast::error_code ec;
      stream_.shutdown(tcp::socket::shutdown_send, ec);
    }
  }

  void abort() {
    closing_ = true;
    closed_ = true;
    aborted_ = true;
    timer_.cancel();
    beast::error_code ec;
    beast::get_lowest_layer(stream_).close(ec);
  }

  Stream stream_;
  asio::steady_timer timer_;
  ProtocolSession proto_;
  Shared& shared_;
  beast::flat_buffer buffer_;
  asio::streambuf line_buffer_;
  std::deque<std::string> outbox_;
  std::chrono::steady_clock::time_point next_tick_;
  bool writing_ = false;
  bool ticking_ = false;
  bool closing_ = false;
  bool closed_ = false;
  bool aborted_ = false;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket socket, Shared& shared) : socket_(std::move(socket)), shared_(shared) {}

  void start() { read_next(); }

 private:
  void read_next() {
    req_ = {};
    auto self = shared_from_this();
    http::async_read(socket_, buffer_, req_, [self](beast::error_code ec, std::size_t) {
      if (ec) {
        beast::error_code ignored;
        self->socket_.shutdown(tcp::socket::shutdown_both, ignored);
        return;
      }
      self->route();
    });
  }

  void route() {
    const std::string target(req_.target());
    const std::string path = target.substr(0, target.find('?'));
    if (path == "/ws" && websocket::is_upgrade(req_)) {
      using Ws = websocket::stream<tcp::socket>;
      auto conn = std::make_shared<Connection<Ws>>(Ws(std::move(socket_)), shared_);
      conn->accept(std::move(req_));
      return;
    }
    auto res = std::make_shared<http::response<http::string_body>>();
    res->version(req_.version());
    res->keep_alive(req_.keep_alive());
    res->set(http::field::server, "duplexd");
    res->set(http::field::access_control_allow_origin, "*");
    if (req_.method() != http::verb::get && req_.method() != http::verb::head) {
      res->result(http::status::method_not_allowed);
      res->set(http::field::content_type, "text/plain");
      res->body() = "method not allowed\n";
    } else if (path == "/healthz") {
      res->result(http::status::ok);
      res->set(http::field::content_type, "text/plain");
      res->body() = "ok\n";
    } else if (path == "/manifest") {
      res->result(http::status::ok);
      res->set(http::field::content_type, "application/json");
      res->body() = shared_.options.manifest.dump();
    } else {
      res->result(http::status::not_found);
      res->set(http::field::content_type, "text/plain");
      res->body() = "not found\n";
    }
    res->prepare_payload();
    auto self = shared_from_this();
    http::async_write(socket_, *res, [self, res](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (res->keep_alive()) {
        self->read_next();
      } else {
        beast::error_code ignored;
        self->socket_.shutdown(tcp::socket::shutdown_send, ignored);
      }
    });
  }

  tcp::socket socket_;
  Shared& shared_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

}  // namespace

struct Server::Impl {
  Shared shared;
  asio::io_context io;
  std::optional<tcp::acceptor> tcp_acceptor;
  std::optional<tcp::acceptor> http_acceptor;
  std::vector<std::thread> threads;
  std::optional<asio::executor_work_guard<asio::io_context::executor_type>> work;
  std::mutex mu;
  std::condition_variable cv;
  bool running = false;
  int tcp_port = 0;
  int http_port = 0;

  void accept_tcp() {
    tcp_acceptor->async_accept(asio::make_strand(io), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      socket.set_option(tcp::no_delay(true));
      std::make_shared<Connection<tcp::socket>>(std::move(socket), shared)->start();
      accept_tcp();
    });
  }

  void accept_http() {
    http_acceptor->async_accept(asio::make_strand(io), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      socket.set_option(tcp::no_delay(true));
      std::make_shared<HttpSession>(std::move(socket), shared)->start();
      accept_http();
    });
  }
};

Server::Server(const LslmModel& model, const world::Codebook& codebook, ServerOptions options)
    : impl_(std::make_unique<Impl>()) {
  impl_->shared.model = &model;
  impl_->shared.codebook = &codebook;
  impl_->shared.options = std::move(options);
}

Server::~Server() { stop(); }

void Server::start() {
  auto& im = *impl_;
  const auto& o = im.shared.options;
  const auto address = asio::ip::make_address(o.host);
  auto open = [&](int port) {
    tcp::acceptor a(im.io);
    const tcp::endpoint ep(address, static_cast<unsigned short>(port));
    a.open(ep.protocol());
    a.set_option(asio::socket_base::reuse_address(true));
    a.bind(ep);
    a.listen(asio::socket_base::max_listen_connections);
    return a;
  };
  im.tcp_acceptor.emplace(open(o.tcp_port));
  im.http_acceptor.emplace(open(o.http_port));
  im.tcp_port = im.tcp_acceptor->local_endpoint().port();
  im.http_port = im.http_acceptor->local_endpoint().port();
  im.accept_tcp();
  im.accept_http();
  im.work.emplace(asio::make_work_guard(im.io));
  {
    std::lock_guard lock(im.mu);
    im.running = true;
  }
  for (int i = 0; i < std::max(1, o.threads); ++i) {
    im.threads.emplace_back([&im] { im.io.run(); });
  }
}

void Server::stop() {
  auto& im = *impl_;
  {
    std::lock_guard lock(im.mu);
    if (!im.running) return;
    im.running = false;
  }
  asio::post(im.io, [&im] {
    beast::error_code ec;
    if (im.tcp_acceptor) im.tcp_acceptor->close(ec);
    if (im.http_acceptor) im.http_acceptor->close(ec);
  });
  im.work.reset();
  im.io.stop();
  for (auto& t : im.threads) {
    if (t.joinable()) t.join();
  }
  im.threads.clear();
  im.cv.notify_all();
}

void Server::run(const std::function<void()>& on_started) {
  start();
  if (on_started) on_started();
  asio::io_context signals_io;
  asio::signal_set signals(signals_io, SIGINT, SIGTERM);
  signals.async_wait([this](beast::error_code, int) { stop(); });
  std::thread waiter([&signals_io] { signals_io.run(); });
  {
    std::unique_lock lock(impl_->mu);
    impl_->cv.wait(lock, [this] { return !impl_->running; });
  }
  signals_io.stop();
  waiter.join();
}

int Server::tcp_port() const { return impl_->tcp_port; }
int Server::http_port() const { return impl_->http_port; }
long Server::sessions_started() const { return impl_->shared.started.load(); }

}  // namespace lslm::duplexd
