#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "checks.hpp"
#include "lslm/protocol.hpp"
#include "lslm/server.hpp"

using namespace lslm;
using namespace lslm::duplexd;
using namespace lslm::testing;
using nlohmann::json;

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
using asio::ip::tcp;

namespace {

struct Fixture {
  LslmModel model;
  world::World world;

  explicit Fixture(std::uint64_t seed = 1) : model(small_config(Fusion::Middle, true, seed)), world(world_config(seed)) {}

  ProtocolSession session(std::uint64_t id = 1) { return ProtocolSession({&model, &world.codebook(), 4, 50}, id); }

  static world::WorldConfig world_config(std::uint64_t seed) {
    world::WorldConfig c;
    c.seed = seed;
    return c;
  }
};

std::string start_line(const std::string& context, const std::string& mode, std::uint64_t seed = 3) {
  return json{{"type", "start"}, {"context", context}, {"mode", mode}, {"seed", seed}}.dump();
}

std::string listen_line(std::vector<int> symbols) { return json{{"type", "listen"}, {"symbols", symbols}}.dump(); }

std::string type_of(const std::string& line) { return json::parse(line).at("type"); }

std::string http_get(int port, const std::string& target, http::status& status) {
  asio::io_context io;
  beast::tcp_stream stream(io);
  stream.connect(tcp::endpoint(asio::ip::make_address("127.0.0.1"), static_cast<unsigned short>(port)));
  http::request<http::empty_body> req(http::verb::get, target, 11);
  req.set(http::field::host, "127.0.0.1");
  http::write(stream, req);
  beast::flat_buffer buf;
  http::response<http::string_body> res;
  http::read(stream, buf, res);
  status = res.result();
  return res.body();
}

}  // namespace

TEST_CASE("lockstep protocol session emits ready, consecutive tokens and one done") {
  Fixture f;
  auto s = f.session();
  const auto ready = s.handle_line(start_line("hello", "lockstep"));
  REQUIRE(ready.size() == 1);
  const auto r = json::parse(ready[0]);
  CHECK(r.at("type") == "ready");
  CHECK(r.at("max_len") == max_generation_steps(5));
  CHECK(r.at("mu_frames") == 4);

  Rng rng(4);
  const auto stream = random_listen(rng, max_generation_steps(5));
  std::vector<std::string> lines;
  for (int sym : stream) {
    for (auto& l : s.handle_line(listen_line({sym}))) lines.push_back(l);
  }
  REQUIRE_FALSE(lines.empty());
  CHECK(type_of(lines.back()) == "done");
  int expect = 1;
  for (std::size_t i = 0; i + 1 < lines.size(); ++i) {
    const auto j = json::parse(lines[i]);
    CHECK(j.at("type") == "token");
    CHECK(j.at("step") == expect++);
  }
  SamplerConfig sampler;
  sampler.seed = 3;
  const auto offline = offline_token_messages(run_offline(f.model, "hello", stream, sampler));
  CHECK(std::vector<std::string>(lines.begin(), lines.end() - 1) == offline);

  CHECK(s.finished());
  CHECK(s.handle_line(listen_line({0})).empty());
  CHECK(s.handle_line(listen_line({0})).empty());
  CHECK(s.ignored_listens() == 2);
}

TEST_CASE("malformed and unknown messages") {
  Fixture f;
  {
    auto s = f.session();
    REQUIRE(s.handle_line(start_line("abc", "lockstep")).size() == 1);
    const auto out = s.handle_line("{\"type\": \"listen\", ");
    REQUIRE(out.size() == 1);
    const auto e = json::parse(out[0]);
    CHECK(e.at("type") == "error");
    CHECK(e.at("code") == "bad_message");
    CHECK(s.close_requested());
    CHECK(s.handle_line(listen_line({0})).empty());
  }
  {
    auto s = f.session();
    const auto out = s.handle_line(R"({"type":"dance"})");
    REQUIRE(out.size() == 1);
    CHECK(json::parse(out[0]).at("code") == "unknown_type");
  }
  {
    auto s = f.session();
    CHECK(json::parse(s.handle_line(listen_line({0}))[0]).at("code") == "no_session");
  }
  {
    auto s = f.session();
    s.handle_line(start_line("abc", "lockstep"));
    CHECK(json::parse(s.handle_line(listen_line({99}))[0]).at("code") == "bad_symbol");
  }
  {
    auto s = f.session();
    CHECK(json::parse(s.handle_line(start_line("ABC", "lockstep"))[0]).at("code") == "bad_context");
  }
  {
    auto s = f.session();
    CHECK(json::parse(s.handle_line(start_line("abc", "sometimes"))[0]).at("code") == "bad_message");
  }
}

TEST_CASE("client stop ends the session") {
  Fixture f;
  for (int tok : {vocab::kEos, vocab::kIrq, vocab::kBos, vocab::kSpad}) f.model.params().at("head.bias").data()[tok] = -1e4f;
  auto s = f.session();
  s.handle_line(start_line("abc", "lockstep"));
  s.handle_line(listen_line({0, 0}));
  const auto out = s.handle_line(R"({"type":"stop"})");
  REQUIRE(out.size() == 1);
  const auto d = json::parse(out[0]);
  CHECK(d.at("reason") == "client_stop");
  CHECK(d.at("step") == 2);
}

TEST_CASE("realtime frames are consumed FIFO, one per tick") {
  Fixture f;
  auto s = f.session();
  s.handle_line(start_line("abcdef", "realtime"));
  CHECK(s.tick().size() == 1);  // starved: SIL
  const std::vector<int> burst = {9, 10, 11, 12, 13, 14, 15, 16};
  CHECK(s.handle_line(listen_line(burst)).empty());

  SamplerConfig sampler;
  sampler.seed = 3;
  Session ref(f.model, "abcdef", sampler, Starvation::Silence);
  ref.step();
  for (int sym : burst) {
    const auto out = s.tick();
    REQUIRE_FALSE(out.empty());
    ref.feed_listen(std::span<const int>(&sym, 1));
    const auto r = ref.step();
    CHECK(out[0] == token_message(ref.steps(), r.token, r.irq_p));
    if (ref.stopped()) break;
  }
}

TEST_CASE("realtime queue overflow drops the oldest frames and reports them") {
  Fixture f;
  auto s = f.session();
  s.handle_line(start_line("abc", "realtime"));
  s.handle_line(listen_line(std::vector<int>(kQueueCapacity + 6, 0)));
  CHECK(s.dropped_frames() == 6);
  const auto out = s.handle_line(R"({"type":"stop"})");
  CHECK(json::parse(out.back()).at("dropped_frames") == 6);
}

TEST_CASE("tagged command frames give the IRQ latency") {
  LslmModel model(small_config(Fusion::Middle, true, 2));
  model.params().at("head.bias").data()[vocab::kIrq] = 1e4f;
  const world::World w(Fixture::world_config(2));
  ProtocolSession s({&model, &w.codebook(), 4, 50}, 7);
  s.handle_line(start_line("abc", "lockstep"));
  const auto out = s.handle_line(json{{"type", "listen"}, {"symbols", {9}}, {"tag", "command"}}.dump());
  REQUIRE(out.size() == 2);
  const auto d = json::parse(out[1]);
  CHECK(d.at("reason") == "irq");
  CHECK(d.at("latency_frames") == 1);
}

TEST_CASE("concurrent lockstep sessions over TCP match the offline engine") {
  const auto r = check_lockstep_server(8, 21);
  CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("http endpoints, WebSocket and realtime TCP sessions") {
  Fixture f(5);
  ServerOptions so;
  so.tcp_port = 0;
  so.http_port = 0;
  so.manifest = make_manifest(f.world, f.model, 50);
  Server server(f.model, f.world.codebook(), so);
  server.start();

  http::status status{};
  CHECK(http_get(server.http_port(), "/healthz", status) == "ok\n");
  CHECK(status == http::status::ok);
  const auto manifest = json::parse(http_get(server.http_port(), "/manifest", status));
  CHECK(manifest.at("mu_frames") == 4);
  CHECK(manifest.at("lexicon").size() == 1);
  CHECK(manifest.at("model").at("fusion") == "middle");
  CHECK(manifest.at("commands").size() == manifest.at("lexicon").size());
  http_get(server.http_port(), "/nowhere", status);
  CHECK(status == http::status::not_found);

  // WebSocket lockstep session.
  {
    asio::io_context io;
    beast::websocket::stream<tcp::socket> ws(io);
    ws.next_layer().connect(tcp::endpoint(asio::ip::make_address("127.0.0.1"),
                                          static_cast<unsigned short>(server.http_port())));
    ws.handshake("127.0.0.1", "/ws");
    ws.text(true);
    ws.write(asio::buffer(start_line("duplex", "lockstep", 5)));
    std::vector<std::string> lines;
    const std::vector<int> frames(max_generation_steps(6), vocab::kSil);
    for (int sym : frames) ws.write(asio::buffer(listen_line({sym})));
    beast::flat_buffer buf;
    while (true) {
      beast::error_code ec;
      ws.read(buf, ec);
      if (ec) break;
      lines.push_back(beast::buffers_to_string(buf.data()));
      buf.consume(buf.size());
      if (type_of(lines.back()) == "done" || type_of(lines.back()) == "error") break;
    }
    REQUIRE(lines.size() >= 2);
    CHECK(type_of(lines.front()) == "ready");
    CHECK(type_of(lines.back()) == "done");
    SamplerConfig sampler;
    sampler.seed = 5;
    const auto expect = offline_token_messages(run_offline(f.model, "duplex", frames, sampler));
    CHECK(std::vector<std::string>(lines.begin() + 1, lines.end() - 1) == expect);
  }

  // Realtime TCP session without listen messages runs on silence.
  {
    asio::io_context io;
    tcp::socket sock(io);
    sock.connect({asio::ip::make_address("127.0.0.1"), static_cast<unsigned short>(server.tcp_port())});
    const auto start = json{{"type", "start"}, {"context", "abc"}, {"mode", "realtime"}, {"tick_ms", 2}}.dump() + "\n";
    asio::write(sock, asio::buffer(start));
    asio::streambuf buf;
    std::string last;
    int tokens = 0;
    while (true) {
      boost::system::error_code ec;
      asio::read_until(sock, buf, '\n', ec);
      if (ec) break;
      std::istream is(&buf);
      std::getline(is, last);
      if (type_of(last) == "token") ++tokens;
      if (type_of(last) == "done" || type_of(last) == "error") break;
    }
    const auto done = json::parse(last);
    CHECK(done.at("type") == "done");
    CHECK((done.at("reason") == "eos" || done.at("reason") == "maxlen" || done.at("reason") == "irq"));
    CHECK(done.at("step") == tokens);
    CHECK(done.at("starved_frames") == tokens);
  }
  CHECK(server.sessions_started() >= 2);
  server.stop();
}
