#pragma once

#include <functional>

#include <nlohmann/json.hpp>

#include <memory>
#include <string>

#include "lslm/model.hpp"
#include "lslm/world.hpp"

namespace lslm::duplexd {

struct ServerOptions {
  std::string host = "127.0.0.1";
  int tcp_port = 7070;   // newline-delimited JSON; 0 picks a free port
  int http_port = 7071;  // /healthz, /manifest and the WebSocket at /ws; 0 picks a free port
  int threads = 2;
  int default_tick_ms = 50;
  int mu_frames = 4;
  nlohmann::json manifest = nlohmann::json::object();
};

// Builds the manifest served at /manifest: lexicon, pre-rendered commands per
// speaker, mu, tick options and model facts.
nlohmann::json make_manifest(const world::World& world, const LslmModel& model, int default_tick_ms);

class Server {
 public:
  Server(const LslmModel& model, const world::Codebook& codebook, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds both listeners and starts the I/O threads.
  void start();
  // Stops accepting, closes sessions and joins the I/O threads.
  void stop();
  // start() then block until stop() is called from another thread or a signal.
  // on_started runs once both listeners are bound.
  void run(const std::function<void()>& on_started = {});

  int tcp_port() const;
  int http_port() const;
  long sessions_started() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace lslm::duplexd
