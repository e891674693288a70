#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lslm/session.hpp"
#include "lslm/world.hpp"

namespace lslm::duplexd {

enum class Mode { Realtime, Lockstep };
std::string to_string(Mode mode);

inline constexpr std::size_t kQueueCapacity = 64;
inline constexpr int kDefaultTickMs = 50;

// Wire formatters shared by the server and by offline tooling, so lockstep
// output can be compared byte for byte.
std::string token_message(int step, int token, double irq_p);
std::string error_message(std::string_view code, std::string_view message);

struct DoneInfo {
  std::string reason;  // "eos" | "irq" | "maxlen" | "client_stop"
  int step = 0;
  std::string transcript;
  std::optional<int> latency_frames;
  long dropped_frames = 0;
  long starved_frames = 0;
  long ignored_listens = 0;
};
std::string done_message(const DoneInfo& info);

// Token messages run_offline would produce for the same inputs.
std::vector<std::string> offline_token_messages(const OfflineResult& result);

struct ProtocolContext {
  const LslmModel* model = nullptr;
  const world::Codebook* codebook = nullptr;
  int mu_frames = 4;
  int default_tick_ms = kDefaultTickMs;
};

// Transport-independent state of one client session. Lines in, lines out.
class ProtocolSession {
 public:
  ProtocolSession(ProtocolContext context, std::uint64_t session_id);

  // Handles one inbound message; returns outbound messages in order.
  std::vector<std::string> handle_line(std::string_view line);
  // Realtime pacing: one generation step. No-op outside a running realtime session.
  std::vector<std::string> tick();

  bool started() const { return session_ != nullptr; }
  bool finished() const { return finished_; }
  // True once the transport should close after flushing.
  bool close_requested() const { return finished_; }
  Mode mode() const { return mode_; }
  int tick_ms() const { return tick_ms_; }
  bool realtime_running() const { return started() && !finished_ && mode_ == Mode::Realtime; }
  long ignored_listens() const { return ignored_listens_; }
  long dropped_frames() const { return dropped_frames_; }

 private:
  struct Frame {
    int symbol = 0;
    bool command_start = false;
  };

  std::vector<std::string> handle_start(const nlohmann::json& msg);
  std::vector<std::string> handle_listen(const nlohmann::json& msg);
  void step_once(int symbol, bool command_start, std::vector<std::string>& out);
  void finish(const std::string& reason, std::vector<std::string>& out);
  std::vector<std::string> fail(std::string_view code, std::string_view message);

  ProtocolContext ctx_;
  std::uint64_t id_;
  std::unique_ptr<Session> session_;
  Mode mode_ = Mode::Lockstep;
  int tick_ms_ = kDefaultTickMs;
  std::deque<Frame> queue_;
  std::optional<int> command_frame_;
  bool finished_ = false;
  long ignored_listens_ = 0;
  long dropped_frames_ = 0;
  long starved_frames_ = 0;
};

}  // namespace lslm::duplexd
