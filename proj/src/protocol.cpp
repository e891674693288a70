#include "lslm/protocol.hpp"

#include <cmath>

#include "lslm/errors.hpp"
#include "lslm/eval.hpp"

namespace lslm::duplexd {

using nlohmann::json;

std::string to_string(Mode mode) { return mode == Mode::Realtime ? "realtime" : "lockstep"; }

std::string token_message(int step, int token, double irq_p) {
  json j;
  j["type"] = "token";
  j["step"] = step;
  j["token"] = token;
  j["irq_p"] = irq_p;
  j["irq_log10"] = std::log10(std::max(irq_p, 1e-30));
  return j.dump();
}

std::string error_message(std::string_view code, std::string_view message) {
  json j;
  j["type"] = "error";
  j["code"] = code;
  j["message"] = message;
  return j.dump();
}

std::string done_message(const DoneInfo& d) {
  json j;
  j["type"] = "done";
  j["reason"] = d.reason;
  j["step"] = d.step;
  j["transcript"] = d.transcript;
  if (d.latency_frames) j["latency_frames"] = *d.latency_frames;
  j["dropped_frames"] = d.dropped_frames;
  j["starved_frames"] = d.starved_frames;
  j["ignored_listens"] = d.ignored_listens;
  return j.dump();
}

std::vector<std::string> offline_token_messages(const OfflineResult& r) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < r.tokens.size(); ++i) {
    out.push_back(token_message(static_cast<int>(i) + 1, r.tokens[i], r.irq_trace[i]));
  }
  return out;
}

ProtocolSession::ProtocolSession(ProtocolContext context, std::uint64_t session_id)
    : ctx_(context), id_(session_id), tick_ms_(context.default_tick_ms) {
  if (!ctx_.model || !ctx_.codebook) throw ContractError("protocol session needs a model and a codebook");
}

std::vector<std::string> ProtocolSession::fail(std::string_view code, std::string_view message) {
  finished_ = true;
  return {error_message(code, message)};
}

std::vector<std::string> ProtocolSession::handle_line(std::string_view line) {
  while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
  if (line.empty()) return {};
  if (finished_) {
    ++ignored_listens_;
    return {};
  }
  json msg;
  try {
    msg = json::parse(line);
  } catch (const json::parse_error& e) {
    return fail("bad_message", std::string("malformed JSON: ") + e.what());
  }
  if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string()) {
    return fail("bad_message", "message must be an object with a string 'type'");
  }
  const auto type = msg["type"].get<std::string>();
  try {
    if (type == "start") return handle_start(msg);
    if (type == "listen") return handle_listen(msg);
    if (type == "stop") {
      if (!started()) return fail("no_session", "stop before start");
      std::vector<std::string> out;
      finish("client_stop", out);
      return out;
    }
  } catch (const json::exception& e) {
    return fail("bad_message", e.what());
  }
  return fail("unknown_type", "unknown message type '" + type + "'");
}

std::vector<std::string> ProtocolSession::handle_start(const json& msg) {
  if (started()) return fail("bad_message", "session already started");
  if (!msg.contains("context") || !msg["context"].is_string()) {
    return fail("bad_message", "start needs a string 'context'");
  }
  const auto context = msg["context"].get<std::string>();
  if (context.empty()) return fail("bad_context", "context must not be empty");
  if (msg.contains("fusion") && !msg["fusion"].is_null()) {
    const auto fusion = msg["fusion"].get<std::string>();
    if (!ctx_.model->has_listener() || fusion != lslm::to_string(ctx_.model->config().fusion)) {
      return fail("unsupported_fusion", "the served model does not use fusion '" + fusion + "'");
    }
  }
  const auto mode = msg.value("mode", std::string("realtime"));
  if (mode == "realtime") {
    mode_ = Mode::Realtime;
  } else if (mode == "lockstep") {
    mode_ = Mode::Lockstep;
  } else {
    return fail("bad_message", "mode must be 'realtime' or 'lockstep'");
  }
  tick_ms_ = msg.value("tick_ms", ctx_.default_tick_ms);
  if (tick_ms_ < 1 || tick_ms_ > 10000) return fail("bad_message", "tick_ms must lie in [1, 10000]");
  SamplerConfig sampler;
  sampler.seed = msg.value("seed", std::uint64_t{0});
  sampler.top_p = msg.value("top_p", sampler.top_p);
  sampler.temperature = msg.value("temperature", sampler.temperature);
  sampler.greedy = msg.value("greedy", false);
  try {
    sampler.validate();
    session_ = std::make_unique<Session>(*ctx_.model, context, sampler,
                                         mode_ == Mode::Realtime ? Starvation::Silence : Starvation::Error);
  } catch (const ConfigError& e) {
    return fail("bad_message", e.what());
  } catch (const InputError& e) {
    return fail("bad_context", e.what());
  } catch (const LengthError& e) {
    return fail("bad_context", e.what());
  }
  json ready;
  ready["type"] = "ready";
  ready["session_id"] = id_;
  ready["max_len"] = session_->max_len();
  ready["mu_frames"] = ctx_.mu_frames;
  ready["mode"] = to_string(mode_);
  ready["tick_ms"] = tick_ms_;
  ready["listening"] = session_->listening();
  ready["fusion"] = ctx_.model->has_listener() ? json(lslm::to_string(ctx_.model->config().fusion)) : json(nullptr);
  return {ready.dump()};
}

std::vector<std::string> ProtocolSession::handle_listen(const json& msg) {
  if (!started()) return fail("no_session", "listen before start");
  if (!msg.contains("symbols") || !msg["symbols"].is_array()) {
    return fail("bad_message", "listen needs an integer array 'symbols'");
  }
  const auto symbols = msg["symbols"].get<std::vector<int>>();
  for (int s : symbols) {
    if (s < 0 || s >= vocab::kListenSize) {
      return fail("bad_symbol", "listening symbol " + std::to_string(s) + " outside [0, " +
                                    std::to_string(vocab::kListenSize) + ")");
    }
  }
  const bool tagged = msg.value("tag", std::string()) == "command";
  std::vector<std::string> out;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    queue_.push_back({symbols[i], tagged && i == 0});
    if (mode_ == Mode::Realtime && queue_.size() > kQueueCapacity) {
      queue_.pop_front();
      ++dropped_frames_;
    }
  }
  if (mode_ == Mode::Lockstep) {
    while (!queue_.empty() && !finished_) {
      const Frame f = queue_.front();
      queue_.pop_front();
      step_once(f.symbol, f.command_start, out);
    }
  }
  return out;
}

std::vector<std::string> ProtocolSession::tick() {
  std::vector<std::string> out;
  if (!realtime_running()) return out;
  Frame f{vocab::kSil, false};
  if (queue_.empty()) {
    ++starved_frames_;
  } else {
    f = queue_.front();
    queue_.pop_front();
  }
  step_once(f.symbol, f.command_start, out);
  return out;
}

void ProtocolSession::step_once(int symbol, bool command_start, std::vector<std::string>& out) {
  session_->feed_listen(std::span<const int>(&symbol, 1));
  if (command_start) command_frame_ = session_->frames_fed() - 1;
  const StepResult r = session_->step();
  out.push_back(token_message(session_->steps(), r.token, r.irq_p));
  if (session_->stopped()) finish(lslm::to_string(session_->stop()->reason), out);
}

void ProtocolSession::finish(const std::string& reason, std::vector<std::string>& out) {
  DoneInfo d;
  d.reason = reason;
  d.step = session_->steps();
  d.transcript = ctx_.codebook->invert(eval::strip_specials(session_->tokens())).text;
  if (reason == "irq" && command_frame_) d.latency_frames = d.step - *command_frame_;
  d.dropped_frames = dropped_frames_;
  d.starved_frames = starved_frames_;
  d.ignored_listens = ignored_listens_;
  out.push_back(done_message(d));
  finished_ = true;
  queue_.clear();
}

}  // namespace lslm::duplexd
