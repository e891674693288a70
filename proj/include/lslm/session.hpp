#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lslm/model.hpp"
#include "lslm/rng.hpp"

namespace lslm {

struct SamplerConfig {
  double top_p = 0.99;
  double temperature = 1.0;
  bool greedy = false;  // argmax decoding, the temperature -> 0 limit
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SamplerConfig& c);
void from_json(const nlohmann::json& j, SamplerConfig& c);

// Indices of the smallest probability-sorted prefix whose mass reaches top_p.
// Ties keep the lower index first.
std::vector<int> nucleus_support(std::span<const double> probs, double top_p);
// Samples from the renormalized nucleus.
int sample_top_p(std::span<const double> probs, double top_p, Rng& rng);
std::vector<double> softmax(std::span<const float> logits, double temperature = 1.0);

enum class StopReason { Eos, Irq, MaxLen };
std::string to_string(StopReason reason);

struct StopInfo {
  StopReason reason = StopReason::Eos;
  int step = 0;  // number of tokens generated, terminal included
};

// Maximum number of generation steps for a context: k*|context| + 16.
int max_generation_steps(std::size_t context_len, int k = 3);

// Causal listener run one frame at a time. Each convolution keeps only its
// kernel-sized window of past inputs.
class StreamingListener {
 public:
  explicit StreamingListener(const LslmModel& model);

  // Encodes one frame and returns its projected feature [d_model].
  std::vector<float> push(int symbol);
  // Encoder output before projection for the last pushed frame [d_enc].
  const std::vector<float>& last_encoded() const { return last_encoded_; }
  int frames() const { return frames_; }

 private:
  const LslmModel& model_;
  int frames_ = 0;
  // history_[layer] holds the last kernel_size inputs, newest first.
  std::vector<std::vector<std::vector<float>>> history_;
  std::vector<float> last_encoded_;
};

// Transformer decoder with a per-block key/value cache.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const LslmModel& model);

  // Appends one position. `listen` is the aligned listening vector
  // [d_model] or empty for a zero vector; `use_listen` selects LSLM mode.
  std::vector<float> append(int input_id, std::span<const float> listen, bool use_listen);
  int length() const { return length_; }

 private:
  const LslmModel& model_;
  int length_ = 0;
  std::vector<std::vector<float>> keys_;    // per block [length * d]
  std::vector<std::vector<float>> values_;  // per block [length * d]
};

struct StepResult {
  int token = 0;
  double irq_p = 0.0;
};

enum class Starvation { Error, Silence };

// One live duplex generation. Listening frames are fed as they arrive; step t
// consumes listening frame t-1.
class Session {
 public:
  // use_listen=false runs the vanilla speaking path (no listening input).
  Session(const LslmModel& model, std::string_view context, SamplerConfig sampler,
          Starvation starvation = Starvation::Error, std::optional<bool> use_listen = std::nullopt);

  void feed_listen(std::span<const int> symbols);
  StepResult step();

  bool stopped() const { return stop_.has_value(); }
  const std::optional<StopInfo>& stop() const { return stop_; }
  const std::vector<int>& tokens() const { return tokens_; }
  const std::vector<double>& irq_trace() const { return irq_trace_; }
  const std::vector<float>& last_logits() const { return last_logits_; }
  int steps() const { return static_cast<int>(tokens_.size()); }
  int frames_fed() const { return static_cast<int>(frames_.size()); }
  int max_len() const { return max_len_; }
  bool listening() const { return use_listen_; }
  const std::string& context() const { return context_; }
  // Number of frames filled with SIL because none had arrived in time.
  int starved_frames() const { return starved_; }

 private:
  const LslmModel& model_;
  std::string context_;
  SamplerConfig sampler_;
  Starvation starvation_;
  bool use_listen_;
  Rng rng_;
  IncrementalDecoder decoder_;
  std::optional<StreamingListener> listener_;
  std::vector<std::vector<float>> frames_;  // projected listening features
  std::vector<int> tokens_;
  std::vector<double> irq_trace_;
  std::vector<float> last_logits_;
  std::optional<StopInfo> stop_;
  int max_len_ = 0;
  int starved_ = 0;
};

struct OfflineResult {
  std::string context;
  std::vector<int> tokens;
  StopInfo stop;
  std::vector<double> irq_trace;
};

// Lockstep loop: feed frame t-1, step t, until a stop. Short streams are
// padded with SIL.
OfflineResult run_offline(const LslmModel& model, std::string_view context, std::span<const int> listen,
                          const SamplerConfig& sampler, std::optional<bool> use_listen = std::nullopt);

nlohmann::json trace_json(const OfflineResult& result, std::optional<int> onset = std::nullopt);

}  // namespace lslm
