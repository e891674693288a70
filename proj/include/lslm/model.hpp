#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lslm/optim.hpp"
#include "lslm/tensor.hpp"
#include "lslm/vocab.hpp"

namespace lslm {

// Where listening features join the backbone.
enum class Fusion { Early, Middle, Late };

std::string to_string(Fusion fusion);
Fusion parse_fusion(std::string_view text);

struct ListenerConfig {
  int listen_vocab_size = vocab::kListenSize;
  int conv_depth = 3;
  int kernel_size = 3;
  int d_enc = 64;

  int receptive_field() const { return 1 + conv_depth * (kernel_size - 1); }
};

// Desk-scale defaults. The reference system used 12 blocks, 12 heads, width
// 768 and a 3072-wide feed-forward layer; see ModelConfig::reference().
struct ModelConfig {
  int n_blocks = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int max_seq_len = 256;
  // false builds a vanilla TTS model with no listening parameters at all.
  bool listening = true;
  Fusion fusion = Fusion::Middle;
  ListenerConfig listener;
  std::uint64_t seed = 0;

  void validate() const;
  static ModelConfig reference();
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// ------------------------------------------------------------ sequence layout

// [BOC, context..., EOC, BOS, speak...]; the position holding BOS predicts the
// first speaking token and the final position predicts `terminal`.
struct SequenceLayout {
  std::vector<int> input_ids;           // backbone embedding ids
  std::vector<int> targets;             // -1 where the position is not scored
  std::vector<std::uint8_t> speaking;   // 1 on speaking-region positions
  int first_speaking = 0;               // index of BOS

  int length() const { return static_cast<int>(input_ids.size()); }
  int speaking_steps() const { return length() - first_speaking; }
};

SequenceLayout layout_sequence(std::span<const int> context, std::span<const int> speak,
                               int terminal, int max_seq_len);

// Row of the listening stream feeding each layout position: listening frame j
// sits at the position predicting speaking step j+1; prefix positions get -1.
// Throws DataError if `listen_frames` is shorter than the speaking region.
std::vector<int> listen_alignment(const SequenceLayout& layout, int listen_frames);

// Right-padded batch of layouts packed row-major as [batch*seq].
struct Batch {
  int batch = 0;
  int seq = 0;
  std::vector<int> input_ids;
  std::vector<int> positions;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
  std::vector<int> first_speaking;
  std::vector<int> speaking_steps;

  // Listening streams, each truncated or SIL-padded to `listen_frames`.
  int listen_frames = 0;
  std::vector<int> listen_symbols;
  // Per packed row: index into the [batch*listen_frames] feature rows, or -1.
  std::vector<int> listen_rows;

  bool has_listen() const { return listen_frames > 0; }
  std::size_t scored_terms() const;
};

Batch make_batch(std::span<const SequenceLayout> layouts);
Batch make_batch(std::span<const SequenceLayout> layouts, std::span<const std::vector<int>> listen);

// ------------------------------------------------------------ model

enum class ParamGroup { Speaking, Listening };

ParamGroup param_group(std::string_view name);
// Listener encoder proper (embedding + convolutions), as opposed to the
// projection and late-fusion head that adapt it to the backbone.
bool is_listener_encoder_param(std::string_view name);

namespace names {
std::string block(int index, std::string_view leaf);
}

class LslmModel {
 public:
  explicit LslmModel(const ModelConfig& config);
  // Adopts `params`; throws ConfigError if names or shapes do not match the config.
  LslmModel(const ModelConfig& config, ParamStore params);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  bool has_listener() const { return config_.listening; }
  std::vector<std::string> group_names(ParamGroup group) const;
  // Marks exactly `names` as requiring gradients.
  void set_trainable(const std::vector<std::string>& names);

  // symbols: [batch * frames] -> features [batch*frames, d_enc].
  Tensor encode_listen(std::span<const int> symbols, int batch, int frames) const;
  // features [rows, d_enc] -> [rows, d_model].
  Tensor project_listen(const Tensor& features) const;
  // Projected frames placed on the batch positions; zero rows elsewhere.
  Tensor align_listen(const Tensor& projected, const Batch& batch) const;
  // encode -> project -> align for a batch carrying listening streams.
  Tensor listen_pathway(const Batch& batch) const;

  // Logits [batch*seq, 68]. aligned == nullptr runs the vanilla TTS path.
  Tensor forward(const Batch& batch, const Tensor* aligned) const;

  nlohmann::json header_meta() const;
  void save(const std::filesystem::path& path) const;
  static LslmModel load(const std::filesystem::path& path);

 private:
  const Tensor& p(const std::string& name) const { return params_.at(name); }
  void init_params();
  void check_params() const;

  ModelConfig config_;
  ParamStore params_;
};

// Expected parameter shapes for a config (name -> shape), sorted by name.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config);

// ------------------------------------------------------------ losses

struct DuplexExample {
  std::vector<int> context;  // context-vocabulary ids
  std::vector<int> speak;    // full speaking target before any terminal token
  std::vector<int> listen;   // listening symbols (empty for vanilla-only data)
  std::optional<int> onset;  // interruption onset frame
};

struct LossResult {
  Tensor loss;            // summed negative log-likelihood
  std::size_t terms = 0;  // number of scored positions
};

// Speaking prefix kept for an interrupted sample: speak[0 .. onset+mu).
// Throws DataError when onset+mu exceeds the target length.
std::vector<int> irq_truncate(std::span<const int> speak, int onset, int mu_frames);

// Layout for one example under the interruption labeling rule.
SequenceLayout layout_example(const DuplexExample& ex, int mu_frames, int max_seq_len);

// Non-interrupted speaking loss through EOS, listening channel ignored.
LossResult tts_loss(const LslmModel& model, std::span<const DuplexExample> batch);
// Piecewise loss: through IRQ for interrupted examples, through EOS otherwise.
LossResult fdm_loss(const LslmModel& model, std::span<const DuplexExample> batch, int mu_frames);

}  // namespace lslm
