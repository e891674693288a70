#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lslm/model.hpp"
#include "lslm/world.hpp"

namespace lslm {

enum class InitMode { Scratch, Frozen, Finetune };

std::string to_string(InitMode mode);
InitMode parse_init_mode(std::string_view text);

struct TrainConfig {
  float lr_max = 5e-4f;
  int warmup_steps = 500;
  // 0 derives the step count from epochs and the training-set size.
  int total_steps = 0;
  int batch_size = 32;
  int epochs = 20;
  std::uint64_t seed = 0;
  InitMode speaking_init = InitMode::Scratch;
  InitMode listening_init = InitMode::Scratch;
  std::string speaking_checkpoint;
  std::string listening_checkpoint;
  double grad_clip = 1.0;
  int mu_frames = 4;
  // Validate every this many steps; 0 validates once per epoch.
  int eval_every = 0;
  // Use at most this many validation items; 0 uses all.
  int max_val_items = 0;
  // Print progress every this many steps to stderr; 0 is silent.
  int log_every = 0;

  void validate() const;
  // Steps implied by epochs over `train_items`, or total_steps when set.
  int resolved_steps(std::size_t train_items) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Linear warmup from 0 to lr_max, then cosine decay to 0 at total_steps.
float lr_at(int step, int warmup_steps, int total_steps, float lr_max);
float lr_at(int step, const TrainConfig& config, int total_steps);

struct StepRecord {
  int step = 0;
  double loss = 0.0;  // mean per scored term
  float lr = 0.0f;
  double grad_norm = 0.0;
};

struct ValRecord {
  int step = 0;
  int epoch = 0;
  double loss = 0.0;  // mean per scored term
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<ValRecord> validations;
  int best = -1;  // index into validations

  std::optional<ValRecord> best_record() const;
  // One JSON object per line: step records, validation records, then the best pointer.
  void write_jsonl(const std::filesystem::path& path) const;
};

struct TrainResult {
  LslmModel model;  // parameters of the best validation checkpoint
  TrainLog log;
};

DuplexExample to_example(const world::SampleRecord& record);
std::vector<DuplexExample> to_examples(const std::vector<world::SampleRecord>& records);

// Mean per-term validation loss without building a graph. Uses fdm_loss for
// listening models and tts_loss for vanilla ones.
double evaluate_loss(const LslmModel& model, std::span<const DuplexExample> examples, int mu_frames,
                     int batch_size);

// Vanilla speaking-only model trained with tts_loss on full targets.
TrainResult pretrain_tts(const TrainConfig& config, ModelConfig model_config,
                         const std::vector<DuplexExample>& train, const std::vector<DuplexExample>& val);

// Frame classes for the listener proxy task.
enum class FrameClass { Silence = 0, Noise = 1, Command = 2 };
FrameClass frame_class(int symbol);

struct ListenerResult {
  LslmModel model;  // full model whose listener encoder holds the trained weights
  double val_accuracy = 0.0;
  TrainLog log;
};

// Trains the listener encoder plus a throwaway per-frame classifier.
ListenerResult pretrain_listener(const TrainConfig& config, ModelConfig model_config,
                                 const std::vector<DuplexExample>& train, const std::vector<DuplexExample>& val);
double listener_accuracy(const LslmModel& model, const Tensor& head_weight, const Tensor& head_bias,
                         std::span<const DuplexExample> examples);
void save_listener(const LslmModel& model, const std::filesystem::path& path);

// Builds the starting model for train_lslm according to the init modes and
// returns the names the optimizer may update.
std::pair<LslmModel, std::vector<std::string>> init_lslm(const TrainConfig& config, const ModelConfig& model_config);

TrainResult train_lslm(const TrainConfig& config, ModelConfig model_config, const std::vector<DuplexExample>& train,
                       const std::vector<DuplexExample>& val);

}  // namespace lslm
