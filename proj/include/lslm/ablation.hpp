#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lslm/eval.hpp"
#include "lslm/trainer.hpp"

namespace lslm {

struct AblationOptions {
  TrainConfig train;  // shared by the six listening rows; init modes are overridden per row
  ModelConfig model;
  std::string vanilla_checkpoint;
  std::string listener_checkpoint;
  std::filesystem::path out_dir;  // per-row checkpoints and logs; empty keeps everything in memory
  eval::EvalOptions eval;
  std::size_t tts_items = 0;          // 0 uses the whole TTS test split
  std::size_t interactive_items = 0;  // 0 uses the whole interactive test split
};

struct AblationMode {
  InitMode speaking;
  InitMode listening;
};

// Speaking {scratch, frozen, finetune} x listening {frozen, finetune}; the vanilla row is separate.
std::vector<AblationMode> ablation_modes();
std::string mode_symbol(InitMode mode);

// True if every name in `names` holds identical bytes in `a` and `b`.
bool params_bitwise_equal(const ParamStore& a, const ParamStore& b, const std::vector<std::string>& names);

std::vector<eval::AblationRow> run_ablation(const AblationOptions& options, const world::Dataset& data);

}  // namespace lslm
