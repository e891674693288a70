#include "lslm/ablation.hpp"

#include <cstring>

#include "lslm/checkpoint.hpp"

namespace lslm {

std::vector<AblationMode> ablation_modes() {
  std::vector<AblationMode> out;
  for (InitMode s : {InitMode::Scratch, InitMode::Frozen, InitMode::Finetune}) {
    for (InitMode l : {InitMode::Frozen, InitMode::Finetune}) out.push_back({s, l});
  }
  return out;
}

std::string mode_symbol(InitMode mode) { return to_string(mode); }

bool params_bitwise_equal(const ParamStore& a, const ParamStore& b, const std::vector<std::string>& names) {
  for (const auto& n : names) {
    if (!a.contains(n) || !b.contains(n)) return false;
    const auto x = a.at(n).data();
    const auto y = b.at(n).data();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
  }
  return true;
}

std::vector<eval::AblationRow> run_ablation(const AblationOptions& o, const world::Dataset& data) {
  const world::World w(data.config);
  const auto tts_items = o.tts_items == 0 || o.tts_items >= data.tts_test.size()
                             ? data.tts_test
                             : std::vector<world::SampleRecord>(data.tts_test.begin(),
                                                                data.tts_test.begin() + static_cast<std::ptrdiff_t>(o.tts_items));
  const auto inter_items = eval::balanced_subset(data.test, o.interactive_items);
  const auto train = to_examples(data.train);
  const auto val = to_examples(data.val);
  const bool have_vanilla = !o.vanilla_checkpoint.empty() && std::filesystem::exists(o.vanilla_checkpoint);
  const bool have_listener = !o.listener_checkpoint.empty() && std::filesystem::exists(o.listener_checkpoint);

  std::vector<eval::AblationRow> rows;
  eval::AblationRow vanilla;
  vanilla.name = "Vanilla TTS";
  vanilla.speaking = "-";
  vanilla.listening = "-";
  if (have_vanilla) {
    const auto model = LslmModel::load(o.vanilla_checkpoint);
    vanilla.present = true;
    vanilla.transcript_error_rate = eval::run_tts_eval(model, tts_items, w.codebook(), o.eval).transcript_error_rate;
  }
  rows.push_back(vanilla);

  for (const auto& mode : ablation_modes()) {
    eval::AblationRow row;
    row.name = "LSLM";
    row.speaking = mode_symbol(mode.speaking);
    row.listening = mode_symbol(mode.listening);
    const bool needs_vanilla = mode.speaking != InitMode::Scratch;
    if ((needs_vanilla && !have_vanilla) || !have_listener) {
      rows.push_back(row);
      continue;
    }
    TrainConfig tc = o.train;
    tc.speaking_init = mode.speaking;
    tc.listening_init = mode.listening;
    tc.speaking_checkpoint = needs_vanilla ? o.vanilla_checkpoint : "";
    tc.listening_checkpoint = o.listener_checkpoint;
    ModelConfig mc = o.model;
    mc.listening = true;
    mc.fusion = Fusion::Middle;
    auto result = train_lslm(tc, mc, train, val);

    if (mode.speaking == InitMode::Frozen) {
      const auto ref = load_checkpoint(o.vanilla_checkpoint);
      row.frozen_verified &= params_bitwise_equal(result.model.params(), ref.params,
                                                  result.model.group_names(ParamGroup::Speaking));
    }
    if (mode.listening == InitMode::Frozen) {
      const auto ref = load_checkpoint(o.listener_checkpoint);
      std::vector<std::string> enc;
      for (const auto& n : result.model.group_names(ParamGroup::Listening)) {
        if (is_listener_encoder_param(n)) enc.push_back(n);
      }
      row.frozen_verified &= params_bitwise_equal(result.model.params(), ref.params, enc);
    }
    if (!o.out_dir.empty()) {
      const auto stem = "lslm_" + row.speaking + "_" + row.listening;
      result.model.save(o.out_dir / (stem + ".ckpt"));
      result.log.write_jsonl(o.out_dir / (stem + "_log.jsonl"));
    }
    row.present = true;
    row.transcript_error_rate =
        eval::run_tts_eval(result.model, tts_items, w.codebook(), o.eval).transcript_error_rate;
    row.interactive =
        eval::run_interactive_eval(result.model, inter_items, eval::Condition::Clean, o.eval).metrics;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace lslm
