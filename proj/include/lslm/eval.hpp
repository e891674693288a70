#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lslm/session.hpp"
#include "lslm/world.hpp"

namespace lslm::eval {

// Levenshtein distance with unit costs.
std::size_t edit_distance(std::span<const int> a, std::span<const int> b);
std::size_t edit_distance(std::string_view a, std::string_view b);

// Audio tokens only (terminal and other specials removed).
std::vector<int> strip_specials(std::span<const int> tokens);

// edit_distance / max(1, |ref|) over audio tokens.
double token_error_rate(std::span<const int> hyp, std::span<const int> ref);

struct TranscriptScore {
  std::string text;
  int unmatched = 0;
  std::size_t edits = 0;
  std::size_t ref_len = 0;
  double rate = 0.0;
};

// Decodes hyp with the codebook and compares characters with the context.
TranscriptScore score_transcript(std::span<const int> hyp, std::string_view context, const world::Codebook& codebook);
double transcript_error_rate(std::span<const int> hyp, std::string_view context, const world::Codebook& codebook);

enum class Outcome { TP, FN, FP, TN };
std::string to_string(Outcome o);

struct Classification {
  Outcome outcome = Outcome::TN;
  bool premature = false;  // IRQ stop before the onset of an interrupted item
};

// Closed window: an IRQ stop with onset <= step <= onset + window is a hit.
Classification classify(bool interrupted, std::optional<int> onset, std::optional<StopInfo> stop, int window);
Outcome classify_outcome(bool interrupted, std::optional<int> onset, std::optional<StopInfo> stop, int window);

struct ConfusionCounts {
  long tp = 0, fn = 0, fp = 0, tn = 0;
  long premature = 0;  // subset of fn

  void add(const Classification& c);
  long total() const { return tp + fn + fp + tn; }
};

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // Names of quantities whose denominator was zero ("precision", "recall", "f1").
  std::vector<std::string> degenerate;
};

Metrics aggregate(const ConfusionCounts& counts);

void to_json(nlohmann::json& j, const ConfusionCounts& c);
void to_json(nlohmann::json& j, const Metrics& m);

// ------------------------------------------------------------ TTS capability

struct TtsUtterance {
  std::string context;
  std::string transcript;
  std::size_t token_edits = 0;
  std::size_t token_ref_len = 0;
  std::size_t char_edits = 0;
  std::size_t char_ref_len = 0;
  StopReason stop = StopReason::Eos;
  int steps = 0;
};

struct TtsEvalReport {
  double token_error_rate = 0.0;       // total token edits / total reference tokens
  double transcript_error_rate = 0.0;  // total character edits / total reference characters
  std::size_t n_utterances = 0;
  std::vector<TtsUtterance> details;
  bool listening = false;
};

void to_json(nlohmann::json& j, const TtsEvalReport& r);

struct EvalOptions {
  SamplerConfig sampler;
  int threads = 1;
  int mu_frames = 4;
  std::uint64_t noise_seed = 0;
};

// All-SIL lockstep streams for listening models, the vanilla path otherwise.
TtsEvalReport run_tts_eval(const LslmModel& model, const std::vector<world::SampleRecord>& items,
                           const world::Codebook& codebook, const EvalOptions& options);

// ------------------------------------------------------------ interactive capability

enum class Condition { Clean, Noise };
std::string to_string(Condition c);
Condition parse_condition(std::string_view text);

struct InteractiveItem {
  bool interrupted = false;
  std::optional<int> onset;
  StopInfo stop;
  Classification classification;
  std::vector<double> irq_trace;
};

struct InteractiveReport {
  Condition condition = Condition::Clean;
  ConfusionCounts counts;
  Metrics metrics;
  std::vector<InteractiveItem> items;
};

void to_json(nlohmann::json& j, const InteractiveReport& r);

// Listening stream used for one test item under a condition. Noise keeps the
// command window intact.
std::vector<int> condition_stream(const world::SampleRecord& item, Condition condition, std::uint64_t noise_seed,
                                  std::size_t index);

// Up to n items split evenly between interrupted and clean ones, in order.
std::vector<world::SampleRecord> balanced_subset(const std::vector<world::SampleRecord>& items, std::size_t n);

InteractiveReport run_interactive_eval(const LslmModel& model, const std::vector<world::SampleRecord>& items,
                                       Condition condition, const EvalOptions& options);

// ------------------------------------------------------------ IRQ traces

struct TraceInput {
  std::vector<double> trace;
  int onset = 0;
  std::optional<StopInfo> stop;
};

struct ItemTraceStats {
  double pre_median = 0.0;
  double post_max = 0.0;
  double rise_ratio = 0.0;
  std::optional<int> steps_to_stop;
};

struct IrqTraceStats {
  std::size_t n_items = 0;     // items with at least one pre-onset step
  std::size_t n_excluded = 0;  // onset 0: no step precedes the command
  double fraction_ratio_ge_10 = 0.0;
  double median_rise_ratio = 0.0;
  double median_pre = 0.0;
  double median_post_max = 0.0;
  std::optional<double> median_steps_to_stop;
  // Median P(IRQ) by offset of the newest frame seen relative to onset.
  std::vector<int> offsets;
  std::vector<double> median_by_offset;
  bool monotone_after_onset = false;  // non-decreasing over offsets 0..mu
  std::vector<ItemTraceStats> per_item;
};

// Pre-onset steps are those whose input frames all precede the onset
// (step t sees frames 0..t-1). Stopped traces hold their final value when
// building the offset curve.
ItemTraceStats item_trace_stats(std::span<const double> trace, int onset, std::optional<StopInfo> stop);
IrqTraceStats irq_trace_stats(const std::vector<TraceInput>& traces, int mu_frames, int offset_min = -8,
                              int offset_max = 8);

void to_json(nlohmann::json& j, const IrqTraceStats& s);

// ------------------------------------------------------------ ablation

struct AblationRow {
  std::string name;
  std::string speaking;   // "-" for the vanilla row
  std::string listening;  // "-" for the vanilla row
  bool present = false;
  std::optional<double> transcript_error_rate;
  std::optional<Metrics> interactive;
  bool frozen_verified = true;
};

nlohmann::json ablation_json(const std::vector<AblationRow>& rows);
std::string ablation_text(const std::vector<AblationRow>& rows);

}  // namespace lslm::eval
