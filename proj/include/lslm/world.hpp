#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lslm/rng.hpp"
#include "lslm/vocab.hpp"

namespace lslm::world {

// Command-based: one fixed command, speakers seen in training (speaker
// dependent). Voice-based: many words, test speakers held out.
enum class Scenario { Command, Voice };

std::string to_string(Scenario s);
Scenario parse_scenario(std::string_view text);

inline constexpr int kCommandFrames = 8;
inline constexpr char kPlaceholder = '?';

struct WorldConfig {
  Scenario scenario = Scenario::Command;
  int mu_frames = 4;  // labeled IRQ delay after onset (0.5 s)
  double noise_prob = 0.5;
  double interrupt_prob = 0.5;
  int k = 3;  // speaking tokens per character
  int context_min = 5;
  int context_max = 12;
  int command_speakers = 22;
  int voice_train_speakers = 40;
  int voice_heldout_speakers = 10;
  int n_train = 20000;
  int n_val = 1000;
  int n_test_interrupted = 500;
  int n_test_clean = 500;
  int n_tts_test = 500;
  // Listening streams are k*|context| + stream_margin frames: one per step of
  // the longest allowed generation.
  int stream_margin = 16;
  std::uint64_t seed = 0;

  int window() const { return 2 * mu_frames; }
  void validate() const;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

// ------------------------------------------------------------ codebook

struct InvertResult {
  std::string text;
  int unmatched = 0;
};

// Invertible grapheme -> k-gram code over the 64 audio tokens.
class Codebook {
 public:
  static Codebook build(std::uint64_t seed, int k = 3);

  int k() const { return k_; }
  const std::vector<int>& codeword(char c) const;
  std::vector<int> synth(std::string_view text) const;
  // Greedy k-gram decoding; unmatched or trailing partial units become '?'.
  InvertResult invert(std::span<const int> tokens) const;
  const std::array<std::vector<int>, vocab::kContextChars>& entries() const { return codewords_; }

 private:
  int k_ = 3;
  std::array<std::vector<int>, vocab::kContextChars> codewords_;
  std::map<std::vector<int>, char> inverse_;
};

// ------------------------------------------------------------ listening side

// Bijection on the command-symbol range, identity elsewhere.
class SpeakerPerturbation {
 public:
  static SpeakerPerturbation identity();
  static SpeakerPerturbation random(Rng& rng);

  int apply(int symbol) const;
  const std::array<int, vocab::kCommandSymbols>& mapping() const { return map_; }

 private:
  std::array<int, vocab::kCommandSymbols> map_{};
};

struct CommandLexicon {
  std::vector<std::string> words;
  std::vector<std::vector<int>> base;  // kCommandFrames symbols each

  static CommandLexicon command_based(std::uint64_t seed);
  static CommandLexicon voice_based(std::uint64_t seed);
  int index_of(std::string_view word) const;
};

std::vector<int> render_command(const CommandLexicon& lexicon, std::string_view word,
                                const std::vector<SpeakerPerturbation>& speakers, int speaker);

struct ListenStream {
  std::vector<int> symbols;
  std::optional<int> onset;
};

// SIL base, optional 1-3 noise spans, optional command overwrite at a random
// onset in [0, onset_max]. `command` may be empty for no interruption.
ListenStream make_listen_stream(int length, bool noise, std::span<const int> command, int onset_max, Rng& rng);

// Overlays noise spans on an existing stream, leaving [protect_from,
// protect_from + protect_len) untouched.
void add_noise_spans(std::vector<int>& symbols, Rng& rng, int protect_from = -1, int protect_len = 0);

// ------------------------------------------------------------ samples

struct SampleRecord {
  std::string context;
  std::vector<int> speak_target;
  std::vector<int> listen;
  std::optional<int> onset;
  bool noise = false;
  std::string split;
  std::optional<int> speaker;

  bool interrupted() const { return onset.has_value(); }
};

void to_json(nlohmann::json& j, const SampleRecord& r);
void from_json(const nlohmann::json& j, SampleRecord& r);

// speak_target[0 .. onset+mu) ++ [IRQ]. Throws ContractError on a
// non-interrupted sample and DataError if onset+mu overruns the target.
std::vector<int> label_with_irq(const SampleRecord& sample, int mu_frames);

class World {
 public:
  explicit World(const WorldConfig& config);

  const WorldConfig& config() const { return config_; }
  const Codebook& codebook() const { return codebook_; }
  const CommandLexicon& lexicon() const { return lexicon_; }
  const std::vector<SpeakerPerturbation>& speakers() const { return speakers_; }
  const std::vector<int>& train_speakers() const { return train_speakers_; }
  const std::vector<int>& test_speakers() const { return test_speakers_; }

  std::vector<int> render(std::string_view word, int speaker) const;
  // True if any kCommandFrames-long window equals a rendered command for any
  // word and speaker of this world.
  bool contains_command_window(std::span<const int> symbols) const;
  int stream_length(std::size_t context_len) const {
    return config_.k * static_cast<int>(context_len) + config_.stream_margin;
  }

  SampleRecord make_sample(Rng& rng, const std::string& split, std::span<const int> speaker_pool,
                           bool noise, bool interrupted) const;
  std::string random_context(Rng& rng) const;

 private:
  WorldConfig config_;
  Codebook codebook_;
  CommandLexicon lexicon_;
  std::vector<SpeakerPerturbation> speakers_;
  std::vector<int> train_speakers_;
  std::vector<int> test_speakers_;
  std::vector<std::vector<int>> all_rendered_;
};

struct Dataset {
  WorldConfig config;
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> val;
  std::vector<SampleRecord> test;      // interactive: interrupted + clean, no noise
  std::vector<SampleRecord> tts_test;  // no interruption, all-SIL streams

  nlohmann::json manifest(const World& world) const;
};

Dataset make_dataset(const WorldConfig& config);

void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace lslm::world
