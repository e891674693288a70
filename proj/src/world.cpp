#include "lslm/world.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "lslm/errors.hpp"
#include "lslm/model.hpp"

namespace lslm::world {

namespace {

const std::vector<std::string> kVoiceWords = {
    "yes", "no",  "up",    "down", "left", "right", "on",  "off",   "stop",  "go",
    "zero", "one", "two",  "three", "four", "five",  "six", "seven", "eight", "nine",
    "bed", "bird", "cat",  "dog",  "happy", "house", "marvin", "sheila", "tree", "wow"};

CommandLexicon make_lexicon(std::vector<std::string> words, std::uint64_t seed) {
  Rng rng(seed);
  CommandLexicon lex;
  std::set<std::vector<int>> used;
  for (auto& w : words) {
    std::vector<int> seq(kCommandFrames);
    do {
      for (int& s : seq) s = rng.uniform_int(vocab::kCommandFirst, vocab::kCommandLast);
    } while (!used.insert(seq).second);
    lex.words.push_back(std::move(w));
    lex.base.push_back(std::move(seq));
  }
  return lex;
}

}  // namespace

std::string to_string(Scenario s) { return s == Scenario::Command ? "command" : "voice"; }

Scenario parse_scenario(std::string_view text) {
  if (text == "command") return Scenario::Command;
  if (text == "voice") return Scenario::Voice;
  throw ConfigError("unknown scenario '" + std::string(text) + "' (command|voice)");
}

void WorldConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("world config: " + what);
  };
  need(mu_frames >= 1, "mu_frames must be >= 1");
  need(noise_prob >= 0.0 && noise_prob <= 1.0, "noise_prob must lie in [0, 1]");
  need(interrupt_prob >= 0.0 && interrupt_prob <= 1.0, "interrupt_prob must lie in [0, 1]");
  need(k >= 1, "k must be >= 1");
  need(context_min >= 1 && context_max >= context_min, "context length range is empty");
  need(k * context_min >= window(),
       "shortest context yields " + std::to_string(k * context_min) +
           " speaking steps, fewer than the detection window " + std::to_string(window()) +
           " (interruptions would not be scoreable)");
  need(stream_margin >= 1, "stream_margin must be >= 1");
  need(command_speakers >= 1, "command_speakers must be >= 1");
  need(voice_train_speakers >= 1 && voice_heldout_speakers >= 1, "voice speaker counts must be >= 1");
  need(n_train >= 0 && n_val >= 0 && n_test_interrupted >= 0 && n_test_clean >= 0 && n_tts_test >= 0,
       "dataset sizes must be non-negative");
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"scenario", to_string(c.scenario)},
       {"mu_frames", c.mu_frames},
       {"window", c.window()},
       {"noise_prob", c.noise_prob},
       {"interrupt_prob", c.interrupt_prob},
       {"k", c.k},
       {"context_min", c.context_min},
       {"context_max", c.context_max},
       {"command_speakers", c.command_speakers},
       {"voice_train_speakers", c.voice_train_speakers},
       {"voice_heldout_speakers", c.voice_heldout_speakers},
       {"n_train", c.n_train},
       {"n_val", c.n_val},
       {"n_test_interrupted", c.n_test_interrupted},
       {"n_test_clean", c.n_test_clean},
       {"n_tts_test", c.n_tts_test},
       {"stream_margin", c.stream_margin},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  WorldConfig d;
  c.scenario = parse_scenario(j.value("scenario", to_string(d.scenario)));
  c.mu_frames = j.value("mu_frames", d.mu_frames);
  c.noise_prob = j.value("noise_prob", d.noise_prob);
  c.interrupt_prob = j.value("interrupt_prob", d.interrupt_prob);
  c.k = j.value("k", d.k);
  c.context_min = j.value("context_min", d.context_min);
  c.context_max = j.value("context_max", d.context_max);
  c.command_speakers = j.value("command_speakers", d.command_speakers);
  c.voice_train_speakers = j.value("voice_train_speakers", d.voice_train_speakers);
  c.voice_heldout_speakers = j.value("voice_heldout_speakers", d.voice_heldout_speakers);
  c.n_train = j.value("n_train", d.n_train);
  c.n_val = j.value("n_val", d.n_val);
  c.n_test_interrupted = j.value("n_test_interrupted", d.n_test_interrupted);
  c.n_test_clean = j.value("n_test_clean", d.n_test_clean);
  c.n_tts_test = j.value("n_tts_test", d.n_tts_test);
  c.stream_margin = j.value("stream_margin", d.stream_margin);
  c.seed = j.value("seed", d.seed);
}

// ------------------------------------------------------------ codebook

Codebook Codebook::build(std::uint64_t seed, int k) {
  if (k < 1) throw ConfigError("codebook k must be >= 1");
  Codebook cb;
  cb.k_ = k;
  Rng rng(seed);
  for (int c = 0; c < vocab::kContextChars; ++c) {
    std::vector<int> word(static_cast<std::size_t>(k));
    do {
      for (int& t : word) t = rng.uniform_int(0, vocab::kAudioTokens - 1);
    } while (cb.inverse_.count(word) != 0);
    cb.inverse_.emplace(word, static_cast<char>('a' + c));
    cb.codewords_[c] = std::move(word);
  }
  return cb;
}

const std::vector<int>& Codebook::codeword(char c) const {
  if (c < 'a' || c > 'z') throw InputError(std::string("unsupported character '") + c + "'");
  return codewords_[c - 'a'];
}

std::vector<int> Codebook::synth(std::string_view text) const {
  std::vector<int> out;
  out.reserve(text.size() * static_cast<std::size_t>(k_));
  for (char c : text) {
    const auto& w = codeword(c);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

InvertResult Codebook::invert(std::span<const int> tokens) const {
  InvertResult r;
  const std::size_t k = static_cast<std::size_t>(k_);
  std::size_t i = 0;
  for (; i + k <= tokens.size(); i += k) {
    auto it = inverse_.find(std::vector<int>(tokens.begin() + i, tokens.begin() + i + k));
    if (it == inverse_.end()) {
      r.text.push_back(kPlaceholder);
      ++r.unmatched;
    } else {
      r.text.push_back(it->second);
    }
  }
  if (i < tokens.size()) {
    r.text.push_back(kPlaceholder);
    ++r.unmatched;
  }
  return r;
}

// ------------------------------------------------------------ speakers / lexicon

SpeakerPerturbation SpeakerPerturbation::identity() {
  SpeakerPerturbation p;
  std::iota(p.map_.begin(), p.map_.end(), vocab::kCommandFirst);
  return p;
}

SpeakerPerturbation SpeakerPerturbation::random(Rng& rng) {
  SpeakerPerturbation p = identity();
  std::shuffle(p.map_.begin(), p.map_.end(), rng.engine());
  return p;
}

int SpeakerPerturbation::apply(int symbol) const {
  if (!vocab::is_command(symbol)) return symbol;
  return map_[static_cast<std::size_t>(symbol - vocab::kCommandFirst)];
}

CommandLexicon CommandLexicon::command_based(std::uint64_t seed) { return make_lexicon({"honey"}, seed); }
CommandLexicon CommandLexicon::voice_based(std::uint64_t seed) { return make_lexicon(kVoiceWords, seed); }

int CommandLexicon::index_of(std::string_view word) const {
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == word) return static_cast<int>(i);
  }
  return -1;
}

std::vector<int> render_command(const CommandLexicon& lexicon, std::string_view word,
                                const std::vector<SpeakerPerturbation>& speakers, int speaker) {
  const int w = lexicon.index_of(word);
  if (w < 0) throw InputError("unknown command word '" + std::string(word) + "'");
  if (speaker < 0 || speaker >= static_cast<int>(speakers.size())) {
    throw InputError("unknown speaker " + std::to_string(speaker));
  }
  std::vector<int> out = lexicon.base[static_cast<std::size_t>(w)];
  for (int& s : out) s = speakers[static_cast<std::size_t>(speaker)].apply(s);
  return out;
}

// ------------------------------------------------------------ streams

void add_noise_spans(std::vector<int>& symbols, Rng& rng, int protect_from, int protect_len) {
  const int length = static_cast<int>(symbols.size());
  const std::vector<int> original = symbols;
  const int spans = rng.uniform_int(1, 3);
  for (int s = 0; s < spans; ++s) {
    const bool steady = rng.bernoulli(0.5);
    const int len = std::min(length, steady ? rng.uniform_int(4, 12) : rng.uniform_int(2, 6));
    if (len <= 0) continue;
    int start = rng.uniform_int(0, length - len);
    // A span swallowed whole by the protected window would leave no trace.
    for (int tries = 0; tries < 16 && protect_from >= 0 && start >= protect_from &&
                        start + len <= protect_from + protect_len;
         ++tries) {
      start = rng.uniform_int(0, length - len);
    }
    const int steady_symbol = rng.uniform_int(vocab::kSteadyFirst, vocab::kSteadyLast);
    for (int t = start; t < start + len; ++t) {
      symbols[t] = steady ? steady_symbol : rng.uniform_int(vocab::kBurstFirst, vocab::kBurstLast);
    }
  }
  for (int t = std::max(0, protect_from); protect_from >= 0 && t < std::min(length, protect_from + protect_len); ++t) {
    symbols[t] = original[t];
  }
}

ListenStream make_listen_stream(int length, bool noise, std::span<const int> command, int onset_max, Rng& rng) {
  if (length < 1) throw InputError("listening stream length must be >= 1");
  const int cmd_len = static_cast<int>(command.size());
  if (cmd_len > 0 && (onset_max < 0 || length < onset_max + cmd_len)) {
    throw InputError("stream of " + std::to_string(length) + " frames cannot hold a " + std::to_string(cmd_len) +
                     "-frame command at onsets up to " + std::to_string(onset_max));
  }
  ListenStream out;
  out.symbols.assign(static_cast<std::size_t>(length), vocab::kSil);
  if (noise) add_noise_spans(out.symbols, rng);
  if (cmd_len > 0) {
    const int onset = rng.uniform_int(0, onset_max);
    std::copy(command.begin(), command.end(), out.symbols.begin() + onset);
    out.onset = onset;
  }
  return out;
}

// ------------------------------------------------------------ samples

void to_json(nlohmann::json& j, const SampleRecord& r) {
  j = nlohmann::json::object();
  j["context"] = r.context;
  j["speak_target"] = r.speak_target;
  j["listen"] = r.listen;
  j["onset"] = r.onset ? nlohmann::json(*r.onset) : nlohmann::json(nullptr);
  j["noise"] = r.noise;
  j["split"] = r.split;
  j["speaker"] = r.speaker ? nlohmann::json(*r.speaker) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, SampleRecord& r) {
  r.context = j.at("context").get<std::string>();
  r.speak_target = j.at("speak_target").get<std::vector<int>>();
  r.listen = j.at("listen").get<std::vector<int>>();
  r.onset = j.at("onset").is_null() ? std::nullopt : std::optional<int>(j.at("onset").get<int>());
  r.noise = j.at("noise").get<bool>();
  r.split = j.at("split").get<std::string>();
  r.speaker = j.at("speaker").is_null() ? std::nullopt : std::optional<int>(j.at("speaker").get<int>());
}

std::vector<int> label_with_irq(const SampleRecord& sample, int mu_frames) {
  if (!sample.onset) throw ContractError("label_with_irq on a sample without an interruption");
  auto out = irq_truncate(sample.speak_target, *sample.onset, mu_frames);
  out.push_back(vocab::kIrq);
  return out;
}

World::World(const WorldConfig& config) : config_(config) {
  config_.validate();
  codebook_ = Codebook::build(derive_seed(config_.seed, "codebook"), config_.k);
  const auto lex_seed = derive_seed(config_.seed, "lexicon");
  lexicon_ = config_.scenario == Scenario::Command ? CommandLexicon::command_based(lex_seed)
                                                   : CommandLexicon::voice_based(lex_seed);
  Rng rng(derive_seed(config_.seed, "speakers"));
  if (config_.scenario == Scenario::Command) {
    for (int s = 0; s < config_.command_speakers; ++s) {
      speakers_.push_back(SpeakerPerturbation::random(rng));
      train_speakers_.push_back(s);
    }
    test_speakers_ = train_speakers_;
  } else {
    const int total = config_.voice_train_speakers + config_.voice_heldout_speakers;
    for (int s = 0; s < total; ++s) {
      speakers_.push_back(SpeakerPerturbation::random(rng));
      (s < config_.voice_train_speakers ? train_speakers_ : test_speakers_).push_back(s);
    }
  }
  for (const auto& w : lexicon_.words) {
    for (int s = 0; s < static_cast<int>(speakers_.size()); ++s) all_rendered_.push_back(render(w, s));
  }
  std::sort(all_rendered_.begin(), all_rendered_.end());
}

std::vector<int> World::render(std::string_view word, int speaker) const {
  return render_command(lexicon_, word, speakers_, speaker);
}

bool World::contains_command_window(std::span<const int> symbols) const {
  if (symbols.size() < static_cast<std::size_t>(kCommandFrames)) return false;
  for (std::size_t i = 0; i + kCommandFrames <= symbols.size(); ++i) {
    if (!std::all_of(symbols.begin() + i, symbols.begin() + i + kCommandFrames, vocab::is_command)) continue;
    std::vector<int> window(symbols.begin() + i, symbols.begin() + i + kCommandFrames);
    if (std::binary_search(all_rendered_.begin(), all_rendered_.end(), window)) return true;
  }
  return false;
}

std::string World::random_context(Rng& rng) const {
  const int len = rng.uniform_int(config_.context_min, config_.context_max);
  std::string out(static_cast<std::size_t>(len), 'a');
  for (char& c : out) c = static_cast<char>('a' + rng.uniform_int(0, vocab::kContextChars - 1));
  return out;
}

SampleRecord World::make_sample(Rng& rng, const std::string& split, std::span<const int> speaker_pool,
                                bool noise, bool interrupted) const {
  SampleRecord r;
  r.context = random_context(rng);
  r.speak_target = codebook_.synth(r.context);
  r.noise = noise;
  r.split = split;
  const int length = stream_length(r.context.size());
  std::vector<int> command;
  int onset_max = 0;
  if (interrupted) {
    const int speaker = speaker_pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(speaker_pool.size()) - 1))];
    const auto& word = lexicon_.words[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(lexicon_.words.size()) - 1))];
    command = render(word, speaker);
    r.speaker = speaker;
    onset_max = static_cast<int>(r.speak_target.size()) - config_.window();
  }
  auto stream = make_listen_stream(length, noise, command, onset_max, rng);
  r.listen = std::move(stream.symbols);
  r.onset = stream.onset;
  if (!interrupted && contains_command_window(r.listen)) {
    throw DataError("generated a command window in a non-interrupted stream");
  }
  return r;
}

// ------------------------------------------------------------ dataset

Dataset make_dataset(const WorldConfig& config) {
  const World world(config);
  Dataset d;
  d.config = config;
  const auto& c = world.config();

  auto gen = [&](const std::string& split, int n, auto&& flags) {
    std::vector<SampleRecord> out;
    out.reserve(static_cast<std::size_t>(n));
    const auto split_seed = derive_seed(c.seed, split);
    const auto& pool = split == "test" ? world.test_speakers() : world.train_speakers();
    for (int i = 0; i < n; ++i) {
      Rng rng(derive_seed(split_seed, static_cast<std::uint64_t>(i)));
      const auto [noise, interrupted] = flags(i, rng);
      out.push_back(world.make_sample(rng, split, pool, noise, interrupted));
    }
    return out;
  };
  auto mixed = [&](int, Rng& rng) {
    const bool noise = rng.bernoulli(c.noise_prob);
    const bool interrupted = rng.bernoulli(c.interrupt_prob);
    return std::pair{noise, interrupted};
  };
  d.train = gen("train", c.n_train, mixed);
  d.val = gen("val", c.n_val, mixed);
  d.test = gen("test", c.n_test_interrupted + c.n_test_clean,
               [&](int i, Rng&) { return std::pair{false, i < c.n_test_interrupted}; });
  d.tts_test = gen("tts_test", c.n_tts_test, [](int, Rng&) { return std::pair{false, false}; });
  return d;
}

nlohmann::json Dataset::manifest(const World& world) const {
  auto counts = [](const std::vector<SampleRecord>& split) {
    int interrupted = 0, noise = 0;
    for (const auto& r : split) {
      interrupted += r.interrupted();
      noise += r.noise;
    }
    return nlohmann::json{{"total", split.size()}, {"interrupted", interrupted}, {"noise", noise}};
  };
  nlohmann::json lexicon = nlohmann::json::array();
  for (std::size_t i = 0; i < world.lexicon().words.size(); ++i) {
    lexicon.push_back({{"word", world.lexicon().words[i]}, {"base", world.lexicon().base[i]}});
  }
  nlohmann::json codebook = nlohmann::json::object();
  for (int ch = 0; ch < vocab::kContextChars; ++ch) {
    codebook[std::string(1, static_cast<char>('a' + ch))] = world.codebook().entries()[static_cast<std::size_t>(ch)];
  }
  return {{"world_config", config},
          {"seed", config.seed},
          {"counts",
           {{"train", counts(train)}, {"val", counts(val)}, {"test", counts(test)}, {"tts_test", counts(tts_test)}}},
          {"speakers",
           {{"train", world.train_speakers()}, {"val", world.train_speakers()}, {"test", world.test_speakers()}}},
          {"lexicon", lexicon},
          {"codebook", codebook},
          {"vocab_version", vocab::kVersion}};
}

namespace {

void write_split(const std::vector<SampleRecord>& records, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) os << nlohmann::json(r).dump() << '\n';
}

std::vector<SampleRecord> read_split(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::vector<SampleRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line).get<SampleRecord>());
  }
  return out;
}

}  // namespace

void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_split(data.train, dir / "train.jsonl");
  write_split(data.val, dir / "val.jsonl");
  write_split(data.test, dir / "test.jsonl");
  write_split(data.tts_test, dir / "tts_test.jsonl");
  std::ofstream os(dir / "dataset.json", std::ios::binary | std::ios::trunc);
  os << data.manifest(World(data.config)).dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "dataset.json");
  if (!is) throw DataError("no dataset.json in " + dir.string());
  const auto manifest = nlohmann::json::parse(is);
  Dataset d;
  d.config = manifest.at("world_config").get<WorldConfig>();
  d.train = read_split(dir / "train.jsonl");
  d.val = read_split(dir / "val.jsonl");
  d.test = read_split(dir / "test.jsonl");
  d.tts_test = read_split(dir / "tts_test.jsonl");
  return d;
}

}  // namespace lslm::world
