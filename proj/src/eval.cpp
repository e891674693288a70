#include "lslm/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "lslm/errors.hpp"

namespace lslm::eval {

namespace {

template <typename Seq>
std::size_t levenshtein(const Seq& a, const Seq& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

SamplerConfig item_sampler(const SamplerConfig& base, std::size_t index) {
  SamplerConfig s = base;
  s.seed = derive_seed(base.seed, static_cast<std::uint64_t>(index));
  return s;
}

}  // namespace

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) { return levenshtein(a, b); }
std::size_t edit_distance(std::string_view a, std::string_view b) { return levenshtein(a, b); }

std::vector<int> strip_specials(std::span<const int> tokens) {
  std::vector<int> out;
  std::copy_if(tokens.begin(), tokens.end(), std::back_inserter(out), vocab::is_audio);
  return out;
}

double token_error_rate(std::span<const int> hyp, std::span<const int> ref) {
  const auto h = strip_specials(hyp);
  const auto r = strip_specials(ref);
  return static_cast<double>(edit_distance(h, r)) / static_cast<double>(std::max<std::size_t>(1, r.size()));
}

TranscriptScore score_transcript(std::span<const int> hyp, std::string_view context, const world::Codebook& codebook) {
  const auto inv = codebook.invert(strip_specials(hyp));
  TranscriptScore s;
  s.text = inv.text;
  s.unmatched = inv.unmatched;
  s.edits = edit_distance(std::string_view(inv.text), context);
  s.ref_len = context.size();
  s.rate = static_cast<double>(s.edits) / static_cast<double>(std::max<std::size_t>(1, s.ref_len));
  return s;
}

double transcript_error_rate(std::span<const int> hyp, std::string_view context, const world::Codebook& codebook) {
  return score_transcript(hyp, context, codebook).rate;
}

std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::TP: return "TP";
    case Outcome::FN: return "FN";
    case Outcome::FP: return "FP";
    case Outcome::TN: return "TN";
  }
  return "TN";
}

Classification classify(bool interrupted, std::optional<int> onset, std::optional<StopInfo> stop, int window) {
  if (interrupted != onset.has_value()) {
    throw ContractError(interrupted ? "interrupted item without an onset" : "onset given for a non-interrupted item");
  }
  const bool irq = stop && stop->reason == StopReason::Irq;
  Classification c;
  if (!interrupted) {
    c.outcome = irq ? Outcome::FP : Outcome::TN;
    return c;
  }
  if (irq && stop->step >= *onset && stop->step <= *onset + window) {
    c.outcome = Outcome::TP;
  } else {
    c.outcome = Outcome::FN;
    c.premature = irq && stop->step < *onset;
  }
  return c;
}

Outcome classify_outcome(bool interrupted, std::optional<int> onset, std::optional<StopInfo> stop, int window) {
  return classify(interrupted, onset, stop, window).outcome;
}

void ConfusionCounts::add(const Classification& c) {
  switch (c.outcome) {
    case Outcome::TP: ++tp; break;
    case Outcome::FN: ++fn; break;
    case Outcome::FP: ++fp; break;
    case Outcome::TN: ++tn; break;
  }
  premature += c.premature;
}

Metrics aggregate(const ConfusionCounts& c) {
  Metrics m;
  if (c.tp + c.fp > 0) {
    m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  } else {
    m.degenerate.push_back("precision");
  }
  if (c.tp + c.fn > 0) {
    m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  } else {
    m.degenerate.push_back("recall");
  }
  if (m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.degenerate.push_back("f1");
  }
  return m;
}

void to_json(nlohmann::json& j, const ConfusionCounts& c) {
  j = {{"tp", c.tp}, {"fn", c.fn}, {"fp", c.fp}, {"tn", c.tn}, {"premature_irq", c.premature}};
}

void to_json(nlohmann::json& j, const Metrics& m) {
  j = {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"degenerate", m.degenerate}};
}

// ------------------------------------------------------------ TTS

void to_json(nlohmann::json& j, const TtsEvalReport& r) {
  nlohmann::json details = nlohmann::json::array();
  for (const auto& u : r.details) {
    details.push_back({{"context", u.context},
                       {"transcript", u.transcript},
                       {"token_edits", u.token_edits},
                       {"token_ref_len", u.token_ref_len},
                       {"char_edits", u.char_edits},
                       {"char_ref_len", u.char_ref_len},
                       {"stop", to_string(u.stop)},
                       {"steps", u.steps}});
  }
  j = {{"token_error_rate", r.token_error_rate},
       {"transcript_error_rate", r.transcript_error_rate},
       {"n_utterances", r.n_utterances},
       {"listening", r.listening},
       {"details", details}};
}

TtsEvalReport run_tts_eval(const LslmModel& model, const std::vector<world::SampleRecord>& items,
                           const world::Codebook& codebook, const EvalOptions& options) {
  TtsEvalReport report;
  report.listening = model.has_listener();
  report.n_utterances = items.size();
  report.details.resize(items.size());
  parallel_for(items.size(), options.threads, [&](std::size_t i) {
    const auto& item = items[i];
    const std::vector<int> silence(static_cast<std::size_t>(max_generation_steps(item.context.size())), vocab::kSil);
    const auto out = run_offline(model, item.context, silence, item_sampler(options.sampler, i));
    const auto hyp = strip_specials(out.tokens);
    const auto ts = score_transcript(hyp, item.context, codebook);
    auto& u = report.details[i];
    u.context = item.context;
    u.transcript = ts.text;
    u.token_edits = edit_distance(hyp, item.speak_target);
    u.token_ref_len = item.speak_target.size();
    u.char_edits = ts.edits;
    u.char_ref_len = ts.ref_len;
    u.stop = out.stop.reason;
    u.steps = out.stop.step;
  });
  std::size_t te = 0, tr = 0, ce = 0, cr = 0;
  for (const auto& u : report.details) {
    te += u.token_edits;
    tr += u.token_ref_len;
    ce += u.char_edits;
    cr += u.char_ref_len;
  }
  report.token_error_rate = static_cast<double>(te) / static_cast<double>(std::max<std::size_t>(1, tr));
  report.transcript_error_rate = static_cast<double>(ce) / static_cast<double>(std::max<std::size_t>(1, cr));
  return report;
}

// ------------------------------------------------------------ interactive

std::string to_string(Condition c) { return c == Condition::Clean ? "clean" : "noise"; }

Condition parse_condition(std::string_view text) {
  if (text == "clean") return Condition::Clean;
  if (text == "noise") return Condition::Noise;
  throw ConfigError("unknown condition '" + std::string(text) + "' (clean|noise)");
}

void to_json(nlohmann::json& j, const InteractiveReport& r) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : r.items) {
    items.push_back({{"interrupted", it.interrupted},
                     {"onset", it.onset ? nlohmann::json(*it.onset) : nlohmann::json(nullptr)},
                     {"stop", {{"reason", to_string(it.stop.reason)}, {"step", it.stop.step}}},
                     {"outcome", to_string(it.classification.outcome)},
                     {"premature", it.classification.premature}});
  }
  j = {{"condition", to_string(r.condition)}, {"counts", r.counts}, {"metrics", r.metrics}, {"items", items}};
}

std::vector<int> condition_stream(const world::SampleRecord& item, Condition condition, std::uint64_t noise_seed,
                                  std::size_t index) {
  std::vector<int> stream = item.listen;
  if (condition == Condition::Noise) {
    Rng rng(derive_seed(derive_seed(noise_seed, "eval-noise"), static_cast<std::uint64_t>(index)));
    world::add_noise_spans(stream, rng, item.onset.value_or(-1), item.onset ? world::kCommandFrames : 0);
  }
  return stream;
}

std::vector<world::SampleRecord> balanced_subset(const std::vector<world::SampleRecord>& items, std::size_t n) {
  if (n == 0 || n >= items.size()) return items;
  std::vector<world::SampleRecord> interrupted, clean, out;
  for (const auto& r : items) (r.interrupted() ? interrupted : clean).push_back(r);
  const std::size_t half = n / 2;
  const std::size_t ni = std::min(interrupted.size(), n - std::min(half, clean.size()));
  const std::size_t nc = std::min(clean.size(), n - ni);
  out.insert(out.end(), interrupted.begin(), interrupted.begin() + static_cast<std::ptrdiff_t>(ni));
  out.insert(out.end(), clean.begin(), clean.begin() + static_cast<std::ptrdiff_t>(nc));
  return out;
}

InteractiveReport run_interactive_eval(const LslmModel& model, const std::vector<world::SampleRecord>& items,
                                       Condition condition, const EvalOptions& options) {
  if (!model.has_listener()) throw ContractError("interactive evaluation needs a model with a listening channel");
  InteractiveReport report;
  report.condition = condition;
  report.items.resize(items.size());
  const int window = 2 * options.mu_frames;
  parallel_for(items.size(), options.threads, [&](std::size_t i) {
    const auto& item = items[i];
    const auto stream = condition_stream(item, condition, options.noise_seed, i);
    const auto out = run_offline(model, item.context, stream, item_sampler(options.sampler, i));
    auto& it = report.items[i];
    it.interrupted = item.interrupted();
    it.onset = item.onset;
    it.stop = out.stop;
    it.classification = classify(item.interrupted(), item.onset, out.stop, window);
    it.irq_trace = out.irq_trace;
  });
  for (const auto& it : report.items) report.counts.add(it.classification);
  report.metrics = aggregate(report.counts);
  return report;
}

// ------------------------------------------------------------ traces

ItemTraceStats item_trace_stats(std::span<const double> trace, int onset, std::optional<StopInfo> stop) {
  ItemTraceStats s;
  const std::size_t pre_n = std::min<std::size_t>(static_cast<std::size_t>(std::max(onset, 0)), trace.size());
  s.pre_median = median({trace.begin(), trace.begin() + static_cast<std::ptrdiff_t>(pre_n)});
  for (std::size_t i = pre_n; i < trace.size(); ++i) s.post_max = std::max(s.post_max, trace[i]);
  s.rise_ratio = s.post_max / std::max(s.pre_median, 1e-9);
  if (stop && stop->reason == StopReason::Irq) s.steps_to_stop = stop->step - onset;
  return s;
}

IrqTraceStats irq_trace_stats(const std::vector<TraceInput>& traces, int mu_frames, int offset_min, int offset_max) {
  IrqTraceStats out;
  std::vector<double> ratios, pres, posts, stops;
  for (int o = offset_min; o <= offset_max; ++o) out.offsets.push_back(o);
  std::vector<std::vector<double>> by_offset(out.offsets.size());
  std::size_t hits = 0;
  for (const auto& t : traces) {
    if (t.onset <= 0 || t.trace.empty()) {
      ++out.n_excluded;
      continue;
    }
    const auto s = item_trace_stats(t.trace, t.onset, t.stop);
    out.per_item.push_back(s);
    ratios.push_back(s.rise_ratio);
    pres.push_back(s.pre_median);
    posts.push_back(s.post_max);
    if (s.steps_to_stop) stops.push_back(*s.steps_to_stop);
    hits += s.rise_ratio >= 10.0;
    // Step t (1-indexed) sees frames up to t-1, so its offset is t-1-onset.
    for (std::size_t k = 0; k < out.offsets.size(); ++k) {
      const int step = out.offsets[k] + t.onset + 1;
      if (step < 1) continue;
      const std::size_t idx = std::min<std::size_t>(static_cast<std::size_t>(step - 1), t.trace.size() - 1);
      by_offset[k].push_back(t.trace[idx]);
    }
  }
  out.n_items = ratios.size();
  out.fraction_ratio_ge_10 = out.n_items ? static_cast<double>(hits) / static_cast<double>(out.n_items) : 0.0;
  out.median_rise_ratio = median(ratios);
  out.median_pre = median(pres);
  out.median_post_max = median(posts);
  if (!stops.empty()) out.median_steps_to_stop = median(stops);
  for (auto& v : by_offset) out.median_by_offset.push_back(median(v));
  out.monotone_after_onset = out.n_items > 0;
  for (std::size_t k = 0; k + 1 < out.offsets.size(); ++k) {
    if (out.offsets[k] < 0 || out.offsets[k] >= mu_frames) continue;
    if (out.median_by_offset[k + 1] < out.median_by_offset[k]) out.monotone_after_onset = false;
  }
  return out;
}

void to_json(nlohmann::json& j, const IrqTraceStats& s) {
  nlohmann::json curve = nlohmann::json::array();
  for (std::size_t k = 0; k < s.offsets.size(); ++k) {
    const double p = s.median_by_offset[k];
    curve.push_back({{"offset", s.offsets[k]}, {"median_p", p}, {"log10", std::log10(std::max(p, 1e-30))}});
  }
  j = {{"n_items", s.n_items},
       {"n_excluded_onset0", s.n_excluded},
       {"fraction_ratio_ge_10", s.fraction_ratio_ge_10},
       {"median_rise_ratio", s.median_rise_ratio},
       {"median_pre_onset_p", s.median_pre},
       {"median_post_onset_max_p", s.median_post_max},
       {"median_steps_to_stop", s.median_steps_to_stop ? nlohmann::json(*s.median_steps_to_stop) : nlohmann::json(nullptr)},
       {"monotone_after_onset", s.monotone_after_onset},
       {"median_curve", curve}};
}

// ------------------------------------------------------------ ablation

nlohmann::json ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row = {{"name", r.name},
                          {"speaking", r.speaking},
                          {"listening", r.listening},
                          {"present", r.present},
                          {"frozen_verified", r.frozen_verified}};
    row["transcript_error_rate"] = r.transcript_error_rate ? nlohmann::json(*r.transcript_error_rate) : nlohmann::json(nullptr);
    row["interactive"] = r.interactive ? nlohmann::json(*r.interactive) : nlohmann::json(nullptr);
    out.push_back(row);
  }
  return {{"rows", out}};
}

std::string ablation_text(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  auto pct = [](std::optional<double> v) {
    if (!v) return std::string("-");
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * *v;
    return s.str();
  };
  os << std::left << std::setw(14) << "model" << std::setw(10) << "speaking" << std::setw(10) << "listening"
     << std::right << std::setw(8) << "TER%" << std::setw(8) << "P%" << std::setw(8) << "R%" << std::setw(8) << "F1%"
     << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(14) << r.name << std::setw(10) << r.speaking << std::setw(10) << r.listening
       << std::right;
    if (!r.present) {
      os << "  (absent)\n";
      continue;
    }
    os << std::setw(8) << pct(r.transcript_error_rate);
    if (r.interactive) {
      os << std::setw(8) << pct(r.interactive->precision) << std::setw(8) << pct(r.interactive->recall)
         << std::setw(8) << pct(r.interactive->f1);
    } else {
      os << std::setw(8) << "-" << std::setw(8) << "-" << std::setw(8) << "-";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace lslm::eval
