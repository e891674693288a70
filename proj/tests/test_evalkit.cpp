#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <sstream>

#include "checks.hpp"
#include "lslm/errors.hpp"
#include "lslm/eval.hpp"

using namespace lslm;
using namespace lslm::eval;
using namespace lslm::testing;

namespace {

world::Dataset small_test_set(std::uint64_t seed) {
  world::WorldConfig c;
  c.seed = seed;
  c.n_train = 0;
  c.n_val = 0;
  c.n_test_interrupted = 20;
  c.n_test_clean = 20;
  c.n_tts_test = 12;
  return world::make_dataset(c);
}

void bias_token(LslmModel& m, int token, float value) { m.params().at("head.bias").data()[token] = value; }

}  // namespace

TEST_CASE("token error rate examples") {
  const std::vector<int> ref = {1, 2, 3};
  CHECK(token_error_rate(ref, ref) == 0.0);
  CHECK(token_error_rate(std::vector<int>{1, 9, 3}, ref) == doctest::Approx(1.0 / 3));
  CHECK(token_error_rate(std::vector<int>{1}, std::vector<int>{}) == 1.0);
  // Specials are stripped before comparison.
  CHECK(token_error_rate(std::vector<int>{1, 2, 3, vocab::kEos}, ref) == 0.0);
  CHECK(token_error_rate(std::vector<int>{1, 2, vocab::kIrq}, ref) == doctest::Approx(1.0 / 3));
  CHECK(token_error_rate(std::vector<int>{1, 3, 2}, ref) == token_error_rate(std::vector<int>{2, 1, 3}, ref));
}

TEST_CASE("transcript error rate examples") {
  const auto cb = world::Codebook::build(5);
  const std::string ctx = "listener";
  auto tokens = cb.synth(ctx);
  CHECK(transcript_error_rate(tokens, ctx, cb) == 0.0);

  // Mutate the fourth codeword into a k-gram that decodes to nothing.
  const std::set<std::vector<int>> words(cb.entries().begin(), cb.entries().end());
  auto mutated = tokens;
  for (int t = 0; t < vocab::kAudioTokens; ++t) {
    std::vector<int> gram(tokens.begin() + 9, tokens.begin() + 12);
    gram[0] = t;
    if (!words.count(gram)) {
      mutated[9] = t;
      break;
    }
  }
  CHECK(transcript_error_rate(mutated, ctx, cb) == doctest::Approx(1.0 / ctx.size()));

  auto truncated = tokens;
  truncated.resize(tokens.size() - 3);
  const auto s = score_transcript(truncated, ctx, cb);
  CHECK(s.edits == 1);
  CHECK(s.rate == doctest::Approx(1.0 / ctx.size()));
}

TEST_CASE("edit distance matches the recursive oracle exhaustively") {
  const auto r = check_edit_distance_exhaustive();
  CHECK_MESSAGE(r.ok, r.detail);
  CHECK(edit_distance(std::string_view("kitten"), std::string_view("sitting")) == 3);
}

TEST_CASE("outcome classification and aggregation fixtures") {
  const auto r = check_classification_fixtures();
  CHECK_MESSAGE(r.ok, r.detail);
  CHECK(classify_outcome(true, 10, StopInfo{StopReason::Irq, 14}, 8) == Outcome::TP);
  CHECK(classify_outcome(true, 10, StopInfo{StopReason::Irq, 19}, 8) == Outcome::FN);
  CHECK(classify_outcome(true, 10, StopInfo{StopReason::Irq, 18}, 8) == Outcome::TP);
  CHECK(classify_outcome(false, std::nullopt, StopInfo{StopReason::Irq, 3}, 8) == Outcome::FP);
  CHECK(classify_outcome(false, std::nullopt, StopInfo{StopReason::MaxLen, 30}, 8) == Outcome::TN);
  const auto early = classify(true, 10, StopInfo{StopReason::Irq, 4}, 8);
  CHECK(early.outcome == Outcome::FN);
  CHECK(early.premature);
  CHECK_THROWS_AS(classify_outcome(false, 3, std::nullopt, 8), ContractError);

  ConfusionCounts c;
  c.tp = 8;
  c.fp = 2;
  c.fn = 2;
  c.tn = 8;
  const auto m = aggregate(c);
  CHECK(m.precision == doctest::Approx(0.8));
  CHECK(m.recall == doctest::Approx(0.8));
  CHECK(m.f1 == doctest::Approx(0.8));
  CHECK(m.degenerate.empty());
  ConfusionCounts none;
  none.fn = 3;
  const auto d = aggregate(none);
  CHECK(d.precision == 0.0);
  CHECK(std::count(d.degenerate.begin(), d.degenerate.end(), "precision") == 1);
}

TEST_CASE("a model that always stops at once") {
  LslmModel model(small_config(Fusion::Middle, true, 1));
  bias_token(model, vocab::kIrq, 1e4f);
  auto data = small_test_set(2);
  EvalOptions opt;
  opt.threads = 2;

  const auto raw = run_interactive_eval(model, data.test, Condition::Clean, opt);
  CHECK(raw.counts.total() == 40);
  CHECK(raw.counts.tp + raw.counts.fn == 20);
  CHECK(raw.counts.fp == 20);
  CHECK(raw.counts.tn == 0);
  long early = 0;
  for (const auto& r : data.test) early += r.onset && *r.onset <= 1;
  CHECK(raw.counts.tp == early);
  CHECK(raw.counts.premature == 20 - early);

  // With every command starting at frame 0 the first-step stop is always a hit.
  for (auto& r : data.test) {
    if (r.onset) r.onset = 0;
  }
  const auto rep = run_interactive_eval(model, data.test, Condition::Clean, opt);
  CHECK(rep.metrics.recall == 1.0);
  CHECK(rep.metrics.precision == doctest::Approx(20.0 / 40.0));
  for (const auto& it : rep.items) CHECK(it.stop.step == 1);
}

TEST_CASE("a model that never stops on IRQ") {
  LslmModel model(small_config(Fusion::Late, true, 3));
  bias_token(model, vocab::kIrq, -1e4f);
  bias_token(model, vocab::kEos, 1e4f);
  const auto data = small_test_set(4);
  for (Condition c : {Condition::Clean, Condition::Noise}) {
    const auto rep = run_interactive_eval(model, data.test, c, EvalOptions{});
    CHECK(rep.metrics.recall == 0.0);
    CHECK(rep.counts.tn == 20);
    CHECK(rep.counts.fn == 20);
    for (const auto& it : rep.items) CHECK(it.stop.reason == StopReason::Eos);
  }
}

TEST_CASE("noise condition keeps the command window and clean has no noise") {
  const auto data = small_test_set(5);
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    const auto& item = data.test[i];
    CHECK(condition_stream(item, Condition::Clean, 9, i) == item.listen);
    const auto noisy = condition_stream(item, Condition::Noise, 9, i);
    CHECK(noisy == condition_stream(item, Condition::Noise, 9, i));
    int n = 0;
    for (int s : noisy) n += vocab::is_noise(s);
    CHECK(n > 0);
    if (item.onset) {
      for (int f = 0; f < world::kCommandFrames; ++f) CHECK(noisy[*item.onset + f] == item.listen[*item.onset + f]);
    }
  }
  const auto half = balanced_subset(data.test, 10);
  CHECK(half.size() == 10);
  CHECK(std::count_if(half.begin(), half.end(), [](const auto& r) { return r.interrupted(); }) == 5);
}

TEST_CASE("tts evaluation is deterministic and length-weighted") {
  const LslmModel model(small_config(Fusion::Middle, true, 6));
  const auto data = small_test_set(7);
  const world::World w(data.config);
  EvalOptions opt;
  opt.sampler.seed = 11;
  opt.threads = 3;
  const auto a = run_tts_eval(model, data.tts_test, w.codebook(), opt);
  opt.threads = 1;
  const auto b = run_tts_eval(model, data.tts_test, w.codebook(), opt);
  CHECK(nlohmann::json(a).dump() == nlohmann::json(b).dump());
  CHECK(a.listening);
  double edits = 0, len = 0;
  for (const auto& u : a.details) {
    edits += u.token_edits;
    len += u.token_ref_len;
  }
  CHECK(a.token_error_rate == doctest::Approx(edits / len));

  const LslmModel vanilla(small_config(Fusion::Middle, false, 6));
  const auto v = run_tts_eval(vanilla, data.tts_test, w.codebook(), opt);
  CHECK_FALSE(v.listening);
  CHECK(v.n_utterances == data.tts_test.size());
  CHECK_THROWS_AS(run_interactive_eval(vanilla, data.test, Condition::Clean, opt), ContractError);
}

TEST_CASE("trace statistics examples") {
  const std::vector<double> flat(20, 0.01);
  CHECK(item_trace_stats(flat, 10, std::nullopt).rise_ratio == doctest::Approx(1.0));
  std::vector<double> rise(20, 1e-4);
  for (int t = 12; t < 20; ++t) rise[t] = 0.5;
  const auto s = item_trace_stats(rise, 10, StopInfo{StopReason::Irq, 20});
  CHECK(s.pre_median == doctest::Approx(1e-4));
  CHECK(s.post_max == doctest::Approx(0.5));
  CHECK(s.rise_ratio == doctest::Approx(5000.0));
  const std::vector<double> zero(20, 0.0);
  CHECK(item_trace_stats(zero, 10, std::nullopt).rise_ratio == 0.0);

  std::vector<TraceInput> traces = {{rise, 10, StopInfo{StopReason::Irq, 20}}, {flat, 10, std::nullopt},
                                    {flat, 0, std::nullopt}};
  const auto agg = irq_trace_stats(traces, 4);
  CHECK(agg.n_items == 2);
  CHECK(agg.n_excluded == 1);
  CHECK(agg.fraction_ratio_ge_10 == doctest::Approx(0.5));
  CHECK(agg.offsets.size() == agg.median_by_offset.size());
  const auto j = nlohmann::json(agg);
  CHECK(j.contains("median_rise_ratio"));
}

TEST_CASE("ablation report structure") {
  std::vector<AblationRow> rows(7);
  rows[0].name = "vanilla";
  rows[0].speaking = rows[0].listening = "-";
  rows[0].present = true;
  rows[0].transcript_error_rate = 0.01;
  const char* sp[] = {"scratch", "frozen", "finetune"};
  const char* li[] = {"frozen", "finetune"};
  for (int i = 0; i < 6; ++i) {
    auto& r = rows[1 + i];
    r.name = "lslm";
    r.speaking = sp[i / 2];
    r.listening = li[i % 2];
    r.present = i != 3;
    if (r.present) {
      r.transcript_error_rate = 0.02;
      r.interactive = Metrics{0.9, 0.8, 0.847, {}};
    }
  }
  const auto j = ablation_json(rows);
  const auto parsed = nlohmann::json::parse(j.dump());
  CHECK(parsed.at("rows").size() == 7);
  CHECK(parsed.at("rows")[0].at("interactive").is_null());
  CHECK(parsed.at("rows")[4].at("present") == false);

  const auto text = ablation_text(rows);
  std::istringstream is(text);
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);) lines.push_back(line);
  REQUIRE(lines.size() == 8);
  CHECK(lines[1].find("-") != std::string::npos);
  CHECK(lines[5].find("absent") != std::string::npos);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (i != 5) CHECK(lines[i].size() == lines[0].size());
  }
}
