#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "checks.hpp"
#include "lslm/ablation.hpp"
#include "lslm/checkpoint.hpp"
#include "lslm/errors.hpp"
#include "lslm/trainer.hpp"

using namespace lslm;
using namespace lslm::testing;

namespace {

struct Corpus {
  std::vector<DuplexExample> train, val;
};

const Corpus& corpus() {
  static const Corpus c = [] {
    world::WorldConfig w;
    w.seed = 31;
    w.n_train = 400;
    w.n_val = 40;
    w.n_test_interrupted = 10;
    w.n_test_clean = 10;
    w.n_tts_test = 10;
    const auto data = world::make_dataset(w);
    return Corpus{to_examples(data.train), to_examples(data.val)};
  }();
  return c;
}

TrainConfig quick(int steps, std::uint64_t seed = 1) {
  TrainConfig t;
  t.total_steps = steps;
  t.warmup_steps = std::min(20, steps);
  t.batch_size = 8;
  t.lr_max = 3e-3f;
  t.seed = seed;
  t.eval_every = std::max(1, steps / 4);
  t.max_val_items = 16;
  return t;
}

std::filesystem::path scratch_dir() {
  const auto p = std::filesystem::temp_directory_path() / "lslm_trainer_test";
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("learning-rate schedule endpoints and continuity") {
  CHECK(lr_at(0, 500, 10000, 5e-4f) == 0.0f);
  CHECK(lr_at(500, 500, 10000, 5e-4f) == doctest::Approx(5e-4));
  CHECK(lr_at(10000, 500, 10000, 5e-4f) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(lr_at(250, 500, 10000, 5e-4f) == doctest::Approx(2.5e-4));
  for (int s = 1; s <= 10000; ++s) {
    const float a = lr_at(s - 1, 500, 10000, 5e-4f), b = lr_at(s, 500, 10000, 5e-4f);
    REQUIRE(std::fabs(a - b) <= 5e-4f / 500 + 1e-9f);
    if (s > 500) REQUIRE(b <= a);
  }
  CHECK_THROWS_AS(lr_at(-1, 5, 10, 1.0f), ContractError);
  CHECK_THROWS_AS(lr_at(11, 5, 10, 1.0f), ContractError);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr_max = 0.0f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.speaking_init = InitMode::Frozen;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.total_steps = 10;
  c.warmup_steps = 20;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_init_mode("finetune") == InitMode::Finetune);
  CHECK_THROWS(parse_init_mode("thawed"));
  c = TrainConfig{};
  c.epochs = 2;
  c.warmup_steps = 5;
  c.batch_size = 32;
  CHECK(c.resolved_steps(320) == 20);
}

TEST_CASE("vanilla pretraining lowers validation loss and reloads exactly") {
  const auto& d = corpus();
  auto mc = small_config(Fusion::Middle, false, 2);
  const auto r = pretrain_tts(quick(200), mc, d.train, d.val);
  REQUIRE(r.log.validations.size() >= 2);
  const auto best = r.log.best_record();
  REQUIRE(best);
  double lowest = 1e30;
  for (const auto& v : r.log.validations) lowest = std::min(lowest, v.loss);
  CHECK(best->loss == lowest);
  CHECK(r.log.validations.back().loss < r.log.validations.front().loss);
  CHECK_FALSE(r.model.has_listener());

  const auto path = scratch_dir() / "tts.ckpt";
  r.model.save(path);
  const auto back = LslmModel::load(path);
  const std::vector<DuplexExample> val(d.val.begin(), d.val.begin() + 16);
  CHECK(evaluate_loss(back, val, 4, 8) == evaluate_loss(r.model, val, 4, 8));
  CHECK(evaluate_loss(r.model, val, 4, 8) == doctest::Approx(best->loss).epsilon(1e-6));
}

TEST_CASE("overfitting eight samples") {
  const auto& d = corpus();
  const std::vector<DuplexExample> eight(d.train.begin(), d.train.begin() + 8);
  auto t = quick(500);
  t.batch_size = 8;
  t.lr_max = 5e-3f;
  const auto r = pretrain_tts(t, small_config(Fusion::Middle, false, 3), eight, eight);
  CHECK(r.log.steps.back().loss < 0.1);
}

TEST_CASE("listener pretraining reaches high frame accuracy") {
  const auto& d = corpus();
  auto t = quick(600);
  t.lr_max = 1e-2f;
  const auto r = pretrain_listener(t, small_config(Fusion::Middle, true, 4), d.train, d.val);
  CHECK(r.val_accuracy > 0.95);
  CHECK(frame_class(vocab::kSil) == FrameClass::Silence);
  CHECK(frame_class(vocab::kCommandFirst) == FrameClass::Command);
  CHECK(frame_class(1) == FrameClass::Noise);
}

TEST_CASE("init modes, frozen groups and determinism") {
  const auto& d = corpus();
  const auto dir = scratch_dir();
  const auto mc = small_config(Fusion::Middle, true, 5);
  const auto tts = pretrain_tts(quick(20), mc, d.train, d.val);
  tts.model.save(dir / "speak.ckpt");
  const auto lis = pretrain_listener(quick(20), mc, d.train, d.val);
  save_listener(lis.model, dir / "listen.ckpt");

  TrainConfig t = quick(30, 9);
  t.speaking_init = InitMode::Frozen;
  t.listening_init = InitMode::Frozen;
  t.speaking_checkpoint = (dir / "speak.ckpt").string();
  t.listening_checkpoint = (dir / "listen.ckpt").string();
  const auto [start, trainable] = init_lslm(t, mc);
  const auto speaking = start.group_names(ParamGroup::Speaking);
  std::vector<std::string> encoder;
  for (const auto& n : start.group_names(ParamGroup::Listening)) {
    if (n.starts_with("listen.embed") || n.starts_with("listen.conv.")) encoder.push_back(n);
  }
  REQUIRE_FALSE(encoder.empty());
  CHECK(params_bitwise_equal(start.params(), tts.model.params(), speaking));
  CHECK(params_bitwise_equal(start.params(), lis.model.params(), encoder));
  for (const auto& n : trainable) {
    CHECK(std::find(speaking.begin(), speaking.end(), n) == speaking.end());
    CHECK(std::find(encoder.begin(), encoder.end(), n) == encoder.end());
  }

  const auto a = train_lslm(t, mc, d.train, d.val);
  CHECK(params_bitwise_equal(a.model.params(), tts.model.params(), speaking));
  CHECK(params_bitwise_equal(a.model.params(), lis.model.params(), encoder));
  const auto b = train_lslm(t, mc, d.train, d.val);
  CHECK(params_bitwise_equal(a.model.params(), b.model.params(), a.model.params().names()));

  t.speaking_init = InitMode::Finetune;
  t.listening_init = InitMode::Finetune;
  const auto ft = train_lslm(t, mc, d.train, d.val);
  CHECK_FALSE(params_bitwise_equal(ft.model.params(), tts.model.params(), speaking));

  TrainConfig s = quick(5);
  s.speaking_checkpoint = "/nonexistent/speak.ckpt";
  s.listening_checkpoint = "/nonexistent/listen.ckpt";
  CHECK_NOTHROW(init_lslm(s, mc));
  s.speaking_init = InitMode::Finetune;
  CHECK_THROWS(init_lslm(s, mc));
}

TEST_CASE("ablation matrix runs end to end on a tiny budget") {
  world::WorldConfig w;
  w.seed = 41;
  w.n_train = 200;
  w.n_val = 20;
  w.n_test_interrupted = 6;
  w.n_test_clean = 6;
  w.n_tts_test = 6;
  const auto data = world::make_dataset(w);
  AblationOptions o;
  o.model = small_config(Fusion::Middle, true, 6);
  o.train = quick(10);
  o.eval.threads = 2;
  const auto dir = scratch_dir();
  {
    const auto tts = pretrain_tts(quick(10), o.model, to_examples(data.train), to_examples(data.val));
    tts.model.save(dir / "abl_speak.ckpt");
    const auto lis = pretrain_listener(quick(10), o.model, to_examples(data.train), to_examples(data.val));
    save_listener(lis.model, dir / "abl_listen.ckpt");
  }
  o.vanilla_checkpoint = (dir / "abl_speak.ckpt").string();
  o.listener_checkpoint = (dir / "abl_listen.ckpt").string();
  const auto rows = run_ablation(o, data);
  REQUIRE(rows.size() == 7);
  CHECK(rows[0].speaking == "-");
  CHECK_FALSE(rows[0].interactive);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].present);
    CHECK(rows[i].interactive);
    CHECK(rows[i].frozen_verified);
  }
  CHECK(ablation_modes().size() == 6);

  o.listener_checkpoint = (dir / "missing.ckpt").string();
  const auto partial = run_ablation(o, data);
  REQUIRE(partial.size() == 7);
  int absent = 0;
  for (const auto& r : partial) absent += !r.present;
  CHECK(absent == 6);
}
