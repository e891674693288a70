#include "lslm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>

#include "lslm/checkpoint.hpp"
#include "lslm/errors.hpp"
#include "lslm/rng.hpp"

namespace lslm {

std::string to_string(InitMode mode) {
  switch (mode) {
    case InitMode::Scratch: return "scratch";
    case InitMode::Frozen: return "frozen";
    case InitMode::Finetune: return "finetune";
  }
  return "scratch";
}

InitMode parse_init_mode(std::string_view text) {
  if (text == "scratch") return InitMode::Scratch;
  if (text == "frozen") return InitMode::Frozen;
  if (text == "finetune") return InitMode::Finetune;
  throw ConfigError("unknown init mode '" + std::string(text) + "' (scratch|frozen|finetune)");
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what);
  };
  need(lr_max > 0.0f, "lr_max must be > 0");
  need(warmup_steps >= 0, "warmup_steps must be >= 0");
  need(total_steps >= 0, "total_steps must be >= 0");
  need(total_steps == 0 || warmup_steps <= total_steps, "warmup_steps must not exceed total_steps");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(epochs >= 1, "epochs must be >= 1");
  need(grad_clip > 0.0, "grad_clip must be > 0");
  need(mu_frames >= 1, "mu_frames must be >= 1");
  need(eval_every >= 0 && max_val_items >= 0 && log_every >= 0, "eval_every, max_val_items and log_every must be >= 0");
  need(speaking_init == InitMode::Scratch || !speaking_checkpoint.empty(),
       "speaking_checkpoint is required when speaking_init is " + to_string(speaking_init));
  need(listening_init == InitMode::Scratch || !listening_checkpoint.empty(),
       "listening_checkpoint is required when listening_init is " + to_string(listening_init));
}

int TrainConfig::resolved_steps(std::size_t train_items) const {
  if (total_steps > 0) return total_steps;
  const auto per_epoch = (train_items + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
  const int steps = static_cast<int>(per_epoch) * epochs;
  if (steps < warmup_steps) {
    throw ConfigError("train config: warmup_steps " + std::to_string(warmup_steps) + " exceeds the " +
                      std::to_string(steps) + " steps implied by epochs");
  }
  return steps;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr_max", c.lr_max},
       {"warmup_steps", c.warmup_steps},
       {"total_steps", c.total_steps},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"speaking_init", to_string(c.speaking_init)},
       {"listening_init", to_string(c.listening_init)},
       {"speaking_checkpoint", c.speaking_checkpoint},
       {"listening_checkpoint", c.listening_checkpoint},
       {"grad_clip", c.grad_clip},
       {"mu_frames", c.mu_frames},
       {"eval_every", c.eval_every},
       {"max_val_items", c.max_val_items},
       {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr_max = j.value("lr_max", d.lr_max);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.speaking_init = parse_init_mode(j.value("speaking_init", to_string(d.speaking_init)));
  c.listening_init = parse_init_mode(j.value("listening_init", to_string(d.listening_init)));
  c.speaking_checkpoint = j.value("speaking_checkpoint", d.speaking_checkpoint);
  c.listening_checkpoint = j.value("listening_checkpoint", d.listening_checkpoint);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.mu_frames = j.value("mu_frames", d.mu_frames);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.max_val_items = j.value("max_val_items", d.max_val_items);
  c.log_every = j.value("log_every", d.log_every);
}

float lr_at(int step, int warmup_steps, int total_steps, float lr_max) {
  if (step < 0 || step > total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  if (step < warmup_steps) return lr_max * static_cast<float>(step) / static_cast<float>(warmup_steps);
  if (total_steps == warmup_steps) return lr_max;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return static_cast<float>(lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

float lr_at(int step, const TrainConfig& config, int total_steps) {
  return lr_at(step, config.warmup_steps, total_steps, config.lr_max);
}

std::optional<ValRecord> TrainLog::best_record() const {
  if (best < 0) return std::nullopt;
  return validations[static_cast<std::size_t>(best)];
}

void TrainLog::write_jsonl(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : steps) {
    os << nlohmann::json{{"kind", "step"}, {"step", s.step}, {"loss", s.loss}, {"lr", s.lr}, {"grad_norm", s.grad_norm}}
              .dump()
       << '\n';
  }
  for (const auto& v : validations) {
    os << nlohmann::json{{"kind", "val"}, {"step", v.step}, {"epoch", v.epoch}, {"loss", v.loss}}.dump() << '\n';
  }
  nlohmann::json best_line = {{"kind", "best"}, {"index", best}};
  if (auto b = best_record()) best_line.update({{"step", b->step}, {"loss", b->loss}});
  os << best_line.dump() << '\n';
}

DuplexExample to_example(const world::SampleRecord& r) {
  return {vocab::encode_context(r.context), r.speak_target, r.listen, r.onset};
}

std::vector<DuplexExample> to_examples(const std::vector<world::SampleRecord>& records) {
  std::vector<DuplexExample> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(to_example(r));
  return out;
}

double evaluate_loss(const LslmModel& model, std::span<const DuplexExample> examples, int mu_frames, int batch_size) {
  NoGradGuard guard;
  double total = 0.0;
  std::size_t terms = 0;
  for (std::size_t i = 0; i < examples.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto chunk = examples.subspan(i, std::min<std::size_t>(batch_size, examples.size() - i));
    const LossResult r = model.has_listener() ? fdm_loss(model, chunk, mu_frames) : tts_loss(model, chunk);
    total += r.loss.item();
    terms += r.terms;
  }
  return terms == 0 ? 0.0 : total / static_cast<double>(terms);
}

namespace {

using BatchLoss = std::function<LossResult(std::span<const DuplexExample>)>;

struct LoopResult {
  TrainLog log;
  ParamStore best;
};

// Shared optimization loop: shuffled minibatches, warmup+cosine schedule,
// global-norm clipping, AdamW, periodic validation keeping the best snapshot.
LoopResult run_loop(const TrainConfig& cfg, ParamStore& params, const std::vector<std::string>& trainable,
                    const std::vector<DuplexExample>& train, const BatchLoss& loss_fn,
                    const std::function<double()>& val_fn, const char* tag) {
  if (train.empty()) throw DataError(std::string(tag) + ": empty training set");
  for (auto& [name, t] : params) t.set_requires_grad(false);
  for (const auto& n : trainable) params.at(n).set_requires_grad(true);

  const int total = cfg.resolved_steps(train.size());
  AdamWConfig acfg;
  acfg.lr = 0.0f;
  AdamWState opt(params, trainable, acfg);
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
  std::size_t cursor = 0;
  int epoch = 0;

  LoopResult out;
  double best_loss = std::numeric_limits<double>::infinity();
  auto validate = [&](int step) {
    const double v = val_fn();
    out.log.validations.push_back({step, epoch, v});
    if (v < best_loss) {
      best_loss = v;
      out.log.best = static_cast<int>(out.log.validations.size()) - 1;
      out.best = params.clone();
    }
    if (cfg.log_every > 0) std::cerr << tag << " step " << step << " epoch " << epoch << " val " << v << '\n';
  };

  std::vector<DuplexExample> batch;
  for (int step = 1; step <= total; ++step) {
    bool epoch_done = false;
    batch.clear();
    while (static_cast<int>(batch.size()) < cfg.batch_size) {
      batch.push_back(train[order[cursor++]]);
      if (cursor == order.size()) {
        cursor = 0;
        ++epoch;
        epoch_done = true;
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
        break;
      }
    }
    params.zero_grad();
    const LossResult r = loss_fn(batch);
    const double terms = std::max<std::size_t>(r.terms, 1);
    Tensor mean = ops::scale(r.loss, static_cast<float>(1.0 / terms));
    backward(mean);
    const double norm = clip_grad_norm(params, trainable, cfg.grad_clip);
    const float lr = lr_at(step, cfg, total);
    opt.config.lr = lr;
    adamw_step(params, opt);
    out.log.steps.push_back({step, mean.item(), lr, norm});
    if (cfg.log_every > 0 && step % cfg.log_every == 0) {
      std::cerr << tag << " step " << step << "/" << total << " loss " << mean.item() << " lr " << lr << '\n';
    }
    const bool due = cfg.eval_every > 0 ? step % cfg.eval_every == 0 : epoch_done;
    if (due || step == total) validate(step);
  }
  for (auto& [name, t] : params) t.set_requires_grad(false);
  if (out.best.size() == 0) out.best = params.clone();
  return out;
}

std::vector<DuplexExample> capped(const std::vector<DuplexExample>& val, int max_items) {
  if (max_items <= 0 || val.size() <= static_cast<std::size_t>(max_items)) return val;
  return {val.begin(), val.begin() + max_items};
}

void copy_params(ParamStore& dst, const ParamStore& src, const std::vector<std::string>& names,
                 const std::string& origin) {
  for (const auto& n : names) {
    if (!src.contains(n)) throw ConfigError("checkpoint " + origin + " lacks parameter " + n);
    const Tensor& s = src.at(n);
    Tensor& d = dst.at(n);
    if (s.shape() != d.shape()) {
      throw ConfigError("checkpoint " + origin + " has " + n + " with shape " + shape_str(s.shape()) +
                        ", model expects " + shape_str(d.shape()));
    }
    std::copy(s.data().begin(), s.data().end(), d.data().begin());
  }
}

}  // namespace

TrainResult pretrain_tts(const TrainConfig& config, ModelConfig model_config, const std::vector<DuplexExample>& train,
                         const std::vector<DuplexExample>& val) {
  config.validate();
  model_config.listening = false;
  model_config.seed = config.seed;
  LslmModel model(model_config);
  const auto val_items = capped(val, config.max_val_items);
  auto loop = run_loop(
      config, model.params(), model.params().names(), train,
      [&](std::span<const DuplexExample> b) { return tts_loss(model, b); },
      [&] { return evaluate_loss(model, val_items, config.mu_frames, config.batch_size); }, "pretrain-tts");
  return {LslmModel(model_config, std::move(loop.best)), std::move(loop.log)};
}

FrameClass frame_class(int symbol) {
  if (symbol == vocab::kSil) return FrameClass::Silence;
  if (vocab::is_noise(symbol)) return FrameClass::Noise;
  if (vocab::is_command(symbol)) return FrameClass::Command;
  throw IndexError("listening symbol " + std::to_string(symbol) + " outside the listening alphabet");
}

namespace {

struct FrameBatch {
  int batch = 0;
  int frames = 0;
  std::vector<int> symbols;
  std::vector<int> labels;
  std::vector<std::uint8_t> mask;
};

FrameBatch frame_batch(std::span<const DuplexExample> examples) {
  FrameBatch b;
  b.batch = static_cast<int>(examples.size());
  for (const auto& ex : examples) b.frames = std::max<int>(b.frames, static_cast<int>(ex.listen.size()));
  const std::size_t n = static_cast<std::size_t>(b.batch) * b.frames;
  b.symbols.assign(n, vocab::kSil);
  b.labels.assign(n, 0);
  b.mask.assign(n, 0);
  for (int i = 0; i < b.batch; ++i) {
    const auto& s = examples[i].listen;
    for (std::size_t t = 0; t < s.size(); ++t) {
      const std::size_t row = static_cast<std::size_t>(i) * b.frames + t;
      b.symbols[row] = s[t];
      b.labels[row] = static_cast<int>(frame_class(s[t]));
      b.mask[row] = 1;
    }
  }
  return b;
}

}  // namespace

double listener_accuracy(const LslmModel& model, const Tensor& head_weight, const Tensor& head_bias,
                         std::span<const DuplexExample> examples) {
  NoGradGuard guard;
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < examples.size(); i += 64) {
    const auto fb = frame_batch(examples.subspan(i, std::min<std::size_t>(64, examples.size() - i)));
    const Tensor logits = ops::linear(model.encode_listen(fb.symbols, fb.batch, fb.frames), head_weight, head_bias);
    const auto v = logits.data();
    for (std::size_t r = 0; r < fb.mask.size(); ++r) {
      if (!fb.mask[r]) continue;
      const auto row = v.subspan(r * 3, 3);
      const int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += pred == fb.labels[r];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

ListenerResult pretrain_listener(const TrainConfig& config, ModelConfig model_config,
                                 const std::vector<DuplexExample>& train, const std::vector<DuplexExample>& val) {
  config.validate();
  model_config.listening = true;
  model_config.seed = config.seed;
  LslmModel model(model_config);
  const int d_enc = model_config.listener.d_enc;

  // The store shares storage with the model (tensor handles), plus the
  // classifier head that is discarded afterwards.
  ParamStore store;
  std::vector<std::string> trainable;
  for (const auto& [name, t] : model.params()) {
    if (is_listener_encoder_param(name)) {
      store.add(name, t);
      trainable.push_back(name);
    }
  }
  Rng rng(derive_seed(config.seed, "listener-head"));
  Tensor hw({d_enc, 3}, true);
  for (float& x : hw.data()) x = rng.normal(0.0f, 0.02f);
  Tensor hb({3}, true);
  store.add("cls.weight", hw);
  store.add("cls.bias", hb);
  trainable.push_back("cls.weight");
  trainable.push_back("cls.bias");

  auto loss_fn = [&](std::span<const DuplexExample> examples) {
    const auto fb = frame_batch(examples);
    const Tensor logits = ops::linear(model.encode_listen(fb.symbols, fb.batch, fb.frames), hw, hb);
    return LossResult{ops::cross_entropy_with_logits(logits, fb.labels, fb.mask),
                      static_cast<std::size_t>(std::count(fb.mask.begin(), fb.mask.end(), 1))};
  };
  const auto val_items = capped(val, config.max_val_items);
  auto val_fn = [&] {
    NoGradGuard guard;
    double total = 0.0;
    std::size_t terms = 0;
    for (std::size_t i = 0; i < val_items.size(); i += static_cast<std::size_t>(config.batch_size)) {
      const auto r = loss_fn(std::span(val_items).subspan(
          i, std::min<std::size_t>(config.batch_size, val_items.size() - i)));
      total += r.loss.item();
      terms += r.terms;
    }
    return terms == 0 ? 0.0 : total / static_cast<double>(terms);
  };
  auto loop = run_loop(config, store, trainable, train, loss_fn, val_fn, "pretrain-listener");

  for (auto& [name, t] : loop.best) {
    if (model.params().contains(name)) {
      std::copy(t.data().begin(), t.data().end(), model.params().at(name).data().begin());
    }
  }
  const Tensor& best_w = loop.best.at("cls.weight");
  const Tensor& best_b = loop.best.at("cls.bias");
  const double acc = listener_accuracy(model, best_w, best_b, val_items);
  return {std::move(model), acc, std::move(loop.log)};
}

void save_listener(const LslmModel& model, const std::filesystem::path& path) {
  ParamStore enc;
  for (const auto& [name, t] : model.params()) {
    if (is_listener_encoder_param(name)) enc.add(name, t);
  }
  nlohmann::json listener = {{"listen_vocab_size", model.config().listener.listen_vocab_size},
                             {"conv_depth", model.config().listener.conv_depth},
                             {"kernel_size", model.config().listener.kernel_size},
                             {"d_enc", model.config().listener.d_enc}};
  save_checkpoint(path, enc, {{"kind", "listener_encoder"}, {"listener", listener}, {"vocab_version", vocab::kVersion}});
}

std::pair<LslmModel, std::vector<std::string>> init_lslm(const TrainConfig& config, const ModelConfig& model_config) {
  config.validate();
  ModelConfig mc = model_config;
  mc.listening = true;
  LslmModel model(mc);
  if (config.speaking_init != InitMode::Scratch) {
    const Checkpoint ck = load_checkpoint(config.speaking_checkpoint);
    copy_params(model.params(), ck.params, model.group_names(ParamGroup::Speaking), config.speaking_checkpoint);
  }
  std::vector<std::string> encoder;
  for (const auto& n : model.group_names(ParamGroup::Listening)) {
    if (is_listener_encoder_param(n)) encoder.push_back(n);
  }
  if (config.listening_init != InitMode::Scratch) {
    const Checkpoint ck = load_checkpoint(config.listening_checkpoint);
    copy_params(model.params(), ck.params, encoder, config.listening_checkpoint);
  }
  std::vector<std::string> trainable;
  for (const auto& n : model.params().names()) {
    if (param_group(n) == ParamGroup::Speaking && config.speaking_init == InitMode::Frozen) continue;
    if (is_listener_encoder_param(n) && config.listening_init == InitMode::Frozen) continue;
    trainable.push_back(n);
  }
  return {std::move(model), std::move(trainable)};
}

TrainResult train_lslm(const TrainConfig& config, ModelConfig model_config, const std::vector<DuplexExample>& train,
                       const std::vector<DuplexExample>& val) {
  model_config.seed = config.seed;
  auto [model, trainable] = init_lslm(config, model_config);
  const auto val_items = capped(val, config.max_val_items);
  auto loop = run_loop(
      config, model.params(), trainable, train,
      [&](std::span<const DuplexExample> b) { return fdm_loss(model, b, config.mu_frames); },
      [&] { return evaluate_loss(model, val_items, config.mu_frames, config.batch_size); }, "train");
  return {LslmModel(model.config(), std::move(loop.best)), std::move(loop.log)};
}

}  // namespace lslm
