#include "lslm/model.hpp"

#include <algorithm>

#include "lslm/checkpoint.hpp"
#include "lslm/errors.hpp"
#include "lslm/rng.hpp"

namespace lslm {

std::string to_string(Fusion fusion) {
  switch (fusion) {
    case Fusion::Early: return "early";
    case Fusion::Middle: return "middle";
    case Fusion::Late: return "late";
  }
  return "middle";
}

Fusion parse_fusion(std::string_view text) {
  if (text == "early") return Fusion::Early;
  if (text == "middle") return Fusion::Middle;
  if (text == "late") return Fusion::Late;
  throw ConfigError("unknown fusion strategy '" + std::string(text) + "' (early|middle|late)");
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  need(n_blocks >= 1, "n_blocks must be >= 1");
  need(n_heads >= 1, "n_heads must be >= 1");
  need(d_model >= 1 && d_model % n_heads == 0, "d_model must be a positive multiple of n_heads");
  need(d_ff >= 1, "d_ff must be >= 1");
  need(max_seq_len >= 4, "max_seq_len must be >= 4");
  need(listener.listen_vocab_size == vocab::kListenSize, "listen_vocab_size must be 41");
  need(listener.conv_depth >= 1, "listener conv_depth must be >= 1");
  need(listener.kernel_size >= 1, "listener kernel_size must be >= 1");
  need(listener.d_enc >= 1, "listener d_enc must be >= 1");
}

ModelConfig ModelConfig::reference() {
  ModelConfig c;
  c.n_blocks = 12;
  c.n_heads = 12;
  c.d_model = 768;
  c.d_ff = 3072;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_blocks", c.n_blocks},
       {"n_heads", c.n_heads},
       {"d_model", c.d_model},
       {"d_ff", c.d_ff},
       {"max_seq_len", c.max_seq_len},
       {"listening", c.listening},
       {"fusion", to_string(c.fusion)},
       {"listener",
        {{"listen_vocab_size", c.listener.listen_vocab_size},
         {"conv_depth", c.listener.conv_depth},
         {"kernel_size", c.listener.kernel_size},
         {"d_enc", c.listener.d_enc}}},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_blocks = j.value("n_blocks", d.n_blocks);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_model = j.value("d_model", d.d_model);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.listening = j.value("listening", d.listening);
  c.fusion = parse_fusion(j.value("fusion", to_string(d.fusion)));
  if (j.contains("listener")) {
    const auto& l = j.at("listener");
    c.listener.listen_vocab_size = l.value("listen_vocab_size", d.listener.listen_vocab_size);
    c.listener.conv_depth = l.value("conv_depth", d.listener.conv_depth);
    c.listener.kernel_size = l.value("kernel_size", d.listener.kernel_size);
    c.listener.d_enc = l.value("d_enc", d.listener.d_enc);
  }
  c.seed = j.value("seed", d.seed);
}

// ------------------------------------------------------------ layout

SequenceLayout layout_sequence(std::span<const int> context, std::span<const int> speak, int terminal,
                               int max_seq_len) {
  const int len = static_cast<int>(context.size() + speak.size()) + 3;
  if (len > max_seq_len) {
    throw LengthError("sequence of " + std::to_string(len) + " positions exceeds max_seq_len " +
                      std::to_string(max_seq_len));
  }
  if (!vocab::is_terminal(terminal)) throw ContractError("layout terminal must be EOS or IRQ");
  SequenceLayout out;
  out.input_ids.reserve(static_cast<std::size_t>(len));
  out.input_ids.push_back(vocab::kContextOffset + vocab::kBoc);
  for (int c : context) {
    if (c < 0 || c >= vocab::kContextChars) throw IndexError("context id " + std::to_string(c) + " out of range");
    out.input_ids.push_back(vocab::kContextOffset + c);
  }
  out.input_ids.push_back(vocab::kContextOffset + vocab::kEoc);
  out.first_speaking = static_cast<int>(out.input_ids.size());
  out.input_ids.push_back(vocab::kBos);
  for (int t : speak) {
    if (!vocab::is_audio(t)) throw IndexError("speaking token " + std::to_string(t) + " is not an audio token");
    out.input_ids.push_back(t);
  }
  out.targets.assign(static_cast<std::size_t>(len), -1);
  out.speaking.assign(static_cast<std::size_t>(len), 0);
  for (int p = out.first_speaking; p < len; ++p) {
    const int j = p - out.first_speaking;
    out.targets[p] = j < static_cast<int>(speak.size()) ? speak[j] : terminal;
    out.speaking[p] = 1;
  }
  return out;
}

std::vector<int> listen_alignment(const SequenceLayout& layout, int listen_frames) {
  const int steps = layout.speaking_steps();
  if (listen_frames < steps) {
    throw DataError("listening stream has " + std::to_string(listen_frames) + " frames but " +
                    std::to_string(steps) + " speaking steps need one each");
  }
  std::vector<int> rows(static_cast<std::size_t>(layout.length()), -1);
  for (int j = 0; j < steps; ++j) rows[layout.first_speaking + j] = j;
  return rows;
}

std::size_t Batch::scored_terms() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

Batch make_batch(std::span<const SequenceLayout> layouts) {
  Batch b;
  b.batch = static_cast<int>(layouts.size());
  for (const auto& l : layouts) b.seq = std::max(b.seq, l.length());
  const std::size_t rows = static_cast<std::size_t>(b.batch) * b.seq;
  b.input_ids.assign(rows, vocab::kSpad);
  b.positions.resize(rows);
  b.targets.assign(rows, -1);
  b.mask.assign(rows, 0);
  for (int i = 0; i < b.batch; ++i) {
    const auto& l = layouts[i];
    const std::size_t base = static_cast<std::size_t>(i) * b.seq;
    std::copy(l.input_ids.begin(), l.input_ids.end(), b.input_ids.begin() + base);
    for (int p = 0; p < l.length(); ++p) {
      b.targets[base + p] = l.targets[p];
      b.mask[base + p] = l.speaking[p];
    }
    for (int p = 0; p < b.seq; ++p) b.positions[base + p] = p;
    b.first_speaking.push_back(l.first_speaking);
    b.speaking_steps.push_back(l.speaking_steps());
  }
  return b;
}

Batch make_batch(std::span<const SequenceLayout> layouts, std::span<const std::vector<int>> listen) {
  if (listen.size() != layouts.size()) {
    throw ContractError("make_batch: " + std::to_string(listen.size()) + " listening streams for " +
                        std::to_string(layouts.size()) + " layouts");
  }
  Batch b = make_batch(layouts);
  for (int steps : b.speaking_steps) b.listen_frames = std::max(b.listen_frames, steps);
  b.listen_symbols.assign(static_cast<std::size_t>(b.batch) * b.listen_frames, vocab::kSil);
  b.listen_rows.assign(b.input_ids.size(), -1);
  for (int i = 0; i < b.batch; ++i) {
    const auto& stream = listen[i];
    const auto rows = listen_alignment(layouts[i], static_cast<int>(stream.size()));
    const int n = std::min<int>(b.listen_frames, static_cast<int>(stream.size()));
    std::copy_n(stream.begin(), n, b.listen_symbols.begin() + static_cast<std::ptrdiff_t>(i) * b.listen_frames);
    const std::size_t base = static_cast<std::size_t>(i) * b.seq;
    for (std::size_t p = 0; p < rows.size(); ++p) {
      if (rows[p] >= 0) b.listen_rows[base + p] = i * b.listen_frames + rows[p];
    }
  }
  return b;
}

// ------------------------------------------------------------ parameters

ParamGroup param_group(std::string_view name) {
  return name.starts_with("listen.") ? ParamGroup::Listening : ParamGroup::Speaking;
}

bool is_listener_encoder_param(std::string_view name) {
  return name.starts_with("listen.embed") || name.starts_with("listen.conv.");
}

std::string names::block(int index, std::string_view leaf) {
  return "blocks." + std::to_string(index) + "." + std::string(leaf);
}

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  const int d = c.d_model;
  out.push_back({"tok_emb", {vocab::kInputSize, d}});
  out.push_back({"pos_emb", {c.max_seq_len, d}});
  for (int i = 0; i < c.n_blocks; ++i) {
    out.push_back({names::block(i, "ln1.gain"), {d}});
    out.push_back({names::block(i, "ln1.bias"), {d}});
    out.push_back({names::block(i, "attn.qkv.weight"), {d, 3 * d}});
    out.push_back({names::block(i, "attn.qkv.bias"), {3 * d}});
    out.push_back({names::block(i, "attn.out.weight"), {d, d}});
    out.push_back({names::block(i, "attn.out.bias"), {d}});
    out.push_back({names::block(i, "ln2.gain"), {d}});
    out.push_back({names::block(i, "ln2.bias"), {d}});
    out.push_back({names::block(i, "mlp.fc.weight"), {d, c.d_ff}});
    out.push_back({names::block(i, "mlp.fc.bias"), {c.d_ff}});
    out.push_back({names::block(i, "mlp.proj.weight"), {c.d_ff, d}});
    out.push_back({names::block(i, "mlp.proj.bias"), {d}});
  }
  out.push_back({"ln_f.gain", {d}});
  out.push_back({"ln_f.bias", {d}});
  out.push_back({"head.weight", {d, vocab::kSpeakSize}});
  out.push_back({"head.bias", {vocab::kSpeakSize}});
  if (c.listening) {
    const auto& l = c.listener;
    out.push_back({"listen.embed", {l.listen_vocab_size, l.d_enc}});
    for (int i = 0; i < l.conv_depth; ++i) {
      out.push_back({"listen.conv." + std::to_string(i) + ".weight", {l.kernel_size, l.d_enc, l.d_enc}});
      out.push_back({"listen.conv." + std::to_string(i) + ".bias", {l.d_enc}});
    }
    out.push_back({"listen.proj.weight", {l.d_enc, d}});
    out.push_back({"listen.proj.bias", {d}});
    if (c.fusion == Fusion::Late) {
      out.push_back({"listen.late_head.weight", {d, vocab::kSpeakSize}});
      out.push_back({"listen.late_head.bias", {vocab::kSpeakSize}});
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

LslmModel::LslmModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  init_params();
}

LslmModel::LslmModel(const ModelConfig& config, ParamStore params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  check_params();
}

void LslmModel::init_params() {
  Rng rng(derive_seed(config_.seed, "init"));
  for (auto& [name, shape] : parameter_shapes(config_)) {
    Tensor t(shape, true);
    auto v = t.data();
    if (name.ends_with(".gain")) {
      std::fill(v.begin(), v.end(), 1.0f);
    } else if (!name.ends_with(".bias")) {
      for (float& x : v) x = rng.normal(0.0f, 0.02f);
    }
    params_.add(name, std::move(t));
  }
}

void LslmModel::check_params() const {
  const auto expected = parameter_shapes(config_);
  if (expected.size() != params_.size()) {
    throw ConfigError("parameter count " + std::to_string(params_.size()) + " does not match config (" +
                      std::to_string(expected.size()) + ")");
  }
  for (const auto& [name, shape] : expected) {
    if (!params_.contains(name)) throw ConfigError("missing parameter " + name);
    if (params_.at(name).shape() != shape) {
      throw ConfigError("parameter " + name + " has shape " + shape_str(params_.at(name).shape()) +
                        ", config expects " + shape_str(shape));
    }
  }
}

std::vector<std::string> LslmModel::group_names(ParamGroup group) const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params_) {
    if (param_group(name) == group) out.push_back(name);
  }
  return out;
}

void LslmModel::set_trainable(const std::vector<std::string>& names) {
  for (auto& [_, t] : params_) t.set_requires_grad(false);
  for (const auto& n : names) params_.at(n).set_requires_grad(true);
}

// ------------------------------------------------------------ forward

Tensor LslmModel::encode_listen(std::span<const int> symbols, int batch, int frames) const {
  if (!has_listener()) throw ContractError("encode_listen on a model without a listening channel");
  if (symbols.size() != static_cast<std::size_t>(batch) * frames) {
    throw ShapeError("encode_listen: " + std::to_string(symbols.size()) + " symbols for batch=" +
                     std::to_string(batch) + " frames=" + std::to_string(frames));
  }
  for (int s : symbols) {
    if (s < 0 || s >= config_.listener.listen_vocab_size) {
      throw IndexError("listening symbol " + std::to_string(s) + " outside the listening alphabet");
    }
  }
  Tensor h = ops::gather_rows(p("listen.embed"), symbols);
  for (int i = 0; i < config_.listener.conv_depth; ++i) {
    const std::string prefix = "listen.conv." + std::to_string(i);
    h = ops::gelu(ops::causal_conv1d(h, p(prefix + ".weight"), p(prefix + ".bias"), batch, frames));
  }
  return h;
}

Tensor LslmModel::project_listen(const Tensor& features) const {
  if (!has_listener()) throw ContractError("project_listen on a model without a listening channel");
  return ops::linear(features, p("listen.proj.weight"), p("listen.proj.bias"));
}

Tensor LslmModel::align_listen(const Tensor& projected, const Batch& batch) const {
  if (projected.dim(0) != batch.batch * batch.listen_frames) {
    throw DataError("align_listen: " + std::to_string(projected.dim(0)) + " projected frames, batch needs " +
                    std::to_string(batch.batch * batch.listen_frames));
  }
  return ops::gather_rows(projected, batch.listen_rows);
}

Tensor LslmModel::listen_pathway(const Batch& batch) const {
  if (!batch.has_listen()) throw ContractError("batch carries no listening streams");
  return align_listen(project_listen(encode_listen(batch.listen_symbols, batch.batch, batch.listen_frames)),
                      batch);
}

Tensor LslmModel::forward(const Batch& batch, const Tensor* aligned) const {
  if (aligned && !has_listener()) {
    throw ContractError("listening input given to a vanilla TTS model");
  }
  const int rows = batch.batch * batch.seq;
  if (aligned && (aligned->rank() != 2 || aligned->dim(0) != rows || aligned->dim(1) != config_.d_model)) {
    throw ShapeError("aligned listening features " + shape_str(aligned->shape()) + " do not fit batch of " +
                     std::to_string(rows) + " rows");
  }
  for (int pos : batch.positions) {
    if (pos >= config_.max_seq_len) throw LengthError("position beyond max_seq_len");
  }
  const Fusion fusion = config_.fusion;
  Tensor x = ops::add(ops::gather_rows(p("tok_emb"), batch.input_ids), ops::gather_rows(p("pos_emb"), batch.positions));
  if (aligned && fusion == Fusion::Early) x = ops::add(x, *aligned);
  for (int i = 0; i < config_.n_blocks; ++i) {
    auto bp = [&](std::string_view leaf) -> const Tensor& { return p(names::block(i, leaf)); };
    if (aligned && fusion == Fusion::Middle) x = ops::add(x, *aligned);
    Tensor h = ops::layer_norm(x, bp("ln1.gain"), bp("ln1.bias"));
    Tensor qkv = ops::linear(h, bp("attn.qkv.weight"), bp("attn.qkv.bias"));
    Tensor att = ops::causal_self_attention(qkv, batch.batch, batch.seq, config_.n_heads);
    x = ops::add(x, ops::linear(att, bp("attn.out.weight"), bp("attn.out.bias")));
    h = ops::layer_norm(x, bp("ln2.gain"), bp("ln2.bias"));
    h = ops::gelu(ops::linear(h, bp("mlp.fc.weight"), bp("mlp.fc.bias")));
    x = ops::add(x, ops::linear(h, bp("mlp.proj.weight"), bp("mlp.proj.bias")));
  }
  Tensor logits = ops::linear(ops::layer_norm(x, p("ln_f.gain"), p("ln_f.bias")), p("head.weight"), p("head.bias"));
  if (aligned && fusion == Fusion::Late) {
    logits = ops::add(logits, ops::linear(*aligned, p("listen.late_head.weight"), p("listen.late_head.bias")));
  }
  return logits;
}

// ------------------------------------------------------------ persistence

nlohmann::json LslmModel::header_meta() const {
  nlohmann::json groups = {{"speaking", group_names(ParamGroup::Speaking)},
                           {"listening", group_names(ParamGroup::Listening)}};
  return {{"kind", "lslm_model"},
          {"model_config", config_},
          {"fusion", config_.listening ? nlohmann::json(to_string(config_.fusion)) : nlohmann::json(nullptr)},
          {"vocab_version", vocab::kVersion},
          {"param_groups", groups}};
}

void LslmModel::save(const std::filesystem::path& path) const { save_checkpoint(path, params_, header_meta()); }

LslmModel LslmModel::load(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "lslm_model") {
    throw DataError("checkpoint " + path.string() + " does not hold a model");
  }
  if (ck.meta.value("vocab_version", 0) != vocab::kVersion) {
    throw DataError("checkpoint " + path.string() + " uses an incompatible vocabulary layout");
  }
  return LslmModel(ck.meta.at("model_config").get<ModelConfig>(), std::move(ck.params));
}

// ------------------------------------------------------------ losses

std::vector<int> irq_truncate(std::span<const int> speak, int onset, int mu_frames) {
  if (onset < 0 || mu_frames < 0 || onset + mu_frames > static_cast<int>(speak.size())) {
    throw DataError("interruption onset " + std::to_string(onset) + " + mu " + std::to_string(mu_frames) +
                    " exceeds speaking target of length " + std::to_string(speak.size()));
  }
  return {speak.begin(), speak.begin() + onset + mu_frames};
}

SequenceLayout layout_example(const DuplexExample& ex, int mu_frames, int max_seq_len) {
  if (ex.onset) {
    const auto kept = irq_truncate(ex.speak, *ex.onset, mu_frames);
    return layout_sequence(ex.context, kept, vocab::kIrq, max_seq_len);
  }
  return layout_sequence(ex.context, ex.speak, vocab::kEos, max_seq_len);
}

LossResult tts_loss(const LslmModel& model, std::span<const DuplexExample> examples) {
  std::vector<SequenceLayout> layouts;
  layouts.reserve(examples.size());
  for (const auto& ex : examples) {
    layouts.push_back(layout_sequence(ex.context, ex.speak, vocab::kEos, model.config().max_seq_len));
  }
  const Batch batch = make_batch(layouts);
  Tensor logits = model.forward(batch, nullptr);
  return {ops::cross_entropy_with_logits(logits, batch.targets, batch.mask), batch.scored_terms()};
}

LossResult fdm_loss(const LslmModel& model, std::span<const DuplexExample> examples, int mu_frames) {
  if (!model.has_listener()) throw ContractError("fdm_loss needs a model with a listening channel");
  std::vector<SequenceLayout> layouts;
  std::vector<std::vector<int>> streams;
  layouts.reserve(examples.size());
  streams.reserve(examples.size());
  for (const auto& ex : examples) {
    layouts.push_back(layout_example(ex, mu_frames, model.config().max_seq_len));
    streams.push_back(ex.listen);
  }
  const Batch batch = make_batch(layouts, streams);
  Tensor aligned = model.listen_pathway(batch);
  Tensor logits = model.forward(batch, &aligned);
  return {ops::cross_entropy_with_logits(logits, batch.targets, batch.mask), batch.scored_terms()};
}

}  // namespace lslm
