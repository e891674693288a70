#include "lslm/session.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lslm/errors.hpp"

namespace lslm {

void SamplerConfig::validate() const {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("sampler: top_p must lie in (0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("sampler: temperature must be > 0");
}

void to_json(nlohmann::json& j, const SamplerConfig& c) {
  j = {{"top_p", c.top_p}, {"temperature", c.temperature}, {"greedy", c.greedy}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SamplerConfig& c) {
  SamplerConfig d;
  c.top_p = j.value("top_p", d.top_p);
  c.temperature = j.value("temperature", d.temperature);
  c.greedy = j.value("greedy", d.greedy);
  c.seed = j.value("seed", d.seed);
}

std::vector<double> softmax(std::span<const float> logits, double temperature) {
  std::vector<double> p(logits.size());
  if (p.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

std::vector<int> nucleus_support(std::span<const double> probs, double top_p) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += probs[order[keep++]];
    if (mass >= top_p) break;
  }
  order.resize(std::max<std::size_t>(keep, 1));
  return order;
}

int sample_top_p(std::span<const double> probs, double top_p, Rng& rng) {
  const auto support = nucleus_support(probs, top_p);
  double mass = 0.0;
  for (int i : support) mass += probs[i];
  double u = rng.uniform() * mass;
  for (int i : support) {
    u -= probs[i];
    if (u < 0.0) return i;
  }
  return support.back();
}

std::string to_string(StopReason reason) {
  switch (reason) {
    case StopReason::Eos: return "eos";
    case StopReason::Irq: return "irq";
    case StopReason::MaxLen: return "maxlen";
  }
  return "eos";
}

int max_generation_steps(std::size_t context_len, int k) { return k * static_cast<int>(context_len) + 16; }

namespace {

using RowVec = Eigen::Matrix<float, 1, Eigen::Dynamic>;
using ConstMat = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

Tensor row_tensor(std::span<const float> v) { return Tensor({1, static_cast<int>(v.size())}, {v.begin(), v.end()}); }

std::vector<float> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

// ------------------------------------------------------------ listener

StreamingListener::StreamingListener(const LslmModel& model) : model_(model) {
  if (!model.has_listener()) throw ContractError("streaming listener needs a model with a listening channel");
  const auto& l = model.config().listener;
  history_.assign(static_cast<std::size_t>(l.conv_depth), {});
}

std::vector<float> StreamingListener::push(int symbol) {
  const auto& l = model_.config().listener;
  if (symbol < 0 || symbol >= l.listen_vocab_size) {
    throw IndexError("listening symbol " + std::to_string(symbol) + " outside the listening alphabet");
  }
  NoGradGuard guard;
  const auto& params = model_.params();
  const auto emb = params.at("listen.embed").data();
  std::vector<float> x(emb.begin() + static_cast<std::ptrdiff_t>(symbol) * l.d_enc,
                       emb.begin() + static_cast<std::ptrdiff_t>(symbol + 1) * l.d_enc);
  for (int layer = 0; layer < l.conv_depth; ++layer) {
    auto& hist = history_[layer];
    hist.insert(hist.begin(), x);
    if (static_cast<int>(hist.size()) > l.kernel_size) hist.pop_back();
    const std::string prefix = "listen.conv." + std::to_string(layer);
    const auto w = params.at(prefix + ".weight").data();
    const auto b = params.at(prefix + ".bias").data();
    RowVec out = Eigen::Map<const RowVec>(b.data(), l.d_enc);
    for (std::size_t j = 0; j < hist.size(); ++j) {
      ConstMat wj(w.data() + j * l.d_enc * l.d_enc, l.d_enc, l.d_enc);
      out.noalias() += Eigen::Map<const RowVec>(hist[j].data(), l.d_enc) * wj;
    }
    x = to_vec(ops::gelu(row_tensor(std::span<const float>(out.data(), l.d_enc))));
  }
  last_encoded_ = x;
  ++frames_;
  return to_vec(model_.project_listen(row_tensor(x)));
}

// ------------------------------------------------------------ decoder

IncrementalDecoder::IncrementalDecoder(const LslmModel& model) : model_(model) {
  keys_.assign(static_cast<std::size_t>(model.config().n_blocks), {});
  values_.assign(static_cast<std::size_t>(model.config().n_blocks), {});
}

std::vector<float> IncrementalDecoder::append(int input_id, std::span<const float> listen, bool use_listen) {
  const auto& cfg = model_.config();
  const int d = cfg.d_model;
  if (length_ >= cfg.max_seq_len) throw LengthError("decoder reached max_seq_len " + std::to_string(cfg.max_seq_len));
  if (input_id < 0 || input_id >= vocab::kInputSize) throw IndexError("input id " + std::to_string(input_id));
  if (use_listen && !model_.has_listener()) throw ContractError("listening input given to a vanilla TTS model");
  if (!listen.empty() && static_cast<int>(listen.size()) != d) throw ShapeError("listening vector width mismatch");
  NoGradGuard guard;
  const auto& P = model_.params();
  const int pos = length_;

  const int id_arr[1] = {input_id};
  const int pos_arr[1] = {pos};
  Tensor x = ops::add(ops::gather_rows(P.at("tok_emb"), id_arr), ops::gather_rows(P.at("pos_emb"), pos_arr));
  const Tensor lv = listen.empty() ? Tensor({1, d}) : row_tensor(listen);
  const Fusion fusion = cfg.fusion;
  if (use_listen && fusion == Fusion::Early) x = ops::add(x, lv);

  const int heads = cfg.n_heads, dh = d / heads;
  const float scl = 1.0f / std::sqrt(static_cast<float>(dh));
  const int n = pos + 1;
  std::vector<float> att(static_cast<std::size_t>(d));
  std::vector<float> scores(static_cast<std::size_t>(n));
  for (int i = 0; i < cfg.n_blocks; ++i) {
    auto bp = [&](std::string_view leaf) -> const Tensor& { return P.at(names::block(i, leaf)); };
    if (use_listen && fusion == Fusion::Middle) x = ops::add(x, lv);
    const Tensor h = ops::layer_norm(x, bp("ln1.gain"), bp("ln1.bias"));
    const Tensor qkv = ops::linear(h, bp("attn.qkv.weight"), bp("attn.qkv.bias"));
    const float* q = qkv.data().data();
    auto& K = keys_[i];
    auto& V = values_[i];
    K.insert(K.end(), q + d, q + 2 * d);
    V.insert(V.end(), q + 2 * d, q + 3 * d);
    for (int hh = 0; hh < heads; ++hh) {
      const int off = hh * dh;
      Eigen::Map<const Eigen::VectorXf> qh(q + off, dh);
      float mx = -std::numeric_limits<float>::infinity();
      for (int j = 0; j < n; ++j) {
        scores[j] = Eigen::Map<const Eigen::VectorXf>(K.data() + static_cast<std::size_t>(j) * d + off, dh).dot(qh) * scl;
        mx = std::max(mx, scores[j]);
      }
      double total = 0.0;
      for (int j = 0; j < n; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        total += scores[j];
      }
      const float inv = static_cast<float>(1.0 / total);
      Eigen::Map<Eigen::VectorXf> out(att.data() + off, dh);
      out.setZero();
      for (int j = 0; j < n; ++j) {
        out += (scores[j] * inv) * Eigen::Map<const Eigen::VectorXf>(V.data() + static_cast<std::size_t>(j) * d + off, dh);
      }
    }
    x = ops::add(x, ops::linear(row_tensor(att), bp("attn.out.weight"), bp("attn.out.bias")));
    Tensor m = ops::layer_norm(x, bp("ln2.gain"), bp("ln2.bias"));
    m = ops::gelu(ops::linear(m, bp("mlp.fc.weight"), bp("mlp.fc.bias")));
    x = ops::add(x, ops::linear(m, bp("mlp.proj.weight"), bp("mlp.proj.bias")));
  }
  Tensor logits = ops::linear(ops::layer_norm(x, P.at("ln_f.gain"), P.at("ln_f.bias")), P.at("head.weight"),
                              P.at("head.bias"));
  if (use_listen && fusion == Fusion::Late) {
    logits = ops::add(logits, ops::linear(lv, P.at("listen.late_head.weight"), P.at("listen.late_head.bias")));
  }
  ++length_;
  return to_vec(logits);
}

// ------------------------------------------------------------ session

Session::Session(const LslmModel& model, std::string_view context, SamplerConfig sampler, Starvation starvation,
                 std::optional<bool> use_listen)
    : model_(model),
      context_(context),
      sampler_(sampler),
      starvation_(starvation),
      use_listen_(use_listen.value_or(model.has_listener())),
      rng_(derive_seed(sampler.seed, "sampling")),
      decoder_(model) {
  sampler_.validate();
  if (use_listen_ && !model.has_listener()) throw ContractError("session asks for listening on a vanilla TTS model");
  const auto ids = vocab::encode_context(context);
  max_len_ = max_generation_steps(ids.size());
  const int needed = static_cast<int>(ids.size()) + 2 + max_len_;
  if (needed > model.config().max_seq_len) {
    throw LengthError("context of " + std::to_string(ids.size()) + " characters needs " + std::to_string(needed) +
                      " positions, max_seq_len is " + std::to_string(model.config().max_seq_len));
  }
  if (use_listen_) listener_.emplace(model);
  decoder_.append(vocab::kContextOffset + vocab::kBoc, {}, use_listen_);
  for (int c : ids) decoder_.append(vocab::kContextOffset + c, {}, use_listen_);
  decoder_.append(vocab::kContextOffset + vocab::kEoc, {}, use_listen_);
}

void Session::feed_listen(std::span<const int> symbols) {
  if (stopped()) throw ContractError("feed_listen on a stopped session");
  for (int s : symbols) {
    if (s < 0 || s >= vocab::kListenSize) {
      throw IndexError("listening symbol " + std::to_string(s) + " outside the listening alphabet");
    }
  }
  if (!use_listen_) {
    frames_.resize(frames_.size() + symbols.size());
    return;
  }
  for (int s : symbols) frames_.push_back(listener_->push(s));
}

StepResult Session::step() {
  if (stopped()) throw ContractError("step on a stopped session");
  const int t = steps() + 1;
  if (use_listen_ && frames_fed() < t) {
    if (starvation_ == Starvation::Error) {
      throw ContractError("step " + std::to_string(t) + " needs listening frame " + std::to_string(t - 1) +
                          " but only " + std::to_string(frames_fed()) + " frames were fed");
    }
    while (frames_fed() < t) {
      frames_.push_back(listener_->push(vocab::kSil));
      ++starved_;
    }
  }
  const int input = tokens_.empty() ? vocab::kBos : tokens_.back();
  std::span<const float> listen;
  if (use_listen_) listen = frames_[static_cast<std::size_t>(t - 1)];
  last_logits_ = decoder_.append(input, listen, use_listen_);
  const auto probs = softmax(last_logits_);
  StepResult r;
  r.irq_p = probs[vocab::kIrq];
  if (sampler_.greedy) {
    r.token = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  } else {
    const auto tempered = sampler_.temperature == 1.0 ? probs : softmax(last_logits_, sampler_.temperature);
    r.token = sample_top_p(tempered, sampler_.top_p, rng_);
  }
  tokens_.push_back(r.token);
  irq_trace_.push_back(r.irq_p);
  if (r.token == vocab::kEos) {
    stop_ = StopInfo{StopReason::Eos, t};
  } else if (r.token == vocab::kIrq) {
    stop_ = StopInfo{StopReason::Irq, t};
  } else if (!vocab::is_audio(r.token) || t >= max_len_) {
    // BOS/SPAD are never valid outputs; treat them like running out of budget.
    stop_ = StopInfo{StopReason::MaxLen, t};
  }
  return r;
}

OfflineResult run_offline(const LslmModel& model, std::string_view context, std::span<const int> listen,
                          const SamplerConfig& sampler, std::optional<bool> use_listen) {
  Session s(model, context, sampler, Starvation::Error, use_listen);
  while (!s.stopped()) {
    const std::size_t frame = static_cast<std::size_t>(s.steps());
    const int symbol = frame < listen.size() ? listen[frame] : vocab::kSil;
    s.feed_listen(std::span<const int>(&symbol, 1));
    s.step();
  }
  return {std::string(context), s.tokens(), *s.stop(), s.irq_trace()};
}

nlohmann::json trace_json(const OfflineResult& r, std::optional<int> onset) {
  nlohmann::json trace = nlohmann::json::array();
  for (std::size_t i = 0; i < r.irq_trace.size(); ++i) {
    const double p = r.irq_trace[i];
    trace.push_back({{"step", i + 1}, {"p", p}, {"log10", std::log10(std::max(p, 1e-30))}});
  }
  return {{"context", r.context},
          {"tokens", r.tokens},
          {"stop", {{"reason", to_string(r.stop.reason)}, {"step", r.stop.step}}},
          {"irq_trace", trace},
          {"onset", onset ? nlohmann::json(*onset) : nlohmann::json(nullptr)}};
}

}  // namespace lslm
