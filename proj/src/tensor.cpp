#include "lslm/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "lslm/errors.hpp"

namespace lslm {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

thread_local bool t_grad_enabled = true;

using NodePtr = std::shared_ptr<Tensor::Node>;

// Builds the result node and wires the backward closure only when some input
// participates in differentiation.
Tensor make_result(Shape shape, Buffer value, std::vector<NodePtr> inputs,
                   std::function<void(Tensor::Node&)> backward_fn) {
  auto node = std::make_shared<Tensor::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || (in && in->requires_grad);
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

const Tensor::Node& nd(const Tensor& t) {
  if (!t.defined()) throw ContractError("operation on an undefined tensor");
  return *t.node();
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

ConstMatMap as_mat(const Tensor::Node& n, int rows, int cols) {
  return ConstMatMap(n.value.data(), rows, cols);
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void check_finite(std::span<const float> values, const std::string& where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError("non-finite value at index " + std::to_string(i) + " in " + where);
    }
  }
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value.assign(shape_numel(shape), 0.0f);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  lslm::check_finite(std::span<const float>(values), "tensor constructor");
  node_->shape = std::move(shape);
  node_->value.assign(values.begin(), values.end());
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<float>{value}, requires_grad);
}

const Shape& Tensor::shape() const { return nd(*this).shape; }
int Tensor::rank() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return nd(*this).value.size(); }
std::span<float> Tensor::data() { return node_->value; }
std::span<const float> Tensor::data() const { return nd(*this).value; }

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return nd(*this).value[0];
}

bool Tensor::requires_grad() const { return nd(*this).requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }
bool Tensor::has_grad() const { return nd(*this).grad.size() == numel(); }
std::span<float> Tensor::grad() { return node_->grad_buffer(); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->value.size(), 0.0f);
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<Node>();
  node->shape = shape();
  node->value = nd(*this).value;
  node->requires_grad = requires_grad();
  return Tensor(std::move(node));
}

Tensor Tensor::detach() const {
  Tensor t = clone();
  t.set_requires_grad(false);
  return t;
}

void Tensor::check_finite(const std::string& where) const { lslm::check_finite(data(), where); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  loss.check_finite("loss");
  const NodePtr& root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS yields a topological order (inputs first).
  std::vector<Tensor::Node*> order;
  std::unordered_set<Tensor::Node*> seen;
  std::vector<std::pair<Tensor::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Tensor::Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Tensor::Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0f);
  }
  root->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------- ops

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Buffer out(static_cast<std::size_t>(m) * n);
  MatMap(out.data(), m, n).noalias() = as_mat(nd(a), m, k) * as_mat(nd(b), k, n);
  auto an = a.node(), bn = b.node();
  return make_result({m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](Tensor::Node& self) {
    ConstMatMap g(self.grad.data(), m, n);
    if (an->requires_grad) {
      MatMap(an->grad_buffer().data(), m, k).noalias() += g * as_mat(*bn, k, n).transpose();
    }
    if (bn->requires_grad) {
      MatMap(bn->grad_buffer().data(), k, n).noalias() += as_mat(*an, m, k).transpose() * g;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const int rows = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  if (w.dim(0) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not fit weight " +
                     shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not fit weight " +
                     shape_str(w.shape()));
  }
  Buffer out(static_cast<std::size_t>(rows) * out_dim);
  MatMap o(out.data(), rows, out_dim);
  o.noalias() = as_mat(nd(x), rows, in) * as_mat(nd(w), in, out_dim);
  if (bias.defined()) {
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.data().data(), out_dim);
  }
  auto xn = x.node(), wn = w.node(), bn = bias.node();
  return make_result(
      {rows, out_dim}, std::move(out), {xn, wn, bn}, [xn, wn, bn, rows, in, out_dim](Tensor::Node& self) {
        ConstMatMap g(self.grad.data(), rows, out_dim);
        if (xn->requires_grad) {
          MatMap(xn->grad_buffer().data(), rows, in).noalias() +=
              g * as_mat(*wn, in, out_dim).transpose();
        }
        if (wn->requires_grad) {
          MatMap(wn->grad_buffer().data(), in, out_dim).noalias() +=
              as_mat(*xn, rows, in).transpose() * g;
        }
        if (bn && bn->requires_grad) {
          Eigen::Map<Eigen::RowVectorXf>(bn->grad_buffer().data(), out_dim) += g.colwise().sum();
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Buffer out(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn](Tensor::Node& self) {
    for (const auto& in : {an, bn}) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor scale(const Tensor& a, float factor) {
  Buffer out(a.numel());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an, factor](Tensor::Node& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  auto an = a.node();
  return make_result({}, {static_cast<float>(acc)}, {an}, [an](Tensor::Node& self) {
    auto& g = an->grad_buffer();
    const float s = self.grad[0];
    for (float& v : g) v += s;
  });
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Tensor gelu(const Tensor& x) {
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float v = xv[i];
    out[i] = 0.5f * v * (1.0f + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {xn}, [xn](Tensor::Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float v = xn->value[i];
      const float t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const float d = 0.5f * (1.0f + t) +
                      0.5f * v * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * kGeluA * v * v);
      g[i] += self.grad[i] * d;
    }
  });
}

Tensor relu(const Tensor& x) {
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {xn}, [xn](Tensor::Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xn->value[i] > 0.0f) g[i] += self.grad[i];
    }
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1 || x.dim(-1) < 1) {
    throw ShapeError("softmax_lastdim: needs a non-empty last dimension, got " + shape_str(x.shape()));
  }
  const int cols = x.dim(-1);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(cols);
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xv.data() + r * cols;
    float* o = out.data() + r * cols;
    const float mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (int c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (int c = 0; c < cols; ++c) o[c] *= inv;
  }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {xn}, [xn, rows, cols](Tensor::Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = self.value.data() + r * cols;
      const float* dy = self.grad.data() + r * cols;
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += static_cast<double>(dy[c]) * y[c];
      for (int c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (dy[c] - static_cast<float>(dot));
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const int cols = x.dim(-1);
  if (gain.numel() != static_cast<std::size_t>(cols) || bias.numel() != static_cast<std::size_t>(cols)) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not fit input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(cols);
  const auto xv = x.data();
  const auto gv = gain.data(), bv = bias.data();
  Buffer out(xv.size());
  Buffer xhat(xv.size());
  Buffer rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xv.data() + r * cols;
    double mean = 0.0;
    for (int c = 0; c < cols; ++c) mean += in[c];
    mean /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double d = in[c] - mean;
      var += d * d;
    }
    var /= cols;
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    rstd[r] = rs;
    for (int c = 0; c < cols; ++c) {
      const float h = (in[c] - static_cast<float>(mean)) * rs;
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_result(
      x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](Tensor::Node& self) {
        const float* gv = gn->value.data();
        Buffer dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const float* dy = self.grad.data() + r * cols;
          const float* h = xhat.data() + r * cols;
          if (gn->requires_grad) {
            auto& gg = gn->grad_buffer();
            for (int c = 0; c < cols; ++c) gg[c] += dy[c] * h[c];
          }
          if (bn->requires_grad) {
            auto& bg = bn->grad_buffer();
            for (int c = 0; c < cols; ++c) bg[c] += dy[c];
          }
          if (xn->requires_grad) {
            double mean_d = 0.0, mean_dh = 0.0;
            for (int c = 0; c < cols; ++c) {
              dxhat[c] = dy[c] * gv[c];
              mean_d += dxhat[c];
              mean_dh += static_cast<double>(dxhat[c]) * h[c];
            }
            mean_d /= cols;
            mean_dh /= cols;
            float* gx = xn->grad_buffer().data() + r * cols;
            for (int c = 0; c < cols; ++c) {
              gx[c] += rstd[r] * (dxhat[c] - static_cast<float>(mean_d) - h[c] * static_cast<float>(mean_dh));
            }
          }
        }
      });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "gather_rows");
  const int vocab = table.dim(0), cols = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx) {
    if (id < -1 || id >= vocab) {
      throw IndexError("gather_rows: id " + std::to_string(id) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
  }
  const int rows = static_cast<int>(idx.size());
  Buffer out(static_cast<std::size_t>(rows) * cols, 0.0f);
  const auto tv = table.data();
  for (int r = 0; r < rows; ++r) {
    if (idx[r] < 0) continue;
    std::copy_n(tv.data() + static_cast<std::size_t>(idx[r]) * cols, cols,
                out.data() + static_cast<std::size_t>(r) * cols);
  }
  auto tn = table.node();
  return make_result({rows, cols}, std::move(out), {tn},
                     [tn, cols, idx = std::move(idx)](Tensor::Node& self) {
                       auto& g = tn->grad_buffer();
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         if (idx[r] < 0) continue;
                         float* dst = g.data() + static_cast<std::size_t>(idx[r]) * cols;
                         const float* src = self.grad.data() + r * cols;
                         for (int c = 0; c < cols; ++c) dst[c] += src[c];
                       }
                     });
}

Tensor causal_self_attention(const Tensor& qkv, int batch, int seq, int heads) {
  require_rank(qkv, 2, "causal_self_attention");
  if (qkv.dim(0) != batch * seq || qkv.dim(1) % 3 != 0) {
    throw ShapeError("causal_self_attention: packed qkv " + shape_str(qkv.shape()) +
                     " does not fit batch=" + std::to_string(batch) + " seq=" + std::to_string(seq));
  }
  const int d = qkv.dim(1) / 3;
  if (heads <= 0 || d % heads != 0) {
    throw ShapeError("causal_self_attention: width " + std::to_string(d) +
                     " not divisible by heads=" + std::to_string(heads));
  }
  const int dh = d / heads;
  const float scl = 1.0f / std::sqrt(static_cast<float>(dh));
  const std::size_t tt = static_cast<std::size_t>(seq) * seq;
  Buffer probs(static_cast<std::size_t>(batch) * heads * tt, 0.0f);
  Buffer out(static_cast<std::size_t>(batch) * seq * d);
  const float* base = qkv.data().data();
  RowMat scores(seq, seq);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const float* q = base + static_cast<std::size_t>(b) * seq * 3 * d + h * dh;
      ConstStridedMap qm(q, seq, dh, Eigen::OuterStride<>(3 * d));
      ConstStridedMap km(q + d, seq, dh, Eigen::OuterStride<>(3 * d));
      ConstStridedMap vm(q + 2 * d, seq, dh, Eigen::OuterStride<>(3 * d));
      scores.noalias() = (qm * km.transpose()) * scl;
      MatMap p(probs.data() + (static_cast<std::size_t>(b) * heads + h) * tt, seq, seq);
      for (int i = 0; i < seq; ++i) {
        float mx = scores(i, 0);
        for (int j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        double total = 0.0;
        for (int j = 0; j <= i; ++j) {
          const float e = std::exp(scores(i, j) - mx);
          p(i, j) = e;
          total += e;
        }
        const float inv = static_cast<float>(1.0 / total);
        for (int j = 0; j <= i; ++j) p(i, j) *= inv;
      }
      StridedMap om(out.data() + static_cast<std::size_t>(b) * seq * d + h * dh, seq, dh,
                    Eigen::OuterStride<>(d));
      om.noalias() = p * vm;
    }
  }
  auto qn = qkv.node();
  return make_result(
      {batch * seq, d}, std::move(out), {qn},
      [qn, batch, seq, heads, d, dh, scl, tt, probs = std::move(probs)](Tensor::Node& self) {
        auto& gq = qn->grad_buffer();
        const float* base = qn->value.data();
        RowMat dp(seq, seq), ds(seq, seq);
        for (int b = 0; b < batch; ++b) {
          for (int h = 0; h < heads; ++h) {
            const std::size_t off = static_cast<std::size_t>(b) * seq * 3 * d + h * dh;
            ConstStridedMap qm(base + off, seq, dh, Eigen::OuterStride<>(3 * d));
            ConstStridedMap km(base + off + d, seq, dh, Eigen::OuterStride<>(3 * d));
            ConstStridedMap vm(base + off + 2 * d, seq, dh, Eigen::OuterStride<>(3 * d));
            StridedMap dq(gq.data() + off, seq, dh, Eigen::OuterStride<>(3 * d));
            StridedMap dk(gq.data() + off + d, seq, dh, Eigen::OuterStride<>(3 * d));
            StridedMap dv(gq.data() + off + 2 * d, seq, dh, Eigen::OuterStride<>(3 * d));
            ConstStridedMap dout(self.grad.data() + static_cast<std::size_t>(b) * seq * d + h * dh,
                                 seq, dh, Eigen::OuterStride<>(d));
            ConstMatMap p(probs.data() + (static_cast<std::size_t>(b) * heads + h) * tt, seq, seq);
            dv.noalias() += p.transpose() * dout;
            dp.noalias() = dout * vm.transpose();
            for (int i = 0; i < seq; ++i) {
              float dot = 0.0f;
              for (int j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
              for (int j = 0; j < seq; ++j) ds(i, j) = j <= i ? p(i, j) * (dp(i, j) - dot) * scl : 0.0f;
            }
            dq.noalias() += ds * km;
            dk.noalias() += ds.transpose() * qm;
          }
        }
      });
}

Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int batch, int seq) {
  require_rank(x, 2, "causal_conv1d");
  require_rank(w, 3, "causal_conv1d");
  const int k = w.dim(0), cin = w.dim(1), cout = w.dim(2);
  if (x.dim(0) != batch * seq || x.dim(1) != cin) {
    throw ShapeError("causal_conv1d: input " + shape_str(x.shape()) + " does not fit kernel " +
                     shape_str(w.shape()) + " with batch=" + std::to_string(batch) +
                     " seq=" + std::to_string(seq));
  }
  if (bias.numel() != static_cast<std::size_t>(cout)) {
    throw ShapeError("causal_conv1d: bias " + shape_str(bias.shape()) + " does not fit kernel " +
                     shape_str(w.shape()));
  }
  const int rows = batch * seq;
  Buffer out(static_cast<std::size_t>(rows) * cout);
  MatMap o(out.data(), rows, cout);
  const float* xv = x.data().data();
  const float* wv = w.data().data();
  o.rowwise() = Eigen::Map<const Eigen::RowVectorXf>(bias.data().data(), cout);
  for (int j = 0; j < k && j < seq; ++j) {
    ConstMatMap wj(wv + static_cast<std::size_t>(j) * cin * cout, cin, cout);
    for (int b = 0; b < batch; ++b) {
      const std::size_t row0 = static_cast<std::size_t>(b) * seq;
      ConstMatMap src(xv + row0 * cin, seq - j, cin);
      o.middleRows(static_cast<Eigen::Index>(row0 + j), seq - j).noalias() += src * wj;
    }
  }
  auto xn = x.node(), wn = w.node(), bn = bias.node();
  return make_result(
      {rows, cout}, std::move(out), {xn, wn, bn},
      [xn, wn, bn, batch, seq, k, cin, cout, rows](Tensor::Node& self) {
        ConstMatMap g(self.grad.data(), rows, cout);
        if (bn->requires_grad) {
          Eigen::Map<Eigen::RowVectorXf>(bn->grad_buffer().data(), cout) += g.colwise().sum();
        }
        for (int j = 0; j < k && j < seq; ++j) {
          for (int b = 0; b < batch; ++b) {
            const std::size_t row0 = static_cast<std::size_t>(b) * seq;
            auto gslice = g.middleRows(static_cast<Eigen::Index>(row0 + j), seq - j);
            if (wn->requires_grad) {
              MatMap dw(wn->grad_buffer().data() + static_cast<std::size_t>(j) * cin * cout, cin, cout);
              dw.noalias() += ConstMatMap(xn->value.data() + row0 * cin, seq - j, cin).transpose() * gslice;
            }
            if (xn->requires_grad) {
              MatMap dx(xn->grad_buffer().data() + row0 * cin, seq - j, cin);
              dx.noalias() += gslice * ConstMatMap(wn->value.data() + static_cast<std::size_t>(j) * cin * cout,
                                                   cin, cout).transpose();
            }
          }
        }
      });
}

Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> targets,
                                 std::span<const std::uint8_t> mask) {
  require_rank(logits, 2, "cross_entropy_with_logits");
  const int rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != static_cast<std::size_t>(rows) || mask.size() != targets.size()) {
    throw ShapeError("cross_entropy_with_logits: " + std::to_string(targets.size()) + " targets / " +
                     std::to_string(mask.size()) + " mask entries for logits " +
                     shape_str(logits.shape()));
  }
  for (int r = 0; r < rows; ++r) {
    if (mask[r] && (targets[r] < 0 || targets[r] >= vocab)) {
      throw IndexError("cross_entropy_with_logits: target " + std::to_string(targets[r]) +
                       " outside [0, " + std::to_string(vocab) + ")");
    }
  }
  const float* lv = logits.data().data();
  Buffer probs(static_cast<std::size_t>(rows) * vocab, 0.0f);
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const float* row = lv + static_cast<std::size_t>(r) * vocab;
    float* pr = probs.data() + static_cast<std::size_t>(r) * vocab;
    const float mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (int c = 0; c < vocab; ++c) {
      pr[c] = std::exp(row[c] - mx);
      z += pr[c];
    }
    const float inv = static_cast<float>(1.0 / z);
    for (int c = 0; c < vocab; ++c) pr[c] *= inv;
    total += -(static_cast<double>(row[targets[r]]) - mx - std::log(z));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  auto ln = logits.node();
  auto result = make_result({}, {static_cast<float>(total)}, {ln},
                            [ln, rows, vocab, probs = std::move(probs), tgt = std::move(tgt),
                             msk = std::move(msk)](Tensor::Node& self) {
                              auto& g = ln->grad_buffer();
                              const float s = self.grad[0];
                              for (int r = 0; r < rows; ++r) {
                                if (!msk[r]) continue;
                                float* gr = g.data() + static_cast<std::size_t>(r) * vocab;
                                const float* pr = probs.data() + static_cast<std::size_t>(r) * vocab;
                                for (int c = 0; c < vocab; ++c) gr[c] += s * pr[c];
                                gr[tgt[r]] -= s;
                              }
                            });
  result.check_finite("cross_entropy_with_logits");
  return result;
}

}  // namespace ops
}  // namespace lslm
