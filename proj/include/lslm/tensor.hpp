#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace lslm {

using Shape = std::vector<int>;

// 64-byte aligned so vectorized kernels take the same path for every buffer,
// which keeps results bitwise reproducible across allocations.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<float, AlignedAllocator<float>>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense float32 array with an optional gradient buffer. Copies share storage
// (handle semantics); use clone() for a deep copy. Operations on tensors that
// require gradients record a backward closure while gradient mode is on, so
// the graph lives exactly as long as the tensors that reference it.
class Tensor {
 public:
  struct Node;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int dim(int axis) const;  // negative axes count from the back
  std::size_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  // Allocates a zero gradient on first access.
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();

  Tensor clone() const;   // deep copy, no graph, same requires_grad
  Tensor detach() const;  // deep copy, no graph, requires_grad off

  // Throws NumericError naming `where` if any value is NaN or Inf.
  void check_finite(const std::string& where) const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

struct Tensor::Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Buffer& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    return grad;
  }
};

bool grad_enabled();

// Disables graph recording on this thread for its lifetime (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Reverse pass from a scalar loss. Leaf gradients accumulate across calls;
// intermediate gradients are recomputed on every call.
void backward(const Tensor& loss);

void check_finite(std::span<const float> values, const std::string& where);

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
// x[N,in] * w[in,out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor sum(const Tensor& a);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);

// Row lookup: out[i] = table[ids[i]], or a zero row when ids[i] == -1.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

// Masked multi-head causal self-attention over a packed [batch*seq, 3*d]
// projection laid out as [q | k | v]. Returns [batch*seq, d].
Tensor causal_self_attention(const Tensor& qkv, int batch, int seq, int heads);

// Causal (left-padded) 1-D convolution along time for each of `batch`
// sequences packed as [batch*seq, c_in]. Kernel w has shape [k, c_in, c_out];
// out[t] = bias + sum_j x[t-j] * w[j].
Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int batch, int seq);

// Sum over masked rows of -log softmax(logits[row])[target[row]].
Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> targets,
                                 std::span<const std::uint8_t> mask);

}  // namespace ops
}  // namespace lslm
