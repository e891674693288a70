#pragma once

#include <map>
#include <string>
#include <vector>

#include "lslm/tensor.hpp"

namespace lslm {

// Named parameters. std::map keeps iteration sorted by name, so checkpoints
// and optimizer updates visit parameters in the same order on every run.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  void erase(const std::string& name) { params_.erase(name); }
  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const;
  std::vector<std::string> names() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  // Deep copy; gradients are not copied.
  ParamStore clone() const;

 private:
  std::map<std::string, Tensor> params_;
};

struct AdamWConfig {
  float lr = 5e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

struct AdamWState {
  AdamWConfig config;
  long step = 0;
  std::map<std::string, std::vector<float>> first_moment;
  std::map<std::string, std::vector<float>> second_moment;
  // Parameters this optimizer updates; anything else in the store is left alone.
  std::vector<std::string> trainable;

  AdamWState() = default;
  AdamWState(const ParamStore& params, std::vector<std::string> trainable_names, AdamWConfig cfg = {});
};

// One decoupled-weight-decay Adam update over state.trainable using the
// current gradients. Throws ContractError if a trainable parameter has none.
void adamw_step(ParamStore& params, AdamWState& state);

// Scales gradients of `names` so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(ParamStore& params, const std::vector<std::string>& names, double max_norm);

}  // namespace lslm
