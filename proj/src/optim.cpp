#include "lslm/optim.hpp"

#include <cmath>
#include <utility>

#include "lslm/errors.hpp"

namespace lslm {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  auto [it, inserted] = params_.emplace(name, std::move(value));
  if (!inserted) throw ContractError("duplicate parameter name: " + name);
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : params_) out.add(name, t.clone());
  return out;
}

AdamWState::AdamWState(const ParamStore& params, std::vector<std::string> trainable_names, AdamWConfig cfg)
    : config(cfg), trainable(std::move(trainable_names)) {
  for (const auto& name : trainable) {
    const auto n = params.at(name).numel();
    first_moment[name].assign(n, 0.0f);
    second_moment[name].assign(n, 0.0f);
  }
}

void adamw_step(ParamStore& params, AdamWState& state) {
  const auto& c = state.config;
  for (const auto& name : state.trainable) {
    if (!params.at(name).has_grad()) throw ContractError("adamw_step: parameter without gradient: " + name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(static_cast<double>(c.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(c.beta2), static_cast<double>(state.step));
  for (const auto& name : state.trainable) {
    Tensor& p = params.at(name);
    auto value = p.data();
    const auto grad = std::as_const(p).grad();
    check_finite(grad, "gradient of " + name);
    auto& m = state.first_moment.at(name);
    auto& v = state.second_moment.at(name);
    if (m.size() != value.size()) {
      throw ContractError("adamw_step: moment buffer shape mismatch for " + name);
    }
    for (std::size_t i = 0; i < value.size(); ++i) {
      const float g = grad[i];
      m[i] = c.beta1 * m[i] + (1.0f - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0f - c.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      value[i] -= c.lr * c.weight_decay * value[i];
      value[i] -= static_cast<float>(c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

double clip_grad_norm(ParamStore& params, const std::vector<std::string>& names, double max_norm) {
  double sq = 0.0;
  for (const auto& name : names) {
    const Tensor& p = params.at(name);
    if (!p.has_grad()) continue;
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float factor = static_cast<float>(max_norm / norm);
    for (const auto& name : names) {
      Tensor& p = params.at(name);
      if (!p.has_grad()) continue;
      for (float& g : p.grad()) g *= factor;
    }
  }
  return norm;
}

}  // namespace lslm
