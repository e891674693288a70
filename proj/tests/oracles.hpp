#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lslm/rng.hpp"
#include "lslm/tensor.hpp"

namespace lslm::testing {

Tensor random_tensor(Rng& rng, Shape shape, float lo = -1.0f, float hi = 1.0f, bool requires_grad = true);

// Central-difference gradient of a scalar function of the inputs' values,
// accumulated in double.
std::vector<double> numeric_gradient(const std::function<Tensor()>& loss, Tensor& input, double step = 1e-3);
std::vector<double> numeric_gradient(const std::function<double()>& loss, Tensor& input, double step = 1e-3);

// Float32 central differences at step 1e-3 carry about 6e-5 of rounding noise
// per component, so gradient norms below 0.1 cannot be resolved to 1e-3.
inline constexpr double kGradNormFloor = 0.1;

// ||a - n|| / max(||a|| + ||n||, kGradNormFloor) over one tensor's gradient.
double relative_error(std::span<const float> analytic, std::span<const double> numeric);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_input;
};

// Runs backward once, then compares every input against central differences.
GradCheckResult grad_check(const std::function<Tensor()>& loss, std::vector<std::pair<std::string, Tensor>> inputs,
                           double step = 1e-3);

// Same check for sum(out @ w): the analytic side backpropagates through
// project_sum, the numeric side reduces the float output in double.
GradCheckResult grad_check_projected(const std::function<Tensor()>& out, const Tensor& w,
                                     std::vector<std::pair<std::string, Tensor>> inputs, double step = 1e-3);

// sum(out @ w) for out [m, n] and a fixed w [n, 1]; gives every output column
// its own weight.
Tensor project_sum(const Tensor& out, const Tensor& w);

// Plain recursive Levenshtein distance, exponential time.
std::size_t edit_distance_recursive(std::span<const int> a, std::span<const int> b);

}  // namespace lslm::testing
