#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lslm/model.hpp"
#include "lslm/world.hpp"

namespace lslm::testing {

struct CheckResult {
  bool ok = true;
  std::string detail;

  void fail(const std::string& why) {
    if (ok) detail = why;
    ok = false;
  }
};

ModelConfig small_config(Fusion fusion, bool listening = true, std::uint64_t seed = 1);
// d_model 8, one block, used by the end-to-end gradient check.
ModelConfig tiny_config(Fusion fusion, std::uint64_t seed = 1);

// Random contexts and listening streams that fit a model's sequence budget.
std::vector<int> random_context_ids(Rng& rng, int min_len, int max_len);
std::vector<int> random_audio(Rng& rng, int n);
std::vector<int> random_listen(Rng& rng, int n);

// Every differentiable op against central differences, `trials` random draws.
CheckResult check_op_gradients(int trials, std::uint64_t seed);
// fdm_loss of a tiny model against central differences on every parameter.
CheckResult check_fdm_gradient(std::uint64_t seed, double tolerance = 1e-2);
// Row sums, ranges, and pre-gain moments.
CheckResult check_softmax_layernorm(int trials, std::uint64_t seed);

// Zeroed listening pathway gives logits bitwise equal to the vanilla path.
CheckResult check_zero_listen(int inputs, std::uint64_t seed);
// Perturbing listening frame j or speaking token j leaves every step <= j unchanged.
CheckResult check_causality(int probes, std::uint64_t seed);
// Cached decoding against full recomputation, max abs logit difference.
CheckResult check_incremental(int sessions, std::uint64_t seed, double tolerance = 1e-4);
// Lockstep sessions over a live server against run_offline, several concurrently.
CheckResult check_lockstep_server(int sessions, std::uint64_t seed);

CheckResult check_edit_distance_exhaustive();
CheckResult check_classification_fixtures();

// Round-trip, rate bounds, speaker-disjointness and command-window scans.
CheckResult check_dataset(const world::Dataset& data);

}  // namespace lslm::testing
