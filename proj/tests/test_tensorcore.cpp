#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "checks.hpp"
#include "lslm/checkpoint.hpp"
#include "lslm/errors.hpp"
#include "lslm/optim.hpp"
#include "lslm/tensor.hpp"
#include "oracles.hpp"

using namespace lslm;
using namespace lslm::testing;

namespace {

Tensor make(Shape s, std::vector<float> v, bool grad = false) { return Tensor(std::move(s), std::move(v), grad); }

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("matmul by identity and by hand") {
  Rng rng(3);
  Tensor a = random_tensor(rng, {3, 3}, -1, 1, false);
  Tensor eye = make({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(values(ops::matmul(eye, a)) == values(a));
  const Tensor r = ops::matmul(make({2, 2}, {1, 2, 3, 4}), make({2, 1}, {0, 1}));
  CHECK(r.shape() == Shape{2, 1});
  CHECK(values(r) == std::vector<float>{2, 4});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    ops::matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL("no error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
  }
}

TEST_CASE("gradient of sum(matmul(A, B)) w.r.t. A is the row-broadcast column sums of B") {
  Rng rng(5);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4, 2});
  backward(ops::sum(ops::matmul(a, b)));
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      const float row_sum = b.data()[k * 2] + b.data()[k * 2 + 1];
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(row_sum).epsilon(1e-6));
    }
  }
  const auto numeric = numeric_gradient([&] { return ops::sum(ops::matmul(a, b)); }, a);
  CHECK(relative_error(a.grad(), numeric) < 1e-3);
}

TEST_CASE("softmax examples") {
  CHECK(values(ops::softmax_lastdim(make({1, 2}, {0, 0}))) == std::vector<float>{0.5f, 0.5f});
  const auto big = values(ops::softmax_lastdim(make({1, 2}, {1000, 0})));
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] == doctest::Approx(0.0));
  Rng rng(9);
  const Tensor s = ops::softmax_lastdim(random_tensor(rng, {4, 7}, -3, 3, false));
  for (int r = 0; r < 4; ++r) {
    double sum = 0;
    for (int c = 0; c < 7; ++c) sum += s.data()[r * 7 + c];
    CHECK(std::fabs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("layer_norm examples") {
  const Tensor ones = make({3}, {1, 1, 1});
  const Tensor zero = make({3}, {0, 0, 0});
  const auto c = values(ops::layer_norm(make({1, 3}, {4, 4, 4}), ones, zero));
  for (float v : c) CHECK(v == 0.0f);
  const auto n = values(ops::layer_norm(make({1, 3}, {1, 2, 3}), ones, zero));
  CHECK(n[0] == doctest::Approx(-1.2247).epsilon(1e-3));
  CHECK(n[1] == doctest::Approx(0.0).epsilon(1e-3));
  CHECK(n[2] == doctest::Approx(1.2247).epsilon(1e-3));

  Rng rng(11);
  Tensor x = random_tensor(rng, {2, 5});
  Tensor g = random_tensor(rng, {5});
  Tensor b = random_tensor(rng, {5});
  Tensor p = random_tensor(rng, {5, 1}, -1, 1, false);
  const auto r = grad_check_projected([=] { return ops::layer_norm(x, g, b); }, p, {{"x", x}, {"g", g}, {"b", b}});
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("cross entropy examples") {
  std::vector<float> sharp(2 * 4, 0.0f);
  sharp[1] = 20.0f;
  sharp[4 + 3] = 20.0f;
  const std::vector<int> t = {1, 3};
  const std::vector<std::uint8_t> all = {1, 1};
  CHECK(ops::cross_entropy_with_logits(make({2, 4}, sharp), t, all).item() / 2 < 1e-6);
  const float uniform = ops::cross_entropy_with_logits(make({2, 4}, std::vector<float>(8, 0.3f)), t, all).item();
  CHECK(uniform / 2 == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  Tensor logits = make({2, 4}, std::vector<float>(8, 0.1f), true);
  const std::vector<std::uint8_t> none = {0, 0};
  const Tensor loss = ops::cross_entropy_with_logits(logits, t, none);
  CHECK(loss.item() == 0.0f);
  backward(loss);
  for (float gval : std::as_const(logits).grad()) CHECK(gval == 0.0f);
  CHECK_THROWS_AS(ops::cross_entropy_with_logits(make({2, 4}, sharp), std::vector<int>{1, 4}, all), IndexError);
}

TEST_CASE("backward examples") {
  Tensor x = make({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(ops::sum(x));
  for (float g : std::as_const(x).grad()) CHECK(g == 1.0f);
  backward(ops::sum(x));
  for (float g : std::as_const(x).grad()) CHECK(g == 2.0f);

  Tensor unused = make({2}, {1, 2}, true);
  unused.zero_grad();
  backward(ops::sum(ops::scale(x, 2.0f)));
  for (float g : std::as_const(unused).grad()) CHECK(g == 0.0f);
  CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("composed MLP gradient matches finite differences on every parameter") {
  Rng rng(21);
  Tensor x = random_tensor(rng, {3, 4}, -1, 1, false);
  Tensor w1 = random_tensor(rng, {4, 5}), b1 = random_tensor(rng, {5});
  Tensor w2 = random_tensor(rng, {5, 3}), b2 = random_tensor(rng, {3});
  const std::vector<int> targets = {0, 2, 1};
  const std::vector<std::uint8_t> mask = {1, 1, 1};
  auto loss = [=] {
    return ops::cross_entropy_with_logits(ops::linear(ops::gelu(ops::linear(x, w1, b1)), w2, b2), targets, mask);
  };
  const auto r = grad_check(loss, {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}});
  CHECK_MESSAGE(r.max_rel_error < 1e-3, r.worst_input);
}

TEST_CASE("all ops pass the gradient oracle over 20 random trials") {
  const auto r = check_op_gradients(20, 1234);
  CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("softmax and layer_norm invariants over 20 random trials") {
  const auto r = check_softmax_layernorm(20, 99);
  CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("adamw examples") {
  ParamStore ps;
  ps.add("w", make({3}, {0.5f, -1.0f, 2.0f}, true));
  const auto before = values(ps.at("w"));
  AdamWState st(ps, {"w"});
  ps.zero_grad();
  adamw_step(ps, st);
  CHECK(values(ps.at("w")) == before);

  ParamStore one;
  one.add("s", make({1}, {0.25f}, true));
  AdamWConfig cfg;
  cfg.lr = 1e-2f;
  AdamWState s1(one, {"s"}, cfg);
  one.zero_grad();
  one.at("s").grad()[0] = 1.0f;
  adamw_step(one, s1);
  CHECK(one.at("s").data()[0] == doctest::Approx(0.25 - 1e-2).epsilon(1e-6));

  ParamStore decay;
  decay.add("d", make({1}, {1.0f}, true));
  AdamWConfig dc;
  dc.lr = 0.1f;
  dc.weight_decay = 0.5f;
  AdamWState sd(decay, {"d"}, dc);
  decay.zero_grad();
  adamw_step(decay, sd);
  CHECK(decay.at("d").data()[0] == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-6));

  ParamStore missing;
  missing.add("m", make({1}, {1.0f}, true));
  AdamWState sm(missing, {"m"});
  CHECK_THROWS_AS(adamw_step(missing, sm), ContractError);
}

TEST_CASE("global-norm clipping") {
  ParamStore ps;
  ps.add("a", make({2}, {0, 0}, true));
  ps.zero_grad();
  ps.at("a").grad()[0] = 3.0f;
  ps.at("a").grad()[1] = 4.0f;
  CHECK(clip_grad_norm(ps, {"a"}, 1.0) == doctest::Approx(5.0));
  CHECK(ps.at("a").grad()[0] == doctest::Approx(0.6));
  CHECK(ps.at("a").grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("checkpoint round-trip is bitwise identical") {
  Rng rng(17);
  ParamStore ps;
  ps.add("z.last", random_tensor(rng, {3, 2}, -5, 5, false));
  ps.add("a.first", random_tensor(rng, {7}, -1e-3f, 1e-3f, false));
  ps.add("m.scalar", Tensor::scalar(-0.0f));
  const auto path = std::filesystem::temp_directory_path() / "lslm_tensorcore_roundtrip.ckpt";
  save_checkpoint(path, ps, {{"kind", "test"}});
  const auto back = load_checkpoint(path);
  CHECK(back.meta.at("kind") == "test");
  CHECK(back.params.names() == ps.names());
  for (const auto& n : ps.names()) {
    const auto a = ps.at(n).data();
    const auto b = back.params.at(n).data();
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
    CHECK(ps.at(n).shape() == back.params.at(n).shape());
  }
  std::filesystem::remove(path);
}

TEST_CASE("fixed op sequence is bitwise reproducible") {
  auto run = [] {
    Rng rng(77);
    Tensor a = random_tensor(rng, {4, 6});
    Tensor w = random_tensor(rng, {6, 6});
    Tensor out = ops::softmax_lastdim(ops::gelu(ops::matmul(a, w)));
    return values(out);
  };
  const auto x = run();
  const auto y = run();
  CHECK(std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0);
}

TEST_CASE("non-finite values are rejected") {
  CHECK_THROWS_AS(make({1}, {std::nanf("")}), NumericError);
}
