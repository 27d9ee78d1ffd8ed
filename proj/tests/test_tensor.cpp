#include <algorithm>
#include <set>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "grad_check.hpp"
#include "vitmae/errors.hpp"
#include "vitmae/ops.hpp"
#include "vitmae/random.hpp"

using namespace vitmae;
using vitmae::testing::check_all;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, bool grad = true, double scale_ = 1.0) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, scale_);
  Tensor<double> t(std::move(shape), std::move(v));
  t.set_requires_grad(grad);
  return t;
}

// Random projection to a scalar so every output coordinate gets a distinct weight.
Tensor<double> project(const Tensor<double>& y, std::uint64_t seed) {
  return sum(mul(y, random_tensor(y.shape(), seed, false)));
}

}  // namespace

TEST_CASE("tensor invariants") {
  Tensor<double> t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK_FALSE(t.has_grad());
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor<double>({0, 2}), DimensionError);
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    Tensor<double> eye({2, 2}, {1, 0, 0, 1});
    Tensor<double> m({2, 2}, {1, 2, 3, 4});
    auto y = matmul(eye, m);
    CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{1, 2, 3, 4});
  }
  SUBCASE("projector") {
    auto y = matmul(Tensor<double>({2, 2}, {1, 0, 0, 0}), Tensor<double>({2, 1}, {5, 7}));
    CHECK(y.shape() == Shape{2, 1});
    CHECK(y[0] == 5);
    CHECK(y[1] == 0);
  }
  SUBCASE("gradient of sum is ones·bᵀ and matches finite differences") {
    auto a = random_tensor({3, 4}, 1);
    auto b = random_tensor({4, 2}, 2);
    sum(matmul(a, b)).backward();
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 4; ++k) CHECK(a.grad()[i * 4 + k] == doctest::Approx(b[k * 2] + b[k * 2 + 1]));
    auto r = check_all({a, b}, [&] { return sum(matmul(a, b)); });
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("shape mismatch names both shapes") {
    try {
      matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      CHECK(std::string(e.what()).find("[2x3] · [2x3]") != std::string::npos);
    }
  }
}

TEST_CASE("layer_norm") {
  Tensor<double> g({4}, 1.0), b({4}, 0.0);
  SUBCASE("constant rows normalize to zero") {
    auto y = layer_norm(Tensor<double>({2, 4}, 3.0), g, b, 1e-6);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("two-point symmetry") {
    Tensor<double> g2({2}, 1.0), b2({2}, 0.0);
    auto y = layer_norm(Tensor<double>({1, 2}, {1, 3}), g2, b2, 1e-12);
    CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("gradient") {
    auto x = random_tensor({2, 5}, 3);
    auto gamma = random_tensor({5}, 4);
    auto beta = random_tensor({5}, 5);
    auto r = check_all({x, gamma, beta}, [&] { return project(layer_norm(x, gamma, beta, 1e-5), 6); });
    CHECK(r.max_rel_error < 1e-5);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(layer_norm(Tensor<double>({2, 3}), g, b, 1e-6), DimensionError);
    CHECK_THROWS_AS(layer_norm(Tensor<double>({2, 4}), g, b, 0.0), ConfigError);
  }
}

TEST_CASE("softmax") {
  auto y = softmax(Tensor<double>({1, 3}, 0.0));
  for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
  auto big = softmax(Tensor<double>({1, 2}, {1000.0, 0.0}));
  CHECK(big[0] == 1.0);
  CHECK(big[1] < 1e-300);
  auto x = random_tensor({1, 4}, 7);
  CHECK(check_all({x}, [&] { return project(softmax(x), 8); }).max_rel_error < 1e-6);

  auto rows = softmax(random_tensor({16, 9}, 9, false, 5.0));
  for (std::size_t i = 0; i < 16; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      CHECK(rows[i * 9 + j] >= 0.0);
      s += rows[i * 9 + j];
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  auto rows32 = softmax(cast<float>(random_tensor({16, 9}, 10, false, 5.0)));
  for (std::size_t i = 0; i < 16; ++i) {
    float s = 0;
    for (std::size_t j = 0; j < 9; ++j) s += rows32[i * 9 + j];
    CHECK(std::abs(s - 1.0f) < 1e-5f);
  }
}

TEST_CASE("gelu") {
  CHECK(gelu(Tensor<double>::scalar(0.0)).item() == 0.0);
  CHECK(std::abs(gelu(Tensor<double>::scalar(10.0)).item() - 10.0) < 1e-6);
  // Exact form, not the tanh approximation: gelu(1) = Φ(1).
  CHECK(gelu(Tensor<double>::scalar(1.0)).item() == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  auto x = random_tensor({3, 4}, 11, true, 2.0);
  CHECK(check_all({x}, [&] { return project(gelu(x), 12); }).max_rel_error < 1e-6);
}

TEST_CASE("backward") {
  SUBCASE("sum gives ones") {
    auto x = random_tensor({2, 3, 2}, 13);
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("x·x at 3 gives 6") {
    Tensor<double> x = Tensor<double>::scalar(3.0);
    x.set_requires_grad(true);
    mul(x, x).backward();
    CHECK(x.grad()[0] == 6.0);
  }
  SUBCASE("leaf gradients accumulate until reset") {
    Tensor<double> x = Tensor<double>::scalar(3.0);
    x.set_requires_grad(true);
    auto loss = mul(x, x);
    loss.backward();
    loss.backward();
    CHECK(x.grad()[0] == 12.0);
    x.zero_grad();
    loss.backward();
    CHECK(x.grad()[0] == 6.0);
  }
  SUBCASE("non-scalar is a contract error") {
    auto x = random_tensor({2, 2}, 14);
    CHECK_THROWS_AS(gelu(x).backward(), ContractError);
  }
  SUBCASE("record is topologically ordered and visits shared nodes once") {
    auto a = random_tensor({2, 2}, 15);
    auto h = gelu(a);
    auto loss = sum(add(mul(h, h), h));
    ComputationRecord<double> record(loss);
    const auto& order = record.order();
    CHECK(order.back() == loss.node());
    for (std::size_t i = 0; i < order.size(); ++i) {
      for (auto& in : order[i]->inputs) {
        if (!in->requires_grad) continue;
        auto pos = std::find(order.begin(), order.end(), in.get());
        REQUIRE(pos != order.end());
        CHECK(static_cast<std::size_t>(pos - order.begin()) < i);
      }
    }
    std::set<Node<double>*> unique(order.begin(), order.end());
    CHECK(unique.size() == order.size());
  }
}

TEST_CASE("non-finite values abort with a diagnostic") {
  Tensor<double> x({1, 2}, {std::numeric_limits<double>::infinity(), 1.0});
  CHECK_THROWS_AS(gelu(x), NumericError);
  Tensor<double> big = Tensor<double>::scalar(1e300);
  CHECK_THROWS_AS(mul(big, big), NumericError);
}

TEST_CASE("remaining primitives match finite differences") {
  auto a = random_tensor({3, 4}, 20);
  auto b = random_tensor({3, 4}, 21);
  auto w = random_tensor({4, 5}, 22);
  auto bias = random_tensor({5}, 23);
  auto table = random_tensor({1, 4}, 24);
  CHECK(check_all({a, w, bias}, [&] { return project(linear(a, w, bias), 30); }).max_rel_error < 1e-5);
  CHECK(check_all({a, b}, [&] { return project(sub(a, b), 31); }).max_rel_error < 1e-5);
  CHECK(check_all({a}, [&] { return project(transpose(a), 32); }).max_rel_error < 1e-5);
  CHECK(check_all({a}, [&] { return project(slice_cols(a, 1, 3), 33); }).max_rel_error < 1e-5);
  CHECK(check_all({a}, [&] { return project(gather_rows(a, {2, 0, 2}), 34); }).max_rel_error < 1e-5);
  CHECK(check_all({a, b}, [&] { return project(concat_rows<double>({a, b}), 35); }).max_rel_error < 1e-5);
  CHECK(check_all({a, table}, [&] { return project(add_rows_tiled(a, table), 36); }).max_rel_error < 1e-5);
  CHECK(check_all({a}, [&] { return project(reshape(a, {2, 6}), 37); }).max_rel_error < 1e-5);
  CHECK(check_all({a, b}, [&] { return mse(a, b); }).max_rel_error < 1e-5);
  CHECK(check_all({a}, [&] { return mean(a); }).max_rel_error < 1e-5);
}

TEST_CASE("fused attention agrees with the composite route") {
  const std::size_t batch = 2, len = 5, width = 6, heads = 2, hd = 3;
  auto qkv = random_tensor({batch * len, 3 * width}, 40);

  // Independent construction from primitive ops.
  auto composite = [&] {
    std::vector<Tensor<double>> outputs;
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<std::size_t> rows(len);
      for (std::size_t i = 0; i < len; ++i) rows[i] = b * len + i;
      auto seq = gather_rows(qkv, rows);
      std::vector<Tensor<double>> head_out;
      for (std::size_t h = 0; h < heads; ++h) {
        auto q = slice_cols(seq, h * hd, (h + 1) * hd);
        auto k = slice_cols(seq, width + h * hd, width + (h + 1) * hd);
        auto v = slice_cols(seq, 2 * width + h * hd, 2 * width + (h + 1) * hd);
        auto p = softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(hd))));
        head_out.push_back(transpose(matmul(p, v)));
      }
      outputs.push_back(transpose(concat_rows(head_out)));
    }
    return concat_rows(outputs);
  };
  std::vector<double> probs;
  auto fused = multihead_attention(qkv, batch, len, heads, &probs);
  auto ref = composite();
  REQUIRE(fused.shape() == ref.shape());
  for (std::size_t i = 0; i < fused.numel(); ++i) CHECK(fused[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  for (std::size_t r = 0; r < batch * heads * len; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < len; ++j) s += probs[r * len + j];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  auto check = check_all({qkv}, [&] { return project(multihead_attention(qkv, batch, len, heads), 41); });
  CHECK(check.max_rel_error < 1e-5);
}

TEST_CASE("masked_mse gradient is exactly zero on unflagged rows") {
  auto pred = random_tensor({4, 3}, 50);
  auto target = random_tensor({4, 3}, 51, false);
  std::vector<std::uint8_t> flags{1, 0, 1, 0};
  masked_mse(pred, target, flags).backward();
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(pred.grad()[1 * 3 + j] == 0.0);
    CHECK(pred.grad()[3 * 3 + j] == 0.0);
  }
  CHECK(check_all({pred}, [&] { return masked_mse(pred, target, flags); }).max_rel_error < 1e-6);
  CHECK(masked_mse(pred, target, std::vector<std::uint8_t>(4, 0)).item() == 0.0);
}

TEST_CASE("no-grad mode records nothing") {
  auto x = random_tensor({2, 2}, 60);
  NoGradGuard guard;
  auto y = gelu(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("identical seeds give bit-identical results") {
  auto run = [] {
    auto x = random_tensor({8, 8}, 70);
    auto w = random_tensor({8, 8}, 71);
    auto y = softmax(gelu(matmul(x, w)));
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  CHECK(run() == run());
}
