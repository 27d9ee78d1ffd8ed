#include "doctest.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "grad_check.hpp"
#include "vitmae/errors.hpp"
#include "vitmae/mae.hpp"
#include "vitmae/ops.hpp"

using namespace vitmae;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform();
  return t;
}

// Brute-force masked loss: mean over masked patches of the mean squared pixel error.
double loss_oracle(const Tensor<double>& pred, const Tensor<double>& target, const std::vector<MaskPlan>& plans) {
  const std::size_t n = plans.front().num_patches, d = pred.cols();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < plans.size(); ++b) {
    for (std::size_t k = 0; k < n; ++k) {
      if (!plans[b].is_masked(k)) continue;
      double patch = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double e = pred.data()[(b * n + k) * d + j] - target.data()[(b * n + k) * d + j];
        patch += e * e;
      }
      total += patch / static_cast<double>(d);
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace

TEST_CASE("mask plans partition the patch indices") {
  Rng rng(17);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng.below(256);
    const double s = 0.95 * rng.uniform();
    const auto plan = sample_mask(n, s, rng);
    CHECK(plan.masked.size() == static_cast<std::size_t>(std::floor(n * s + 1e-9)));
    std::set<std::size_t> all(plan.masked.begin(), plan.masked.end());
    CHECK(all.size() == plan.masked.size());
    for (auto v : plan.visible) CHECK(all.insert(v).second);
    CHECK(all.size() == n);
    CHECK(*all.rbegin() == n - 1);
  }
  const auto plan = sample_mask(64, 0.75, std::uint64_t{3});
  CHECK(plan.masked.size() == 48);
  CHECK(plan.visible.size() == 16);
  CHECK(masked_count(100, 0.29) == 29);
  CHECK(masked_count(64, 0.0) == 0);
  CHECK_THROWS_AS(masked_count(64, 1.0), ConfigError);
  CHECK_THROWS_AS(masked_count(64, -0.1), ConfigError);
}

TEST_CASE("per-sample mask streams") {
  const auto a = sample_mask_for(64, 0.75, 1, 0, 5);
  const auto b = sample_mask_for(64, 0.75, 1, 0, 5);
  const auto c = sample_mask_for(64, 0.75, 1, 1, 5);
  const auto d = sample_mask_for(64, 0.75, 1, 0, 6);
  CHECK(a.masked == b.masked);
  CHECK(a.masked != c.masked);
  CHECK(a.masked != d.masked);

  // Masked positions are close to uniform over many draws.
  std::vector<int> hits(64, 0);
  for (std::uint64_t i = 0; i < 4000; ++i)
    for (auto k : sample_mask_for(64, 0.75, 2, 0, i).masked) ++hits[k];
  for (int h : hits) CHECK(std::abs(h - 3000) < 200);
}

TEST_CASE("loss covers masked patches only") {
  Rng rng(4);
  std::vector<MaskPlan> plans = {sample_mask(64, 0.75, rng), sample_mask(64, 0.75, rng)};
  auto pred = random_tensor({128, 64}, rng).set_requires_grad(true);
  auto target = random_tensor({128, 64}, rng);
  auto loss = mae_loss(pred, target, plans);
  CHECK(loss.item() == doctest::Approx(loss_oracle(pred, target, plans)).epsilon(1e-12));
  CHECK(std::abs(loss.item() - loss_oracle(pred, target, plans)) < 1e-6);
  loss.backward();
  std::vector<double> grad(pred.grad().begin(), pred.grad().end());

  auto moved = Tensor<double>(pred.shape(), std::vector<double>(pred.data().begin(), pred.data().end()));
  moved.set_requires_grad(true);
  for (std::size_t b = 0; b < 2; ++b)
    for (auto k : plans[b].visible)
      for (std::size_t j = 0; j < 64; ++j) moved.mutable_data()[(b * 64 + k) * 64 + j] += 10.0 * rng.normal();
  auto moved_loss = mae_loss(moved, target, plans);
  CHECK(std::abs(moved_loss.item() - loss.item()) < 1e-9);
  moved_loss.backward();
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t k = 0; k < 64; ++k) {
      for (std::size_t j = 0; j < 64; ++j) {
        const std::size_t i = (b * 64 + k) * 64 + j;
        if (plans[b].is_masked(k)) CHECK(moved.grad()[i] == grad[i]);
        else CHECK(moved.grad()[i] == 0.0);
      }
    }
  }

  auto none = sample_mask(64, 0.0, rng);
  CHECK(mae_loss(random_tensor({64, 64}, rng), random_tensor({64, 64}, rng), {none}).item() == 0.0);
}

TEST_CASE("encoder sees only the class token and visible patches") {
  const auto cfg = ModelConfig::named("ti");
  const auto model = MaeModel<double>::init(cfg, 2);
  Rng rng(6);
  auto img = random_tensor({64, 64, 1}, rng);
  auto plan = sample_mask(64, 0.75, rng);
  const auto patches = patchify(img, 8);
  const auto latents = model.encode_visible(patches, {plan});
  CHECK(latents.length == 17);
  CHECK(latents.tokens.shape() == Shape{17, 192});

  // Changing a masked patch leaves every encoder output unchanged.
  auto edited = Tensor<double>(patches.shape(), std::vector<double>(patches.data().begin(), patches.data().end()));
  for (std::size_t j = 0; j < 64; ++j) edited.mutable_data()[plan.masked[0] * 64 + j] = 5.0;
  const auto again = model.encode_visible(edited, {plan});
  for (std::size_t i = 0; i < again.tokens.numel(); ++i) REQUIRE(again.tokens.data()[i] == latents.tokens.data()[i]);

  const auto out = model.forward(patches, {plan});
  CHECK(out.predicted.shape() == Shape{64, 64});
  CHECK(out.loss.item() > 0.0);

  auto no_cls = cfg;
  no_cls.pretrain_class_token = false;
  const auto model2 = MaeModel<double>::init(no_cls, 2);
  CHECK(model2.encode_visible(patches, {plan}).length == 16);
}

TEST_CASE("reconstruction and masked-input images") {
  Rng rng(10);
  auto img = random_tensor({64, 64, 1}, rng);
  auto pred = random_tensor({64, 64}, rng);
  auto plan = sample_mask(64, 0.75, rng);
  const auto recon = reconstruct_image(img, pred, plan);
  const auto masked = masked_input_image(img, plan, 8, -1.0);
  const auto rp = patchify(recon, 8);
  const auto ip = patchify(img, 8);
  const auto mp = patchify(masked, 8);
  std::size_t sentinel_patches = 0;
  for (std::size_t k = 0; k < 64; ++k) {
    bool all_sentinel = true;
    for (std::size_t j = 0; j < 64; ++j) {
      const std::size_t i = k * 64 + j;
      if (plan.is_masked(k)) CHECK(rp.data()[i] == pred.data()[i]);
      else CHECK(rp.data()[i] == ip.data()[i]);
      all_sentinel = all_sentinel && mp.data()[i] == -1.0;
    }
    sentinel_patches += all_sentinel;
  }
  CHECK(sentinel_patches == 48);
}

TEST_CASE("full ViT-Ti MAE gradient matches finite differences") {
  const auto start = std::chrono::steady_clock::now();
  const auto cfg = ModelConfig::named("ti");
  const auto model = MaeModel<double>::init(cfg, 21);
  auto params = model.parameters();
  Rng rng(22);
  // Move off the zero-initialized biases and unit norm scales so every
  // parameter receives a generic gradient.
  for (auto& e : params.entries())
    for (auto& v : e.tensor.mutable_data()) v += 0.02 * rng.normal();
  const auto patches = patchify(random_tensor({64, 64, 1}, rng), 8);
  const std::vector<MaskPlan> plans = {sample_mask(64, 0.75, rng)};
  auto loss_fn = [&] { return model.forward(patches, plans).loss; };
  // Gradients below 1e-5 are compared on an absolute scale: at h = 1e-5 the
  // loss differences lose about 1e-10 to rounding.
  const auto r = testing::check_parameters(params, loss_fn, 2, 99, 1e-5, 1e-5);
  CHECK(r.coordinates >= 200);
  CHECK(r.max_rel_error < 1e-4);
  MESSAGE("checked " << r.coordinates << " coordinates, max relative error " << r.max_rel_error << " at " << r.worst);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() < 120.0);
}
