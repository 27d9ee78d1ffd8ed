#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "vitmae/data.hpp"
#include "vitmae/errors.hpp"
#include "vitmae/interpret.hpp"

using namespace vitmae;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c = ModelConfig::named("ti");
  c.layers = 2;
  c.width = 24;
  c.heads = 3;
  c.head_hidden = 32;
  return c;
}

Tensor<float> random_image(Rng& rng) {
  Tensor<float> t({64, 64, 1});
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform());
  return t;
}

// Moves the model away from its symmetric initialization so heatmaps are not flat.
template <typename T>
void perturb(VitRegressor<T>& model, std::uint64_t seed) {
  Rng rng(seed);
  auto params = model.parameters();
  for (auto& e : params.entries())
    for (auto& v : e.tensor.mutable_data()) v += static_cast<T>(0.05 * rng.normal());
}

}  // namespace

TEST_CASE("heatmap contract") {
  auto model = VitRegressor<double>::init(small_config(), 1);
  perturb(model, 2);
  Rng rng(3);
  const auto img = random_image(rng);
  const auto h = gradcam(model, img, {}, "led_00001_t0100");
  CHECK(h.values.shape() == Shape{64, 64});
  CHECK(h.layer_tag == "blocks.1.norm1");
  CHECK(h.sample_id == "led_00001_t0100");
  CHECK(h.relevance.size() == 64);
  const auto [lo, hi] = std::minmax_element(h.values.data().begin(), h.values.data().end());
  CHECK(*lo == 0.0);
  CHECK(*hi == doctest::Approx(1.0).epsilon(1e-12));
  for (double r : h.relevance) CHECK(r >= 0.0);

  CHECK(h.prediction == doctest::Approx(model.forward(patchify(cast<double>(img), 8), 1).item()).epsilon(1e-12));

  const auto again = gradcam(model, img);
  CHECK(std::equal(again.values.data().begin(), again.values.data().end(), h.values.data().begin()));
  // Parameter gradients from the GradCAM backward pass are cleared.
  const bool clean = !model.head.out.weight.has_grad() || model.head.out.weight.grad()[0] == 0.0;
  CHECK(clean);

  GradcamOptions norm2;
  norm2.layer_tag = "blocks.1.norm2";
  CHECK(gradcam(model, img, norm2).layer_tag == "blocks.1.norm2");
  GradcamOptions bad;
  bad.layer_tag = "blocks.9.norm1";
  CHECK_THROWS_AS(gradcam(model, img, bad), ConfigError);
  CHECK_THROWS_AS(gradcam(model, Tensor<float>({32, 32, 1})), DimensionError);

  VitRegressor<double> headless;
  headless.encoder = model.encoder;
  CHECK_THROWS_AS(gradcam(headless, img), ContractError);
}

TEST_CASE("zeroed head gives an all-zero heatmap") {
  auto model = VitRegressor<double>::init(small_config(), 4);
  perturb(model, 5);
  for (auto& v : model.head.out.weight.mutable_data()) v = 0.0;
  Rng rng(6);
  const auto h = gradcam(model, random_image(rng));
  for (double v : h.values.data()) CHECK(v == 0.0);
}

TEST_CASE("positive rescaling of the final head layer leaves the heatmap unchanged") {
  auto model = VitRegressor<double>::init(small_config(), 7);
  perturb(model, 8);
  Rng rng(9);
  for (int trial = 0; trial < 3; ++trial) {
    const auto img = random_image(rng);
    const auto before = gradcam(model, img);
    auto scaled = model;
    scaled.head.out = Linear<double>{model.head.out.weight.detach(), model.head.out.bias.detach()};
    for (auto& v : scaled.head.out.weight.mutable_data()) v *= 3.7;
    for (auto& v : scaled.head.out.bias.mutable_data()) v *= 3.7;
    scaled.head.out.weight.set_requires_grad(true);
    scaled.head.out.bias.set_requires_grad(true);
    const auto after = gradcam(scaled, img);
    double diff = 0.0;
    for (std::size_t i = 0; i < 64 * 64; ++i) diff = std::max(diff, std::abs(before.values.data()[i] - after.values.data()[i]));
    CHECK(diff < 1e-5);
    CHECK(after.prediction == doctest::Approx(3.7 * before.prediction).epsilon(1e-9));
  }
}

TEST_CASE("class token is excluded from relevance") {
  Rng rng(10);
  const std::size_t tokens = 65, width = 6;
  std::vector<double> act(tokens * width), grad(tokens * width);
  for (auto& v : act) v = rng.normal();
  for (auto& v : grad) v = rng.normal();
  const auto r = token_relevance(act, grad, tokens, width, true);
  REQUIRE(r.size() == 64);
  for (std::size_t d = 0; d < width; ++d) {
    act[d] = 1e6;
    grad[d] = -1e6;
  }
  CHECK(token_relevance(act, grad, tokens, width, true) == r);

  // Independent evaluation of token-mean weights and ReLU.
  for (std::size_t k = 1; k < tokens; ++k) {
    double expected = 0.0;
    for (std::size_t d = 0; d < width; ++d) {
      double w = 0.0;
      for (std::size_t j = 1; j < tokens; ++j) w += grad[j * width + d];
      expected += w / 64.0 * act[k * width + d];
    }
    CHECK(r[k - 1] == doctest::Approx(std::max(0.0, expected)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(token_relevance(act, grad, tokens, width + 1, true), DimensionError);
}

TEST_CASE("relevance upsampling") {
  // A column ramp stays a ramp under bilinear interpolation with clamped borders.
  std::vector<double> ramp(64);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) ramp[r * 8 + c] = static_cast<double>(c);
  const auto bilinear = relevance_to_map(ramp, 8, 8, 64, 64, Upsample::kBilinear);
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      const double src = std::clamp((x + 0.5) / 8.0 - 0.5, 0.0, 7.0);
      CHECK(bilinear.data()[y * 64 + x] == doctest::Approx(src / 7.0).epsilon(1e-12));
    }
  }
  const auto nearest = relevance_to_map(ramp, 8, 8, 64, 64, Upsample::kNearest);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) CHECK(nearest.data()[y * 64 + x] == doctest::Approx((x / 8) / 7.0));

  const auto flat = relevance_to_map(std::vector<double>(64, 2.5), 8, 8, 64, 64, Upsample::kBilinear);
  for (double v : flat.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(relevance_to_map(ramp, 4, 4, 64, 64, Upsample::kNearest), DimensionError);
}

TEST_CASE("overlay rendering and file round trip") {
  Rng rng(11);
  const auto img = random_image(rng);
  Heatmap zero;
  zero.values = Tensor<double>({64, 64});
  Heatmap one;
  one.values = Tensor<double>({64, 64}, 1.0);

  const auto z = render_overlay(img, zero, 0.5);
  const auto o = render_overlay(img, one, 0.5);
  CHECK(z.width == 128);
  CHECK(z.height == 64);
  CHECK(z.channels == 3);
  const auto c0 = colormap(0.0), c1 = colormap(1.0);
  CHECK(c1[0] == 1.0);
  CHECK(c1[1] == 0.0);
  CHECK(c1[2] == 0.0);
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      const double g = img.data()[y * 64 + x];
      for (std::size_t c = 0; c < 3; ++c) {
        CHECK(z.at(x, y, c) == std::lround(g * 255.0));
        CHECK(z.at(64 + x, y, c) == std::lround((0.5 * g + 0.5 * c0[c]) * 255.0));
        CHECK(o.at(64 + x, y, c) == std::lround((0.5 * g + 0.5 * c1[c]) * 255.0));
      }
    }
  }

  const auto dir = fs::temp_directory_path() / "vitmae_test_interpret";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto model = VitRegressor<double>::init(small_config(), 12);
  perturb(model, 13);
  const auto h = gradcam(model, img);
  export_overlay(img, h, dir / "overlay.png");
  const auto back = read_image(dir / "overlay.png");
  CHECK(back.channels == 3);
  CHECK(back.pixels == render_overlay(img, h).pixels);
  export_overlay(img, h, dir / "overlay.pgm");
  CHECK(read_image(dir / "overlay.pgm").width == 128);
  CHECK_THROWS_AS(export_overlay(img, h, dir / "missing" / "x.png"), DataError);

  write_heatmap_text(h, dir / "heat.csv");
  const auto text = read_heatmap_text(dir / "heat.csv");
  REQUIRE(text.shape() == Shape{64, 64});
  for (std::size_t i = 0; i < 64 * 64; ++i)
    CHECK(text.data()[i] == doctest::Approx(h.values.data()[i]).epsilon(1e-8));
  fs::remove_all(dir);
}
