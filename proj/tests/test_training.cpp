#include "doctest.h"

#include <cmath>
#include <numeric>

#include "vitmae/errors.hpp"
#include "vitmae/log.hpp"
#include "vitmae/training.hpp"

using namespace vitmae;

namespace {

ModelConfig small_config() {
  ModelConfig c = ModelConfig::named("ti");
  c.layers = 2;
  c.width = 24;
  c.heads = 3;
  c.head_hidden = 32;
  c.decoder_layers = 1;
  c.decoder_width = 12;
  c.decoder_heads = 2;
  return c;
}

struct SmallData {
  std::vector<LabeledSample> train, val, test;
  std::vector<Tensor<float>> train_images;
};

SmallData small_data(std::size_t leds = 5, std::uint64_t seed = 3) {
  const auto corpus = synth_generate(leds, seed);
  const auto split = split_dataset(corpus.samples, seed);
  SmallData d;
  for (auto i : split.train) {
    d.train.push_back(corpus.samples[i]);
    d.train_images.push_back(corpus.samples[i].image);
  }
  for (auto i : split.val) d.val.push_back(corpus.samples[i]);
  for (auto i : split.test) d.test.push_back(corpus.samples[i]);
  return d;
}

TrainConfig quick(Phase phase, std::size_t epochs) {
  auto c = TrainConfig::defaults(phase);
  c.epochs = epochs;
  c.warmup_epochs = 1;
  c.batch_size = 4;
  c.seed = 7;
  return c;
}

std::vector<double> losses(const std::vector<MetricRecord>& history) {
  std::vector<double> out;
  for (const auto& r : history) out.push_back(r.loss);
  return out;
}

template <typename T>
std::vector<std::vector<T>> snapshot(const ParameterSet<T>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& e : params.entries()) out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

// Textbook AdamW on plain doubles: bias-corrected moments, decoupled decay.
struct ScalarAdamW {
  double b1, b2, eps = 1e-8;
  std::vector<double> m, v;
  int t = 0;

  void step(std::vector<double>& theta, const std::vector<double>& g, double lr, double wd) {
    if (m.empty()) m.assign(theta.size(), 0.0), v.assign(theta.size(), 0.0);
    ++t;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, t));
      const double vh = v[i] / (1 - std::pow(b2, t));
      theta[i] = theta[i] - lr * wd * theta[i] - lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

}  // namespace

TEST_CASE("AdamW leaves parameters alone for a zero gradient without decay") {
  ParameterSet<double> params;
  params.add("w", Tensor<double>({3}, {0.5, -1.0, 2.0}).set_requires_grad(true), true);
  auto& w = params.entries()[0].tensor;
  w.mutable_grad();
  AdamW<double> opt(0.9, 0.999);
  for (int i = 0; i < 5; ++i) opt.step(params, 0.1, 0.0);
  CHECK(w.data()[0] == 0.5);
  CHECK(w.data()[1] == -1.0);
  CHECK(w.data()[2] == 2.0);
  CHECK(opt.steps() == 5);
}

TEST_CASE("AdamW descends on a quadratic") {
  ParameterSet<double> params;
  params.add("theta", Tensor<double>({1}, {1.0}).set_requires_grad(true), true);
  auto& theta = params.entries()[0].tensor;
  AdamW<double> opt(0.9, 0.999);
  auto loss = mul(theta, theta);
  scale(sum(loss), 0.5).backward();
  CHECK(theta.grad()[0] == 1.0);
  opt.step(params, 0.01, 0.0);
  CHECK(theta.data()[0] < 1.0);
  CHECK(theta.data()[0] > 0.0);
}

TEST_CASE("AdamW trajectory matches a scalar reference") {
  // f(θ) = ½(θ₀² + 10·θ₁²), 200 steps with cosine decay.
  const double curv[] = {1.0, 10.0};
  ParameterSet<double> params;
  params.add("theta", Tensor<double>({2}, {1.0, -1.0}).set_requires_grad(true), true);
  params.add("bias", Tensor<double>({1}, {0.5}).set_requires_grad(true), false);
  AdamW<double> opt(0.9, 0.95);
  ScalarAdamW ref_theta{0.9, 0.95};
  ScalarAdamW ref_bias{0.9, 0.95};
  std::vector<double> theta = {1.0, -1.0}, bias = {0.5};
  auto& tp = params.entries()[0].tensor;
  auto& bp = params.entries()[1].tensor;
  double max_diff = 0.0;
  for (std::size_t step = 0; step < 200; ++step) {
    const double lr = lr_schedule(step, 200, 10, 0.05);
    params.zero_grad();
    auto t_grad = tp.mutable_grad();
    auto b_grad = bp.mutable_grad();
    for (int i = 0; i < 2; ++i) t_grad[i] = curv[i] * tp.data()[i];
    b_grad[0] = bp.data()[0];
    opt.step(params, lr, 0.01);
    ref_theta.step(theta, {curv[0] * theta[0], curv[1] * theta[1]}, lr, 0.01);
    ref_bias.step(bias, {bias[0]}, lr, 0.0);
    for (int i = 0; i < 2; ++i) max_diff = std::max(max_diff, std::abs(tp.data()[i] - theta[i]));
    max_diff = std::max(max_diff, std::abs(bp.data()[0] - bias[0]));
  }
  CHECK(max_diff < 1e-12);
  CHECK(std::hypot(tp.data()[0], tp.data()[1]) < 1e-3);
  CHECK(std::abs(bp.data()[0]) < 1e-3);
}

TEST_CASE("AdamW rejects a non-finite gradient before updating") {
  ParameterSet<double> params;
  params.add("a", Tensor<double>({2}, {1.0, 2.0}).set_requires_grad(true), true);
  params.add("b", Tensor<double>({1}, {3.0}).set_requires_grad(true), true);
  params.entries()[0].tensor.mutable_grad()[0] = 1.0;
  params.entries()[1].tensor.mutable_grad()[0] = std::nan("");
  AdamW<double> opt(0.9, 0.999);
  CHECK_THROWS_AS(opt.step(params, 0.1, 0.0), NumericError);
  CHECK(params.entries()[0].tensor.data()[0] == 1.0);
  CHECK(params.entries()[1].tensor.data()[0] == 3.0);
  CHECK(opt.steps() == 0);
}

TEST_CASE("learning-rate schedule endpoints") {
  const double base = 1e-3;
  CHECK(lr_schedule(0, 1000, 100, base) == 0.0);
  CHECK(lr_schedule(50, 1000, 100, base) == doctest::Approx(0.5 * base));
  CHECK(lr_schedule(100, 1000, 100, base) == doctest::Approx(base).epsilon(1e-15));
  CHECK(lr_schedule(999, 1000, 100, base) <= 1e-8 * base);
  for (std::size_t s = 100; s + 1 < 1000; ++s) CHECK(lr_schedule(s + 1, 1000, 100, base) <= lr_schedule(s, 1000, 100, base));

  auto c = TrainConfig::defaults(Phase::kPretrain);
  CHECK(lr_schedule(c.warmup_epochs * 7, c, 7) == doctest::Approx(c.base_learning_rate));
  CHECK(lr_schedule(c.epochs * 7 - 1, c, 7) <= 1e-8 * c.base_learning_rate);
}

TEST_CASE("training config validation and defaults") {
  const auto pre = TrainConfig::defaults(Phase::kPretrain);
  const auto ft = TrainConfig::defaults(Phase::kFinetune);
  CHECK(pre.epochs == 50);
  CHECK(ft.epochs == 20);
  CHECK(pre.batch_size == 64);
  CHECK(pre.beta2() == 0.95);
  CHECK(ft.beta2() == 0.999);
  auto bad = pre;
  bad.warmup_epochs = bad.epochs;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = pre;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = pre;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  const auto back = train_config_from_json(train_config_to_json(ft));
  CHECK(back.phase == Phase::kFinetune);
  CHECK(back.base_learning_rate == ft.base_learning_rate);
}

TEST_CASE("pre-training smoke run and reproducibility") {
  set_log_level(LogLevel::kWarning);
  const auto data = small_data();
  std::vector<Tensor<float>> images(data.train_images.begin(), data.train_images.begin() + 8);
  const auto cfg = ModelConfig::named("ti");
  const auto tc = quick(Phase::kPretrain, 2);
  std::vector<double> logged;
  const auto a = pretrain<float>(images, cfg, tc, [&](const MetricRecord& r) { logged.push_back(r.loss); });
  REQUIRE(a.history.size() == 2);
  CHECK(logged == losses(a.history));
  for (double l : logged) CHECK(std::isfinite(l));
  CHECK(checkpoint_kind(a.checkpoint) == "mae");
  const auto b = pretrain<float>(images, cfg, tc);
  CHECK(losses(a.history) == losses(b.history));

  CHECK_THROWS_AS(pretrain<float>({}, cfg, tc), DataError);
  CHECK_THROWS_AS(pretrain<float>(images, cfg, quick(Phase::kFinetune, 2)), ConfigError);
}

TEST_CASE("pre-training resumes to the same losses and weights") {
  set_log_level(LogLevel::kWarning);
  const auto data = small_data();
  const auto cfg = small_config();
  const auto tc = quick(Phase::kPretrain, 4);
  const auto full = pretrain<double>(data.train_images, cfg, tc);

  auto first = tc;
  first.stop_after = 2;
  const auto part = pretrain<double>(data.train_images, cfg, first);
  CHECK(part.history.size() == 2);
  const auto reloaded = decode_checkpoint(encode_checkpoint(part.checkpoint));
  const auto rest = pretrain<double>(data.train_images, cfg, tc, {}, &reloaded);
  CHECK(losses(rest.history) == losses(full.history));
  CHECK(snapshot(rest.model.parameters()) == snapshot(full.model.parameters()));

  auto other = tc;
  other.seed = 8;
  CHECK_THROWS_AS(pretrain<double>(data.train_images, cfg, other, {}, &reloaded), ConfigError);
}

TEST_CASE("fine-tuning from scratch and prediction contracts") {
  set_log_level(LogLevel::kWarning);
  const auto data = small_data();
  const auto cfg = small_config();
  const auto tc = quick(Phase::kFinetune, 2);
  const auto r = finetune<double>(data.train, data.val, cfg, tc);
  CHECK(r.history.size() == 2);
  CHECK(r.best_epoch >= 1);
  CHECK(checkpoint_kind(r.checkpoint) == "regressor");
  CHECK(r.checkpoint.metadata.at("init") == "scratch");
  for (const auto& h : r.history) CHECK(std::isfinite(h.val_mse));

  const auto out = r.model.forward(patchify_batch<double, float>(data.train_images, cfg.patch_size),
                                   data.train_images.size());
  CHECK(out.shape() == Shape{data.train_images.size(), 1});

  std::vector<Tensor<float>> imgs;
  for (const auto& s : data.test) imgs.push_back(s.image);
  const auto batched = predict_batch(r.model, imgs, 4);
  const auto whole = predict_batch(r.model, imgs, imgs.size());
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const double single = predict(r.model, imgs[i]);
    CHECK(single == predict(r.model, imgs[i]));
    CHECK(batched[i] == doctest::Approx(single).epsilon(1e-12));
    CHECK(whole[i] == doctest::Approx(single).epsilon(1e-12));
  }
  CHECK(predict_batch(r.model, imgs, 4, 3) == batched);

  Tensor<float> black({64, 64, 1}), white({64, 64, 1});
  for (auto& v : white.mutable_data()) v = 1.0f;
  CHECK(std::isfinite(predict(r.model, black)));
  CHECK(std::isfinite(predict(r.model, white)));
  CHECK_THROWS_AS(predict(r.model, Tensor<float>({32, 32, 1})), DimensionError);

  auto unlabeled = data.train;
  unlabeled[0].delta_b_max = std::nan("");
  CHECK_THROWS_AS(finetune<double>(unlabeled, data.val, cfg, tc), DataError);
  CHECK_THROWS_AS(finetune<double>({}, data.val, cfg, tc), DataError);
}

TEST_CASE("zero learning rate keeps the initialization") {
  set_log_level(LogLevel::kWarning);
  const auto data = small_data();
  const auto cfg = small_config();
  const auto pre = pretrain<double>(data.train_images, cfg, quick(Phase::kPretrain, 2));

  auto tc = quick(Phase::kFinetune, 2);
  tc.base_learning_rate = 0.0;
  const auto tuned = finetune<double>(data.train, data.val, cfg, tc, &pre.checkpoint);
  CHECK(tuned.checkpoint.metadata.at("init") == "mae");
  // Encoder weights equal the pre-trained ones bit for bit.
  const auto enc = tuned.model.encoder.parameters();
  for (const auto& e : enc.entries()) {
    const auto stored = pre.checkpoint.at(e.name).values<double>();
    CHECK(std::equal(stored.begin(), stored.end(), e.tensor.data().begin()));
  }

  // Scratch with lr = 0 predicts exactly what the untrained model predicts.
  const auto scratch = finetune<double>(data.train, data.val, cfg, tc);
  const auto init = VitRegressor<double>::init(cfg, tc.seed);
  std::vector<Tensor<float>> imgs;
  for (const auto& s : data.val) imgs.push_back(s.image);
  CHECK(predict_batch(scratch.model, imgs) == predict_batch(init, imgs));
  CHECK(snapshot(scratch.model.parameters()) == snapshot(init.parameters()));
  // Pre-trained and scratch runs differ only through the encoder initialization.
  ParameterSet<double> tuned_head, init_head;
  tuned.model.head.collect(tuned_head, "head.");
  init.head.collect(init_head, "head.");
  CHECK(snapshot(tuned_head) == snapshot(init_head));
}

TEST_CASE("fine-tuning resumes to the same history") {
  set_log_level(LogLevel::kWarning);
  const auto data = small_data();
  const auto cfg = small_config();
  const auto tc = quick(Phase::kFinetune, 3);
  const auto full = finetune<double>(data.train, data.val, cfg, tc);
  auto first = tc;
  first.stop_after = 1;
  const auto part = finetune<double>(data.train, data.val, cfg, first);
  const auto rest = finetune<double>(data.train, data.val, cfg, tc, nullptr, {}, &part.checkpoint);
  REQUIRE(rest.history.size() == full.history.size());
  for (std::size_t i = 0; i < full.history.size(); ++i) {
    CHECK(rest.history[i].loss == full.history[i].loss);
    CHECK(rest.history[i].val_mse == full.history[i].val_mse);
  }
  CHECK(rest.best_epoch == full.best_epoch);
  CHECK(snapshot(rest.model.parameters()) == snapshot(full.model.parameters()));
}

TEST_CASE("frozen-encoder fine-tuning only moves the head") {
  set_log_level(LogLevel::kWarning);
  const auto data = small_data();
  const auto cfg = small_config();
  auto tc = quick(Phase::kFinetune, 1);
  tc.freeze_encoder = true;
  tc.base_learning_rate = 1e-2;
  tc.warmup_epochs = 0;
  const auto r = finetune<double>(data.train, {}, cfg, tc);
  const auto init = VitRegressor<double>::init(cfg, tc.seed);
  CHECK(snapshot(r.model.encoder.parameters()) == snapshot(init.encoder.parameters()));
  CHECK(r.model.head.out.weight.data()[0] != init.head.out.weight.data()[0]);
}

TEST_CASE("defect classification threshold") {
  CHECK(classify_defect(0.99) == DefectClass::kDefective);
  CHECK(classify_defect(1.06) == DefectClass::kDefective);
  CHECK(classify_defect(0.18) == DefectClass::kFunctional);
  CHECK(classify_defect(0.20) == DefectClass::kFunctional);
  CHECK(classify_defect(0.2000001) == DefectClass::kDefective);
  CHECK(classify_defect(0.03) == DefectClass::kFunctional);
  CHECK(std::string(defect_name(DefectClass::kDefective)) == "defective");
}

TEST_CASE("evaluation reports") {
  const std::vector<double> labels = {0.0, 0.03, 0.18, 0.99, 1.06, 0.25};
  const double mean = std::accumulate(labels.begin(), labels.end(), 0.0) / labels.size();
  double var = 0.0;
  for (double l : labels) var += (l - mean) * (l - mean);
  var /= labels.size();
  const auto constant = evaluate_predictions(std::vector<double>(labels.size(), mean), labels, "test");
  CHECK(constant.mse == doctest::Approx(var).epsilon(1e-14));
  CHECK(constant.tp + constant.fp + constant.tn + constant.fn == labels.size());

  const auto perfect = evaluate_predictions(labels, labels, "test");
  CHECK(perfect.mse == 0.0);
  CHECK(perfect.tp == 3);
  CHECK(perfect.tn == 3);
  CHECK(perfect.fp == 0);
  CHECK(perfect.fn == 0);
  CHECK_THROWS_AS(evaluate_predictions({}, {}, "test"), DataError);

  set_log_level(LogLevel::kWarning);
  const auto data = small_data();
  const auto model = VitRegressor<double>::init(small_config(), 4);
  const auto report = evaluate(model, data.test, "test", 3);
  CHECK(report.split == "test");
  REQUIRE(report.predictions.size() == data.test.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    CHECK(report.labels[i] == data.test[i].delta_b_max);
    sq += (report.predictions[i] - data.test[i].delta_b_max) * (report.predictions[i] - data.test[i].delta_b_max);
  }
  CHECK(report.mse == doctest::Approx(sq / data.test.size()).epsilon(1e-15));
  CHECK(report.tp + report.fp + report.tn + report.fn == data.test.size());
  CHECK_THROWS_AS(evaluate(model, {}, "test"), DataError);
}
