#include "vitmae/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <thread>

#include "vitmae/errors.hpp"
#include "vitmae/log.hpp"
#include "vitmae/ops.hpp"

namespace vitmae {

const char* phase_name(Phase phase) { return phase == Phase::kPretrain ? "pretrain" : "finetune"; }

Phase phase_from_name(const std::string& name) {
  if (name == "pretrain") return Phase::kPretrain;
  if (name == "finetune") return Phase::kFinetune;
  throw ConfigError("unknown phase '" + name + "'");
}

TrainConfig TrainConfig::defaults(Phase phase) {
  TrainConfig c;
  c.phase = phase;
  if (phase == Phase::kPretrain) {
    c.epochs = 50;
    c.base_learning_rate = 1e-3;
    c.weight_decay = 0.05;
    c.warmup_epochs = 5;
  } else {
    c.epochs = 20;
    c.base_learning_rate = 5e-4;
    c.weight_decay = 0.05;
    c.warmup_epochs = 2;
    c.augment = false;
  }
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be smaller than epochs");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(base_learning_rate >= 0.0) || !std::isfinite(base_learning_rate)) {
    throw ConfigError("base_learning_rate must be a finite non-negative number");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be non-negative");
  if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (stop_after > epochs) throw ConfigError("stop_after exceeds epochs");
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"phase", phase_name(c.phase)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"base_learning_rate", c.base_learning_rate},
          {"weight_decay", c.weight_decay},
          {"warmup_epochs", c.warmup_epochs},
          {"seed", c.seed},
          {"precision", c.precision},
          {"augment", c.augment},
          {"freeze_encoder", c.freeze_encoder},
          {"beta1", c.beta1()},
          {"beta2", c.beta2()},
          {"eps", 1e-8}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.phase = phase_from_name(j.at("phase").get<std::string>());
    c.epochs = j.at("epochs").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.base_learning_rate = j.at("base_learning_rate").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.warmup_epochs = j.at("warmup_epochs").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.precision = j.at("precision").get<std::string>();
    c.augment = j.at("augment").get<bool>();
    c.freeze_encoder = j.at("freeze_encoder").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::kContent, std::string("incomplete training config: ") + e.what());
  }
  return c;
}

namespace {

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json history_to_json(const std::vector<MetricRecord>& history) {
  auto arr = nlohmann::json::array();
  for (const auto& r : history) {
    arr.push_back({{"epoch", r.epoch},
                   {"phase", phase_name(r.phase)},
                   {"loss", number_or_null(r.loss)},
                   {"lr", r.lr},
                   {"val_mse", number_or_null(r.val_mse)}});
  }
  return arr;
}

std::vector<MetricRecord> history_from_json(const nlohmann::json& j) {
  std::vector<MetricRecord> out;
  for (const auto& e : j) {
    MetricRecord r;
    r.epoch = e.at("epoch").get<std::size_t>();
    r.phase = phase_from_name(e.at("phase").get<std::string>());
    r.loss = e.at("loss").is_null() ? std::numeric_limits<double>::quiet_NaN() : e.at("loss").get<double>();
    r.lr = e.at("lr").get<double>();
    r.val_mse = e.at("val_mse").is_null() ? std::numeric_limits<double>::quiet_NaN() : e.at("val_mse").get<double>();
    out.push_back(r);
  }
  return out;
}

double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base) {
  if (step < warmup_steps) return base * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step + 1 >= total_steps) return 0.0;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - 1 - warmup_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double lr_schedule(std::size_t step, const TrainConfig& config, std::size_t steps_per_epoch) {
  return lr_schedule(step, config.epochs * steps_per_epoch, config.warmup_epochs * steps_per_epoch,
                     config.base_learning_rate);
}

template <typename T>
void AdamW<T>::ensure_state(const ParameterSet<T>& params) {
  if (m_.size() == params.entries().size()) return;
  m_.clear();
  v_.clear();
  for (const auto& e : params.entries()) {
    m_.emplace_back(e.tensor.numel(), T(0));
    v_.emplace_back(e.tensor.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(ParameterSet<T>& params, double lr, double weight_decay) {
  ensure_state(params);
  auto& entries = params.entries();
  for (const auto& e : entries) {
    if (!e.tensor.has_grad()) continue;
    for (T g : e.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + e.name + "'; step aborted");
    }
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(eps_);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    if (!e.tensor.has_grad()) continue;
    auto theta = e.tensor.mutable_data();
    auto grad = e.tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const T decay = e.decay ? static_cast<T>(1.0 - lr * weight_decay) : T(1);
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const T g = grad[k];
      m[k] = b1 * m[k] + (T(1) - b1) * g;
      v[k] = b2 * v[k] + (T(1) - b2) * g * g;
      theta[k] = theta[k] * decay - step_size * m[k] / (std::sqrt(v[k]) * inv_sqrt_bc2 + eps);
    }
  }
}

template <typename T>
void AdamW<T>::store(Checkpoint& checkpoint, const ParameterSet<T>& params) const {
  checkpoint.metadata["optimizer"] = {{"name", "adamw"}, {"step", steps_}, {"beta1", beta1_}, {"beta2", beta2_},
                                      {"eps", eps_}};
  if (m_.size() != params.entries().size()) return;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    const auto& e = params.entries()[i];
    checkpoint.put(StoredTensor::from_values<T>("optim.m." + e.name, e.tensor.shape(), m_[i]));
    checkpoint.put(StoredTensor::from_values<T>("optim.v." + e.name, e.tensor.shape(), v_[i]));
  }
}

template <typename T>
void AdamW<T>::restore(const Checkpoint& checkpoint, const ParameterSet<T>& params) {
  const auto& meta = checkpoint.metadata.at("optimizer");
  steps_ = meta.at("step").get<std::uint64_t>();
  m_.clear();
  v_.clear();
  if (steps_ == 0) return;
  for (const auto& e : params.entries()) {
    m_.push_back(checkpoint.at("optim.m." + e.name).template values<T>());
    v_.push_back(checkpoint.at("optim.v." + e.name).template values<T>());
  }
}

template class AdamW<float>;
template class AdamW<double>;

namespace {

void require_image_shape(const Tensor<float>& image, const ModelConfig& config) {
  const Shape expected{config.image_size, config.image_size, config.in_channels};
  if (image.shape() != expected) {
    throw DimensionError("expected image shape " + shape_string(expected) + ", got " + shape_string(image.shape()));
  }
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed, "shuffle", epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

Tensor<float> training_view(const Tensor<float>& image, const TrainConfig& config, std::size_t epoch,
                            std::size_t index) {
  if (!config.augment) return image;
  Rng rng(config.seed, "augment", (static_cast<std::uint64_t>(epoch) << 32) | index);
  return augment(image, rng);
}

std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

void check_finite_loss(double loss, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite training loss in epoch " + std::to_string(epoch));
  }
}

nlohmann::json rng_metadata(const TrainConfig& config, std::size_t next_epoch) {
  return {{"seed", config.seed}, {"streams", "derived per (component, epoch, sample)"}, {"next_epoch", next_epoch}};
}

template <typename T>
std::size_t resume_epoch(const Checkpoint* resume, const TrainConfig& config, const char* kind) {
  if (!resume) return 0;
  if (checkpoint_kind(*resume) != kind) {
    throw ConfigError(std::string("resume checkpoint is not a ") + kind + " training state");
  }
  const auto stored = train_config_from_json(resume->metadata.at("train"));
  if (stored.seed != config.seed || stored.epochs != config.epochs || stored.batch_size != config.batch_size) {
    throw ConfigError("resume checkpoint was written with a different seed, epoch count or batch size");
  }
  return resume->metadata.at("epoch").get<std::size_t>();
}

}  // namespace

std::string checkpoint_kind(const Checkpoint& checkpoint) {
  auto it = checkpoint.metadata.find("kind");
  if (it == checkpoint.metadata.end() || !it->is_string()) {
    throw CheckpointError(CheckpointError::Kind::kContent, "checkpoint metadata has no 'kind'");
  }
  return it->get<std::string>();
}

ModelConfig checkpoint_model_config(const Checkpoint& checkpoint) {
  auto it = checkpoint.metadata.find("model");
  if (it == checkpoint.metadata.end()) {
    throw CheckpointError(CheckpointError::Kind::kContent, "checkpoint metadata has no model config");
  }
  return model_config_from_json(*it);
}

template <typename T>
MaeModel<T> load_mae(const Checkpoint& checkpoint) {
  if (checkpoint_kind(checkpoint) != "mae") {
    throw ContractError("checkpoint holds a '" + checkpoint_kind(checkpoint) +
                        "' model without an MAE decoder; reconstruction needs a pre-training checkpoint");
  }
  auto model = MaeModel<T>::init(checkpoint_model_config(checkpoint), 0);
  auto params = model.parameters();
  restore_parameters(checkpoint, params);
  return model;
}

template <typename T>
VitRegressor<T> load_regressor(const Checkpoint& checkpoint) {
  if (checkpoint_kind(checkpoint) != "regressor") {
    throw ContractError("checkpoint holds a '" + checkpoint_kind(checkpoint) +
                        "' model without a regression head; fine-tune it first");
  }
  auto model = VitRegressor<T>::init(checkpoint_model_config(checkpoint), 0);
  auto params = model.parameters();
  restore_parameters(checkpoint, params);
  return model;
}

template <typename T>
PretrainResult<T> pretrain(const std::vector<Tensor<float>>& images, const ModelConfig& model_config,
                           const TrainConfig& config, const EpochCallback& on_epoch, const Checkpoint* resume) {
  config.validate();
  model_config.validate();
  if (config.phase != Phase::kPretrain) throw ConfigError("pretrain needs a pretrain-phase training config");
  if (images.empty()) throw DataError("pre-training dataset is empty");
  for (const auto& img : images) require_image_shape(img, model_config);

  PretrainResult<T> result{MaeModel<T>::init(model_config, config.seed), {}, {}};
  auto params = result.model.parameters();
  AdamW<T> optimizer(config.beta1(), config.beta2());
  const std::size_t first_epoch = resume_epoch<T>(resume, config, "mae");
  if (resume) {
    restore_parameters(*resume, params);
    optimizer.restore(*resume, params);
    result.history = history_from_json(resume->metadata.at("history"));
  }

  const std::size_t n = images.size();
  const std::size_t per_epoch = steps_per_epoch(n, config.batch_size);
  const std::size_t num_patches = model_config.num_patches();
  const std::size_t last_epoch = config.stop_after ? config.stop_after : config.epochs;
  std::size_t step = first_epoch * per_epoch;
  std::size_t epoch = first_epoch;
  for (; epoch < last_epoch; ++epoch) {
    const auto order = epoch_order(n, config.seed, epoch);
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      std::vector<Tensor<float>> batch;
      std::vector<MaskPlan> plans;
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t idx = order[i];
        batch.push_back(training_view(images[idx], config, epoch, idx));
        plans.push_back(sample_mask_for(num_patches, model_config.mask_ratio, config.seed, epoch, idx));
      }
      const auto patches = patchify_batch<T, float>(batch, model_config.patch_size);
      params.zero_grad();
      auto out = result.model.forward(patches, plans);
      out.loss.backward();
      lr = lr_schedule(step, config, per_epoch);
      optimizer.step(params, lr, config.weight_decay);
      loss_sum += static_cast<double>(out.loss.item()) * static_cast<double>(end - begin);
      ++step;
    }
    MetricRecord rec{epoch + 1, Phase::kPretrain, loss_sum / static_cast<double>(n), lr};
    check_finite_loss(rec.loss, rec.epoch);
    result.history.push_back(rec);
    log_info("pretrain epoch " + std::to_string(rec.epoch) + "/" + std::to_string(config.epochs) +
             " loss " + std::to_string(rec.loss) + " lr " + std::to_string(lr));
    if (on_epoch) on_epoch(rec);
  }

  auto& ck = result.checkpoint;
  ck.metadata["kind"] = "mae";
  ck.metadata["model"] = model_config_to_json(model_config);
  ck.metadata["train"] = train_config_to_json(config);
  ck.metadata["epoch"] = epoch;
  ck.metadata["history"] = history_to_json(result.history);
  ck.metadata["rng"] = rng_metadata(config, epoch);
  store_parameters(ck, params);
  optimizer.store(ck, params);
  return result;
}

template <typename T>
FinetuneResult<T> finetune(const std::vector<LabeledSample>& train, const std::vector<LabeledSample>& val,
                           const ModelConfig& model_config, const TrainConfig& config, const Checkpoint* init,
                           const EpochCallback& on_epoch, const Checkpoint* resume) {
  config.validate();
  model_config.validate();
  if (config.phase != Phase::kFinetune) throw ConfigError("finetune needs a finetune-phase training config");
  if (train.empty()) throw DataError("fine-tuning dataset is empty");
  for (const auto* split : {&train, &val}) {
    for (const auto& s : *split) {
      require_image_shape(s.image, model_config);
      if (!std::isfinite(s.delta_b_max)) throw DataError("sample of LED " + s.led_id + " has no valid label");
    }
  }

  FinetuneResult<T> result{VitRegressor<T>::init(model_config, config.seed), {}, 0,
                           std::numeric_limits<double>::quiet_NaN(), {}};
  auto& model = result.model;
  std::string init_source = "scratch";
  if (init) {
    const ModelConfig stored = checkpoint_model_config(*init);
    if (stored.width != model_config.width || stored.layers != model_config.layers ||
        stored.patch_size != model_config.patch_size || stored.image_size != model_config.image_size) {
      throw ConfigError("initialization checkpoint architecture does not match the model config");
    }
    auto encoder_params = model.encoder.parameters();
    restore_parameters(*init, encoder_params);
    init_source = checkpoint_kind(*init);
  }

  auto all_params = model.parameters();
  ParameterSet<T> params;
  if (config.freeze_encoder) {
    auto frozen = model.encoder.parameters();
    for (auto& e : frozen.entries()) e.tensor.set_requires_grad(false);
    model.head.collect(params, "head.");
  } else {
    params = all_params;
  }

  AdamW<T> optimizer(config.beta1(), config.beta2());
  std::vector<std::vector<T>> best_values;
  auto snapshot = [&] {
    best_values.clear();
    for (const auto& e : all_params.entries()) best_values.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  };

  const std::size_t first_epoch = resume_epoch<T>(resume, config, "regressor");
  if (resume) {
    for (auto& e : all_params.entries()) {
      const auto values = resume->at("state.param." + e.name).template values<T>();
      std::copy(values.begin(), values.end(), e.tensor.mutable_data().begin());
    }
    optimizer.restore(*resume, params);
    result.history = history_from_json(resume->metadata.at("history"));
    const auto& best = resume->metadata.at("best");
    result.best_epoch = best.at("epoch").get<std::size_t>();
    result.best_val_mse = best.at("val_mse").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                        : best.at("val_mse").get<double>();
    for (const auto& e : all_params.entries()) best_values.push_back(resume->at(e.name).template values<T>());
    init_source = resume->metadata.value("init", init_source);
  }

  const std::size_t n = train.size();
  const std::size_t per_epoch = steps_per_epoch(n, config.batch_size);
  const std::size_t last_epoch = config.stop_after ? config.stop_after : config.epochs;
  std::size_t step = first_epoch * per_epoch;
  std::size_t epoch = first_epoch;
  for (; epoch < last_epoch; ++epoch) {
    const auto order = epoch_order(n, config.seed, epoch);
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      std::vector<Tensor<float>> batch;
      std::vector<T> labels;
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t idx = order[i];
        batch.push_back(training_view(train[idx].image, config, epoch, idx));
        labels.push_back(static_cast<T>(train[idx].delta_b_max));
      }
      const std::size_t b = end - begin;
      const auto patches = patchify_batch<T, float>(batch, model_config.patch_size);
      params.zero_grad();
      auto pred = model.forward(patches, b);
      auto loss = mse(pred, Tensor<T>({b, 1}, std::move(labels)));
      loss.backward();
      lr = lr_schedule(step, config, per_epoch);
      optimizer.step(params, lr, config.weight_decay);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(b);
      ++step;
    }
    MetricRecord rec{epoch + 1, Phase::kFinetune, loss_sum / static_cast<double>(n), lr};
    check_finite_loss(rec.loss, rec.epoch);
    if (!val.empty()) {
      rec.val_mse = evaluate(model, val, "val", kInferenceBatch, config.threads).mse;
      if (!(rec.val_mse >= result.best_val_mse)) {
        result.best_val_mse = rec.val_mse;
        result.best_epoch = rec.epoch;
        snapshot();
      }
    } else {
      result.best_epoch = rec.epoch;
      snapshot();
    }
    result.history.push_back(rec);
    log_info("finetune epoch " + std::to_string(rec.epoch) + "/" + std::to_string(config.epochs) + " loss " +
             std::to_string(rec.loss) + " val_mse " + std::to_string(rec.val_mse) + " lr " + std::to_string(lr));
    if (on_epoch) on_epoch(rec);
  }

  auto& ck = result.checkpoint;
  ck.metadata["kind"] = "regressor";
  ck.metadata["model"] = model_config_to_json(model_config);
  ck.metadata["train"] = train_config_to_json(config);
  ck.metadata["init"] = init_source;
  ck.metadata["epoch"] = epoch;
  ck.metadata["history"] = history_to_json(result.history);
  ck.metadata["rng"] = rng_metadata(config, epoch);
  ck.metadata["best"] = {{"epoch", result.best_epoch}, {"val_mse", number_or_null(result.best_val_mse)}};
  for (const auto& e : all_params.entries()) ck.put(StoredTensor::from("state.param." + e.name, e.tensor));
  optimizer.store(ck, params);

  if (!best_values.empty()) {
    for (std::size_t i = 0; i < all_params.entries().size(); ++i) {
      auto& e = all_params.entries()[i];
      std::copy(best_values[i].begin(), best_values[i].end(), e.tensor.mutable_data().begin());
    }
  }
  if (config.freeze_encoder) {
    auto frozen = model.encoder.parameters();
    for (auto& e : frozen.entries()) e.tensor.set_requires_grad(true);
  }
  store_parameters(ck, all_params);
  return result;
}

DefectClass classify_defect(double delta) {
  return delta > kDefectThreshold ? DefectClass::kDefective : DefectClass::kFunctional;
}

const char* defect_name(DefectClass c) { return c == DefectClass::kDefective ? "defective" : "functional"; }

template <typename T>
std::vector<double> predict_batch(const VitRegressor<T>& model, const std::vector<Tensor<float>>& images,
                                  std::size_t batch_size, std::size_t threads) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  for (const auto& img : images) require_image_shape(img, model.encoder.config);
  std::vector<double> out(images.size());
  const std::size_t chunks = (images.size() + batch_size - 1) / batch_size;
  auto run_chunk = [&](std::size_t c) {
    NoGradGuard no_grad;
    const std::size_t begin = c * batch_size, end = std::min(images.size(), begin + batch_size);
    std::vector<Tensor<float>> batch(images.begin() + static_cast<std::ptrdiff_t>(begin),
                                     images.begin() + static_cast<std::ptrdiff_t>(end));
    const auto pred = model.forward(patchify_batch<T, float>(batch, model.encoder.config.patch_size), end - begin);
    for (std::size_t i = begin; i < end; ++i) out[i] = static_cast<double>(pred.data()[i - begin]);
  };
  const std::size_t workers = std::min(threads, chunks);
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < chunks; c += workers) run_chunk(c);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

template <typename T>
double predict(const VitRegressor<T>& model, const Tensor<float>& image) {
  return predict_batch(model, std::vector<Tensor<float>>{image}, 1, 1)[0];
}

EvalReport evaluate_predictions(const std::vector<double>& predictions, const std::vector<double>& labels,
                                const std::string& split) {
  if (predictions.empty()) throw DataError("cannot evaluate an empty split '" + split + "'");
  if (predictions.size() != labels.size()) throw DimensionError("prediction and label counts differ");
  EvalReport r;
  r.split = split;
  r.predictions = predictions;
  r.labels = labels;
  double sq = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double d = predictions[i] - labels[i];
    sq += d * d;
    const bool predicted = classify_defect(predictions[i]) == DefectClass::kDefective;
    const bool actual = classify_defect(labels[i]) == DefectClass::kDefective;
    if (predicted && actual) ++r.tp;
    else if (predicted) ++r.fp;
    else if (actual) ++r.fn;
    else ++r.tn;
  }
  r.mse = sq / static_cast<double>(labels.size());
  return r;
}

template <typename T>
EvalReport evaluate(const VitRegressor<T>& model, const std::vector<LabeledSample>& samples, const std::string& split,
                    std::size_t batch_size, std::size_t threads) {
  if (samples.empty()) throw DataError("cannot evaluate an empty split '" + split + "'");
  std::vector<Tensor<float>> images;
  std::vector<double> labels;
  for (const auto& s : samples) {
    images.push_back(s.image);
    labels.push_back(s.delta_b_max);
  }
  return evaluate_predictions(predict_batch(model, images, batch_size, threads), labels, split);
}

#define VITMAE_INSTANTIATE_TRAINING(T)                                                                           \
  template PretrainResult<T> pretrain<T>(const std::vector<Tensor<float>>&, const ModelConfig&, const TrainConfig&, \
                                         const EpochCallback&, const Checkpoint*);                                \
  template FinetuneResult<T> finetune<T>(const std::vector<LabeledSample>&, const std::vector<LabeledSample>&,   \
                                         const ModelConfig&, const TrainConfig&, const Checkpoint*,               \
                                         const EpochCallback&, const Checkpoint*);                                \
  template MaeModel<T> load_mae<T>(const Checkpoint&);                                                            \
  template VitRegressor<T> load_regressor<T>(const Checkpoint&);                                                  \
  template double predict<T>(const VitRegressor<T>&, const Tensor<float>&);                                       \
  template std::vector<double> predict_batch<T>(const VitRegressor<T>&, const std::vector<Tensor<float>>&,        \
                                                std::size_t, std::size_t);                                        \
  template EvalReport evaluate<T>(const VitRegressor<T>&, const std::vector<LabeledSample>&, const std::string&,  \
                                  std::size_t, std::size_t);

VITMAE_INSTANTIATE_TRAINING(float)
VITMAE_INSTANTIATE_TRAINING(double)

}  // namespace vitmae
