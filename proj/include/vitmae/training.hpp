#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "vitmae/checkpoint.hpp"
#include "vitmae/data.hpp"
#include "vitmae/mae.hpp"
#include "vitmae/vit.hpp"

namespace vitmae {

enum class Phase { kPretrain, kFinetune };

const char* phase_name(Phase phase);
Phase phase_from_name(const std::string& name);

struct TrainConfig {
  Phase phase = Phase::kPretrain;
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  double base_learning_rate = 1e-3;
  double weight_decay = 0.05;
  std::size_t warmup_epochs = 5;
  std::uint64_t seed = 0;
  std::string precision = "f32";
  bool augment = true;
  /// Fine-tuning only: train the head on a fixed encoder.
  bool freeze_encoder = false;
  /// Stop after this many epochs in this call (0 = run to `epochs`); the
  /// schedule still spans `epochs`, so a later resume continues it.
  std::size_t stop_after = 0;
  std::size_t threads = 1;

  static TrainConfig defaults(Phase phase);
  double beta1() const { return 0.9; }
  double beta2() const { return phase == Phase::kPretrain ? 0.95 : 0.999; }
  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct MetricRecord {
  std::size_t epoch = 0;  // 1-based
  Phase phase = Phase::kPretrain;
  double loss = 0.0;
  double lr = 0.0;  // learning rate at the last step of the epoch
  double val_mse = std::numeric_limits<double>::quiet_NaN();
};

nlohmann::json history_to_json(const std::vector<MetricRecord>& history);
std::vector<MetricRecord> history_from_json(const nlohmann::json& j);

using EpochCallback = std::function<void(const MetricRecord&)>;

/// Linear warmup from 0 over `warmup_steps`, then cosine decay reaching 0 at
/// the last step (`total_steps - 1`).
double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base);
double lr_schedule(std::size_t step, const TrainConfig& config, std::size_t steps_per_epoch);

/// AdamW with decoupled weight decay, applied only to entries flagged `decay`.
/// Entries without a gradient are left untouched.
template <typename T>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Throws NumericError (before touching any value) on a non-finite gradient.
  void step(ParameterSet<T>& params, double lr, double weight_decay);

  std::uint64_t steps() const { return steps_; }
  void store(Checkpoint& checkpoint, const ParameterSet<T>& params) const;
  void restore(const Checkpoint& checkpoint, const ParameterSet<T>& params);

 private:
  void ensure_state(const ParameterSet<T>& params);

  double beta1_, beta2_, eps_;
  std::uint64_t steps_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

template <typename T>
struct PretrainResult {
  MaeModel<T> model;
  std::vector<MetricRecord> history;
  Checkpoint checkpoint;  // model, optimizer state and metadata
};

/// MAE pre-training on unlabeled [64×64×1] images. `resume` continues a run
/// from a checkpoint this function produced.
template <typename T>
PretrainResult<T> pretrain(const std::vector<Tensor<float>>& images, const ModelConfig& model_config,
                           const TrainConfig& config, const EpochCallback& on_epoch = {},
                           const Checkpoint* resume = nullptr);

template <typename T>
struct FinetuneResult {
  VitRegressor<T> model;  // the epoch with the best validation MSE
  std::vector<MetricRecord> history;
  std::size_t best_epoch = 0;
  double best_val_mse = std::numeric_limits<double>::quiet_NaN();
  Checkpoint checkpoint;
};

/// Supervised ΔB_max regression. `init` is an MAE (or regressor) checkpoint
/// whose encoder weights seed the model; nullptr trains from scratch.
template <typename T>
FinetuneResult<T> finetune(const std::vector<LabeledSample>& train, const std::vector<LabeledSample>& val,
                           const ModelConfig& model_config, const TrainConfig& config,
                           const Checkpoint* init = nullptr, const EpochCallback& on_epoch = {},
                           const Checkpoint* resume = nullptr);

/// Model reconstruction from checkpoints. load_mae rejects checkpoints
/// without a decoder.
template <typename T>
MaeModel<T> load_mae(const Checkpoint& checkpoint);
template <typename T>
VitRegressor<T> load_regressor(const Checkpoint& checkpoint);
ModelConfig checkpoint_model_config(const Checkpoint& checkpoint);
std::string checkpoint_kind(const Checkpoint& checkpoint);

inline constexpr double kDefectThreshold = 0.20;

enum class DefectClass { kFunctional, kDefective };

DefectClass classify_defect(double delta);
const char* defect_name(DefectClass c);

/// Chunk size for inference; validation during fine-tuning uses it too, so
/// reported validation MSE matches a later `evaluate` call exactly.
inline constexpr std::size_t kInferenceBatch = 64;

template <typename T>
double predict(const VitRegressor<T>& model, const Tensor<float>& image);

/// Inference in fixed chunks of `batch_size`; chunks are spread over
/// `threads` workers, so results do not depend on the thread count.
template <typename T>
std::vector<double> predict_batch(const VitRegressor<T>& model, const std::vector<Tensor<float>>& images,
                                  std::size_t batch_size = kInferenceBatch, std::size_t threads = 1);

struct EvalReport {
  std::string split;
  double mse = 0.0;
  std::vector<double> predictions;
  std::vector<double> labels;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

EvalReport evaluate_predictions(const std::vector<double>& predictions, const std::vector<double>& labels,
                                const std::string& split);

template <typename T>
EvalReport evaluate(const VitRegressor<T>& model, const std::vector<LabeledSample>& samples,
                    const std::string& split, std::size_t batch_size = kInferenceBatch, std::size_t threads = 1);

}  // namespace vitmae
