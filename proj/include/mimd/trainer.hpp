#pragma once

// Adam with continuous exponential learning-rate decay, cross-entropy loss,
// best-validation checkpoint selection and deterministic prediction.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mimd/data.hpp"
#include "mimd/model.hpp"

namespace mimd {

struct TrainConfig {
  double initial_lr = 1e-4;
  double decay_steps = 100000;
  double decay_rate = 0.9;
  Index batch_size = 6;
  Index epochs = 250;
  double dropout = 0.2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  /// Throws ConfigError unless rates lie in (0,1], epochs >= 1 and batch_size >= 1.
  void validate() const;
};

/// initial_lr * decay_rate^(step / decay_steps), continuous in step.
double lr_at_step(const TrainConfig& config, std::int64_t step);

using ParamGrads = std::map<std::string, Array>;

struct OptimizerState {
  std::map<std::string, Array> m, v;
  std::int64_t step = 0;

  static OptimizerState zeros_like(const ModelParams& params);
};

/// One bias-corrected Adam step. Parameters absent from `grads` get a zero
/// gradient. Throws ShapeError on misaligned shapes.
void adam_update(ModelParams& params, const ParamGrads& grads, OptimizerState& state, double lr,
                 const TrainConfig& config);

/// -ln(max(p[label], 1e-12)). Throws DataError for labels outside {0, 1} or
/// probabilities that do not sum to 1 within 1e-6.
double cross_entropy(std::span<const double> probs, Index label);

struct EpochRecord {
  Index epoch = 0;  // 1-based
  double train_loss = 0, val_loss = 0, val_accuracy = 0;
  double lr = 0;  // rate used by the epoch's last update
};

struct TrainResult {
  ModelParams params;  // best validation accuracy; ties keep the earlier epoch
  std::vector<EpochRecord> history;
  Index best_epoch = 0;  // 0 when no epoch ran
  std::int64_t steps = 0;
};

struct Prediction {
  std::string subject_id;
  double prob_ad = 0.5;
  ClassLabel predicted = ClassLabel::CN;
  ClassLabel truth = ClassLabel::CN;
};

/// Mean cross-entropy of a batch; gradients flow into the tracked parameters.
Tensor batch_loss(const MixedBatch& batch, const ModelConfig& config, const ModelParams& params,
                  const ForwardContext& ctx);

/// Gradient of batch_loss for every parameter, plus the loss value.
std::pair<double, ParamGrads> loss_and_grads(const MixedBatch& batch, const ModelConfig& config,
                                             const ModelParams& params, const ForwardContext& ctx);

/// Trains from `initial` for config.epochs epochs (0 returns `initial`
/// unchanged). Validation metrics are NaN when `validation` is empty, in which
/// case the last epoch is kept.
TrainResult train(const ModelConfig& model, const ModelParams& initial, std::span<const Example> training,
                  std::span<const Example> validation, const TabularScaler& scaler, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Dropout off; predicted class is AD only when P(AD) > P(CN).
std::vector<Prediction> predict(const ModelConfig& model, const ModelParams& params,
                                std::span<const MixedBatch> batches);
std::vector<Prediction> predict(const ModelConfig& model, const ModelParams& params,
                                std::span<const Example> examples, const TabularScaler& scaler);

/// CSV epoch,train_loss,val_loss,val_accuracy,lr.
void write_history(std::span<const EpochRecord> history, const std::filesystem::path& path);

}  // namespace mimd
