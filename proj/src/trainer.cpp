#include "mimd/trainer.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "mimd/error.hpp"

namespace mimd {

namespace {

void check_unit_rate(double v, const char* name, bool allow_zero = false) {
  bool ok = allow_zero ? (v >= 0.0 && v < 1.0) : (v > 0.0 && v <= 1.0);
  if (!ok) throw ConfigError(std::string(name) + (allow_zero ? " must lie in [0, 1)" : " must lie in (0, 1]"));
}

void check_rates(const TrainConfig& c) {
  check_unit_rate(c.initial_lr, "initial_lr");
  check_unit_rate(c.decay_rate, "decay_rate");
  check_unit_rate(c.dropout, "dropout", true);
  if (!(c.decay_steps > 0)) throw ConfigError("decay_steps must be positive");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must lie in [0, 1)");
  if (!(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must lie in [0, 1)");
  if (!(c.adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (c.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (c.epochs < 0) throw ConfigError("epochs must be non-negative");
}

}  // namespace

void TrainConfig::validate() const {
  check_rates(*this);
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
}

double lr_at_step(const TrainConfig& config, std::int64_t step) {
  if (step < 0) throw ConfigError("negative step");
  return config.initial_lr * std::pow(config.decay_rate, static_cast<double>(step) / config.decay_steps);
}

OptimizerState OptimizerState::zeros_like(const ModelParams& params) {
  OptimizerState s;
  for (const auto& [name, t] : params.tensors()) {
    s.m[name] = Array::Zero(t.size());
    s.v[name] = Array::Zero(t.size());
  }
  return s;
}

void adam_update(ModelParams& params, const ParamGrads& grads, OptimizerState& state, double lr,
                 const TrainConfig& config) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw ShapeError("gradient for unknown parameter " + name);
    if (g.size() != params.at(name).size()) throw ShapeError("gradient shape mismatch for " + name);
  }
  ++state.step;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& [name, t] : params.tensors()) {
    Array& m = state.m[name];
    Array& v = state.v[name];
    if (m.size() == 0) m = Array::Zero(t.size());
    if (v.size() == 0) v = Array::Zero(t.size());
    if (m.size() != t.size() || v.size() != t.size()) throw ShapeError("optimizer state shape mismatch for " + name);
    auto it = grads.find(name);
    if (it == grads.end()) {
      m *= b1;
      v *= b2;
    } else {
      m = b1 * m + (1.0 - b1) * it->second;
      v = b2 * v + (1.0 - b2) * it->second.square();
    }
    params.at(name).mutable_values() -= lr * (m / c1) / ((v / c2).sqrt() + config.adam_eps);
  }
}

double cross_entropy(std::span<const double> probs, Index label) {
  if (label < 0 || label >= static_cast<Index>(probs.size())) throw DataError("invalid class label " + std::to_string(label));
  double total = 0;
  for (double p : probs) total += p;
  if (std::abs(total - 1.0) > 1e-6) throw DataError("probabilities do not sum to 1");
  return -std::log(std::max(probs[static_cast<std::size_t>(label)], 1e-12));
}

Tensor batch_loss(const MixedBatch& batch, const ModelConfig& config, const ModelParams& params,
                  const ForwardContext& ctx) {
  if (batch.size() == 0) throw DataError("empty batch");
  Tensor total;
  for (Index b = 0; b < batch.size(); ++b) {
    Tensor probs = forward(batch.sample(b), config, params, ctx);
    Tensor loss = cross_entropy(probs, static_cast<Index>(batch.labels[b]));
    total = b == 0 ? loss : add(total, loss);
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

std::pair<double, ParamGrads> loss_and_grads(const MixedBatch& batch, const ModelConfig& config,
                                             const ModelParams& params, const ForwardContext& ctx) {
  Tape tape;
  ModelParams tracked = params.tracked(tape);
  Tensor loss = batch_loss(batch, config, tracked, ctx);
  Gradients g = tape.backward(loss);
  ParamGrads out;
  for (const auto& [name, t] : tracked.tensors()) {
    if (g.contains(t)) out[name] = g.of(t);
  }
  return {loss.item(), std::move(out)};
}

std::vector<Prediction> predict(const ModelConfig& model, const ModelParams& params,
                                std::span<const MixedBatch> batches) {
  ForwardContext ctx;
  std::vector<Prediction> out;
  for (const auto& batch : batches) {
    for (Index b = 0; b < batch.size(); ++b) {
      Tensor probs = forward(batch.sample(b), model, params, ctx);
      Prediction p;
      p.subject_id = batch.subject_ids[b];
      p.prob_ad = probs.values()(1);
      p.predicted = probs.values()(1) > probs.values()(0) ? ClassLabel::AD : ClassLabel::CN;
      p.truth = batch.labels[b];
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<Prediction> predict(const ModelConfig& model, const ModelParams& params,
                                std::span<const Example> examples, const TabularScaler& scaler) {
  if (examples.empty()) return {};
  Rng unused(0);
  auto batches = build_batches(examples, scaler, 16, unused, false, false);
  return predict(model, params, batches);
}

TrainResult train(const ModelConfig& model, const ModelParams& initial, std::span<const Example> training,
                  std::span<const Example> validation, const TabularScaler& scaler, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  check_rates(config);
  model.validate();
  TrainResult result;
  result.params = initial.clone();
  if (config.epochs == 0) return result;
  if (training.empty()) throw DataError("empty training data");

  Rng shuffle_rng(derive_seed(config.seed, 1));
  Rng dropout_rng(derive_seed(config.seed, 2));
  ForwardContext train_ctx{true, &dropout_rng, config.dropout};
  ForwardContext eval_ctx;

  std::vector<MixedBatch> val_batches;
  if (!validation.empty()) {
    Rng unused(0);
    val_batches = build_batches(validation, scaler, 16, unused, false, false);
  }

  ModelParams current = initial.clone();
  OptimizerState state = OptimizerState::zeros_like(current);
  double best_accuracy = -1.0;

  for (Index epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0;
    Index seen = 0;
    for (const auto& batch : build_batches(training, scaler, config.batch_size, shuffle_rng)) {
      auto [loss, grads] = loss_and_grads(batch, model, current, train_ctx);
      rec.lr = lr_at_step(config, state.step);
      adam_update(current, grads, state, rec.lr, config);
      loss_sum += loss * static_cast<double>(batch.size());
      seen += batch.size();
    }
    rec.train_loss = loss_sum / static_cast<double>(seen);

    if (val_batches.empty()) {
      rec.val_loss = rec.val_accuracy = std::numeric_limits<double>::quiet_NaN();
      result.params = current.clone();
      result.best_epoch = epoch;
    } else {
      double vloss = 0;
      Index correct = 0, total = 0;
      for (const auto& batch : val_batches) {
        for (Index b = 0; b < batch.size(); ++b) {
          Tensor probs = forward(batch.sample(b), model, current, eval_ctx);
          const auto& p = probs.values();
          vloss += -std::log(std::max(p(static_cast<Index>(batch.labels[b])), 1e-12));
          ClassLabel pred = p(1) > p(0) ? ClassLabel::AD : ClassLabel::CN;
          correct += pred == batch.labels[b];
          ++total;
        }
      }
      rec.val_loss = vloss / static_cast<double>(total);
      rec.val_accuracy = static_cast<double>(correct) / static_cast<double>(total);
      if (rec.val_accuracy > best_accuracy) {
        best_accuracy = rec.val_accuracy;
        result.params = current.clone();
        result.best_epoch = epoch;
      }
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.steps = state.step;
  return result;
}

void write_history(std::span<const EpochRecord> history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot write history " + path.string());
  out << "epoch,train_loss,val_loss,val_accuracy,lr\n";
  out.precision(10);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_accuracy << ',' << r.lr << '\n';
  }
}

}  // namespace mimd
