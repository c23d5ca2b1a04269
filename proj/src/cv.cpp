#include "mimd/cv.hpp"

#include <atomic>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "mimd/error.hpp"

namespace mimd {

namespace {

// Stream ids for derive_seed; fold f adds f to the per-fold bases.
constexpr std::uint64_t kHoldoutStream = 1;
constexpr std::uint64_t kFoldStream = 2;
constexpr std::uint64_t kInnerSplitBase = 100;
constexpr std::uint64_t kInitBase = 200;
constexpr std::uint64_t kTrainBase = 300;

std::vector<ClassLabel> labels_of(std::span<const Example> examples, std::span<const std::size_t> idx) {
  std::vector<ClassLabel> out;
  for (auto i : idx) out.push_back(examples[i].label);
  return out;
}

FoldReport run_fold(std::span<const Example> examples, const std::vector<std::size_t>& pool,
                    const std::vector<std::vector<std::size_t>>& folds, Index f, const ModelConfig& model,
                    const TrainConfig& train_config, const CvConfig& cv) {
  std::vector<std::size_t> rest;
  for (Index g = 0; g < static_cast<Index>(folds.size()); ++g) {
    if (g == f) continue;
    for (auto i : folds[static_cast<std::size_t>(g)]) rest.push_back(pool[i]);
  }
  std::sort(rest.begin(), rest.end());

  Rng split_rng(derive_seed(cv.seed, kInnerSplitBase + static_cast<std::uint64_t>(f)));
  const double r = cv.inner_validation_ratio;
  auto inner = split_indices(labels_of(examples, rest), {1.0 - r, r, 0.0}, split_rng);

  std::vector<Example> train_set, val_set, eval_set;
  std::vector<TabularFeatures> train_features;
  FoldReport rep;
  rep.fold = f;
  for (auto i : inner[0]) {
    train_set.push_back(examples[rest[i]]);
    train_features.push_back(examples[rest[i]].features);
    rep.train_ids.push_back(examples[rest[i]].subject_id);
  }
  for (auto i : inner[1]) {
    val_set.push_back(examples[rest[i]]);
    rep.validation_ids.push_back(examples[rest[i]].subject_id);
  }
  for (auto i : folds[static_cast<std::size_t>(f)]) {
    eval_set.push_back(examples[pool[i]]);
    rep.evaluation_ids.push_back(examples[pool[i]].subject_id);
  }

  // Scaling statistics come from this fold's training subjects only.
  const TabularScaler scaler = TabularScaler::fit(train_features);
  TrainConfig tc = train_config;
  tc.seed = derive_seed(cv.seed, kTrainBase + static_cast<std::uint64_t>(f));
  ModelParams init = init_params(model, derive_seed(cv.seed, kInitBase + static_cast<std::uint64_t>(f)));
  TrainResult trained = train(model, init, train_set, val_set, scaler, tc);
  rep.history = std::move(trained.history);
  rep.best_epoch = trained.best_epoch;

  rep.predictions = predict(model, trained.params, eval_set, scaler);
  std::vector<ClassLabel> pred, truth;
  std::vector<double> scores;
  for (const auto& p : rep.predictions) {
    pred.push_back(p.predicted);
    truth.push_back(p.truth);
    scores.push_back(p.prob_ad);
  }
  rep.confusion = confusion(pred, truth);
  rep.accuracy = accuracy(rep.confusion);
  rep.roc = roc_points(scores, truth);
  rep.auc = auc_trapezoid(rep.roc);
  return rep;
}

}  // namespace

void CvConfig::validate() const {
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  if (!(test_ratio >= 0.0 && test_ratio < 1.0)) throw ConfigError("test_ratio must lie in [0, 1)");
  if (!(inner_validation_ratio > 0.0 && inner_validation_ratio < 1.0)) {
    throw ConfigError("inner_validation_ratio must lie in (0, 1)");
  }
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
}

CvResult cv_run(std::span<const Example> examples, const ModelConfig& model, const TrainConfig& train_config,
                const CvConfig& cv, const std::function<void(const FoldReport&)>& on_fold) {
  cv.validate();
  model.validate();
  train_config.validate();
  if (examples.empty()) throw DataError("cross-validation on an empty dataset");

  std::vector<ClassLabel> all_labels;
  for (const auto& e : examples) all_labels.push_back(e.label);

  CvResult result;
  std::vector<std::size_t> pool;
  if (cv.test_ratio > 0.0) {
    Rng holdout_rng(derive_seed(cv.seed, kHoldoutStream));
    auto split = split_indices(all_labels, {1.0 - cv.test_ratio, 0.0, cv.test_ratio}, holdout_rng);
    pool = split[0];
    for (auto i : split[2]) result.holdout_ids.push_back(examples[i].subject_id);
  } else {
    pool.resize(examples.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  }

  Rng fold_rng(derive_seed(cv.seed, kFoldStream));
  auto folds = stratified_kfold(labels_of(examples, pool), cv.folds, fold_rng);

  result.folds.resize(folds.size());
  std::vector<std::exception_ptr> errors(folds.size());
  std::atomic<std::size_t> next{0};
  std::mutex callback_mutex;
  auto worker = [&] {
    for (std::size_t f; (f = next++) < folds.size();) {
      try {
        result.folds[f] = run_fold(examples, pool, folds, static_cast<Index>(f), model, train_config, cv);
        if (on_fold) {
          std::lock_guard lock(callback_mutex);
          on_fold(result.folds[f]);
        }
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };
  const auto workers = static_cast<std::size_t>(std::min<Index>(cv.jobs, static_cast<Index>(folds.size())));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t t = 0; t < workers; ++t) threads.emplace_back(worker);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::vector<double> acc, auc;
  for (const auto& f : result.folds) {
    acc.push_back(f.accuracy);
    auc.push_back(f.auc);
  }
  result.accuracy = mean_std(acc);
  result.auc = mean_std(auc);
  return result;
}

std::vector<double> fold_accuracies(const CvResult& result) {
  std::vector<double> out;
  for (const auto& f : result.folds) out.push_back(f.accuracy);
  return out;
}

std::string metrics_json(const CvResult& result) {
  nlohmann::ordered_json j;
  j["folds"] = nlohmann::ordered_json::array();
  for (const auto& f : result.folds) {
    nlohmann::ordered_json fj;
    fj["fold"] = f.fold;
    fj["accuracy"] = f.accuracy;
    fj["auc"] = f.auc;
    fj["confusion"] = {{"tp", f.confusion.tp}, {"fp", f.confusion.fp}, {"tn", f.confusion.tn}, {"fn", f.confusion.fn}};
    fj["best_epoch"] = f.best_epoch;
    fj["evaluation_ids"] = f.evaluation_ids;
    j["folds"].push_back(std::move(fj));
  }
  nlohmann::ordered_json s;
  s["accuracy_mean"] = result.accuracy.mean;
  s["accuracy_std"] = result.accuracy.std;
  s["auc_mean"] = result.auc.mean;
  s["auc_std"] = result.auc.std;
  s["accuracy_percent"] = format_mean_std({100.0 * result.accuracy.mean, 100.0 * result.accuracy.std});
  s["auc_text"] = format_mean_std(result.auc);
  j["summary"] = std::move(s);
  j["holdout_ids"] = result.holdout_ids;
  return j.dump(2) + "\n";
}

void write_metrics_json(const CvResult& result, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot write " + path.string());
  out << metrics_json(result);
}

void write_roc_csv(const CvResult& result, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot write " + path.string());
  out << "fold,fpr,tpr,threshold\n";
  out.precision(10);
  for (const auto& f : result.folds) {
    for (const auto& p : f.roc) out << f.fold << ',' << p.fpr << ',' << p.tpr << ',' << p.threshold << '\n';
  }
}

}  // namespace mimd
