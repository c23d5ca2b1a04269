#pragma once

// Stratified k-fold cross-validation over the pooled train+validation
// subjects, with a held-out test split excluded from every fold.

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mimd/stats.hpp"
#include "mimd/trainer.hpp"

namespace mimd {

struct CvConfig {
  Index folds = 7;
  double test_ratio = 0.15;              // held out before folding; 0 disables
  double inner_validation_ratio = 0.15;  // carved from each fold's training part
  std::uint64_t seed = 0;
  Index jobs = 1;  // folds trained concurrently

  void validate() const;
};

struct FoldReport {
  Index fold = 0;
  double accuracy = 0, auc = 0;
  ConfusionMatrix confusion;
  std::vector<RocPoint> roc;
  std::vector<Prediction> predictions;
  std::vector<std::string> train_ids, validation_ids, evaluation_ids;
  std::vector<EpochRecord> history;
  Index best_epoch = 0;
};

struct CvResult {
  std::vector<FoldReport> folds;
  MeanStd accuracy, auc;
  std::vector<std::string> holdout_ids;
};

/// Fold f derives its split, initialization and training streams from
/// (seed, f), so results do not depend on `jobs`.
CvResult cv_run(std::span<const Example> examples, const ModelConfig& model, const TrainConfig& train_config,
                const CvConfig& cv, const std::function<void(const FoldReport&)>& on_fold = {});

/// {"folds":[{fold,accuracy,auc,confusion:{tp,fp,tn,fn}}],"summary":{...}}
std::string metrics_json(const CvResult& result);
void write_metrics_json(const CvResult& result, const std::filesystem::path& path);
/// CSV fold,fpr,tpr,threshold.
void write_roc_csv(const CvResult& result, const std::filesystem::path& path);

std::vector<double> fold_accuracies(const CvResult& result);

}  // namespace mimd
