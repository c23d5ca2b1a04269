#pragma once

// Classification metrics, ROC/AUC, fold construction and the t / F tests
// used to compare cross-validated models.

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mimd/data.hpp"
#include "mimd/random.hpp"

namespace mimd {

/// AD is the positive class.
struct ConfusionMatrix {
  Index tp = 0, fp = 0, tn = 0, fn = 0;
  Index total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

ConfusionMatrix confusion(std::span<const ClassLabel> predicted, std::span<const ClassLabel> truth);
double accuracy(const ConfusionMatrix& cm);

struct RocPoint {
  double fpr = 0, tpr = 0, threshold = 0;
};

/// Points for thresholds over the distinct scores (descending), preceded by a
/// (0,0) sentinel at +inf; the last point is (1,1). A score >= threshold
/// counts as AD. Throws StatsError unless both classes are present.
std::vector<RocPoint> roc_points(std::span<const double> scores, std::span<const ClassLabel> labels);
double auc_trapezoid(std::span<const RocPoint> points);
/// (#{pos > neg} + 0.5 #{ties}) / (n_pos n_neg).
double auc_mannwhitney(std::span<const double> scores, std::span<const ClassLabel> labels);

struct MeanStd {
  double mean = 0, std = 0;  // sample (n-1) deviation; 0 for a single value
};
MeanStd mean_std(std::span<const double> values);
/// "xx.xx ± yy.yy"
std::string format_mean_std(const MeanStd& ms);

/// I_x(a, b) by Lentz's continued fraction.
double reg_incomplete_beta(double x, double a, double b);

struct TTestResult {
  double t = 0, df = 0, p = 1;
};
/// Pooled-variance two-sample Student t-test, two-sided.
TTestResult t_test(std::span<const double> a, std::span<const double> b);

struct AnovaResult {
  double f = 0, df_between = 0, df_within = 0, p = 1;
};
/// Zero within-group variance yields F = +inf, p = 0 (or F = 0, p = 1 when
/// all means agree as well).
AnovaResult one_way_anova(std::span<const std::vector<double>> groups);

/// k folds of positions into `labels`, each sorted. Classes are dealt round
/// robin after a seeded shuffle so fold sizes and per-class counts differ by
/// at most one.
std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const ClassLabel> labels, Index k, Rng& rng);

}  // namespace mimd
