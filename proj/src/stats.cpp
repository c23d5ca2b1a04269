#include "mimd/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mimd/error.hpp"

namespace mimd {

ConfusionMatrix confusion(std::span<const ClassLabel> predicted, std::span<const ClassLabel> truth) {
  if (predicted.empty()) throw StatsError("confusion matrix of an empty prediction set");
  if (predicted.size() != truth.size()) throw StatsError("prediction and label counts differ");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool pred_ad = predicted[i] == ClassLabel::AD, true_ad = truth[i] == ClassLabel::AD;
    if (pred_ad && true_ad) ++cm.tp;
    else if (pred_ad) ++cm.fp;
    else if (true_ad) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw StatsError("accuracy of an empty confusion matrix");
  return static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
}

namespace {

std::pair<Index, Index> class_counts(std::span<const double> scores, std::span<const ClassLabel> labels) {
  if (scores.size() != labels.size()) throw StatsError("score and label counts differ");
  Index pos = std::count(labels.begin(), labels.end(), ClassLabel::AD);
  Index neg = static_cast<Index>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw StatsError("ROC analysis needs both classes");
  return {pos, neg};
}

}  // namespace

std::vector<RocPoint> roc_points(std::span<const double> scores, std::span<const ClassLabel> labels) {
  auto [pos, neg] = class_counts(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

  std::vector<RocPoint> out{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  Index tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == threshold; ++i) {
      (labels[order[i]] == ClassLabel::AD ? tp : fp)++;
    }
    out.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos),
                   threshold});
  }
  return out;
}

double auc_trapezoid(std::span<const RocPoint> points) {
  double area = 0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    area += (points[i].fpr - points[i - 1].fpr) * (points[i].tpr + points[i - 1].tpr) / 2.0;
  }
  return area;
}

double auc_mannwhitney(std::span<const double> scores, std::span<const ClassLabel> labels) {
  auto [pos, neg] = class_counts(scores, labels);
  double wins = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != ClassLabel::AD) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != ClassLabel::CN) continue;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw StatsError("mean of an empty sample");
  MeanStd r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return r;
}

std::string format_mean_std(const MeanStd& ms) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", ms.mean, ms.std);
  return buf;
}

namespace {

// Continued fraction for I_x(a,b) (modified Lentz).
double beta_continued_fraction(double x, double a, double b) {
  constexpr double kTiny = 1e-300, kEps = 1e-16;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw StatsError("incomplete beta continued fraction did not converge");
}

}  // namespace

double reg_incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw StatsError("incomplete beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw StatsError("incomplete beta needs 0 <= x <= 1");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(x, a, b) / a;
  return 1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b;
}

TTestResult t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw StatsError("t-test needs at least two values per sample");
  auto ma = mean_std(a), mb = mean_std(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  TTestResult r;
  r.df = na + nb - 2.0;
  const double pooled = ((na - 1.0) * ma.std * ma.std + (nb - 1.0) * mb.std * mb.std) / r.df;
  if (pooled == 0.0) {
    if (ma.mean == mb.mean) return r;
    throw StatsError("t-test: zero pooled variance with different means");
  }
  r.t = (ma.mean - mb.mean) / std::sqrt(pooled * (1.0 / na + 1.0 / nb));
  r.p = reg_incomplete_beta(r.df / (r.df + r.t * r.t), r.df / 2.0, 0.5);
  return r;
}

AnovaResult one_way_anova(std::span<const std::vector<double>> groups) {
  if (groups.size() < 2) throw StatsError("ANOVA needs at least two groups");
  double total = 0;
  std::size_t n = 0;
  for (const auto& g : groups) {
    if (g.size() < 2) throw StatsError("ANOVA needs at least two values per group");
    total += std::accumulate(g.begin(), g.end(), 0.0);
    n += g.size();
  }
  const double grand = total / static_cast<double>(n);
  double ssb = 0, ssw = 0;
  for (const auto& g : groups) {
    const double m = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
    ssb += static_cast<double>(g.size()) * (m - grand) * (m - grand);
    for (double v : g) ssw += (v - m) * (v - m);
  }
  AnovaResult r;
  r.df_between = static_cast<double>(groups.size() - 1);
  r.df_within = static_cast<double>(n - groups.size());
  if (ssw == 0.0) {
    if (ssb == 0.0) return r;
    r.f = std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.f = (ssb / r.df_between) / (ssw / r.df_within);
  // upper tail 1 - I_{d1 F/(d1 F + d2)}(d1/2, d2/2), written via the symmetry identity
  r.p = reg_incomplete_beta(r.df_within / (r.df_within + r.df_between * r.f), r.df_within / 2.0,
                            r.df_between / 2.0);
  return r;
}

std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const ClassLabel> labels, Index k, Rng& rng) {
  if (k < 2) throw ConfigError("cross-validation needs k >= 2");
  std::array<std::vector<std::size_t>, 2> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[static_cast<int>(labels[i])].push_back(i);
  for (const auto& g : groups) {
    if (static_cast<Index>(g.size()) < k) {
      throw DataError("each class needs at least k = " + std::to_string(k) + " subjects for stratified folds");
    }
  }
  std::vector<std::vector<std::size_t>> folds(static_cast<std::size_t>(k));
  std::size_t next = 0;
  for (auto& g : groups) {
    std::shuffle(g.begin(), g.end(), rng);
    for (auto i : g) folds[next++ % folds.size()].push_back(i);
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

}  // namespace mimd
