#include "mimd/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mimd/error.hpp"

namespace mimd {

std::string to_string(ClassLabel label) { return label == ClassLabel::CN ? "CN" : "AD"; }

ClassLabel parse_class_label(const std::string& s) {
  if (s == "CN") return ClassLabel::CN;
  if (s == "AD") return ClassLabel::AD;
  throw DataError("unknown class label '" + s + "'");
}

std::string to_string(Gender g) { return g == Gender::F ? "F" : "M"; }

Gender parse_gender(const std::string& s) {
  if (s == "F") return Gender::F;
  if (s == "M") return Gender::M;
  throw DataError("unknown gender category '" + s + "'");
}

void SubjectRecord::validate() const {
  if (subject_id.empty()) throw DataError("record without subject_id");
  if (mmse < 0 || mmse > 30) throw DataError(subject_id + ": mmse " + std::to_string(mmse) + " outside [0, 30]");
  if (!(age > 0.0)) throw DataError(subject_id + ": age must be positive");
  static constexpr double kCdr[] = {0.0, 0.5, 1.0, 2.0, 3.0};
  if (std::find(std::begin(kCdr), std::end(kCdr), cdr) == std::end(kCdr)) {
    throw DataError(subject_id + ": cdr " + std::to_string(cdr) + " not in {0, 0.5, 1, 2, 3}");
  }
}

ClassLabel cdr_to_label(double cdr) {
  if (cdr == 0.0) return ClassLabel::CN;
  if (cdr >= 1.0) return ClassLabel::AD;
  throw DataError("CDR " + std::to_string(cdr) + " is outside the study classes (CN: 0, AD: >= 1)");
}

std::vector<SubjectRecord> select_latest_visit(std::span<const SubjectRecord> records) {
  std::map<std::string, const SubjectRecord*> latest;
  for (const auto& r : records) {
    auto [it, inserted] = latest.try_emplace(r.subject_id, &r);
    if (inserted) continue;
    const SubjectRecord& cur = *it->second;
    if (r.visit_date > cur.visit_date || (r.visit_date == cur.visit_date && r.volume_path > cur.volume_path)) {
      it->second = &r;
    }
  }
  std::vector<SubjectRecord> out;
  out.reserve(latest.size());
  for (const auto& [_, r] : latest) out.push_back(*r);
  return out;
}

namespace {

std::array<std::vector<std::size_t>, 2> indices_by_class(std::span<const SubjectRecord> records) {
  std::array<std::vector<std::size_t>, 2> groups;
  for (std::size_t i = 0; i < records.size(); ++i) {
    groups[static_cast<int>(cdr_to_label(records[i].cdr))].push_back(i);
  }
  return groups;
}

}  // namespace

std::vector<SubjectRecord> undersample_balance(std::span<const SubjectRecord> records, Rng& rng) {
  auto groups = indices_by_class(records);
  if (groups[0].empty() || groups[1].empty()) throw DataError("undersample_balance: a class has no subjects");
  std::size_t k = std::min(groups[0].size(), groups[1].size());
  std::vector<bool> keep(records.size(), false);
  for (auto& g : groups) {
    if (g.size() > k) std::shuffle(g.begin(), g.end(), rng);
    for (std::size_t i = 0; i < k; ++i) keep[g[i]] = true;
  }
  std::vector<SubjectRecord> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (keep[i]) out.push_back(records[i]);
  }
  return out;
}

std::array<std::vector<std::size_t>, 3> split_indices(std::span<const ClassLabel> labels,
                                                      std::array<double, 3> ratios, Rng& rng) {
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  const std::size_t n = labels.size();
  if (n < 3) throw DataError("fewer subjects than sets");

  std::array<std::vector<std::size_t>, 2> groups;
  for (std::size_t i = 0; i < n; ++i) groups[static_cast<int>(labels[i])].push_back(i);
  for (auto& g : groups) std::shuffle(g.begin(), g.end(), rng);

  // held[set][class]: how many of each class go to validation (0) and test (1).
  std::array<std::array<std::size_t, 2>, 2> held{};
  std::array<std::size_t, 2> used{0, 0};
  for (int s = 0; s < 2; ++s) {
    auto total = static_cast<std::size_t>(std::lround(static_cast<double>(n) * ratios[s + 1]));
    std::array<double, 2> frac{};
    std::size_t assigned = 0;
    for (int c = 0; c < 2; ++c) {
      double share = static_cast<double>(groups[c].size()) * static_cast<double>(total) / static_cast<double>(n);
      held[s][c] = std::min(static_cast<std::size_t>(std::floor(share)), groups[c].size() - used[c]);
      frac[c] = share - std::floor(share);
      assigned += held[s][c];
    }
    while (assigned < total) {
      int best = -1;
      for (int c = 0; c < 2; ++c) {
        if (used[c] + held[s][c] >= groups[c].size()) continue;
        if (best < 0 || frac[c] > frac[best] ||
            (frac[c] == frac[best] && used[c] + held[s][c] < used[best] + held[s][best])) {
          best = c;
        }
      }
      if (best < 0) break;
      ++held[s][best];
      frac[best] = -1.0;
      ++assigned;
    }
    for (int c = 0; c < 2; ++c) used[c] += held[s][c];
  }

  std::array<std::vector<std::size_t>, 3> out;
  for (int c = 0; c < 2; ++c) {
    const auto& g = groups[c];
    std::size_t pos = 0;
    for (std::size_t i = 0; i < held[0][c]; ++i) out[1].push_back(g[pos++]);
    for (std::size_t i = 0; i < held[1][c]; ++i) out[2].push_back(g[pos++]);
    while (pos < g.size()) out[0].push_back(g[pos++]);
  }
  for (auto& set : out) std::sort(set.begin(), set.end());
  return out;
}

SubjectSplit split_subjects(std::span<const SubjectRecord> records, std::array<double, 3> ratios, Rng& rng) {
  std::vector<ClassLabel> labels;
  for (const auto& r : records) labels.push_back(cdr_to_label(r.cdr));
  auto idx = split_indices(labels, ratios, rng);
  SubjectSplit out;
  for (auto i : idx[0]) out.train.push_back(records[i]);
  for (auto i : idx[1]) out.validation.push_back(records[i]);
  for (auto i : idx[2]) out.test.push_back(records[i]);
  return out;
}

// ---- tabular ------------------------------------------------------------------

double minmax_scale(double value, double fit_min, double fit_max) {
  if (!(fit_max > fit_min)) throw DataError("constant feature: min-max fit range is degenerate");
  return std::clamp((value - fit_min) / (fit_max - fit_min), 0.0, 1.0);
}

std::vector<double> minmax_scale(std::span<const double> values, double fit_min, double fit_max) {
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(minmax_scale(v, fit_min, fit_max));
  return out;
}

std::array<double, 2> one_hot_gender(const std::string& gender) {
  return parse_gender(gender) == Gender::F ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0};
}

TabularScaler TabularScaler::fit(std::span<const TabularFeatures> training) {
  if (training.empty()) throw DataError("cannot fit scaler on an empty training split");
  TabularScaler s;
  s.age_min = s.age_max = training[0].age;
  s.mmse_min = s.mmse_max = training[0].mmse;
  for (const auto& f : training) {
    s.age_min = std::min(s.age_min, f.age);
    s.age_max = std::max(s.age_max, f.age);
    s.mmse_min = std::min(s.mmse_min, f.mmse);
    s.mmse_max = std::max(s.mmse_max, f.mmse);
  }
  if (!(s.age_max > s.age_min)) throw DataError("constant feature: age");
  if (!(s.mmse_max > s.mmse_min)) throw DataError("constant feature: mmse");
  return s;
}

Eigen::VectorXd TabularScaler::transform(const TabularFeatures& f) const {
  Eigen::VectorXd v(width);
  v << minmax_scale(f.age, age_min, age_max), minmax_scale(f.mmse, mmse_min, mmse_max),
      f.gender == Gender::F ? 1.0 : 0.0, f.gender == Gender::M ? 1.0 : 0.0;
  return v;
}

// ---- volumes --------------------------------------------------------------------

Index RoiMask::count() const { return (voxels != 0).count(); }

Hemisphere hemisphere_of(const std::string& roi_name) {
  auto ends_with = [&](const std::string& suffix) {
    return roi_name.size() >= suffix.size() &&
           roi_name.compare(roi_name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (ends_with("_left")) return Hemisphere::Left;
  if (ends_with("_right")) return Hemisphere::Right;
  return Hemisphere::None;
}

Volume scale_to_unit(const Volume& raw) {
  Volume out;
  out.dims = raw.dims;
  if (raw.voxels.size() == 0) throw DataError("empty volume");
  double lo = raw.voxels.minCoeff(), hi = raw.voxels.maxCoeff();
  out.intensity_range = {lo, hi};
  if (hi > lo) {
    out.voxels = ((raw.voxels.cast<double>() - lo) / (hi - lo)).cwiseMax(0.0).cwiseMin(1.0).cast<float>();
  } else {
    out.voxels = Eigen::ArrayXf::Zero(raw.voxels.size());
  }
  return out;
}

// ---- instance selection ---------------------------------------------------------

namespace {

std::vector<Index> slice_counts(const RoiMask& mask) {
  const Index plane = mask.dims.height * mask.dims.width;
  std::vector<Index> counts(static_cast<std::size_t>(mask.dims.depth));
  for (Index z = 0; z < mask.dims.depth; ++z) {
    counts[z] = (mask.voxels.segment(z * plane, plane) != 0).count();
  }
  return counts;
}

}  // namespace

Index slice_window_select(const RoiMask& mask, Index window) {
  if (window < 1) throw ConfigError("slice window must be at least 1");
  if (mask.dims.depth < window) {
    throw DataError("volume depth " + std::to_string(mask.dims.depth) + " is smaller than the slice window " +
                    std::to_string(window));
  }
  auto counts = slice_counts(mask);
  Index run = std::accumulate(counts.begin(), counts.begin() + window, Index{0});
  if (std::accumulate(counts.begin(), counts.end(), Index{0}) == 0) {
    throw DataError("empty ROI mask" + (mask.roi_name.empty() ? std::string() : " '" + mask.roi_name + "'"));
  }
  Index best = run, best_start = 0;
  for (Index s = 1; s + window <= mask.dims.depth; ++s) {
    run += counts[s + window - 1] - counts[s - 1];
    if (run > best) {
      best = run;
      best_start = s;
    }
  }
  return best_start;
}

std::vector<Centroid> slice_centroids(const RoiMask& mask, Index slice_start, Index slice_count) {
  if (slice_start < 0 || slice_count < 1 || slice_start + slice_count > mask.dims.depth) {
    throw DataError("slice window outside the volume depth");
  }
  std::vector<Centroid> out;
  for (Index z = slice_start; z < slice_start + slice_count; ++z) {
    Index n = 0, sum_row = 0, sum_col = 0;
    for (Index y = 0; y < mask.dims.height; ++y) {
      for (Index x = 0; x < mask.dims.width; ++x) {
        if (mask.at(z, y, x)) {
          ++n;
          sum_row += y;
          sum_col += x;
        }
      }
    }
    if (n == 0) continue;
    // floor(sum / n + 1/2) in exact integer arithmetic
    out.push_back({(2 * sum_row + n) / (2 * n), (2 * sum_col + n) / (2 * n)});
  }
  return out;
}

Index statistical_mode(std::span<const Index> values) {
  if (values.empty()) throw DataError("mode of an empty sequence");
  std::map<Index, Index> freq;
  for (Index v : values) ++freq[v];
  Index best = freq.begin()->first, best_count = 0;
  for (const auto& [v, c] : freq) {
    if (c > best_count) {
      best = v;
      best_count = c;
    }
  }
  return best;
}

Centroid modal_centroid(const RoiMask& mask, Index slice_start, Index slice_count) {
  auto cs = slice_centroids(mask, slice_start, slice_count);
  if (cs.empty()) throw DataError("no mask pixels inside the slice window");
  std::vector<Index> rows, cols;
  for (const auto& c : cs) {
    rows.push_back(c.cx);
    cols.push_back(c.cy);
  }
  return {statistical_mode(rows), statistical_mode(cols)};
}

InstanceRecord select_instance(const SubjectRecord& record, const RoiMask& mask, Index slice_count) {
  InstanceRecord inst;
  inst.subject_id = record.subject_id;
  inst.class_label = cdr_to_label(record.cdr);
  inst.roi_name = mask.roi_name;
  inst.slice_count = slice_count;
  try {
    inst.slice_start = slice_window_select(mask, slice_count);
    inst.centroid = modal_centroid(mask, inst.slice_start, slice_count);
  } catch (const DataError& e) {
    throw DataError(record.subject_id + ": " + e.what());
  }
  return inst;
}

std::pair<Index, Index> crop_origin(const VolumeDims& dims, const Centroid& c, const CropSpec& crop) {
  if (dims.height < crop.height || dims.width < crop.width) {
    throw DataError("slice plane " + std::to_string(dims.height) + "x" + std::to_string(dims.width) +
                    " is smaller than the crop window");
  }
  Index top = std::clamp(c.cx - crop.height / 2, Index{0}, dims.height - crop.height);
  Index left = std::clamp(c.cy - crop.width / 2, Index{0}, dims.width - crop.width);
  return {top, left};
}

Tensor crop_roi(const Volume& scaled, const InstanceRecord& instance, const CropSpec& crop) {
  if (crop.channels < 1) throw ConfigError("crop needs at least one channel");
  const Index t0 = instance.slice_start, tn = instance.slice_count;
  if (t0 < 0 || tn < 1 || t0 + tn > scaled.dims.depth) {
    throw DataError(instance.subject_id + ": slice window outside the volume depth");
  }
  auto [top, left] = crop_origin(scaled.dims, instance.centroid, crop);
  Array out(tn * crop.height * crop.width * crop.channels);
  Index k = 0;
  for (Index z = t0; z < t0 + tn; ++z) {
    for (Index y = top; y < top + crop.height; ++y) {
      for (Index x = left; x < left + crop.width; ++x) {
        double v = scaled.at(z, y, x);
        for (Index ch = 0; ch < crop.channels; ++ch) out(k++) = v;
      }
    }
  }
  return Tensor({tn, crop.height, crop.width, crop.channels}, std::move(out));
}

// ---- batches -----------------------------------------------------------------------

MixedSample MixedBatch::sample(Index b) const {
  if (b < 0 || b >= size()) throw ShapeError("batch index out of range");
  MixedSample s;
  Array tab = tabular.row(b).transpose().array();
  s.tabular = Tensor({tabular.cols()}, std::move(tab));
  for (const auto& img : images) {
    Shape one(img.shape().begin() + 1, img.shape().end());
    Index per = shape_size(one);
    s.images.emplace_back(one, Array(img.values().segment(b * per, per)));
  }
  return s;
}

std::vector<std::vector<std::size_t>> batch_plan(std::size_t count, Index batch_size, Rng& rng, bool drop_last,
                                                 bool shuffle) {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (count == 0) throw DataError("cannot batch an empty instance list");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t i = 0; i < count; i += bs) {
    std::size_t end = std::min(count, i + bs);
    if (drop_last && end - i < bs) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

MixedBatch assemble_batch(std::span<const Example> examples, std::span<const std::size_t> indices,
                          const TabularScaler& scaler) {
  if (indices.empty()) throw DataError("empty batch");
  const Index B = static_cast<Index>(indices.size());
  const auto& first = examples[indices[0]];
  const std::size_t branches = first.images.size();

  MixedBatch batch;
  batch.tabular.resize(B, TabularScaler::width);
  std::vector<Array> buffers(branches);
  for (std::size_t k = 0; k < branches; ++k) buffers[k].resize(B * first.images[k].size());

  for (Index b = 0; b < B; ++b) {
    const Example& ex = examples[indices[b]];
    if (ex.images.size() != branches) throw DataError(ex.subject_id + ": inconsistent number of ROI crops");
    batch.tabular.row(b) = scaler.transform(ex.features).transpose();
    batch.labels.push_back(ex.label);
    batch.subject_ids.push_back(ex.subject_id);
    for (std::size_t k = 0; k < branches; ++k) {
      if (ex.images[k].shape() != first.images[k].shape()) {
        throw ShapeError(ex.subject_id + ": crop shape " + shape_string(ex.images[k].shape()) + " vs " +
                         shape_string(first.images[k].shape()));
      }
      const Index per = ex.images[k].size();
      buffers[k].segment(b * per, per) = ex.images[k].values();
    }
  }
  for (std::size_t k = 0; k < branches; ++k) {
    Shape s{B};
    s.insert(s.end(), first.images[k].shape().begin(), first.images[k].shape().end());
    batch.images.emplace_back(s, std::move(buffers[k]));
  }
  return batch;
}

std::vector<MixedBatch> build_batches(std::span<const Example> examples, const TabularScaler& scaler,
                                      Index batch_size, Rng& rng, bool drop_last, bool shuffle) {
  std::vector<MixedBatch> out;
  for (const auto& idx : batch_plan(examples.size(), batch_size, rng, drop_last, shuffle)) {
    out.push_back(assemble_batch(examples, idx, scaler));
  }
  return out;
}

}  // namespace mimd
