#pragma once

// Dataset construction: subject metadata, leakage-free splits, tabular
// preprocessing, ROI instance selection, 3D ROI cropping and batch assembly.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mimd/model.hpp"
#include "mimd/random.hpp"
#include "mimd/tensor.hpp"

namespace mimd {

enum class ClassLabel : int { CN = 0, AD = 1 };
enum class Gender { F, M };
enum class Hemisphere { Left, Right, None };

std::string to_string(ClassLabel label);
ClassLabel parse_class_label(const std::string& s);
std::string to_string(Gender g);
Gender parse_gender(const std::string& s);

struct SubjectRecord {
  std::string subject_id;
  std::string visit_date;  // ISO-8601 (YYYY-MM-DD)
  double age = 0.0;
  int mmse = 0;
  Gender gender = Gender::F;
  double cdr = 0.0;
  std::string volume_path;
  std::map<std::string, std::string> roi_masks;

  /// Throws DataError unless 0 <= mmse <= 30, age > 0 and cdr is in {0, 0.5, 1, 2, 3}.
  void validate() const;
};

/// CDR 0 -> CN, CDR >= 1 -> AD. CDR 0.5 is outside the study classes and throws.
ClassLabel cdr_to_label(double cdr);

/// Keeps one record per subject: the latest visit_date, ties broken by the
/// lexicographically larger volume_path. Output is ordered by subject_id.
std::vector<SubjectRecord> select_latest_visit(std::span<const SubjectRecord> records);

/// Down-samples the majority class uniformly at random so both classes have
/// k = min(class counts) subjects. Output keeps the input's relative order.
std::vector<SubjectRecord> undersample_balance(std::span<const SubjectRecord> records, Rng& rng);

struct SubjectSplit {
  std::vector<SubjectRecord> train, validation, test;
};

/// Stratified index split into (train, validation, test) positions, each
/// sorted ascending. Validation/test sizes are round(n * ratio) of the whole
/// set; classes share them by largest remainder and the rest goes to train.
std::array<std::vector<std::size_t>, 3> split_indices(std::span<const ClassLabel> labels,
                                                      std::array<double, 3> ratios, Rng& rng);

/// Stratified per-subject split. Validation/test sizes are the rounded ratio
/// targets of the whole set; the remainder goes to train.
SubjectSplit split_subjects(std::span<const SubjectRecord> records, std::array<double, 3> ratios, Rng& rng);

// ---- tabular preprocessing --------------------------------------------------

/// (v - lo) / (hi - lo), clamped to [0, 1]. Throws DataError when hi <= lo.
std::vector<double> minmax_scale(std::span<const double> values, double fit_min, double fit_max);
double minmax_scale(double value, double fit_min, double fit_max);

/// F -> [1, 0], M -> [0, 1]. Unknown categories throw DataError.
std::array<double, 2> one_hot_gender(const std::string& gender);

struct TabularFeatures {
  double age = 0.0;
  double mmse = 0.0;
  Gender gender = Gender::F;
};

/// Min/max statistics fitted on a training split; produces
/// [age_scaled, mmse_scaled, gender one-hot (2)].
struct TabularScaler {
  double age_min = 0, age_max = 1, mmse_min = 0, mmse_max = 1;

  static TabularScaler fit(std::span<const TabularFeatures> training);
  Eigen::VectorXd transform(const TabularFeatures& f) const;
  static constexpr Index width = 4;
};

// ---- volumes and masks ------------------------------------------------------

struct VolumeDims {
  Index depth = 0, height = 0, width = 0;
  Index size() const { return depth * height * width; }
  friend bool operator==(const VolumeDims&, const VolumeDims&) = default;
};

/// Scalar voxel grid, row-major with the slice (depth) axis first.
struct Volume {
  VolumeDims dims;
  Eigen::ArrayXf voxels;
  std::pair<double, double> intensity_range{0.0, 0.0};  // (min, max) before scaling

  float at(Index z, Index y, Index x) const { return voxels((z * dims.height + y) * dims.width + x); }
};

using MaskArray = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>;

struct RoiMask {
  VolumeDims dims;
  MaskArray voxels;
  std::string roi_name;
  Hemisphere hemisphere = Hemisphere::None;

  bool at(Index z, Index y, Index x) const { return voxels((z * dims.height + y) * dims.width + x) != 0; }
  Index count() const;
};

/// Hemisphere implied by a "_left" / "_right" ROI name suffix.
Hemisphere hemisphere_of(const std::string& roi_name);

/// Min-max rescales voxels into [0, 1], recording the original range. A
/// constant volume maps to zeros.
Volume scale_to_unit(const Volume& raw);

// Container "MIV1": magic, u32 version, u32 ndim, u32 dims[ndim], u32 dtype
// (1 = float32, 2 = uint8), little-endian row-major payload.
std::vector<char> encode_volume(const Volume& v);
std::vector<char> encode_mask(const RoiMask& m);
Volume decode_volume(const std::vector<char>& bytes);
RoiMask decode_mask(const std::vector<char>& bytes);
void save_volume(const Volume& v, const std::filesystem::path& path);
void save_volume(const RoiMask& m, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);
RoiMask load_mask(const std::filesystem::path& path, const std::string& roi_name = {});

// ---- instance selection -----------------------------------------------------

struct Centroid {
  Index cx = 0;  // row (height axis)
  Index cy = 0;  // column (width axis)
  friend bool operator==(const Centroid&, const Centroid&) = default;
};

struct InstanceRecord {
  std::string subject_id;
  ClassLabel class_label = ClassLabel::CN;
  std::string roi_name;
  Index slice_start = 0;
  Index slice_count = 25;
  Centroid centroid;
};

/// Start of the contiguous `window`-slice run with the largest mask voxel
/// count; ties pick the smallest start.
Index slice_window_select(const RoiMask& mask, Index window);

/// Per-slice centroid: mean mask-pixel coordinate rounded half-up. Slices
/// without mask pixels are absent from the result.
std::vector<Centroid> slice_centroids(const RoiMask& mask, Index slice_start, Index slice_count);

/// Most frequent value; ties resolve to the smallest value.
Index statistical_mode(std::span<const Index> values);

/// Per-axis statistical mode of the per-slice centroids in the window.
Centroid modal_centroid(const RoiMask& mask, Index slice_start, Index slice_count);

InstanceRecord select_instance(const SubjectRecord& record, const RoiMask& mask, Index slice_count);

struct CropSpec {
  Index height = 32, width = 32, channels = 3;
};

/// (slice_count, H', W', C) crop centred on the instance centroid. Windows
/// crossing the plane border are shifted inside; the grey value is
/// replicated across channels.
Tensor crop_roi(const Volume& scaled, const InstanceRecord& instance, const CropSpec& crop = {});

/// Row-major (top-left row, top-left column) of the crop window actually used.
std::pair<Index, Index> crop_origin(const VolumeDims& dims, const Centroid& c, const CropSpec& crop);

// ---- examples and batches ---------------------------------------------------

/// One subject ready for training: raw tabular features and one crop per ROI.
struct Example {
  std::string subject_id;
  ClassLabel label = ClassLabel::CN;
  TabularFeatures features;
  std::vector<Tensor> images;
};

struct MixedBatch {
  Eigen::MatrixXd tabular;     // B x F, values in [0, 1]
  std::vector<Tensor> images;  // per branch: (B, T, H', W', C)
  std::vector<ClassLabel> labels;
  std::vector<std::string> subject_ids;

  Index size() const { return static_cast<Index>(labels.size()); }
  MixedSample sample(Index b) const;
};

/// Index batches in order: a seeded shuffle (when `shuffle`), cut into
/// batch_size chunks; the final short chunk is kept unless drop_last.
std::vector<std::vector<std::size_t>> batch_plan(std::size_t count, Index batch_size, Rng& rng,
                                                 bool drop_last = false, bool shuffle = true);

MixedBatch assemble_batch(std::span<const Example> examples, std::span<const std::size_t> indices,
                          const TabularScaler& scaler);

std::vector<MixedBatch> build_batches(std::span<const Example> examples, const TabularScaler& scaler,
                                      Index batch_size, Rng& rng, bool drop_last = false,
                                      bool shuffle = true);

// ---- text formats -------------------------------------------------------------

/// One JSON object per line: subject_id, visit_date, age, mmse, gender, cdr, volume, rois.
std::vector<SubjectRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(std::span<const SubjectRecord> records, const std::filesystem::path& path);

/// CSV with header subject_id,class,roi,slice_start,slice_count,cx,cy.
std::vector<InstanceRecord> read_instances(const std::filesystem::path& path);
void write_instances(std::span<const InstanceRecord> instances, const std::filesystem::path& path);

/// Loads volumes for every subject that has an instance row for each ROI in
/// `rois` (in that order) and crops them. Relative paths resolve against
/// `base_dir`.
std::vector<Example> load_examples(std::span<const SubjectRecord> records,
                                   std::span<const InstanceRecord> instances,
                                   std::span<const std::string> rois, const CropSpec& crop,
                                   const std::filesystem::path& base_dir);

}  // namespace mimd
