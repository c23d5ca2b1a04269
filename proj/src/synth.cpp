#include "mimd/synth.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "mimd/error.hpp"

namespace mimd {

namespace {

// Margin beyond the 25-slice / 32x32 crop so structures never touch the border.
constexpr Index kMargin = 8;

std::string strip_hemisphere(const std::string& roi) {
  for (const char* suffix : {"_left", "_right"}) {
    std::string s(suffix);
    if (roi.size() > s.size() && roi.compare(roi.size() - s.size(), s.size(), s) == 0) {
      return roi.substr(0, roi.size() - s.size());
    }
  }
  return roi;
}

double truncated_normal(Rng& rng, double mean, double sd, double lo, double hi) {
  std::normal_distribution<double> dist(mean, sd);
  for (;;) {
    double v = dist(rng);
    if (v >= lo && v <= hi) return v;
  }
}

std::string random_visit_date(Rng& rng) {
  using namespace std::chrono;
  std::uniform_int_distribution<int> offset(0, 3650);
  year_month_day ymd{sys_days{year{2010} / January / 1} + days{offset(rng)}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

}  // namespace

void SynthConfig::validate() const {
  if (subjects < 2) throw ConfigError("synthetic cohort needs at least 2 subjects");
  if (dims.depth < 25 + kMargin || dims.height < 32 + kMargin || dims.width < 32 + kMargin) {
    throw ConfigError("synthetic volume dims must be at least (33, 40, 40)");
  }
  if (!(separability >= 0.0 && separability <= 1.0)) throw ConfigError("separability must lie in [0, 1]");
  if (!(noise_sd >= 0.0)) throw ConfigError("noise_sd must be non-negative");
  if (rois.empty()) throw ConfigError("at least one ROI name is required");
}

std::vector<SynthSubject> synth_generate(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  const VolumeDims d = config.dims;

  // Distinct base names (hemisphere stripped) share a row; left/right differ by column.
  std::vector<std::string> bases;
  for (const auto& roi : config.rois) {
    auto b = strip_hemisphere(roi);
    if (std::find(bases.begin(), bases.end(), b) == bases.end()) bases.push_back(b);
  }

  std::vector<SynthSubject> out;
  out.reserve(static_cast<std::size_t>(config.subjects));
  for (Index i = 0; i < config.subjects; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    const bool ad = i % 2 == 1;

    SynthSubject s;
    char id[16];
    std::snprintf(id, sizeof id, "S%04d", static_cast<int>(i));
    SubjectRecord& r = s.record;
    r.subject_id = id;
    r.visit_date = random_visit_date(rng);
    r.age = truncated_normal(rng, ad ? 76.62 : 74.36, 8.0, 55.0, 95.0);
    std::normal_distribution<double> mmse(ad ? 20.0 : 29.0, ad ? 4.0 : 1.0);
    r.mmse = static_cast<int>(std::clamp(std::lround(mmse(rng)), ad ? 0L : (config.mmse_separable ? 26L : 24L), ad ? (config.mmse_separable ? 21L : 26L) : 30L));
    r.gender = unit(rng) < 0.5 ? Gender::F : Gender::M;
    r.cdr = ad ? static_cast<double>(std::uniform_int_distribution<int>(1, 3)(rng)) : 0.0;
    r.volume_path = "volumes/" + r.subject_id + ".miv";
    for (const auto& roi : config.rois) r.roi_masks[roi] = "masks/" + r.subject_id + "_" + roi + ".miv";

    s.severity = (ad ? 1.0 : -1.0) * config.separability + (unit(rng) * 1.6 - 0.8);
    const double roi_radius = 6.0 - 1.5 * s.severity;
    const double roi_level = 0.65 - 0.12 * s.severity;
    const double roi_depth_radius = 8.0;

    Volume& v = s.volume;
    v.dims = d;
    v.voxels.resize(d.size());
    for (Index k = 0; k < d.size(); ++k) v.voxels(k) = static_cast<float>(0.3 + config.noise_sd * noise(rng));

    std::uniform_int_distribution<Index> jitter(-2, 2), depth_jitter(-1, 1);
    for (const auto& roi : config.rois) {
      auto base_index = static_cast<Index>(std::find(bases.begin(), bases.end(), strip_hemisphere(roi)) - bases.begin());
      const auto hemi = hemisphere_of(roi);
      const double cz = d.depth / 2 + depth_jitter(rng);
      const double cy = static_cast<double>(d.height * (base_index + 1) / static_cast<Index>(bases.size() + 1)) + jitter(rng);
      const double col = hemi == Hemisphere::Left ? 0.3 : hemi == Hemisphere::Right ? 0.7 : 0.5;
      const double cx = std::round(col * d.width) + jitter(rng);

      RoiMask m;
      m.dims = d;
      m.roi_name = roi;
      m.hemisphere = hemi;
      m.voxels = MaskArray::Zero(d.size());
      for (Index z = 0; z < d.depth; ++z) {
        for (Index y = 0; y < d.height; ++y) {
          for (Index x = 0; x < d.width; ++x) {
            double e = std::pow((z - cz) / roi_depth_radius, 2) + std::pow((y - cy) / roi_radius, 2) +
                       std::pow((x - cx) / roi_radius, 2);
            if (e > 1.0) continue;
            const Index k = (z * d.height + y) * d.width + x;
            m.voxels(k) = 1;
            v.voxels(k) = static_cast<float>(roi_level + config.noise_sd * noise(rng));
          }
        }
      }
      s.masks.push_back(std::move(m));
    }

    // Calibration voxels pin the intensity range to [0, 1] so per-volume
    // min-max scaling leaves the tissue contrast untouched.
    v.voxels = v.voxels.cwiseMax(0.0f).cwiseMin(1.0f);
    v.voxels(0) = 0.0f;
    v.voxels(1) = 1.0f;
    v.intensity_range = {v.voxels.minCoeff(), v.voxels.maxCoeff()};
    out.push_back(std::move(s));
  }
  return out;
}

void write_synth_dataset(const std::vector<SynthSubject>& subjects, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "volumes");
  std::filesystem::create_directories(dir / "masks");
  std::vector<SubjectRecord> records;
  for (const auto& s : subjects) {
    save_volume(s.volume, dir / s.record.volume_path);
    for (const auto& m : s.masks) save_volume(m, dir / s.record.roi_masks.at(m.roi_name));
    records.push_back(s.record);
  }
  write_manifest(records, dir / "manifest.jsonl");
}

std::vector<Example> synth_examples(const std::vector<SynthSubject>& subjects, Index slice_count,
                                    const CropSpec& crop) {
  std::vector<Example> out;
  out.reserve(subjects.size());
  for (const auto& s : subjects) {
    Example ex;
    ex.subject_id = s.record.subject_id;
    ex.label = cdr_to_label(s.record.cdr);
    ex.features = {s.record.age, static_cast<double>(s.record.mmse), s.record.gender};
    Volume scaled = scale_to_unit(s.volume);
    for (const auto& m : s.masks) {
      ex.images.push_back(crop_roi(scaled, select_instance(s.record, m, slice_count), crop));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace mimd
