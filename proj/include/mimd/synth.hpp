#pragma once

// Synthetic cohort generator: noisy tissue volumes with one ellipsoidal
// structure per ROI whose size and brightness carry the class signal, plus
// demographic metadata.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mimd/data.hpp"

namespace mimd {

struct SynthConfig {
  Index subjects = 40;
  VolumeDims dims{48, 64, 64};
  /// 0 makes image distributions identical across classes, 1 separates them.
  double separability = 1.0;
  double noise_sd = 0.05;
  /// Clips CN MMSE to [26, 30] and AD to [0, 21] so MMSE alone separates the
  /// classes with a margin.
  bool mmse_separable = false;
  std::vector<std::string> rois{"hippocampus_left"};

  /// Throws ConfigError for too-small volumes or out-of-range knobs.
  void validate() const;
};

struct SynthSubject {
  SubjectRecord record;
  Volume volume;
  std::vector<RoiMask> masks;  // same order as SynthConfig::rois
  double severity = 0.0;       // latent variable driving the ROI appearance
};

/// Subjects alternate CN, AD, CN, ... and are fully determined by `seed`.
std::vector<SynthSubject> synth_generate(const SynthConfig& config, std::uint64_t seed);

/// Writes volumes/<id>.miv, masks/<id>_<roi>.miv and manifest.jsonl into
/// `dir`. Manifest paths are relative to `dir`.
void write_synth_dataset(const std::vector<SynthSubject>& subjects, const std::filesystem::path& dir);

/// Runs instance selection and cropping on in-memory subjects.
std::vector<Example> synth_examples(const std::vector<SynthSubject>& subjects, Index slice_count,
                                    const CropSpec& crop = {});

}  // namespace mimd
