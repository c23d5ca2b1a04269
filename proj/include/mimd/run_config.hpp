#pragma once

// JSON run configuration shared by the train, cv, tune and eval commands.

#include <array>
#include <string>

#include "mimd/cv.hpp"
#include "mimd/model.hpp"
#include "mimd/trainer.hpp"

namespace mimd {

struct RunConfig {
  ModelConfig model;  // mode and num_branches are set from the command line
  TrainConfig train;
  std::array<double, 3> split_ratios{0.70, 0.15, 0.15};  // train / validation / test
  double test_ratio = 0.15;              // cross-validation holdout
  double inner_validation_ratio = 0.15;  // cross-validation inner split

  CropSpec crop() const { return {model.image.height, model.image.width, model.image.channels}; }
  CvConfig cv(Index folds, std::uint64_t seed, Index jobs) const;
};

/// Missing keys keep their defaults; unknown keys, wrong types and invalid
/// values throw ConfigError.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Every key, defaults included, in a fixed order.
std::string run_config_json(const RunConfig& config);

}  // namespace mimd
