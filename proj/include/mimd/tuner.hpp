#pragma once

// Hyperband over epochs as the resource: random configurations, successive
// halving inside each bracket, and a CSV trial log.

#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mimd/random.hpp"
#include "mimd/trainer.hpp"

namespace mimd {

struct SearchDimension {
  enum class Kind { LogUniform, Uniform, Choice };
  std::string name;
  Kind kind = Kind::Uniform;
  double lo = 0, hi = 1;
  std::vector<double> choices;
};

struct SearchSpace {
  std::vector<SearchDimension> dims;

  /// Throws ConfigError for lo >= hi, non-positive log bounds, empty choice
  /// sets or duplicate names.
  void validate() const;

  /// {"name": {"log_uniform": [lo, hi]} | {"uniform": [lo, hi]} | {"choice": [...]}, ...}
  static SearchSpace from_json(const std::string& text);
  /// initial_lr log-uniform 1e-5..1e-3, dropout {0.1,0.2,0.3}, batch_size {4,6,8}, tubelet_t {5,25}.
  static SearchSpace defaults();
};

using TrialConfig = std::map<std::string, double>;

/// Integral values are written as JSON integers.
std::string config_json(const TrialConfig& config);

TrialConfig sample_config(const SearchSpace& space, Rng& rng);

struct TrialResult {
  Index trial_id = 0;
  TrialConfig config;
  Index resource = 0;  // epochs
  double score = 0;    // validation accuracy
};

struct TrialLogEntry {
  TrialResult trial;
  Index bracket = 0;
  Index round = 0;
};

struct Bracket {
  Index s = 0;
  Index n = 0;         // configurations sampled
  double r = 0;        // initial resource, R * eta^-s
  Index rounds = 0;    // s + 1
};

/// s_max = floor(log_eta R); brackets s = s_max..0.
std::vector<Bracket> bracket_schedule(double R, Index eta);

/// Epochs actually spent for a real-valued resource: round to nearest, at least 1.
Index resource_epochs(double r);

/// Score for (config, epochs); must be deterministic and lie in [0, 1].
using TrialObjective = std::function<double(const TrialConfig&, Index)>;

/// `configs` are numbered first_trial_id, first_trial_id + 1, ... Evaluates all
/// survivors at the current resource, keeps the top floor(n / eta) (at least 1,
/// ties to the lower trial id) and multiplies the resource by eta, until one
/// survivor has been evaluated or the resource would exceed R. Returns the
/// last round's results. Every evaluation is appended to `log` in trial-id
/// order within a round. `jobs` evaluations of a round may run concurrently.
std::vector<TrialResult> successive_halving(std::span<const TrialConfig> configs, const TrialObjective& objective,
                                            double r0, Index eta, double R, Index first_trial_id = 0,
                                            Index bracket = 0, std::vector<TrialLogEntry>* log = nullptr,
                                            Index jobs = 1);

struct HyperbandResult {
  TrialResult best;  // highest score in the log; ties to the lowest trial id, then the larger resource
  std::vector<TrialLogEntry> log;
};

HyperbandResult hyperband_run(const SearchSpace& space, const TrialObjective& objective, double R, Index eta,
                              std::uint64_t seed, Index jobs = 1);

/// CSV trial_id,bracket,round,resource,score,config with the config JSON quoted.
void write_trial_log(std::span<const TrialLogEntry> log, const std::filesystem::path& path);

/// Overrides the fields named by the config: initial_lr, dropout, batch_size,
/// tubelet_t, embed_dim, depth, heads. Throws ConfigError for other names.
void apply_config(const TrialConfig& config, ModelConfig& model, TrainConfig& train);

/// 1 - |lr - 3e-4| / 1e-3, ignoring the resource.
double toy_objective(const TrialConfig& config, Index resource);

/// Trains on `training` for the given epochs and scores the best validation
/// accuracy. Model initialization and training use `seed` for every trial.
TrialObjective training_objective(std::vector<Example> training, std::vector<Example> validation,
                             ModelConfig model, TrainConfig train, std::uint64_t seed);

}  // namespace mimd
