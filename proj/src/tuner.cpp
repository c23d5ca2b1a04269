#include "mimd/tuner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <memory>
#include <set>
#include <thread>

#include <json.hpp>

#include "mimd/error.hpp"

namespace mimd {

namespace {

using ordered_json = nlohmann::ordered_json;

bool is_integral(double v) { return std::isfinite(v) && std::abs(v) < 1e15 && v == std::floor(v); }

Index as_index(const std::string& name, double v) {
  if (!is_integral(v)) throw ConfigError(name + " must be an integer, got " + std::to_string(v));
  return static_cast<Index>(v);
}

std::pair<double, double> bounds(const std::string& name, const ordered_json& v) {
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
    throw ConfigError("search dimension " + name + " needs [lo, hi]");
  }
  return {v[0].get<double>(), v[1].get<double>()};
}

// Runs fn(i) for i in [0, count) on up to `jobs` threads; rethrows the first
// failure by index.
template <class Fn>
void parallel_for(std::size_t count, Index jobs, Fn&& fn) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < count;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(std::max<Index>(jobs, 1)), count);
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t t = 0; t < workers; ++t) threads.emplace_back(worker);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

void SearchSpace::validate() const {
  std::set<std::string> names;
  for (const auto& d : dims) {
    if (!names.insert(d.name).second) throw ConfigError("duplicate search dimension " + d.name);
    switch (d.kind) {
      case SearchDimension::Kind::LogUniform:
        if (!(d.lo > 0.0)) throw ConfigError(d.name + ": log-uniform bounds must be positive");
        [[fallthrough]];
      case SearchDimension::Kind::Uniform:
        if (!(d.lo < d.hi)) throw ConfigError(d.name + ": lo must be below hi");
        break;
      case SearchDimension::Kind::Choice:
        if (d.choices.empty()) throw ConfigError(d.name + ": empty choice set");
        break;
    }
  }
}

SearchSpace SearchSpace::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("search space: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("search space must be a JSON object");
  SearchSpace space;
  for (const auto& [name, spec] : j.items()) {
    if (!spec.is_object() || spec.size() != 1) {
      throw ConfigError("search dimension " + name + " needs exactly one of log_uniform, uniform, choice");
    }
    SearchDimension d;
    d.name = name;
    const std::string kind = spec.begin().key();
    const ordered_json& value = spec.begin().value();
    if (kind == "log_uniform" || kind == "uniform") {
      d.kind = kind == "uniform" ? SearchDimension::Kind::Uniform : SearchDimension::Kind::LogUniform;
      std::tie(d.lo, d.hi) = bounds(name, value);
    } else if (kind == "choice") {
      d.kind = SearchDimension::Kind::Choice;
      if (!value.is_array()) throw ConfigError("search dimension " + name + ": choice needs an array");
      for (const auto& c : value) {
        if (!c.is_number()) throw ConfigError("search dimension " + name + ": choices must be numbers");
        d.choices.push_back(c.get<double>());
      }
    } else {
      throw ConfigError("search dimension " + name + ": unknown kind " + kind);
    }
    space.dims.push_back(std::move(d));
  }
  space.validate();
  return space;
}

SearchSpace SearchSpace::defaults() {
  using K = SearchDimension::Kind;
  SearchSpace s;
  s.dims.push_back({"initial_lr", K::LogUniform, 1e-5, 1e-3, {}});
  s.dims.push_back({"dropout", K::Choice, 0, 0, {0.1, 0.2, 0.3}});
  s.dims.push_back({"batch_size", K::Choice, 0, 0, {4, 6, 8}});
  s.dims.push_back({"tubelet_t", K::Choice, 0, 0, {5, 25}});
  return s;
}

std::string config_json(const TrialConfig& config) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, v] : config) {
    if (is_integral(v)) {
      j[name] = static_cast<std::int64_t>(v);
    } else {
      j[name] = v;
    }
  }
  return j.dump();
}

TrialConfig sample_config(const SearchSpace& space, Rng& rng) {
  TrialConfig out;
  for (const auto& d : space.dims) {
    switch (d.kind) {
      case SearchDimension::Kind::LogUniform: {
        std::uniform_real_distribution<double> u(std::log(d.lo), std::log(d.hi));
        out[d.name] = std::clamp(std::exp(u(rng)), d.lo, d.hi);
        break;
      }
      case SearchDimension::Kind::Uniform:
        out[d.name] = std::uniform_real_distribution<double>(d.lo, d.hi)(rng);
        break;
      case SearchDimension::Kind::Choice:
        out[d.name] = d.choices[std::uniform_int_distribution<std::size_t>(0, d.choices.size() - 1)(rng)];
        break;
    }
  }
  return out;
}

std::vector<Bracket> bracket_schedule(double R, Index eta) {
  if (!(R >= 1.0) || !std::isfinite(R)) throw ConfigError("max resource R must be >= 1");
  if (eta < 2) throw ConfigError("eta must be >= 2");
  // Integer search instead of floor(log R / log eta), which misrounds exact powers.
  Index s_max = 0;
  for (double p = static_cast<double>(eta); p <= R * (1 + 1e-12); p *= static_cast<double>(eta)) ++s_max;

  std::vector<Bracket> out;
  for (Index s = s_max; s >= 0; --s) {
    Index eta_s = 1;
    for (Index i = 0; i < s; ++i) eta_s *= eta;
    Bracket b;
    b.s = s;
    b.n = ((s_max + 1) * eta_s + s) / (s + 1);  // ceil((s_max+1) * eta^s / (s+1))
    b.r = R / static_cast<double>(eta_s);
    b.rounds = s + 1;
    out.push_back(b);
  }
  return out;
}

Index resource_epochs(double r) { return std::max<Index>(1, std::llround(r)); }

std::vector<TrialResult> successive_halving(std::span<const TrialConfig> configs, const TrialObjective& objective,
                                            double r0, Index eta, double R, Index first_trial_id,
                                            Index bracket, std::vector<TrialLogEntry>* log, Index jobs) {
  if (configs.empty()) throw ConfigError("successive halving needs at least one configuration");
  if (eta < 2) throw ConfigError("eta must be >= 2");
  if (!(r0 > 0.0) || !(R >= r0 * (1 - 1e-12))) throw ConfigError("need 0 < r0 <= R");

  std::vector<TrialResult> alive;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    alive.push_back({first_trial_id + static_cast<Index>(i), configs[i], 0, 0.0});
  }
  double r = r0;
  for (Index round = 0;; ++round) {
    const Index epochs = resource_epochs(r);
    parallel_for(alive.size(), jobs, [&](std::size_t i) {
      const double score = objective(alive[i].config, epochs);
      if (!(score >= 0.0 && score <= 1.0)) {
        throw DataError("objective returned score " + std::to_string(score) + " outside [0, 1]");
      }
      alive[i].resource = epochs;
      alive[i].score = score;
    });
    if (log) {
      for (const auto& t : alive) log->push_back({t, bracket, round});
    }
    const double next_r = r * static_cast<double>(eta);
    if (alive.size() == 1 || next_r > R * (1 + 1e-12)) return alive;

    const auto keep = std::max<std::size_t>(1, alive.size() / static_cast<std::size_t>(eta));
    std::stable_sort(alive.begin(), alive.end(), [](const TrialResult& a, const TrialResult& b) {
      return a.score != b.score ? a.score > b.score : a.trial_id < b.trial_id;
    });
    alive.resize(keep);
    std::sort(alive.begin(), alive.end(),
              [](const TrialResult& a, const TrialResult& b) { return a.trial_id < b.trial_id; });
    r = next_r;
  }
}

HyperbandResult hyperband_run(const SearchSpace& space, const TrialObjective& objective, double R, Index eta,
                              std::uint64_t seed, Index jobs) {
  space.validate();
  HyperbandResult out;
  Rng rng(seed);
  Index next_id = 0;
  for (const auto& b : bracket_schedule(R, eta)) {
    std::vector<TrialConfig> configs;
    for (Index i = 0; i < b.n; ++i) configs.push_back(sample_config(space, rng));
    successive_halving(configs, objective, b.r, eta, R, next_id, b.s, &out.log, jobs);
    next_id += b.n;
  }
  const TrialResult* best = nullptr;
  for (const auto& e : out.log) {
    const auto& t = e.trial;
    if (!best || t.score > best->score ||
        (t.score == best->score &&
         (t.trial_id < best->trial_id || (t.trial_id == best->trial_id && t.resource > best->resource)))) {
      best = &t;
    }
  }
  out.best = *best;
  return out;
}

void write_trial_log(std::span<const TrialLogEntry> log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot write " + path.string());
  out << "trial_id,bracket,round,resource,score,config\n";
  for (const auto& e : log) {
    std::string cfg = config_json(e.trial.config), quoted = "\"";
    for (char c : cfg) {
      if (c == '"') quoted += '"';
      quoted += c;
    }
    quoted += '"';
    char score[32];
    std::snprintf(score, sizeof score, "%.10g", e.trial.score);
    out << e.trial.trial_id << ',' << e.bracket << ',' << e.round << ',' << e.trial.resource << ',' << score << ','
        << quoted << '\n';
  }
}

void apply_config(const TrialConfig& config, ModelConfig& model, TrainConfig& train) {
  for (const auto& [name, v] : config) {
    if (name == "initial_lr") {
      train.initial_lr = v;
    } else if (name == "dropout") {
      train.dropout = v;
      model.dropout_rate = v;
    } else if (name == "batch_size") {
      train.batch_size = as_index(name, v);
    } else if (name == "tubelet_t") {
      model.tubelet.t = as_index(name, v);
    } else if (name == "embed_dim") {
      model.embed_dim = as_index(name, v);
    } else if (name == "depth") {
      model.depth = as_index(name, v);
    } else if (name == "heads") {
      model.heads = as_index(name, v);
    } else {
      throw ConfigError("unknown tunable field " + name);
    }
  }
}

double toy_objective(const TrialConfig& config, Index) {
  auto it = config.find("initial_lr");
  if (it == config.end()) throw ConfigError("toy objective needs initial_lr");
  return 1.0 - std::abs(it->second - 3e-4) / 1e-3;
}

TrialObjective training_objective(std::vector<Example> training, std::vector<Example> validation, ModelConfig model,
                             TrainConfig train_config, std::uint64_t seed) {
  if (training.empty() || validation.empty()) throw DataError("tuning needs non-empty training and validation sets");
  std::vector<TabularFeatures> features;
  for (const auto& e : training) features.push_back(e.features);
  const TabularScaler scaler = TabularScaler::fit(features);
  auto shared_train = std::make_shared<const std::vector<Example>>(std::move(training));
  auto shared_val = std::make_shared<const std::vector<Example>>(std::move(validation));
  return [=](const TrialConfig& config, Index epochs) {
    ModelConfig m = model;
    TrainConfig t = train_config;
    apply_config(config, m, t);
    t.epochs = epochs;
    t.seed = seed;
    m.validate();
    t.validate();
    auto result = train(m, init_params(m, seed), *shared_train, *shared_val, scaler, t);
    return result.history[static_cast<std::size_t>(result.best_epoch - 1)].val_accuracy;
  };
}

}  // namespace mimd
