#include "mimd/run_config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "mimd/error.hpp"

namespace mimd {

namespace {

using json = nlohmann::ordered_json;

double number(const std::string& key, const json& v) {
  if (!v.is_number()) throw ConfigError("config key " + key + " must be a number");
  return v.get<double>();
}

Index integer(const std::string& key, const json& v) {
  if (!v.is_number_integer()) throw ConfigError("config key " + key + " must be an integer");
  return v.get<Index>();
}

std::vector<Index> integers(const std::string& key, const json& v, std::size_t count) {
  if (!v.is_array() || (count && v.size() != count)) {
    throw ConfigError("config key " + key + " must be an array of " +
                      (count ? std::to_string(count) + " " : std::string()) + "integers");
  }
  std::vector<Index> out;
  for (const auto& x : v) out.push_back(integer(key, x));
  return out;
}

std::string text(const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError("config key " + key + " must be a string");
  return v.get<std::string>();
}

using Setter = std::function<void(RunConfig&, const std::string&, const json&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"slice_number", [](RunConfig& c, const std::string& k, const json& v) { c.model.image.slices = integer(k, v); }},
      {"image_size",
       [](RunConfig& c, const std::string& k, const json& v) {
         auto hw = integers(k, v, 2);
         c.model.image.height = hw[0];
         c.model.image.width = hw[1];
       }},
      {"channels", [](RunConfig& c, const std::string& k, const json& v) { c.model.image.channels = integer(k, v); }},
      {"learning_rate_schedule",
       [](RunConfig&, const std::string& k, const json& v) {
         if (text(k, v) != "exponential_decay") throw ConfigError("only exponential_decay is supported");
       }},
      {"decay_steps", [](RunConfig& c, const std::string& k, const json& v) { c.train.decay_steps = number(k, v); }},
      {"decay_rate", [](RunConfig& c, const std::string& k, const json& v) { c.train.decay_rate = number(k, v); }},
      {"optimizer",
       [](RunConfig&, const std::string& k, const json& v) {
         if (text(k, v) != "adam") throw ConfigError("only the adam optimizer is supported");
       }},
      {"initial_learning_rate",
       [](RunConfig& c, const std::string& k, const json& v) { c.train.initial_lr = number(k, v); }},
      {"dropout",
       [](RunConfig& c, const std::string& k, const json& v) {
         c.train.dropout = number(k, v);
         c.model.dropout_rate = c.train.dropout;
       }},
      {"batch_size", [](RunConfig& c, const std::string& k, const json& v) { c.train.batch_size = integer(k, v); }},
      {"epochs", [](RunConfig& c, const std::string& k, const json& v) { c.train.epochs = integer(k, v); }},
      {"tubelet",
       [](RunConfig& c, const std::string& k, const json& v) {
         auto t = integers(k, v, 3);
         c.model.tubelet = {t[0], t[1], t[2]};
       }},
      {"embed_dim", [](RunConfig& c, const std::string& k, const json& v) { c.model.embed_dim = integer(k, v); }},
      {"depth", [](RunConfig& c, const std::string& k, const json& v) { c.model.depth = integer(k, v); }},
      {"heads", [](RunConfig& c, const std::string& k, const json& v) { c.model.heads = integer(k, v); }},
      {"mlp_ratio", [](RunConfig& c, const std::string& k, const json& v) { c.model.mlp_ratio = integer(k, v); }},
      {"tabular_hidden",
       [](RunConfig& c, const std::string& k, const json& v) { c.model.tabular_hidden = integers(k, v, 0); }},
      {"adam_beta1", [](RunConfig& c, const std::string& k, const json& v) { c.train.adam_beta1 = number(k, v); }},
      {"adam_beta2", [](RunConfig& c, const std::string& k, const json& v) { c.train.adam_beta2 = number(k, v); }},
      {"adam_epsilon", [](RunConfig& c, const std::string& k, const json& v) { c.train.adam_eps = number(k, v); }},
      {"split_ratios",
       [](RunConfig& c, const std::string& k, const json& v) {
         if (!v.is_array() || v.size() != 3) throw ConfigError("config key " + k + " must be an array of 3 numbers");
         for (std::size_t i = 0; i < 3; ++i) c.split_ratios[i] = number(k, v[i]);
       }},
      {"test_ratio", [](RunConfig& c, const std::string& k, const json& v) { c.test_ratio = number(k, v); }},
      {"inner_validation_ratio",
       [](RunConfig& c, const std::string& k, const json& v) { c.inner_validation_ratio = number(k, v); }},
  };
  return table;
}

}  // namespace

CvConfig RunConfig::cv(Index folds, std::uint64_t seed, Index jobs) const {
  CvConfig c;
  c.folds = folds;
  c.seed = seed;
  c.jobs = jobs;
  c.test_ratio = test_ratio;
  c.inner_validation_ratio = inner_validation_ratio;
  return c;
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  c.model.dropout_rate = c.train.dropout;
  for (const auto& [key, value] : j.items()) {
    auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("unknown config key " + key);
    it->second(c, key, value);
  }
  c.model.validate();
  c.train.validate();
  double sum = 0;
  for (double r : c.split_ratios) {
    if (!(r >= 0.0)) throw ConfigError("split_ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split_ratios must sum to 1");
  c.cv(7, 0, 1).validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatError::Kind::Io, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_json(const RunConfig& c) {
  json j;
  j["slice_number"] = c.model.image.slices;
  j["image_size"] = {c.model.image.height, c.model.image.width};
  j["channels"] = c.model.image.channels;
  j["learning_rate_schedule"] = "exponential_decay";
  j["decay_steps"] = c.train.decay_steps;
  j["decay_rate"] = c.train.decay_rate;
  j["optimizer"] = "adam";
  j["initial_learning_rate"] = c.train.initial_lr;
  j["dropout"] = c.train.dropout;
  j["batch_size"] = c.train.batch_size;
  j["epochs"] = c.train.epochs;
  j["tubelet"] = {c.model.tubelet.t, c.model.tubelet.h, c.model.tubelet.w};
  j["embed_dim"] = c.model.embed_dim;
  j["depth"] = c.model.depth;
  j["heads"] = c.model.heads;
  j["mlp_ratio"] = c.model.mlp_ratio;
  j["tabular_hidden"] = c.model.tabular_hidden;
  j["adam_beta1"] = c.train.adam_beta1;
  j["adam_beta2"] = c.train.adam_beta2;
  j["adam_epsilon"] = c.train.adam_eps;
  j["split_ratios"] = c.split_ratios;
  j["test_ratio"] = c.test_ratio;
  j["inner_validation_ratio"] = c.inner_validation_ratio;
  return j.dump(2) + "\n";
}

}  // namespace mimd
