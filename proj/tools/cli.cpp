#include "cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mimd/checkpoint.hpp"
#include "mimd/cv.hpp"
#include "mimd/error.hpp"
#include "mimd/run_config.hpp"
#include "mimd/stats.hpp"
#include "mimd/synth.hpp"
#include "mimd/trainer.hpp"
#include "mimd/tuner.hpp"

namespace mimd {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---- small helpers ------------------------------------------------------------

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) throw ConfigError("empty item in list '" + s + "'");
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

VolumeDims parse_dims(const std::string& s) {
  auto parts = split_list(s);
  if (parts.size() != 3) throw ConfigError("--dims needs D,H,W");
  Index v[3];
  for (int i = 0; i < 3; ++i) {
    std::size_t used = 0;
    try {
      v[i] = std::stoll(parts[static_cast<std::size_t>(i)], &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != parts[static_cast<std::size_t>(i)].size()) throw ConfigError("--dims needs integers, got " + s);
  }
  return {v[0], v[1], v[2]};
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::Io, "cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
  return hex.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json file_list(const std::vector<fs::path>& paths) {
  json arr = json::array();
  for (const auto& p : paths) arr.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
  return arr;
}

/// One per run: what was asked for, what was read and what was written.
struct RunManifest {
  std::string command;
  std::vector<std::string> arguments;
  json config = json::object();
  std::uint64_t seed = 0;
  std::vector<fs::path> inputs, outputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& path) const {
    json j;
    j["command"] = command;
    j["arguments"] = arguments;
    j["config"] = config;
    j["seed"] = seed;
    j["inputs"] = file_list(inputs);
    j["outputs"] = file_list(outputs);
    j["duration_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_text(path, j.dump(2) + "\n");
  }
};

json confusion_json(const ConfusionMatrix& cm) {
  return {{"tp", cm.tp}, {"fp", cm.fp}, {"tn", cm.tn}, {"fn", cm.fn}};
}

json scaler_json(const TabularScaler& s) {
  return {{"age_min", s.age_min}, {"age_max", s.age_max}, {"mmse_min", s.mmse_min}, {"mmse_max", s.mmse_max}};
}

TabularScaler scaler_from_json(const json& j) {
  TabularScaler s;
  s.age_min = j.at("age_min").get<double>();
  s.age_max = j.at("age_max").get<double>();
  s.mmse_min = j.at("mmse_min").get<double>();
  s.mmse_max = j.at("mmse_max").get<double>();
  return s;
}

struct Evaluation {
  std::vector<Prediction> predictions;
  ConfusionMatrix confusion;
  double accuracy = 0;
  std::optional<std::vector<RocPoint>> roc;  // absent when only one class is present
  std::optional<double> auc;
};

Evaluation evaluate(std::vector<Prediction> predictions) {
  Evaluation e;
  e.predictions = std::move(predictions);
  std::vector<ClassLabel> pred, truth;
  std::vector<double> scores;
  for (const auto& p : e.predictions) {
    pred.push_back(p.predicted);
    truth.push_back(p.truth);
    scores.push_back(p.prob_ad);
  }
  e.confusion = confusion(pred, truth);
  e.accuracy = accuracy(e.confusion);
  const bool both = std::count(truth.begin(), truth.end(), ClassLabel::AD) > 0 &&
                    std::count(truth.begin(), truth.end(), ClassLabel::CN) > 0;
  if (both) {
    e.roc = roc_points(scores, truth);
    e.auc = auc_trapezoid(*e.roc);
  }
  return e;
}

json evaluation_json(const Evaluation& e) {
  json j;
  j["n"] = e.predictions.size();
  j["accuracy"] = e.accuracy;
  j["auc"] = e.auc ? json(*e.auc) : json(nullptr);
  j["confusion"] = confusion_json(e.confusion);
  json preds = json::array();
  for (const auto& p : e.predictions) {
    preds.push_back({{"subject_id", p.subject_id},
                     {"prob_ad", p.prob_ad},
                     {"predicted", to_string(p.predicted)},
                     {"truth", to_string(p.truth)}});
  }
  j["predictions"] = std::move(preds);
  return j;
}

void write_roc_points(const std::vector<RocPoint>& roc, const fs::path& path) {
  std::ostringstream out;
  out.precision(10);
  out << "fpr,tpr,threshold\n";
  for (const auto& p : roc) out << p.fpr << ',' << p.tpr << ',' << p.threshold << '\n';
  write_text(path, out.str());
}

std::string roc_svg(const std::vector<RocPoint>& roc, double auc) {
  constexpr double size = 340, left = 40, top = 40;
  char title[64];
  std::snprintf(title, sizeof title, "ROC curve (AUC = %.3f)", auc);
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"420\" height=\"420\" viewBox=\"0 0 420 420\">\n"
    << "  <title>" << title << "</title>\n"
    << "  <text x=\"210\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" << title
    << "</text>\n"
    << "  <rect x=\"40\" y=\"40\" width=\"340\" height=\"340\" fill=\"none\" stroke=\"black\"/>\n"
    << "  <line x1=\"40\" y1=\"380\" x2=\"380\" y2=\"40\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n"
    << "  <text x=\"210\" y=\"405\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
       "False positive rate</text>\n"
    << "  <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  s << std::fixed << std::setprecision(2);
  for (std::size_t i = 0; i < roc.size(); ++i) {
    if (i) s << ' ';
    s << left + roc[i].fpr * size << ',' << top + (1.0 - roc[i].tpr) * size;
  }
  s << "\"/>\n</svg>\n";
  return s.str();
}

// ---- dataset loading shared by train / cv / tune / eval -------------------------

struct DataArgs {
  std::string manifest, instances, config, mode = "mixed", rois = "hippocampus_left";
};

void add_data_options(CLI::App* sc, DataArgs& d, bool with_config = true) {
  sc->add_option("--manifest", d.manifest, "Subject manifest (JSONL)")->required();
  sc->add_option("--instances", d.instances, "Instance CSV from `select`")->required();
  if (with_config) {
    sc->add_option("--config", d.config, "Run configuration JSON (defaults when omitted)");
    sc->add_option("--mode", d.mode, "mixed | image-only");
    sc->add_option("--rois", d.rois, "Comma-separated ROI names, one image branch each");
  }
}

struct LoadedData {
  RunConfig config;
  std::vector<std::string> rois;
  std::vector<Example> examples;
};

LoadedData load_data(const DataArgs& d, RunManifest& manifest) {
  LoadedData out;
  out.config = d.config.empty() ? RunConfig{} : load_run_config(d.config);
  if (!d.config.empty()) manifest.inputs.push_back(d.config);
  out.rois = split_list(d.rois);
  out.config.model.mode = parse_input_mode(d.mode);
  out.config.model.num_branches = static_cast<Index>(out.rois.size());
  out.config.model.validate();

  auto records = select_latest_visit(read_manifest(d.manifest));
  auto instances = read_instances(d.instances);
  out.examples = load_examples(records, instances, out.rois, out.config.crop(), fs::path(d.manifest).parent_path());
  if (out.examples.empty()) throw DataError("no subject has instances for every requested ROI");
  manifest.inputs.push_back(d.manifest);
  manifest.inputs.push_back(d.instances);
  manifest.config = json::parse(run_config_json(out.config));
  manifest.config["mode"] = d.mode;
  manifest.config["rois"] = out.rois;
  return out;
}

std::vector<ClassLabel> labels_of(const std::vector<Example>& ex) {
  std::vector<ClassLabel> out;
  for (const auto& e : ex) out.push_back(e.label);
  return out;
}

std::vector<Example> pick(const std::vector<Example>& ex, const std::vector<std::size_t>& idx) {
  std::vector<Example> out;
  for (auto i : idx) out.push_back(ex[i]);
  return out;
}

std::vector<std::string> ids_of(const std::vector<Example>& ex) {
  std::vector<std::string> out;
  for (const auto& e : ex) out.push_back(e.subject_id);
  return out;
}

// ---- commands -------------------------------------------------------------------

struct SynthArgs {
  std::string out, dims = "48,64,64", rois = "hippocampus_left";
  Index subjects = 40;
  std::uint64_t seed = 0;
  double separability = 1.0, noise_sd = 0.05;
  bool mmse_separable = false;
};

int cmd_synth(const SynthArgs& a, RunManifest& m, std::ostream& out) {
  SynthConfig s;
  s.subjects = a.subjects;
  s.dims = parse_dims(a.dims);
  s.separability = a.separability;
  s.noise_sd = a.noise_sd;
  s.rois = split_list(a.rois);
  s.mmse_separable = a.mmse_separable;
  s.validate();
  m.seed = a.seed;
  m.config = {{"subjects", s.subjects},
              {"dims", {s.dims.depth, s.dims.height, s.dims.width}},
              {"separability", s.separability},
              {"noise_sd", s.noise_sd},
              {"rois", s.rois},
              {"mmse_separable", s.mmse_separable}};

  auto subjects = synth_generate(s, a.seed);
  const fs::path dir(a.out);
  write_synth_dataset(subjects, dir);
  Index ad = 0;
  for (const auto& sub : subjects) {
    ad += cdr_to_label(sub.record.cdr) == ClassLabel::AD;
    m.outputs.push_back(dir / sub.record.volume_path);
    for (const auto& [roi, path] : sub.record.roi_masks) m.outputs.push_back(dir / path);
  }
  m.outputs.push_back(dir / "manifest.jsonl");
  m.write(dir / "run_manifest.json");
  out << "wrote " << subjects.size() << " subjects (" << static_cast<Index>(subjects.size()) - ad << " CN / " << ad
      << " AD) to " << dir.string() << "\n";
  return 0;
}

struct SelectArgs {
  std::string manifest, rois = "hippocampus_left", out;
  Index slices = 25;
  std::uint64_t seed = 0;
  bool no_balance = false;
};

int cmd_select(const SelectArgs& a, RunManifest& m, std::ostream& out, std::ostream& err) {
  if (a.slices < 1) throw ConfigError("--slices must be positive");
  const auto rois = split_list(a.rois);
  m.seed = a.seed;
  m.config = {{"rois", rois}, {"slices", a.slices}, {"balance", !a.no_balance}};
  m.inputs.push_back(a.manifest);

  const fs::path base = fs::path(a.manifest).parent_path();
  std::vector<SubjectRecord> in_study;
  Index skipped = 0;
  for (auto& r : select_latest_visit(read_manifest(a.manifest))) {
    if (r.cdr == 0.5) {
      ++skipped;
      continue;
    }
    cdr_to_label(r.cdr);
    in_study.push_back(std::move(r));
  }
  if (skipped) err << "note: skipped " << skipped << " subjects with CDR 0.5\n";
  if (!a.no_balance) {
    Rng rng(a.seed);
    in_study = undersample_balance(in_study, rng);
  }

  std::vector<InstanceRecord> rows;
  for (const auto& r : in_study) {
    for (const auto& roi : rois) {
      auto it = r.roi_masks.find(roi);
      if (it == r.roi_masks.end()) throw DataError("subject " + r.subject_id + " has no mask for ROI " + roi);
      RoiMask mask;
      try {
        mask = load_mask(base / it->second, roi);
      } catch (const FormatError& e) {
        throw DataError("subject " + r.subject_id + ": " + e.what());
      }
      if (mask.dims.depth < a.slices) {
        throw ConfigError("--slices " + std::to_string(a.slices) + " exceeds the volume depth " +
                          std::to_string(mask.dims.depth) + " of subject " + r.subject_id);
      }
      rows.push_back(select_instance(r, mask, a.slices));
    }
  }
  write_instances(rows, a.out);
  m.outputs.push_back(a.out);
  m.write(a.out + ".manifest.json");
  out << "wrote " << rows.size() << " instances for " << in_study.size() << " subjects to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  DataArgs data;
  std::string out;
  std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a, RunManifest& m, std::ostream& out) {
  m.seed = a.seed;
  auto d = load_data(a.data, m);
  const RunConfig& cfg = d.config;
  Rng split_rng(derive_seed(a.seed, 1));
  auto split = split_indices(labels_of(d.examples), cfg.split_ratios, split_rng);
  auto train_set = pick(d.examples, split[0]), val_set = pick(d.examples, split[1]),
       test_set = pick(d.examples, split[2]);
  if (train_set.empty()) throw DataError("training split is empty");

  std::vector<TabularFeatures> features;
  for (const auto& e : train_set) features.push_back(e.features);
  const TabularScaler scaler = TabularScaler::fit(features);
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(a.seed, 3);
  const Index epochs = tc.epochs;
  auto result = train(cfg.model, init_params(cfg.model, derive_seed(a.seed, 2)), train_set, val_set, scaler, tc,
                      [&](const EpochRecord& r) {
                        char line[128];
                        std::snprintf(line, sizeof line, "epoch %lld/%lld  train_loss %.4f  val_loss %.4f  val_acc %.4f\n",
                                      static_cast<long long>(r.epoch), static_cast<long long>(epochs), r.train_loss,
                                      r.val_loss, r.val_accuracy);
                        out << line << std::flush;
                      });

  const fs::path dir(a.out);
  fs::create_directories(dir);
  save_checkpoint(result.params, dir / "model.mwt");
  json model_json;
  model_json["config"] = json::parse(run_config_json(cfg));
  model_json["mode"] = to_string(cfg.model.mode);
  model_json["rois"] = d.rois;
  model_json["scaler"] = scaler_json(scaler);
  model_json["best_epoch"] = result.best_epoch;
  write_text(dir / "model.json", model_json.dump(2) + "\n");
  write_history(result.history, dir / "history.csv");
  m.outputs = {dir / "model.mwt", dir / "model.json", dir / "history.csv"};

  json metrics;
  metrics["best_epoch"] = result.best_epoch;
  metrics["train_ids"] = ids_of(train_set);
  metrics["validation_ids"] = ids_of(val_set);
  metrics["test_ids"] = ids_of(test_set);
  if (!test_set.empty()) {
    auto ev = evaluate(predict(cfg.model, result.params, test_set, scaler));
    metrics["test"] = evaluation_json(ev);
    if (ev.roc) {
      write_roc_points(*ev.roc, dir / "roc.csv");
      m.outputs.push_back(dir / "roc.csv");
    }
    char line[96];
    std::snprintf(line, sizeof line, "test accuracy %.4f", ev.accuracy);
    out << line;
    if (ev.auc) {
      std::snprintf(line, sizeof line, "  AUC %.4f", *ev.auc);
      out << line;
    }
    out << "  (best epoch " << result.best_epoch << ")\n";
  }
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  m.outputs.push_back(dir / "metrics.json");
  m.write(dir / "run_manifest.json");
  return 0;
}

struct CvArgs {
  DataArgs data;
  std::string out;
  std::uint64_t seed = 0;
  Index folds = 7, jobs = 1;
};

int cmd_cv(const CvArgs& a, RunManifest& m, std::ostream& out) {
  m.seed = a.seed;
  auto d = load_data(a.data, m);
  m.config["folds"] = a.folds;
  const CvConfig cv = d.config.cv(a.folds, a.seed, a.jobs);
  // Folds may finish out of order when jobs > 1; the report lines below are
  // printed in fold order after the merge.
  auto result = cv_run(d.examples, d.config.model, d.config.train, cv);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::ostringstream preds;
  preds << "fold,subject_id,prob_ad,predicted,truth\n";
  preds.precision(10);
  for (const auto& f : result.folds) {
    char line[128];
    std::snprintf(line, sizeof line, "fold %lld: accuracy %.4f  AUC %.4f  (best epoch %lld)\n",
                  static_cast<long long>(f.fold), f.accuracy, f.auc, static_cast<long long>(f.best_epoch));
    out << line;
    const auto hist = dir / ("history_fold" + std::to_string(f.fold) + ".csv");
    write_history(f.history, hist);
    m.outputs.push_back(hist);
    for (const auto& p : f.predictions) {
      preds << f.fold << ',' << p.subject_id << ',' << p.prob_ad << ',' << to_string(p.predicted) << ','
            << to_string(p.truth) << '\n';
    }
  }
  out << "accuracy " << format_mean_std({100.0 * result.accuracy.mean, 100.0 * result.accuracy.std})
      << "  AUC " << format_mean_std(result.auc) << "\n";

  write_metrics_json(result, dir / "metrics.json");
  write_roc_csv(result, dir / "roc.csv");
  write_text(dir / "predictions.csv", preds.str());
  m.outputs.insert(m.outputs.begin(), {dir / "metrics.json", dir / "roc.csv", dir / "predictions.csv"});
  m.write(dir / "run_manifest.json");
  return 0;
}

struct TuneArgs {
  DataArgs data;
  std::string space, out, objective = "toy";
  double max_resource = 27;
  Index eta = 3, jobs = 1;
  std::uint64_t seed = 0;
};

int cmd_tune(const TuneArgs& a, RunManifest& m, std::ostream& out) {
  m.seed = a.seed;
  SearchSpace space = SearchSpace::defaults();
  if (!a.space.empty()) {
    space = SearchSpace::from_json(read_text(a.space));
    m.inputs.push_back(a.space);
  }
  TrialObjective objective;
  if (a.objective == "toy") {
    objective = toy_objective;
  } else if (a.objective == "train") {
    if (a.data.manifest.empty() || a.data.instances.empty()) {
      throw ConfigError("--objective train needs --manifest and --instances");
    }
    auto d = load_data(a.data, m);
    Rng split_rng(derive_seed(a.seed, 1));
    auto split = split_indices(labels_of(d.examples), d.config.split_ratios, split_rng);
    objective = training_objective(pick(d.examples, split[0]), pick(d.examples, split[1]), d.config.model,
                                   d.config.train, derive_seed(a.seed, 4));
  } else {
    throw ConfigError("--objective must be toy or train");
  }
  m.config["objective"] = a.objective;
  m.config["max_resource"] = a.max_resource;
  m.config["eta"] = a.eta;
  json space_json = json::object();
  for (const auto& dim : space.dims) {
    switch (dim.kind) {
      case SearchDimension::Kind::LogUniform:
        space_json[dim.name] = {{"log_uniform", {dim.lo, dim.hi}}};
        break;
      case SearchDimension::Kind::Uniform:
        space_json[dim.name] = {{"uniform", {dim.lo, dim.hi}}};
        break;
      case SearchDimension::Kind::Choice:
        space_json[dim.name] = {{"choice", dim.choices}};
        break;
    }
  }
  m.config["space"] = space_json;

  auto result = hyperband_run(space, objective, a.max_resource, a.eta, a.seed, a.jobs);
  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_trial_log(result.log, dir / "trials.csv");
  json best;
  best["trial_id"] = result.best.trial_id;
  best["resource"] = result.best.resource;
  best["score"] = result.best.score;
  best["config"] = json::parse(config_json(result.best.config));
  write_text(dir / "best_config.json", best.dump(2) + "\n");
  m.outputs = {dir / "trials.csv", dir / "best_config.json"};
  m.write(dir / "run_manifest.json");
  out << result.log.size() << " evaluations; best trial " << result.best.trial_id << " score " << result.best.score
      << " at " << result.best.resource << " epochs: " << config_json(result.best.config) << "\n";
  return 0;
}

struct EvalArgs {
  std::string model, manifest, instances, out, roc_csv, roc_svg;
};

int cmd_eval(const EvalArgs& a, RunManifest& m, std::ostream& out) {
  const fs::path dir(a.model);
  json model_json;
  try {
    model_json = json::parse(read_text(dir / "model.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::BadMagic, "model.json: " + std::string(e.what()));
  }
  RunConfig cfg;
  std::vector<std::string> rois;
  TabularScaler scaler;
  try {
    cfg = parse_run_config(model_json.at("config").dump());
    cfg.model.mode = parse_input_mode(model_json.at("mode").get<std::string>());
    rois = model_json.at("rois").get<std::vector<std::string>>();
    scaler = scaler_from_json(model_json.at("scaler"));
  } catch (const std::exception& e) {
    // A model directory that does not describe a valid model is a format problem, not a usage one.
    throw FormatError(FormatError::Kind::BadMagic, "model.json: " + std::string(e.what()));
  }
  cfg.model.num_branches = static_cast<Index>(rois.size());
  ModelParams params = load_checkpoint(dir / "model.mwt");
  if (auto problems = audit_shapes(cfg.model, params); !problems.empty()) {
    throw FormatError(FormatError::Kind::DimOverflow, "checkpoint does not match model.json: " + problems.front());
  }
  m.inputs = {dir / "model.json", dir / "model.mwt", a.manifest, a.instances};
  m.config = model_json.at("config");
  m.config["mode"] = model_json.at("mode");
  m.config["rois"] = rois;

  auto records = select_latest_visit(read_manifest(a.manifest));
  auto instances = read_instances(a.instances);
  auto examples = load_examples(records, instances, rois, cfg.crop(), fs::path(a.manifest).parent_path());
  if (examples.empty()) throw DataError("no subject has instances for every model ROI");
  auto ev = evaluate(predict(cfg.model, params, examples, scaler));

  write_text(a.out, evaluation_json(ev).dump(2) + "\n");
  m.outputs.push_back(a.out);
  if (ev.roc) {
    fs::path roc_path = a.roc_csv;
    if (roc_path.empty()) roc_path = fs::path(a.out).replace_extension().string() + "_roc.csv";
    write_roc_points(*ev.roc, roc_path);
    m.outputs.push_back(roc_path);
    if (!a.roc_svg.empty()) {
      write_text(a.roc_svg, roc_svg(*ev.roc, *ev.auc));
      m.outputs.push_back(a.roc_svg);
    }
  } else if (!a.roc_svg.empty()) {
    throw DataError("ROC needs both classes among the evaluated subjects");
  }
  m.write(a.out + ".manifest.json");
  char line[96];
  std::snprintf(line, sizeof line, "%zu subjects: accuracy %.4f", ev.predictions.size(), ev.accuracy);
  out << line;
  if (ev.auc) {
    std::snprintf(line, sizeof line, "  AUC %.4f", *ev.auc);
    out << line;
  }
  out << "\n";
  return 0;
}

struct CompareArgs {
  std::vector<std::string> metrics;
  std::string test = "ttest", out;
};

std::vector<double> fold_accuracies_from(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.contains("folds") || !j["folds"].is_array()) throw ConfigError(path + " has no per-fold results");
  std::vector<double> acc;
  for (const auto& f : j["folds"]) {
    if (!f.contains("accuracy") || !f["accuracy"].is_number()) throw ConfigError(path + ": fold without accuracy");
    acc.push_back(f["accuracy"].get<double>());
  }
  if (acc.size() < 2) throw ConfigError(path + " has fewer than 2 folds");
  return acc;
}

int cmd_compare(const CompareArgs& a, RunManifest& m, std::ostream& out) {
  if (a.metrics.size() < 2) throw ConfigError("--metrics needs at least two files");
  std::vector<std::vector<double>> groups;
  for (const auto& p : a.metrics) {
    groups.push_back(fold_accuracies_from(p));
    m.inputs.push_back(p);
  }
  json result;
  result["test"] = a.test;
  double p = 1.0;
  char line[160];
  if (a.test == "ttest") {
    if (groups.size() != 2) throw ConfigError("the t-test compares exactly two metric files");
    auto r = t_test(groups[0], groups[1]);
    std::snprintf(line, sizeof line, "t = %.6f  df = %.0f  p = %.6g\n", r.t, r.df, r.p);
    result["statistic"] = r.t;
    result["df"] = r.df;
    p = r.p;
  } else if (a.test == "anova") {
    auto r = one_way_anova(groups);
    std::snprintf(line, sizeof line, "F = %.6f  df = (%.0f, %.0f)  p = %.6g\n", r.f, r.df_between, r.df_within,
                  r.p);
    result["statistic"] = std::isinf(r.f) ? json("inf") : json(r.f);
    result["df"] = {r.df_between, r.df_within};
    p = r.p;
  } else {
    throw ConfigError("--test must be ttest or anova");
  }
  for (std::size_t i = 0; i < groups.size(); ++i) {
    out << a.metrics[i] << ": accuracy " << format_mean_std(mean_std(groups[i])) << " over " << groups[i].size()
        << " folds\n";
  }
  out << line;
  const bool reject = p < 0.05;
  out << (reject ? "reject H0 at 0.05" : "fail to reject H0 at 0.05") << "\n";
  result["p"] = p;
  result["reject_h0_at_0.05"] = reject;
  m.config = {{"test", a.test}};
  if (!a.out.empty()) {
    write_text(a.out, result.dump(2) + "\n");
    m.outputs.push_back(a.out);
    m.write(a.out + ".manifest.json");
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multiple-input 3D vision transformer pipeline for CN vs AD classification", "mimd"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* sc_synth = app.add_subcommand("synth", "Generate a synthetic cohort");
  sc_synth->add_option("--out", synth.out, "Output directory")->required();
  sc_synth->add_option("--subjects", synth.subjects, "Number of subjects (alternating CN/AD)");
  sc_synth->add_option("--seed", synth.seed, "Master seed");
  sc_synth->add_option("--dims", synth.dims, "Volume dims D,H,W");
  sc_synth->add_option("--separability", synth.separability, "Image class separability in [0,1]");
  sc_synth->add_option("--noise-sd", synth.noise_sd, "Voxel noise standard deviation");
  sc_synth->add_option("--rois", synth.rois, "Comma-separated ROI names");
  sc_synth->add_flag("--mmse-separable", synth.mmse_separable, "Make MMSE alone separate the classes");

  SelectArgs select;
  auto* sc_select = app.add_subcommand("select", "Select slice windows and centroids per subject and ROI");
  sc_select->add_option("--manifest", select.manifest, "Subject manifest (JSONL)")->required();
  sc_select->add_option("--roi,--rois", select.rois, "ROI name or comma-separated list");
  sc_select->add_option("--slices", select.slices, "Slices per instance");
  sc_select->add_option("--seed", select.seed, "Seed for class balancing");
  sc_select->add_flag("--no-balance", select.no_balance, "Keep every subject instead of undersampling");
  sc_select->add_option("--out", select.out, "Instance CSV")->required();

  TrainArgs train_args;
  auto* sc_train = app.add_subcommand("train", "Train on a stratified train/validation/test split");
  add_data_options(sc_train, train_args.data);
  sc_train->add_option("--seed", train_args.seed, "Master seed");
  sc_train->add_option("--out", train_args.out, "Output directory")->required();

  CvArgs cv;
  auto* sc_cv = app.add_subcommand("cv", "Stratified k-fold cross-validation");
  add_data_options(sc_cv, cv.data);
  sc_cv->add_option("--folds", cv.folds, "Number of folds");
  sc_cv->add_option("--seed", cv.seed, "Master seed");
  sc_cv->add_option("--jobs", cv.jobs, "Folds trained concurrently");
  sc_cv->add_option("--out", cv.out, "Output directory")->required();

  TuneArgs tune;
  auto* sc_tune = app.add_subcommand("tune", "Hyperband search");
  sc_tune->add_option("--space", tune.space, "Search space JSON (defaults when omitted)");
  sc_tune->add_option("--max-resource", tune.max_resource, "Maximum epochs per trial (R)");
  sc_tune->add_option("--eta", tune.eta, "Halving rate");
  sc_tune->add_option("--seed", tune.seed, "Sampling seed");
  sc_tune->add_option("--objective", tune.objective, "toy | train");
  sc_tune->add_option("--jobs", tune.jobs, "Trials evaluated concurrently");
  sc_tune->add_option("--manifest", tune.data.manifest, "Subject manifest (train objective)");
  sc_tune->add_option("--instances", tune.data.instances, "Instance CSV (train objective)");
  sc_tune->add_option("--config", tune.data.config, "Run configuration JSON (train objective)");
  sc_tune->add_option("--mode", tune.data.mode, "mixed | image-only (train objective)");
  sc_tune->add_option("--rois", tune.data.rois, "Comma-separated ROI names (train objective)");
  sc_tune->add_option("--out", tune.out, "Output directory")->required();

  EvalArgs eval;
  auto* sc_eval = app.add_subcommand("eval", "Evaluate a trained model");
  sc_eval->add_option("--model", eval.model, "Directory written by `train`")->required();
  sc_eval->add_option("--manifest", eval.manifest, "Subject manifest (JSONL)")->required();
  sc_eval->add_option("--instances", eval.instances, "Instance CSV")->required();
  sc_eval->add_option("--out", eval.out, "Metrics JSON")->required();
  sc_eval->add_option("--roc-csv", eval.roc_csv, "ROC CSV (default: <out>_roc.csv)");
  sc_eval->add_option("--roc-svg", eval.roc_svg, "Also draw the ROC curve as SVG");

  CompareArgs compare;
  auto* sc_compare = app.add_subcommand("compare", "Test whether fold accuracies differ");
  sc_compare->add_option("--metrics", compare.metrics, "Two or more metrics.json files from `cv`")->required();
  sc_compare->add_option("--test", compare.test, "ttest | anova");
  sc_compare->add_option("--out", compare.out, "Also write the result as JSON");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  RunManifest manifest;
  manifest.arguments = args;
  try {
    if (*sc_synth) {
      manifest.command = "synth";
      return cmd_synth(synth, manifest, out);
    }
    if (*sc_select) {
      manifest.command = "select";
      return cmd_select(select, manifest, out, err);
    }
    if (*sc_train) {
      manifest.command = "train";
      return cmd_train(train_args, manifest, out);
    }
    if (*sc_cv) {
      manifest.command = "cv";
      return cmd_cv(cv, manifest, out);
    }
    if (*sc_tune) {
      manifest.command = "tune";
      return cmd_tune(tune, manifest, out);
    }
    if (*sc_eval) {
      manifest.command = "eval";
      return cmd_eval(eval, manifest, out);
    }
    manifest.command = "compare";
    return cmd_compare(compare, manifest, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mimd
