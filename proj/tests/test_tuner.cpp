#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "mimd/error.hpp"
#include "mimd/synth.hpp"
#include "mimd/tuner.hpp"

using namespace mimd;

namespace {

// Textbook formulas evaluated in floating point, independent of the integer
// arithmetic in bracket_schedule.
struct OracleBracket {
  long s, n;
  double r;
};

std::vector<OracleBracket> oracle_schedule(double R, double eta) {
  const long s_max = static_cast<long>(std::floor(std::log(R) / std::log(eta) + 1e-9));
  std::vector<OracleBracket> out;
  for (long s = s_max; s >= 0; --s) {
    const double n = std::ceil((s_max + 1.0) / (s + 1.0) * std::pow(eta, s) - 1e-9);
    out.push_back({s, static_cast<long>(n), R * std::pow(eta, -static_cast<double>(s))});
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("bracket schedule") {
  auto b = bracket_schedule(81, 3);
  REQUIRE(b.size() == 5);
  const Index ns[] = {81, 34, 15, 8, 5};
  const double rs[] = {1, 3, 9, 27, 81};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(b[i].s == 4 - static_cast<Index>(i));
    CHECK(b[i].n == ns[i]);
    CHECK(b[i].r == doctest::Approx(rs[i]));
    CHECK(b[i].rounds == b[i].s + 1);
  }

  auto one = bracket_schedule(1, 3);
  REQUIRE(one.size() == 1);
  CHECK(one[0].n == 1);
  CHECK(one[0].rounds == 1);

  for (double R : {1.0, 2.0, 5.0, 9.0, 10.0, 26.0, 27.0, 28.0, 64.0, 81.0, 100.0, 243.0}) {
    for (Index eta : {2, 3, 4}) {
      auto got = bracket_schedule(R, eta);
      auto want = oracle_schedule(R, static_cast<double>(eta));
      REQUIRE(got.size() == want.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].s == want[i].s);
        CHECK(got[i].n == want[i].n);
        CHECK(got[i].r == doctest::Approx(want[i].r).epsilon(1e-12));
      }
    }
  }
  CHECK_THROWS_AS(bracket_schedule(0.5, 3), ConfigError);
  CHECK_THROWS_AS(bracket_schedule(81, 1), ConfigError);
}

TEST_CASE("configuration sampling") {
  SearchSpace space = SearchSpace::defaults();
  Rng a(9), b(9);
  CHECK(sample_config(space, a) == sample_config(space, b));
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    auto c = sample_config(space, rng);
    CHECK(c.at("initial_lr") >= 1e-5);
    CHECK(c.at("initial_lr") <= 1e-3);
    CHECK((c.at("batch_size") == 4 || c.at("batch_size") == 6 || c.at("batch_size") == 8));
    CHECK((c.at("tubelet_t") == 5 || c.at("tubelet_t") == 25));
  }

  auto parsed = SearchSpace::from_json(
      R"({"initial_lr": {"log_uniform": [1e-5, 1e-3]}, "batch_size": {"choice": [6, 12]}, "x": {"uniform": [0, 2]}})");
  REQUIRE(parsed.dims.size() == 3);
  CHECK(parsed.dims[0].name == "initial_lr");
  CHECK(parsed.dims[1].choices == std::vector<double>{6, 12});
  CHECK(parsed.dims[2].kind == SearchDimension::Kind::Uniform);
  CHECK(config_json({{"batch_size", 6}, {"initial_lr", 0.5}}) == R"({"batch_size":6,"initial_lr":0.5})");

  CHECK_THROWS_AS(SearchSpace::from_json(R"({"a": {"uniform": [1, 1]}})"), ConfigError);
  CHECK_THROWS_AS(SearchSpace::from_json(R"({"a": {"log_uniform": [0, 1]}})"), ConfigError);
  CHECK_THROWS_AS(SearchSpace::from_json(R"({"a": {"choice": []}})"), ConfigError);
  CHECK_THROWS_AS(SearchSpace::from_json(R"({"a": {"normal": [0, 1]}})"), ConfigError);
  CHECK_THROWS_AS(SearchSpace::from_json("[1]"), ConfigError);

  ModelConfig m;
  TrainConfig t;
  apply_config({{"initial_lr", 2e-4}, {"batch_size", 8}, {"tubelet_t", 25}}, m, t);
  CHECK(t.initial_lr == 2e-4);
  CHECK(t.batch_size == 8);
  CHECK(m.tubelet.t == 25);
  CHECK_THROWS_AS(apply_config({{"momentum", 0.9}}, m, t), ConfigError);
  CHECK_THROWS_AS(apply_config({{"batch_size", 6.5}}, m, t), ConfigError);
}

TEST_CASE("successive halving") {
  SearchSpace space = SearchSpace::defaults();
  Rng rng(4);
  std::vector<TrialConfig> nine;
  for (int i = 0; i < 9; ++i) nine.push_back(sample_config(space, rng));

  std::vector<TrialLogEntry> log;
  auto survivors = successive_halving(nine, toy_objective, 1, 3, 9, 100, 2, &log);
  REQUIRE(survivors.size() == 1);
  std::map<Index, Index> per_round;
  for (const auto& e : log) ++per_round[e.round];
  CHECK(per_round == std::map<Index, Index>{{0, 9}, {1, 3}, {2, 1}});
  CHECK(survivors[0].resource == 9);

  // The survivor is the sampled lr closest to 3e-4.
  std::size_t closest = 0;
  for (std::size_t i = 1; i < nine.size(); ++i) {
    if (std::abs(nine[i].at("initial_lr") - 3e-4) < std::abs(nine[closest].at("initial_lr") - 3e-4)) closest = i;
  }
  CHECK(survivors[0].trial_id == 100 + static_cast<Index>(closest));

  std::vector<TrialConfig> single{nine[3]};
  auto alone = successive_halving(single, toy_objective, 27, 3, 27);
  REQUIRE(alone.size() == 1);
  CHECK(alone[0].config == nine[3]);
  CHECK(alone[0].resource == 27);

  // Ties keep the lower trial id.
  auto flat = [](const TrialConfig&, Index) { return 0.5; };
  auto tied = successive_halving(nine, flat, 1, 3, 9);
  CHECK(tied[0].trial_id == 0);

  CHECK_THROWS_AS(successive_halving(std::vector<TrialConfig>{}, toy_objective, 1, 3, 9), ConfigError);
  auto bad = [](const TrialConfig&, Index) { return 1.5; };
  CHECK_THROWS_AS(successive_halving(nine, bad, 1, 3, 9), DataError);
}

TEST_CASE("hyperband accounting and reproducibility") {
  SearchSpace space = SearchSpace::defaults();
  std::mutex mu;
  std::map<Index, Index> spent;  // bracket -> epochs, recorded by the objective itself
  Index current_bracket = -1;
  auto counting = [&](const TrialConfig& c, Index epochs) {
    std::lock_guard lock(mu);
    spent[current_bracket] += epochs;
    return toy_objective(c, epochs);
  };
  // Run bracket by bracket so the counter knows which one is active.
  Rng rng(21);
  Index next = 0;
  std::vector<TrialLogEntry> log;
  for (const auto& b : bracket_schedule(81, 3)) {
    current_bracket = b.s;
    std::vector<TrialConfig> configs;
    for (Index i = 0; i < b.n; ++i) configs.push_back(sample_config(space, rng));
    successive_halving(configs, counting, b.r, 3, 81, next, b.s, &log);
    next += b.n;

    Index analytic = 0, n = b.n;
    double r = b.r;
    for (Index i = 0; i <= b.s; ++i) {
      analytic += n * resource_epochs(r);
      n = std::max<Index>(1, n / 3);
      r *= 3;
    }
    CHECK(spent[b.s] == analytic);
    CHECK(spent[b.s] <= 5 * 81 + 81);  // (s_max + 1) R, plus rounding slack
  }

  // Monotone survival: later rounds only contain ids evaluated in the round before.
  std::map<std::pair<Index, Index>, std::set<Index>> ids;
  for (const auto& e : log) ids[{e.bracket, e.round}].insert(e.trial.trial_id);
  for (const auto& [key, set] : ids) {
    if (key.second == 0) continue;
    const auto& prev = ids[{key.first, key.second - 1}];
    CHECK(std::includes(prev.begin(), prev.end(), set.begin(), set.end()));
  }

  auto first = hyperband_run(space, toy_objective, 81, 3, 21);
  auto second = hyperband_run(space, toy_objective, 81, 3, 21, 3);
  REQUIRE(first.log.size() == log.size());
  for (std::size_t i = 0; i < log.size(); ++i) {
    CHECK(first.log[i].trial.trial_id == log[i].trial.trial_id);
    CHECK(first.log[i].trial.score == log[i].trial.score);
  }

  // The returned trial is the analytic argmax of the toy objective over every sampled lr.
  double best_gap = 1;
  for (const auto& e : first.log) best_gap = std::min(best_gap, std::abs(e.trial.config.at("initial_lr") - 3e-4));
  CHECK(std::abs(first.best.config.at("initial_lr") - 3e-4) == best_gap);
  CHECK(first.best.score == doctest::Approx(1.0 - best_gap / 1e-3).epsilon(1e-12));

  auto dir = std::filesystem::temp_directory_path() / "mimd_test_tuner";
  std::filesystem::create_directories(dir);
  write_trial_log(first.log, dir / "a.csv");
  write_trial_log(second.log, dir / "b.csv");
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  std::ifstream in(dir / "a.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "trial_id,bracket,round,resource,score,config");
  CHECK(row.find("\"{\"\"batch_size\"\":") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("tuning a small training run") {
  SynthConfig s;
  s.subjects = 16;
  s.dims = {33, 40, 40};
  auto ex = synth_examples(synth_generate(s, 8), 25);
  std::vector<Example> tr(ex.begin(), ex.begin() + 12), va(ex.begin() + 12, ex.end());
  ModelConfig m;
  m.tubelet = {5, 16, 16};
  m.embed_dim = 8;
  m.depth = 1;
  m.heads = 2;
  TrainConfig t;
  auto objective = training_objective(tr, va, m, t, 3);

  SearchSpace space;
  space.dims.push_back({"initial_lr", SearchDimension::Kind::LogUniform, 1e-4, 1e-2, {}});
  auto result = hyperband_run(space, objective, 3, 3, 5);
  std::vector<double> scores;
  for (const auto& e : result.log) scores.push_back(e.trial.score);
  std::sort(scores.begin(), scores.end());
  const double median = scores[scores.size() / 2];
  CHECK(objective(result.best.config, result.best.resource) == result.best.score);
  CHECK(result.best.score >= median);
}
