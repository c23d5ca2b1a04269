#include <doctest.h>

#include <cmath>

#include "mimd/error.hpp"
#include "mimd/synth.hpp"
#include "mimd/trainer.hpp"

using namespace mimd;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.image = {25, 32, 32, 3};
  c.tubelet = {5, 8, 8};
  c.embed_dim = 16;
  c.depth = 1;
  c.heads = 2;
  c.tabular_hidden = {8, 4};
  c.dropout_rate = 0.0;
  return c;
}

struct Cohort {
  std::vector<Example> examples;
  TabularScaler scaler;
};

Cohort small_cohort(Index n, double separability, std::uint64_t seed) {
  SynthConfig s;
  s.subjects = n;
  s.dims = {33, 40, 40};
  s.separability = separability;
  Cohort c;
  c.examples = synth_examples(synth_generate(s, seed), 25);
  std::vector<TabularFeatures> f;
  for (const auto& e : c.examples) f.push_back(e.features);
  c.scaler = TabularScaler::fit(f);
  return c;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  CHECK(lr_at_step(c, 0) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at_step(c, 100000) == doctest::Approx(9e-5).epsilon(1e-12));
  CHECK(lr_at_step(c, 50000) == doctest::Approx(9.4868e-5).epsilon(1e-4));
  for (std::int64_t s = 0; s < 1000000; s += 997) CHECK(lr_at_step(c, s + 1) < lr_at_step(c, s));
  CHECK_THROWS_AS(lr_at_step(c, -1), ConfigError);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.initial_lr = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.decay_rate = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("adam update") {
  TrainConfig cfg;
  ModelParams p({{"w", Tensor::from({3}, {0.5, -1.0, 2.0})}});
  auto state = OptimizerState::zeros_like(p);
  ParamGrads zero{{"w", Array::Zero(3)}};
  for (int i = 0; i < 10; ++i) adam_update(p, zero, state, 0.1, cfg);
  CHECK((p.at("w").values() == Eigen::Array3d(0.5, -1.0, 2.0)).all());
  CHECK(state.step == 10);

  ModelParams s({{"theta", Tensor::scalar(0.0)}});
  auto st = OptimizerState::zeros_like(s);
  adam_update(s, {{"theta", Array::Constant(1, 1.0)}}, st, 0.1, cfg);
  CHECK(s.at("theta").item() == doctest::Approx(-0.1).epsilon(1e-6));

  // independent scalar recurrence
  double theta = 0.3, m = 0, v = 0;
  ModelParams q({{"theta", Tensor::scalar(theta)}});
  auto qs = OptimizerState::zeros_like(q);
  const double gs[] = {0.4, -1.2, 0.05, 2.0, -0.3};
  for (int t = 1; t <= 5; ++t) {
    double g = gs[t - 1];
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    theta -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    adam_update(q, {{"theta", Array::Constant(1, g)}}, qs, 0.01, cfg);
  }
  CHECK(q.at("theta").item() == doctest::Approx(theta).epsilon(1e-12));

  CHECK_THROWS_AS(adam_update(q, {{"theta", Array::Zero(2)}}, qs, 0.01, cfg), ShapeError);
  CHECK_THROWS_AS(adam_update(q, {{"other", Array::Zero(1)}}, qs, 0.01, cfg), ShapeError);
}

TEST_CASE("cross-entropy values") {
  std::vector<double> sure{1, 0}, half{0.5, 0.5}, wrong{0, 1};
  CHECK(cross_entropy(sure, 0) == 0.0);
  CHECK(cross_entropy(half, 1) == doctest::Approx(std::log(2.0)));
  CHECK(cross_entropy(wrong, 0) == doctest::Approx(27.631021).epsilon(1e-6));
  CHECK_THROWS_AS(cross_entropy(half, 2), DataError);
  std::vector<double> bad{0.5, 0.6};
  CHECK_THROWS_AS(cross_entropy(bad, 0), DataError);
}

TEST_CASE("prediction rules") {
  auto cfg = small_model();
  auto cohort = small_cohort(6, 1.0, 3);
  const ModelParams base = init_params(cfg, 1);
  ModelParams zero;
  for (const auto& [name, t] : base.tensors()) zero.set(name, Tensor::zeros(t.shape()));
  auto preds = predict(cfg, zero, cohort.examples, cohort.scaler);
  REQUIRE(preds.size() == cohort.examples.size());
  for (const auto& p : preds) {
    CHECK(p.prob_ad == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p.predicted == ClassLabel::CN);
  }
  auto params = init_params(cfg, 5);
  auto a = predict(cfg, params, cohort.examples, cohort.scaler);
  auto b = predict(cfg, params, cohort.examples, cohort.scaler);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].prob_ad == b[i].prob_ad);
    CHECK(a[i].subject_id == cohort.examples[i].subject_id);
    CHECK(a[i].truth == cohort.examples[i].label);
  }
}

TEST_CASE("training loop") {
  auto cfg = small_model();
  auto cohort = small_cohort(12, 1.0, 9);
  std::span<const Example> all(cohort.examples);
  auto init = init_params(cfg, 2);

  TrainConfig tc;
  tc.dropout = 0.0;
  tc.initial_lr = 1e-3;
  tc.seed = 4;

  SUBCASE("zero epochs leaves parameters untouched") {
    tc.epochs = 0;
    auto r = train(cfg, init, all, all, cohort.scaler, tc);
    CHECK(r.history.empty());
    CHECK(r.steps == 0);
    for (const auto& [name, t] : init.tensors()) CHECK((r.params.at(name).values() == t.values()).all());
  }

  SUBCASE("one small step lowers the loss on a fixed batch") {
    Rng rng(0);
    auto batch = assemble_batch(all, std::vector<std::size_t>{0, 1, 2, 3}, cohort.scaler);
    ForwardContext ctx;
    auto params = init.clone();
    auto [before, grads] = loss_and_grads(batch, cfg, params, ctx);
    auto state = OptimizerState::zeros_like(params);
    adam_update(params, grads, state, 1e-4, tc);
    auto after = batch_loss(batch, cfg, params, ctx).item();
    CHECK(after < before);
  }

  SUBCASE("history, checkpoint selection and determinism") {
    tc.epochs = 4;
    tc.batch_size = 5;
    tc.dropout = 0.2;
    auto train_set = all.subspan(0, 8), val_set = all.subspan(8);
    auto r1 = train(cfg, init, train_set, val_set, cohort.scaler, tc);
    auto r2 = train(cfg, init, train_set, val_set, cohort.scaler, tc);
    REQUIRE(r1.history.size() == 4);
    CHECK(r1.steps == 4 * 2);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
      CHECK(r1.history[i].val_accuracy == r2.history[i].val_accuracy);
      CHECK(r1.history[i].train_loss > 0.0);
    }
    for (const auto& [name, t] : r1.params.tensors()) CHECK((r2.params.at(name).values() == t.values()).all());

    Index expected = 1;
    for (const auto& h : r1.history) {
      if (h.val_accuracy > r1.history[static_cast<std::size_t>(expected - 1)].val_accuracy) expected = h.epoch;
    }
    CHECK(r1.best_epoch == expected);
    CHECK(r1.history[1].lr == doctest::Approx(lr_at_step(tc, 3)));
  }
}
