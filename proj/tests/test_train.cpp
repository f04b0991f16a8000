#include <doctest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "badcrnn/errors.hpp"
#include "badcrnn/train.hpp"
#include "oracles.hpp"
#include "synthetic_data.hpp"

using namespace badcrnn;

namespace {

ModelConfig small_model(std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_feature_maps = 4;
  c.conv_pooling = {5, 4, 2};
  c.seed = seed;
  return c;
}

const testing::SyntheticSplit& tiny_split() {
  static const auto split = testing::synthetic_split(12, 8, 0.5, 22050, 5);
  return split;
}

}  // namespace

TEST_CASE("binary cross-entropy") {
  CHECK(bce_loss(0.5, 1).loss == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(bce_loss(0.9, 0).loss == doctest::Approx(2.302585).epsilon(1e-6));
  CHECK(bce_loss(1.0, 1).loss <= 1e-6);
  CHECK(std::isfinite(bce_loss(0.0, 1).loss));
  CHECK(std::isfinite(bce_loss(1.0, 0).loss));
  const double p = 0.3, h = 1e-6;
  for (int y : {0, 1}) {
    const double numeric = (bce_loss(p + h, y).loss - bce_loss(p - h, y).loss) / (2 * h);
    CHECK(bce_loss(p, y).d_probability == doctest::Approx(numeric).epsilon(1e-6));
  }
}

TEST_CASE("Adam") {
  TrainConfig config;
  const CrnnModel start = init_model(small_model());

  SUBCASE("zero gradient leaves parameters unchanged") {
    CrnnModel model = start;
    AdamState state = AdamState::for_model(model);
    adam_step(model, zero_gradients(model), state, config);
    CHECK(encode_model(model) == encode_model(start));
    CHECK(state.step == 1);
  }

  SUBCASE("first step moves each parameter by the learning rate") {
    CrnnModel model = start;
    AdamState state = AdamState::for_model(model);
    auto grads = zero_gradients(model);
    for (Tensor* t : grads.params.tensors()) t->fill(0.37);
    adam_step(model, grads, state, config);
    const auto before = std::as_const(start.params).tensors();
    const auto after = std::as_const(model.params).tensors();
    for (std::size_t i = 0; i < before.size(); ++i) {
      for (std::size_t k = 0; k < before[i]->size(); ++k) {
        CHECK(before[i]->data[k] - after[i]->data[k] == doctest::Approx(config.learning_rate).epsilon(1e-6));
      }
    }
  }

  SUBCASE("trajectory on a quadratic matches a scalar reference") {
    config.learning_rate = 0.1;
    CrnnModel model = start;
    AdamState state = AdamState::for_model(model);
    std::vector<std::vector<double>> expected;
    for (const Tensor* t : std::as_const(start.params).tensors()) {
      for (double v : t->data) expected.push_back(oracle::adam_on_square(v, 0.1, 10));
    }
    for (int step = 0; step < 10; ++step) {
      auto grads = zero_gradients(model);
      const auto params = std::as_const(model.params).tensors();
      auto g = grads.params.tensors();
      for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t k = 0; k < params[i]->size(); ++k) g[i]->data[k] = 2.0 * params[i]->data[k];
      }
      adam_step(model, grads, state, config);
      std::size_t flat = 0;
      double worst = 0.0;
      for (const Tensor* t : std::as_const(model.params).tensors()) {
        for (double v : t->data) worst = std::max(worst, std::abs(v - expected[flat++][step]));
      }
      CHECK(worst <= 1e-12);
    }
  }

  SUBCASE("updates are invariant to gradient scale") {
    CrnnModel a = start, b = start;
    AdamState sa = AdamState::for_model(a), sb = AdamState::for_model(b);
    config.adam_epsilon = 1e-300;
    Rng rng(9);
    for (int step = 0; step < 3; ++step) {
      auto ga = zero_gradients(a);
      auto gb = zero_gradients(b);
      auto ta = ga.params.tensors();
      auto tb = gb.params.tensors();
      for (std::size_t i = 0; i < ta.size(); ++i) {
        for (std::size_t k = 0; k < ta[i]->size(); ++k) {
          ta[i]->data[k] = rng.normal();
          tb[i]->data[k] = 1000.0 * ta[i]->data[k];
        }
      }
      adam_step(a, ga, sa, config);
      adam_step(b, gb, sb, config);
    }
    const auto pa = std::as_const(a.params).tensors();
    const auto pb = std::as_const(b.params).tensors();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      for (std::size_t k = 0; k < pa[i]->size(); ++k) {
        CHECK(pa[i]->data[k] == doctest::Approx(pb[i]->data[k]).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("single Adam steps reduce the loss on one clip") {
  const auto& split = tiny_split();
  TrainConfig config;
  config.learning_rate = 1e-4;
  int decreased = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto mc = small_model(static_cast<std::uint64_t>(trial));
    mc.dropout_rate = 0.0;
    CrnnModel model = init_model(mc);
    const auto& clip = split.train[static_cast<std::size_t>(trial) % split.train.size()];
    const auto fwd = forward(model, clip.features, Mode::train);
    const auto before = bce_loss(fwd.probability, clip.label);
    const auto grads = backward(model, fwd.trace, before.d_probability);
    AdamState state = AdamState::for_model(model);
    adam_step(model, grads, state, config);
    const auto after = bce_loss(forward(model, clip.features, Mode::train).probability, clip.label);
    if (after.loss < before.loss) ++decreased;
  }
  CHECK(decreased >= 95);
}

TEST_CASE("training loop") {
  const auto& split = tiny_split();
  TrainConfig config;
  config.batch_size = 4;
  config.max_epochs = 3;
  config.seed = 11;

  SUBCASE("zero epochs returns the initial model") {
    config.max_epochs = 0;
    const auto run = train(config, small_model(), split.train, split.validation);
    CHECK(run.history.empty());
    CHECK(run.best_epoch == 0);
    CHECK(encode_model(run.best_model) == encode_model(init_model(small_model())));
  }

  SUBCASE("frozen metric stops after patience epochs") {
    config.max_epochs = 100;
    config.patience = 5;
    TrainHooks hooks;
    hooks.validation_metric = [](const CrnnModel&, int) { return 0.5; };
    const auto run = train(config, small_model(), split.train, split.validation, hooks);
    CHECK(run.best_epoch == 1);
    CHECK(run.history.size() == 6);
    CHECK(run.stopped_reason == StopReason::patience);
  }

  SUBCASE("best epoch tracks the metric peak") {
    config.max_epochs = 10;
    config.patience = 3;
    TrainHooks hooks;
    hooks.validation_metric = [](const CrnnModel&, int epoch) { return epoch == 4 ? 0.9 : 0.1 * epoch; };
    const auto run = train(config, small_model(), split.train, split.validation, hooks);
    CHECK(run.best_epoch == 4);
    CHECK(run.history.size() == 7);
    CHECK(run.best_val_auc == 0.9);
  }

  SUBCASE("runs are deterministic across thread counts") {
    const auto a = train(config, small_model(), split.train, split.validation);
    config.jobs = 3;
    const auto b = train(config, small_model(), split.train, split.validation);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      CHECK(a.history[i].train_loss == b.history[i].train_loss);
      CHECK(a.history[i].val_auc == b.history[i].val_auc);
    }
    CHECK(encode_model(a.best_model) == encode_model(b.best_model));
  }

  SUBCASE("log and summary") {
    const auto run = train(config, small_model(), split.train, split.validation);
    const auto csv = history_to_csv(run);
    CHECK(csv.rfind("epoch,train_loss,val_auc,seconds\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    const auto summary = nlohmann::json::parse(run_summary_json(run, config));
    CHECK(summary["best_epoch"] == run.best_epoch);
    CHECK(summary["n_params"] == parameter_count(run.best_model));
  }

  SUBCASE("validation set needs both classes") {
    Dataset one_class;
    for (const auto& c : split.validation) {
      if (c.label == 1) one_class.push_back(c);
    }
    CHECK_THROWS_AS(train(config, small_model(), split.train, one_class), MetricError);
    CHECK_THROWS_AS(train(config, small_model(), {}, split.validation), ValidationError);
  }

  SUBCASE("bad inputs and diverging losses are reported") {
    Dataset poisoned = split.train;
    poisoned[0].features.values[3] = std::nan("");
    CHECK_THROWS_AS(train(config, small_model(), poisoned, split.validation), ValidationError);
    config.learning_rate = 1e300;
    CHECK_THROWS_AS(train(config, small_model(), split.train, split.validation), NumericError);
  }
}

TEST_CASE("grid enumeration") {
  const auto grid = enumerate_grid(GridSpace::standard());
  CHECK(grid.size() == 48);
  // Pool sizes multiply out to 40 for only three of the eight arrangements;
  // the rest leave 5 or 10 bands per map.
  for (const auto& c : grid) {
    int product = 1;
    for (int p : c.conv_pooling) product *= p;
    CHECK(40 % product == 0);
    CHECK(c.output_bands() == 40 / product);
    CHECK(c.sequence_width() == c.n_feature_maps * c.output_bands());
  }
  const auto bands = [](std::vector<int> pooling) {
    ModelConfig c;
    c.conv_pooling = std::move(pooling);
    return c.output_bands();
  };
  CHECK(bands({5, 4, 2}) == 1);
  CHECK(bands({8, 5}) == 1);
  CHECK(bands({5, 2, 2, 2}) == 1);
  CHECK(bands({4}) == 10);
  CHECK(bands({2, 2, 2, 1}) == 5);
  CHECK(grid.front().n_feature_maps == 96);
  CHECK(grid.front().n_recurrent_layers == 1);
  CHECK(grid.front().conv_pooling == std::vector<int>{4});
  CHECK(grid.back().n_feature_maps == 256);
  CHECK(grid.back().n_recurrent_layers == 3);
  CHECK(grid.back().conv_pooling == std::vector<int>{5, 2, 2, 2});

  const GridSpace depth3{{96}, {1}, {{2, 2, 2}, {5, 4, 2}}};
  ModelConfig base;
  base.n_mels = 40;
  for (const auto& c : enumerate_grid(depth3, base)) CHECK(c.conv_pooling.size() == 3);
  CHECK(enumerate_grid(GridSpace{{8}, {2}, {{4}}}).size() == 1);
  CHECK_THROWS_AS(enumerate_grid(GridSpace{{}, {1}, {{4}}}), ConfigError);
  CHECK_THROWS_AS(enumerate_grid(GridSpace{{8}, {1}, {{3}}}), ConfigError);
}

TEST_CASE("grid search") {
  const auto& split = tiny_split();
  TrainConfig config;
  config.max_epochs = 2;
  config.batch_size = 6;
  config.seed = 2;
  config.jobs = 2;
  ModelConfig base = small_model();
  const GridSpace space{{2, 4}, {1}, {{5, 4, 2}}};
  const auto report = run_grid(space, base, config, split.train, split.validation);
  REQUIRE(report.size() == 2);
  CHECK(report[0].val_auc >= report[1].val_auc);
  if (report[0].val_auc == report[1].val_auc) CHECK(report[0].n_params <= report[1].n_params);
  const auto csv = grid_report_to_csv(report);
  CHECK(csv.rfind("config_json,val_auc,best_epoch,n_params\n\"{\"\"n_feature_maps\"\":", 0) == 0);

  config.jobs = 1;
  const auto serial = run_grid(space, base, config, split.train, split.validation);
  CHECK(grid_report_to_csv(serial) == csv);
}
