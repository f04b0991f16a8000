#include "badcrnn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "badcrnn/errors.hpp"
#include "badcrnn/eval.hpp"
#include "badcrnn/io.hpp"
#include "badcrnn/parallel.hpp"

namespace badcrnn {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in (0, 1)");
  }
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (max_epochs < 0) throw ConfigError("max_epochs must be non-negative");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
}

std::string train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["learning_rate"] = c.learning_rate;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_epsilon"] = c.adam_epsilon;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
}

AdamState AdamState::for_model(const CrnnModel& model) {
  AdamState state;
  for (const Tensor* t : model.params.tensors()) {
    state.m.emplace_back(t->shape);
    state.v.emplace_back(t->shape);
  }
  return state;
}

BceResult bce_loss(double probability, int label) {
  const double p = std::clamp(probability, kProbabilityClamp, 1.0 - kProbabilityClamp);
  if (label == 1) return {-std::log(p), -1.0 / p};
  return {-std::log(1.0 - p), 1.0 / (1.0 - p)};
}

void adam_step(CrnnModel& model, const GradientSet& grads, AdamState& state, const TrainConfig& config) {
  auto params = model.params.tensors();
  const auto g = grads.params.tensors();
  if (g.size() != params.size() || state.m.size() != params.size()) {
    throw ShapeError("optimizer state does not match the model");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(config.beta1, t);
  const double correct2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = params[i]->data;
    const auto& grad = g[i]->data;
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    if (grad.size() != theta.size()) throw ShapeError("gradient does not match parameter shape");
    for (std::size_t k = 0; k < theta.size(); ++k) {
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * grad[k];
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * grad[k] * grad[k];
      const double m_hat = m[k] / correct1;
      const double v_hat = v[k] / correct2;
      theta[k] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_epsilon);
    }
  }
}

double validation_auc(const CrnnModel& model, const Dataset& val_set, int jobs) {
  std::vector<double> scores(val_set.size());
  std::vector<int> labels(val_set.size());
  parallel_for(val_set.size(), jobs, [&](std::size_t i) {
    scores[i] = predict(model, val_set[i].features);
    labels[i] = val_set[i].label;
  });
  for (double s : scores) {
    if (!std::isfinite(s)) throw NumericError("validation produced a non-finite probability");
  }
  return auc(scores, labels).auc;
}

namespace {

struct ClipStep {
  double loss = 0.0;
  GradientSet grads;
  ForwardTrace stats;  // batch statistics only
};

// Keeps just what update_running_stats needs.
ForwardTrace batch_stats_only(ForwardTrace&& trace) {
  ForwardTrace light;
  light.mode = trace.mode;
  light.conv.resize(trace.conv.size());
  for (std::size_t l = 0; l < trace.conv.size(); ++l) {
    light.conv[l].batch_mean = std::move(trace.conv[l].batch_mean);
    light.conv[l].batch_var = std::move(trace.conv[l].batch_var);
  }
  return light;
}

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
constexpr std::uint64_t kDropoutStream = 0x44524f50ULL;

}  // namespace

TrainRun train(const TrainConfig& config, const ModelConfig& model_config, const Dataset& train_set,
               const Dataset& val_set, const TrainHooks& hooks) {
  config.validate();
  model_config.validate();
  if (train_set.empty()) throw ValidationError("training set is empty");
  if (val_set.empty()) throw ValidationError("validation set is empty");
  if (!hooks.validation_metric) {
    const auto positives = std::count_if(val_set.begin(), val_set.end(),
                                         [](const auto& c) { return c.label == 1; });
    if (positives == 0 || positives == static_cast<std::ptrdiff_t>(val_set.size())) {
      throw MetricError("validation set must contain both classes");
    }
  }

  CrnnModel model = init_model(model_config);
  AdamState adam = AdamState::for_model(model);
  TrainRun run;
  run.best_model = model;
  double best = -std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train_set.size());
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng::derive(config.seed ^ kShuffleStream, static_cast<std::uint64_t>(epoch)).shuffle(std::span(order));

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t count = std::min(batch, order.size() - start);
      std::vector<ClipStep> steps(count);
      parallel_for(count, config.jobs, [&](std::size_t i) {
        const std::size_t position = start + i;
        const auto& clip = train_set[order[position]];
        Rng rng = Rng::derive(config.seed ^ kDropoutStream, static_cast<std::uint64_t>(epoch), position);
        auto fwd = forward(model, clip.features, Mode::train, &rng);
        const auto bce = bce_loss(fwd.probability, clip.label);
        steps[i].loss = bce.loss;
        steps[i].grads = backward(model, fwd.trace, bce.d_probability);
        steps[i].stats = batch_stats_only(std::move(fwd.trace));
      });

      // Fixed summation order keeps the reduction independent of threading.
      GradientSet mean = std::move(steps[0].grads);
      auto acc = mean.params.tensors();
      for (std::size_t i = 1; i < count; ++i) {
        const auto g = std::as_const(steps[i].grads.params).tensors();
        for (std::size_t k = 0; k < acc.size(); ++k) {
          for (std::size_t e = 0; e < acc[k]->size(); ++e) acc[k]->data[e] += g[k]->data[e];
        }
      }
      for (Tensor* t : acc) {
        for (double& v : t->data) v /= static_cast<double>(count);
      }
      for (const auto& s : steps) {
        if (!std::isfinite(s.loss)) {
          throw NumericError("non-finite training loss in epoch " + std::to_string(epoch));
        }
        loss_sum += s.loss;
        update_running_stats(model, s.stats);
      }
      adam_step(model, mean, adam, config);
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(train_set.size());
    if (!std::isfinite(record.train_loss)) {
      throw NumericError("non-finite training loss in epoch " + std::to_string(epoch));
    }
    record.val_auc = hooks.validation_metric ? hooks.validation_metric(model, epoch)
                                             : validation_auc(model, val_set, config.jobs);
    record.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    run.history.push_back(record);
    if (hooks.on_epoch) hooks.on_epoch(record);

    if (record.val_auc > best) {
      best = record.val_auc;
      run.best_epoch = epoch;
      run.best_val_auc = record.val_auc;
      run.best_model = model;
    } else if (epoch - run.best_epoch >= config.patience) {
      run.stopped_reason = StopReason::patience;
      break;
    }
  }
  return run;
}

std::string history_to_csv(const TrainRun& run) {
  std::string out = "epoch,train_loss,val_auc,seconds\n";
  for (const auto& r : run.history) {
    out += std::to_string(r.epoch) + "," + io::format_g9(r.train_loss) + "," + io::format_g9(r.val_auc) +
           "," + io::format_g9(r.seconds) + "\n";
  }
  return out;
}

std::string run_summary_json(const TrainRun& run, const TrainConfig& config) {
  nlohmann::ordered_json j;
  j["best_epoch"] = run.best_epoch;
  j["best_val_auc"] = run.history.empty() ? nlohmann::ordered_json(nullptr)
                                          : nlohmann::ordered_json(run.best_val_auc);
  j["epochs_run"] = run.history.size();
  j["stopped_reason"] = run.stopped_reason == StopReason::patience ? "patience" : "max_epochs";
  j["model_config"] = nlohmann::ordered_json::parse(config_to_json(run.best_model.config));
  j["train_config"] = nlohmann::ordered_json::parse(train_config_to_json(config));
  j["n_params"] = parameter_count(run.best_model);
  auto& history = j["history"] = nlohmann::ordered_json::array();
  for (const auto& r : run.history) {
    history.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_auc", r.val_auc}});
  }
  return j.dump(2) + "\n";
}

GridSpace GridSpace::standard() {
  return {{96, 256},
          {1, 2, 3},
          {{4}, {2, 2}, {4, 2}, {8, 5}, {2, 2, 2}, {5, 4, 2}, {2, 2, 2, 1}, {5, 2, 2, 2}}};
}

std::vector<ModelConfig> enumerate_grid(const GridSpace& space, const ModelConfig& base) {
  if (space.feature_maps.empty() || space.recurrent_layers.empty() || space.pooling.empty()) {
    throw ConfigError("grid space has an empty dimension");
  }
  std::vector<ModelConfig> out;
  for (int maps : space.feature_maps) {
    for (int layers : space.recurrent_layers) {
      for (const auto& pooling : space.pooling) {
        ModelConfig c = base;
        c.n_feature_maps = maps;
        c.n_recurrent_units = 0;
        c.n_recurrent_layers = layers;
        c.conv_pooling = pooling;
        c.validate();
        out.push_back(std::move(c));
      }
    }
  }
  return out;
}

std::vector<GridResult> run_grid(const GridSpace& space, const ModelConfig& base,
                                 const TrainConfig& config, const Dataset& train_set,
                                 const Dataset& val_set) {
  const auto configs = enumerate_grid(space, base);
  std::vector<GridResult> report(configs.size());
  TrainConfig inner = config;
  inner.jobs = 1;
  parallel_for(configs.size(), config.jobs, [&](std::size_t i) {
    const std::uint64_t seed = Rng::derive(config.seed, i).next();
    ModelConfig mc = configs[i];
    mc.seed = seed;
    TrainConfig tc = inner;
    tc.seed = seed;
    const auto run = train(tc, mc, train_set, val_set);
    GridResult& r = report[i];
    r.index = i;
    r.config = mc;
    r.best_epoch = run.best_epoch;
    r.val_auc = run.history.empty() ? validation_auc(run.best_model, val_set) : run.best_val_auc;
    r.n_params = parameter_count(run.best_model);
  });
  std::stable_sort(report.begin(), report.end(), [](const GridResult& a, const GridResult& b) {
    if (a.val_auc != b.val_auc) return a.val_auc > b.val_auc;
    return a.n_params < b.n_params;
  });
  return report;
}

std::string grid_report_to_csv(const std::vector<GridResult>& report) {
  std::string out = "config_json,val_auc,best_epoch,n_params\n";
  for (const auto& r : report) {
    // JSON contains commas, so the field is quoted with doubled inner quotes.
    std::string json = config_to_json(r.config);
    std::string quoted = "\"";
    for (char ch : json) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    quoted += '"';
    out += quoted + "," + io::format_g9(r.val_auc) + "," + std::to_string(r.best_epoch) + "," +
           std::to_string(r.n_params) + "\n";
  }
  return out;
}

}  // namespace badcrnn
