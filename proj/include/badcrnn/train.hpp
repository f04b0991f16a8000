#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "badcrnn/features.hpp"
#include "badcrnn/net.hpp"

namespace badcrnn {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 32;
  int max_epochs = 500;
  int patience = 50;
  std::uint64_t seed = 0;
  // Worker threads for per-clip gradients and validation inference.
  int jobs = 1;

  void validate() const;
};

std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamState for_model(const CrnnModel& model);
};

struct LabeledFeatures {
  FeatureMatrix features;
  int label = 0;
};

using Dataset = std::vector<LabeledFeatures>;

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_auc = 0.0;
  double seconds = 0.0;
};

enum class StopReason { patience, max_epochs };

struct TrainRun {
  std::vector<EpochRecord> history;
  int best_epoch = 0;  // 1-based; 0 when no epoch ran
  double best_val_auc = std::numeric_limits<double>::quiet_NaN();
  CrnnModel best_model;
  StopReason stopped_reason = StopReason::max_epochs;
};

struct TrainHooks {
  // Replaces validation AUC when set; receives the model after each epoch.
  std::function<double(const CrnnModel&, int epoch)> validation_metric;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct BceResult {
  double loss = 0.0;
  double d_probability = 0.0;
};

inline constexpr double kProbabilityClamp = 1e-7;

BceResult bce_loss(double probability, int label);

void adam_step(CrnnModel& model, const GradientSet& grads, AdamState& state, const TrainConfig& config);

TrainRun train(const TrainConfig& config, const ModelConfig& model_config, const Dataset& train_set,
               const Dataset& val_set, const TrainHooks& hooks = {});

double validation_auc(const CrnnModel& model, const Dataset& val_set, int jobs = 1);

std::string history_to_csv(const TrainRun& run);
std::string run_summary_json(const TrainRun& run, const TrainConfig& config);

struct GridSpace {
  std::vector<int> feature_maps;
  std::vector<int> recurrent_layers;
  std::vector<std::vector<int>> pooling;

  // {96, 256} x {1, 2, 3} x eight pooling arrangements over 40 bands.
  static GridSpace standard();
};

// Cartesian product in (feature maps, recurrent layers, pooling) order. Other
// fields come from `base`.
std::vector<ModelConfig> enumerate_grid(const GridSpace& space, const ModelConfig& base = {});

struct GridResult {
  std::size_t index = 0;
  ModelConfig config;
  double val_auc = 0.0;
  int best_epoch = 0;
  std::size_t n_params = 0;
};

// Trains every grid point; sorted by validation AUC, descending, then by
// parameter count. Configurations run in parallel when config.jobs > 1.
std::vector<GridResult> run_grid(const GridSpace& space, const ModelConfig& base,
                                 const TrainConfig& config, const Dataset& train_set,
                                 const Dataset& val_set);

std::string grid_report_to_csv(const std::vector<GridResult>& report);

}  // namespace badcrnn
