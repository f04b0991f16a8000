#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "badcrnn/features.hpp"
#include "badcrnn/random.hpp"
#include "badcrnn/tensor.hpp"

namespace badcrnn {

enum class RecurrentType { gru, feedforward };
enum class Mode { train, infer };

inline constexpr double kBatchNormMomentum = 0.99;
inline constexpr double kBatchNormEpsilon = 1e-5;

struct ModelConfig {
  int n_feature_maps = 96;
  // Frequency pool size after each convolutional layer; its length is the
  // number of convolutional layers.
  std::vector<int> conv_pooling{5, 4, 2};
  std::array<int, 2> kernel{3, 3};  // (time, frequency), both odd
  int n_recurrent_layers = 1;
  RecurrentType recurrent_type = RecurrentType::gru;
  // Width of the recurrent layers; 0 ties it to n_feature_maps.
  int n_recurrent_units = 0;
  double dropout_rate = 0.25;
  int n_mels = 40;
  std::uint64_t seed = 0;

  int recurrent_units() const { return n_recurrent_units > 0 ? n_recurrent_units : n_feature_maps; }
  // Frequency width left after every pooling stage.
  int output_bands() const;
  // Width of the per-frame vector entering the first recurrent layer.
  int sequence_width() const;
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

std::string to_string(RecurrentType type);
RecurrentType recurrent_type_from_string(const std::string& name);
std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

struct ConvParams {
  Tensor kernel;  // maps_out x maps_in x k_t x k_f
  Tensor bias;
  Tensor gamma;
  Tensor beta;
};

struct GruParams {
  Tensor w_z, w_r, w_h;  // H x D
  Tensor u_z, u_r, u_h;  // H x H
  Tensor b_z, b_r, b_h;  // H
};

// Baseline layer: ReLU(W x_t + b) with the same weights at every timestep.
struct DenseParams {
  Tensor w;  // H x D
  Tensor b;
};

using RecurrentParams = std::variant<GruParams, DenseParams>;

struct Parameters {
  std::vector<ConvParams> conv;
  std::vector<RecurrentParams> recurrent;
  Tensor out_w;  // H
  Tensor out_b;  // 1

  // Learnable tensors in canonical order.
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  std::vector<std::string> names() const;
  std::size_t count() const;
};

struct RunningStats {
  Tensor mean;
  Tensor var;
};

struct CrnnModel {
  ModelConfig config;
  Parameters params;
  std::vector<RunningStats> running;  // one per conv layer
};

// Gradients share the parameter layout.
struct GradientSet {
  Parameters params;
};

GradientSet zero_gradients(const CrnnModel& model);
std::size_t parameter_count(const CrnnModel& model);

CrnnModel init_model(const ModelConfig& config);

struct ConvCache {
  Mode mode = Mode::infer;
  Tensor input;       // maps_in x T x F
  Tensor xhat;        // maps_out x T x F, normalised pre-activation
  Tensor activation;  // maps_out x T x F, post-ReLU
  std::vector<double> inv_std;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
  std::vector<std::uint32_t> pool_index;  // maps_out x T x F/p, source column
  Tensor dropout_mask;                    // empty when dropout is inactive
};

struct RecurrentCache {
  Tensor input;                       // T x D after dropout
  std::vector<double> input_mask;     // per input feature, empty when inactive
  std::vector<double> h0;             // initial state
  Tensor z, r, candidate, output;     // T x H (z, r, candidate GRU only)
};

struct ForwardTrace {
  Mode mode = Mode::infer;
  std::vector<ConvCache> conv;
  std::vector<RecurrentCache> recurrent;
  Tensor sequence;  // T x H entering the temporal pool
  std::vector<std::size_t> time_argmax;
  std::vector<double> pooled;
  double logit = 0.0;
  double probability = 0.0;
};

// One conv block: same-padded convolution, batch norm, ReLU, frequency pool,
// then inverted dropout in train mode when `rng` is given and rate > 0.
Tensor conv_block_forward(const Tensor& input, const ConvParams& params, const RunningStats& stats,
                          int pool, Mode mode, double dropout_rate, Rng* rng, ConvCache& cache);
Tensor conv_block_backward(const Tensor& d_output, const ConvParams& params, const ConvCache& cache,
                           ConvParams& grads);

Tensor gru_layer_forward(const Tensor& input, const GruParams& params, Mode mode,
                         double dropout_rate, Rng* rng, RecurrentCache& cache,
                         const std::vector<double>* h0 = nullptr);
Tensor gru_layer_backward(const Tensor& d_output, const GruParams& params,
                          const RecurrentCache& cache, GruParams& grads);

Tensor dense_layer_forward(const Tensor& input, const DenseParams& params, Mode mode,
                           double dropout_rate, Rng* rng, RecurrentCache& cache);
Tensor dense_layer_backward(const Tensor& d_output, const DenseParams& params,
                            const RecurrentCache& cache, DenseParams& grads);

struct TemporalPool {
  std::vector<double> values;
  std::vector<std::size_t> argmax;
};

// Column-wise maximum over time; ties go to the earliest frame.
TemporalPool temporal_max_pool(const Tensor& sequence);

// Temporal pool + sigmoid classifier applied to an explicit T x H sequence.
double classify_sequence(const CrnnModel& model, const Tensor& sequence);

struct ForwardResult {
  double probability = 0.0;
  ForwardTrace trace;
};

// `rng` drives dropout in train mode; it may be null when dropout is off.
ForwardResult forward(const CrnnModel& model, const FeatureMatrix& features, Mode mode,
                      Rng* rng = nullptr);
double predict(const CrnnModel& model, const FeatureMatrix& features);

GradientSet backward(const CrnnModel& model, const ForwardTrace& trace, double d_probability);

// Folds the batch statistics of a train-mode trace into the running averages.
void update_running_stats(CrnnModel& model, const ForwardTrace& trace);

struct GradientCheckOptions {
  std::size_t frames = 7;
  double step = 1e-5;
  // Test hook applied to the analytic gradients before comparison.
  std::function<void(GradientSet&)> corrupt;
};

// Largest |g_a - g_n| / max(|g_a|, |g_n|, 1e-8) over all parameters of a
// random model of the given shape, with dropout disabled.
double gradient_check(const ModelConfig& config, std::uint64_t seed,
                      const GradientCheckOptions& options = {});

// Post-ReLU, pre-pool activation map (T x F_in) of one filter, infer mode.
Tensor export_activations(const CrnnModel& model, const FeatureMatrix& features,
                          std::size_t conv_layer, std::size_t filter);
std::string activations_to_csv(const Tensor& map);

std::vector<std::uint8_t> encode_model(const CrnnModel& model);
CrnnModel decode_model(const std::vector<std::uint8_t>& bytes);
void save_model(const CrnnModel& model, const std::filesystem::path& path);
CrnnModel load_model(const std::filesystem::path& path);

}  // namespace badcrnn
