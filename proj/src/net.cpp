#include "badcrnn/net.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "badcrnn/errors.hpp"
#include "badcrnn/io.hpp"

namespace badcrnn {

// ---------------------------------------------------------------------------
// Configuration

int ModelConfig::output_bands() const {
  int bands = n_mels;
  for (int p : conv_pooling) bands /= p;
  return bands;
}

int ModelConfig::sequence_width() const { return n_feature_maps * output_bands(); }

void ModelConfig::validate() const {
  if (n_feature_maps < 1) throw ConfigError("n_feature_maps must be positive");
  if (conv_pooling.empty() || conv_pooling.size() > 4) {
    throw ConfigError("between 1 and 4 convolutional layers are supported");
  }
  long product = 1;
  for (int p : conv_pooling) {
    if (p < 1) throw ConfigError("pool sizes must be positive");
    product *= p;
  }
  if (n_mels < 1 || n_mels % product != 0) {
    throw ConfigError("pooling product " + std::to_string(product) + " does not divide n_mels " +
                      std::to_string(n_mels));
  }
  for (int k : kernel) {
    if (k < 1 || k % 2 == 0) throw ConfigError("kernel sizes must be positive and odd");
  }
  if (n_recurrent_layers < 0) throw ConfigError("n_recurrent_layers must be non-negative");
  if (n_recurrent_units < 0) throw ConfigError("n_recurrent_units must be non-negative");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
}

std::string to_string(RecurrentType type) {
  return type == RecurrentType::gru ? "gru" : "feedforward";
}

RecurrentType recurrent_type_from_string(const std::string& name) {
  if (name == "gru") return RecurrentType::gru;
  if (name == "feedforward") return RecurrentType::feedforward;
  throw ConfigError("unknown recurrent_type '" + name + "'");
}

namespace {

nlohmann::ordered_json config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_feature_maps"] = c.n_feature_maps;
  j["conv_pooling"] = c.conv_pooling;
  j["kernel"] = c.kernel;
  j["n_recurrent_layers"] = c.n_recurrent_layers;
  j["recurrent_type"] = to_string(c.recurrent_type);
  j["n_recurrent_units"] = c.recurrent_units();
  j["dropout_rate"] = c.dropout_rate;
  j["n_mels"] = c.n_mels;
  j["seed"] = c.seed;
  return j;
}

}  // namespace

std::string config_to_json(const ModelConfig& config) { return config_json(config).dump(); }

ModelConfig config_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.n_feature_maps = j.value("n_feature_maps", c.n_feature_maps);
    c.conv_pooling = j.value("conv_pooling", c.conv_pooling);
    c.kernel = j.value("kernel", c.kernel);
    c.n_recurrent_layers = j.value("n_recurrent_layers", c.n_recurrent_layers);
    c.recurrent_type = recurrent_type_from_string(j.value("recurrent_type", std::string("gru")));
    c.n_recurrent_units = j.value("n_recurrent_units", 0);
    if (c.n_recurrent_units == c.n_feature_maps) c.n_recurrent_units = 0;
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.n_mels = j.value("n_mels", c.n_mels);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Parameters

std::vector<const Tensor*> Parameters::tensors() const {
  std::vector<const Tensor*> out;
  for (const auto& c : conv) out.insert(out.end(), {&c.kernel, &c.bias, &c.gamma, &c.beta});
  for (const auto& r : recurrent) {
    if (const auto* g = std::get_if<GruParams>(&r)) {
      out.insert(out.end(), {&g->w_z, &g->w_r, &g->w_h, &g->u_z, &g->u_r, &g->u_h, &g->b_z,
                             &g->b_r, &g->b_h});
    } else {
      const auto& d = std::get<DenseParams>(r);
      out.insert(out.end(), {&d.w, &d.b});
    }
  }
  out.push_back(&out_w);
  out.push_back(&out_b);
  return out;
}

std::vector<Tensor*> Parameters::tensors() {
  const auto views = std::as_const(*this).tensors();
  std::vector<Tensor*> out;
  out.reserve(views.size());
  for (const Tensor* t : views) out.push_back(const_cast<Tensor*>(t));
  return out;
}

std::vector<std::string> Parameters::names() const {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < conv.size(); ++l) {
    for (const char* n : {"kernel", "bias", "gamma", "beta"}) {
      out.push_back("conv" + std::to_string(l) + "." + n);
    }
  }
  for (std::size_t l = 0; l < recurrent.size(); ++l) {
    const auto prefix = "recurrent" + std::to_string(l) + ".";
    if (std::holds_alternative<GruParams>(recurrent[l])) {
      for (const char* n : {"W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"}) {
        out.push_back(prefix + n);
      }
    } else {
      out.push_back(prefix + "W");
      out.push_back(prefix + "b");
    }
  }
  out.push_back("output.weight");
  out.push_back("output.bias");
  return out;
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  for (const Tensor* t : tensors()) n += t->size();
  return n;
}

std::size_t parameter_count(const CrnnModel& model) { return model.params.count(); }

GradientSet zero_gradients(const CrnnModel& model) {
  GradientSet g{model.params};
  for (Tensor* t : g.params.tensors()) t->fill(0.0);
  return g;
}

namespace {

void glorot(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.data) v = rng.uniform(-a, a);
}

}  // namespace

CrnnModel init_model(const ModelConfig& config) {
  config.validate();
  CrnnModel model;
  model.config = config;
  Rng rng(config.seed);

  const auto maps = static_cast<std::size_t>(config.n_feature_maps);
  const auto kt = static_cast<std::size_t>(config.kernel[0]);
  const auto kf = static_cast<std::size_t>(config.kernel[1]);
  std::size_t in_maps = 1;
  for (std::size_t l = 0; l < config.conv_pooling.size(); ++l) {
    ConvParams c;
    c.kernel = Tensor({maps, in_maps, kt, kf});
    glorot(c.kernel, in_maps * kt * kf, maps * kt * kf, rng);
    c.bias = Tensor({maps});
    c.gamma = Tensor({maps}, 1.0);
    c.beta = Tensor({maps});
    model.params.conv.push_back(std::move(c));
    model.running.push_back({Tensor({maps}, 0.0), Tensor({maps}, 1.0)});
    in_maps = maps;
  }

  const auto units = static_cast<std::size_t>(config.recurrent_units());
  std::size_t width = static_cast<std::size_t>(config.sequence_width());
  for (int l = 0; l < config.n_recurrent_layers; ++l) {
    if (config.recurrent_type == RecurrentType::gru) {
      GruParams g;
      for (Tensor* w : {&g.w_z, &g.w_r, &g.w_h}) {
        *w = Tensor({units, width});
        glorot(*w, width, units, rng);
      }
      for (Tensor* u : {&g.u_z, &g.u_r, &g.u_h}) {
        *u = Tensor({units, units});
        glorot(*u, units, units, rng);
      }
      g.b_z = g.b_r = g.b_h = Tensor({units});
      model.params.recurrent.emplace_back(std::move(g));
    } else {
      DenseParams d;
      d.w = Tensor({units, width});
      glorot(d.w, width, units, rng);
      d.b = Tensor({units});
      model.params.recurrent.emplace_back(std::move(d));
    }
    width = units;
  }

  model.params.out_w = Tensor({width});
  glorot(model.params.out_w, width, 1, rng);
  model.params.out_b = Tensor({1});
  return model;
}

// ---------------------------------------------------------------------------
// Small dense kernels on row-major matrices

namespace {

// out += M v, M is rows x cols.
void matvec_add(const double* m, const double* v, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = m + i * cols;
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j) acc += row[j] * v[j];
    out[i] += acc;
  }
}

// out += M^T v.
void matvec_t_add(const double* m, const double* v, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = m + i * cols;
    const double vi = v[i];
    if (vi == 0.0) continue;
    for (std::size_t j = 0; j < cols; ++j) out[j] += row[j] * vi;
  }
}

// G += a b^T.
void outer_add(const double* a, const double* b, double* g, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double ai = a[i];
    if (ai == 0.0) continue;
    double* row = g + i * cols;
    for (std::size_t j = 0; j < cols; ++j) row[j] += ai * b[j];
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> dropout_mask(std::size_t n, double rate, Rng& rng) {
  std::vector<double> mask(n);
  const double scale = 1.0 / (1.0 - rate);
  for (double& m : mask) m = rng.uniform() < rate ? 0.0 : scale;
  return mask;
}

bool dropout_active(Mode mode, double rate, const Rng* rng) {
  return mode == Mode::train && rate > 0.0 && rng != nullptr;
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolutional block

Tensor conv_block_forward(const Tensor& input, const ConvParams& params, const RunningStats& stats,
                          int pool, Mode mode, double dropout_rate, Rng* rng, ConvCache& cache) {
  if (input.shape.size() != 3) throw ShapeError("conv input must be maps x T x F");
  const std::size_t cin = input.dim(0), frames = input.dim(1), bands = input.dim(2);
  const std::size_t cout = params.kernel.dim(0);
  if (params.kernel.dim(1) != cin) {
    throw ShapeError("conv input has " + std::to_string(cin) + " maps, kernel expects " +
                     std::to_string(params.kernel.dim(1)));
  }
  if (pool < 1 || bands % static_cast<std::size_t>(pool) != 0) {
    throw ShapeError("frequency width " + std::to_string(bands) + " is not divisible by pool size " +
                     std::to_string(pool));
  }
  const std::size_t kt = params.kernel.dim(2), kf = params.kernel.dim(3);
  const std::size_t pt = kt / 2, pf = kf / 2;
  const std::size_t plane = frames * bands;

  // Convolution without bias; the bias enters only through batch norm below.
  Tensor conv({cout, frames, bands});
  for (std::size_t co = 0; co < cout; ++co) {
    double* out = conv.data.data() + co * plane;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* in = input.data.data() + ci * plane;
      for (std::size_t i = 0; i < kt; ++i) {
        for (std::size_t j = 0; j < kf; ++j) {
          const double w = params.kernel[((co * cin + ci) * kt + i) * kf + j];
          const std::size_t f_lo = j < pf ? pf - j : 0;
          const std::size_t f_hi = std::min(bands, bands + pf - j);
          for (std::size_t t = 0; t < frames; ++t) {
            const std::ptrdiff_t ts = static_cast<std::ptrdiff_t>(t + i) - static_cast<std::ptrdiff_t>(pt);
            if (ts < 0 || ts >= static_cast<std::ptrdiff_t>(frames)) continue;
            const double* src = in + static_cast<std::size_t>(ts) * bands + j;
            double* dst = out + t * bands;
            for (std::size_t f = f_lo; f < f_hi; ++f) dst[f] += w * src[f - pf];
          }
        }
      }
    }
  }

  cache.mode = mode;
  cache.input = input;
  cache.xhat = Tensor({cout, frames, bands});
  cache.activation = Tensor({cout, frames, bands});
  cache.inv_std.assign(cout, 0.0);
  cache.batch_mean.assign(cout, 0.0);
  cache.batch_var.assign(cout, 0.0);
  const double n = static_cast<double>(plane);
  for (std::size_t c = 0; c < cout; ++c) {
    const double* x = conv.data.data() + c * plane;
    double* xhat = cache.xhat.data.data() + c * plane;
    double* act = cache.activation.data.data() + c * plane;
    double shift, inv_std;
    if (mode == Mode::train) {
      // Batch statistics over all time-frequency positions of this map. The
      // bias shifts the mean by the same amount, so it cancels exactly.
      double mean = 0.0;
      for (std::size_t k = 0; k < plane; ++k) mean += x[k];
      mean /= n;
      double var = 0.0;
      for (std::size_t k = 0; k < plane; ++k) var += (x[k] - mean) * (x[k] - mean);
      var /= n;
      shift = mean;
      inv_std = 1.0 / std::sqrt(var + kBatchNormEpsilon);
      cache.batch_mean[c] = mean + params.bias[c];
      cache.batch_var[c] = var;
    } else {
      shift = stats.mean[c] - params.bias[c];
      inv_std = 1.0 / std::sqrt(stats.var[c] + kBatchNormEpsilon);
    }
    cache.inv_std[c] = inv_std;
    const double g = params.gamma[c], b = params.beta[c];
    for (std::size_t k = 0; k < plane; ++k) {
      xhat[k] = (x[k] - shift) * inv_std;
      act[k] = std::max(g * xhat[k] + b, 0.0);  // NaN passes through
    }
  }

  const auto p = static_cast<std::size_t>(pool);
  const std::size_t out_bands = bands / p;
  Tensor out({cout, frames, out_bands});
  cache.pool_index.assign(out.size(), 0);
  for (std::size_t c = 0; c < cout; ++c) {
    for (std::size_t t = 0; t < frames; ++t) {
      const double* row = cache.activation.data.data() + c * plane + t * bands;
      for (std::size_t g = 0; g < out_bands; ++g) {
        std::size_t best = g * p;
        for (std::size_t f = g * p + 1; f < (g + 1) * p; ++f) {
          if (row[f] > row[best]) best = f;
        }
        const std::size_t o = (c * frames + t) * out_bands + g;
        out[o] = row[best];
        cache.pool_index[o] = static_cast<std::uint32_t>(best);
      }
    }
  }

  cache.dropout_mask = Tensor();
  if (dropout_active(mode, dropout_rate, rng)) {
    cache.dropout_mask = Tensor(out.shape);
    cache.dropout_mask.data = dropout_mask(out.size(), dropout_rate, *rng);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] *= cache.dropout_mask[k];
  }
  return out;
}

Tensor conv_block_backward(const Tensor& d_output, const ConvParams& params, const ConvCache& cache,
                           ConvParams& grads) {
  const std::size_t cin = cache.input.dim(0), frames = cache.input.dim(1), bands = cache.input.dim(2);
  const std::size_t cout = params.kernel.dim(0);
  const std::size_t kt = params.kernel.dim(2), kf = params.kernel.dim(3);
  const std::size_t pt = kt / 2, pf = kf / 2;
  const std::size_t plane = frames * bands;
  if (d_output.size() != cache.pool_index.size()) throw ShapeError("conv gradient shape mismatch");
  const std::size_t out_bands = d_output.size() / (cout * frames);

  // Unpool (and undo dropout) into the activation map.
  Tensor d_act({cout, frames, bands});
  for (std::size_t c = 0; c < cout; ++c) {
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t g = 0; g < out_bands; ++g) {
        const std::size_t o = (c * frames + t) * out_bands + g;
        double d = d_output[o];
        if (!cache.dropout_mask.data.empty()) d *= cache.dropout_mask[o];
        d_act[c * plane + t * bands + cache.pool_index[o]] += d;
      }
    }
  }

  // ReLU and batch norm.
  Tensor d_pre({cout, frames, bands});
  const double n = static_cast<double>(plane);
  for (std::size_t c = 0; c < cout; ++c) {
    const double* xhat = cache.xhat.data.data() + c * plane;
    const double* act = cache.activation.data.data() + c * plane;
    const double* da = d_act.data.data() + c * plane;
    double* dp = d_pre.data.data() + c * plane;
    const double gamma = params.gamma[c];
    const double inv_std = cache.inv_std[c];
    double sum_dy = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t k = 0; k < plane; ++k) {
      const double dy = act[k] > 0.0 ? da[k] : 0.0;
      sum_dy += dy;
      sum_dxhat_xhat += dy * xhat[k];
      dp[k] = dy * gamma;
    }
    grads.gamma[c] += sum_dxhat_xhat;
    grads.beta[c] += sum_dy;
    sum_dxhat_xhat *= gamma;
    const double sum_dxhat = sum_dy * gamma;
    if (cache.mode == Mode::train) {
      for (std::size_t k = 0; k < plane; ++k) {
        dp[k] = inv_std / n * (n * dp[k] - sum_dxhat - xhat[k] * sum_dxhat_xhat);
      }
      // Bias has no effect under batch statistics.
    } else {
      double sum_dp = 0.0;
      for (std::size_t k = 0; k < plane; ++k) {
        dp[k] *= inv_std;
        sum_dp += dp[k];
      }
      grads.bias[c] += sum_dp;
    }
  }

  // Convolution.
  Tensor d_input({cin, frames, bands});
  for (std::size_t co = 0; co < cout; ++co) {
    const double* dp = d_pre.data.data() + co * plane;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* in = cache.input.data.data() + ci * plane;
      double* din = d_input.data.data() + ci * plane;
      for (std::size_t i = 0; i < kt; ++i) {
        for (std::size_t j = 0; j < kf; ++j) {
          const std::size_t widx = ((co * cin + ci) * kt + i) * kf + j;
          const double w = params.kernel[widx];
          const std::size_t f_lo = j < pf ? pf - j : 0;
          const std::size_t f_hi = std::min(bands, bands + pf - j);
          double acc = 0.0;
          for (std::size_t t = 0; t < frames; ++t) {
            const std::ptrdiff_t ts = static_cast<std::ptrdiff_t>(t + i) - static_cast<std::ptrdiff_t>(pt);
            if (ts < 0 || ts >= static_cast<std::ptrdiff_t>(frames)) continue;
            const double* src = in + static_cast<std::size_t>(ts) * bands + j;
            double* dst = din + static_cast<std::size_t>(ts) * bands + j;
            const double* g = dp + t * bands;
            for (std::size_t f = f_lo; f < f_hi; ++f) {
              acc += g[f] * src[f - pf];
              dst[f - pf] += w * g[f];
            }
          }
          grads.kernel[widx] += acc;
        }
      }
    }
  }
  return d_input;
}

// ---------------------------------------------------------------------------
// Recurrent layers

namespace {

// Applies the per-sequence input mask and records it in the cache.
Tensor masked_input(const Tensor& input, Mode mode, double rate, Rng* rng, RecurrentCache& cache) {
  cache.input = input;
  cache.input_mask.clear();
  if (dropout_active(mode, rate, rng)) {
    const std::size_t frames = input.dim(0), width = input.dim(1);
    cache.input_mask = dropout_mask(width, rate, *rng);
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t d = 0; d < width; ++d) cache.input[t * width + d] *= cache.input_mask[d];
    }
  }
  return cache.input;
}

void unmask(Tensor& d_input, const RecurrentCache& cache) {
  if (cache.input_mask.empty()) return;
  const std::size_t width = cache.input_mask.size();
  for (std::size_t k = 0; k < d_input.size(); ++k) d_input[k] *= cache.input_mask[k % width];
}

}  // namespace

Tensor gru_layer_forward(const Tensor& input, const GruParams& params, Mode mode,
                         double dropout_rate, Rng* rng, RecurrentCache& cache,
                         const std::vector<double>* h0) {
  if (input.shape.size() != 2) throw ShapeError("recurrent input must be T x D");
  const std::size_t frames = input.dim(0), width = input.dim(1);
  const std::size_t units = params.w_z.dim(0);
  if (params.w_z.dim(1) != width) {
    throw ShapeError("GRU input width " + std::to_string(width) + " does not match weights (" +
                     std::to_string(params.w_z.dim(1)) + ")");
  }
  if (h0 && h0->size() != units) throw ShapeError("initial GRU state has the wrong width");

  const Tensor x = masked_input(input, mode, dropout_rate, rng, cache);
  cache.h0 = h0 ? *h0 : std::vector<double>(units, 0.0);
  cache.z = cache.r = cache.candidate = cache.output = Tensor({frames, units});

  std::vector<double> a_z(units), a_r(units), a_h(units), rh(units);
  const double* h_prev = cache.h0.data();
  for (std::size_t t = 0; t < frames; ++t) {
    const double* xt = x.data.data() + t * width;
    std::copy(params.b_z.data.begin(), params.b_z.data.end(), a_z.begin());
    std::copy(params.b_r.data.begin(), params.b_r.data.end(), a_r.begin());
    std::copy(params.b_h.data.begin(), params.b_h.data.end(), a_h.begin());
    matvec_add(params.w_z.data.data(), xt, a_z.data(), units, width);
    matvec_add(params.w_r.data.data(), xt, a_r.data(), units, width);
    matvec_add(params.w_h.data.data(), xt, a_h.data(), units, width);
    matvec_add(params.u_z.data.data(), h_prev, a_z.data(), units, units);
    matvec_add(params.u_r.data.data(), h_prev, a_r.data(), units, units);
    double* z = cache.z.data.data() + t * units;
    double* r = cache.r.data.data() + t * units;
    double* c = cache.candidate.data.data() + t * units;
    double* h = cache.output.data.data() + t * units;
    for (std::size_t j = 0; j < units; ++j) {
      z[j] = sigmoid(a_z[j]);
      r[j] = sigmoid(a_r[j]);
      rh[j] = r[j] * h_prev[j];
    }
    matvec_add(params.u_h.data.data(), rh.data(), a_h.data(), units, units);
    for (std::size_t j = 0; j < units; ++j) {
      c[j] = std::tanh(a_h[j]);
      h[j] = (1.0 - z[j]) * h_prev[j] + z[j] * c[j];
    }
    h_prev = h;
  }
  return cache.output;
}

Tensor gru_layer_backward(const Tensor& d_output, const GruParams& params,
                          const RecurrentCache& cache, GruParams& grads) {
  const std::size_t frames = cache.input.dim(0), width = cache.input.dim(1);
  const std::size_t units = params.w_z.dim(0);
  if (d_output.size() != frames * units) throw ShapeError("GRU gradient shape mismatch");

  Tensor d_input({frames, width});
  std::vector<double> dh(units), dh_prev(units, 0.0), da_z(units), da_r(units), da_h(units),
      d_rh(units), rh(units);
  for (std::size_t step = frames; step-- > 0;) {
    const double* xt = cache.input.data.data() + step * width;
    const double* h_prev = step > 0 ? cache.output.data.data() + (step - 1) * units : cache.h0.data();
    const double* z = cache.z.data.data() + step * units;
    const double* r = cache.r.data.data() + step * units;
    const double* c = cache.candidate.data.data() + step * units;
    for (std::size_t j = 0; j < units; ++j) dh[j] = d_output[step * units + j] + dh_prev[j];

    for (std::size_t j = 0; j < units; ++j) {
      da_h[j] = dh[j] * z[j] * (1.0 - c[j] * c[j]);
      da_z[j] = dh[j] * (c[j] - h_prev[j]) * z[j] * (1.0 - z[j]);
      dh_prev[j] = dh[j] * (1.0 - z[j]);
      rh[j] = r[j] * h_prev[j];
    }
    std::fill(d_rh.begin(), d_rh.end(), 0.0);
    matvec_t_add(params.u_h.data.data(), da_h.data(), d_rh.data(), units, units);
    for (std::size_t j = 0; j < units; ++j) {
      da_r[j] = d_rh[j] * h_prev[j] * r[j] * (1.0 - r[j]);
      dh_prev[j] += d_rh[j] * r[j];
    }

    outer_add(da_h.data(), xt, grads.w_h.data.data(), units, width);
    outer_add(da_z.data(), xt, grads.w_z.data.data(), units, width);
    outer_add(da_r.data(), xt, grads.w_r.data.data(), units, width);
    outer_add(da_h.data(), rh.data(), grads.u_h.data.data(), units, units);
    outer_add(da_z.data(), h_prev, grads.u_z.data.data(), units, units);
    outer_add(da_r.data(), h_prev, grads.u_r.data.data(), units, units);
    for (std::size_t j = 0; j < units; ++j) {
      grads.b_h[j] += da_h[j];
      grads.b_z[j] += da_z[j];
      grads.b_r[j] += da_r[j];
    }
    matvec_t_add(params.u_z.data.data(), da_z.data(), dh_prev.data(), units, units);
    matvec_t_add(params.u_r.data.data(), da_r.data(), dh_prev.data(), units, units);

    double* dx = d_input.data.data() + step * width;
    matvec_t_add(params.w_h.data.data(), da_h.data(), dx, units, width);
    matvec_t_add(params.w_z.data.data(), da_z.data(), dx, units, width);
    matvec_t_add(params.w_r.data.data(), da_r.data(), dx, units, width);
  }
  unmask(d_input, cache);
  return d_input;
}

Tensor dense_layer_forward(const Tensor& input, const DenseParams& params, Mode mode,
                           double dropout_rate, Rng* rng, RecurrentCache& cache) {
  if (input.shape.size() != 2) throw ShapeError("recurrent input must be T x D");
  const std::size_t frames = input.dim(0), width = input.dim(1);
  const std::size_t units = params.w.dim(0);
  if (params.w.dim(1) != width) throw ShapeError("dense input width does not match weights");
  const Tensor x = masked_input(input, mode, dropout_rate, rng, cache);
  cache.output = Tensor({frames, units});
  for (std::size_t t = 0; t < frames; ++t) {
    double* y = cache.output.data.data() + t * units;
    std::copy(params.b.data.begin(), params.b.data.end(), y);
    matvec_add(params.w.data.data(), x.data.data() + t * width, y, units, width);
    for (std::size_t j = 0; j < units; ++j) y[j] = std::max(y[j], 0.0);
  }
  return cache.output;
}

Tensor dense_layer_backward(const Tensor& d_output, const DenseParams& params,
                            const RecurrentCache& cache, DenseParams& grads) {
  const std::size_t frames = cache.input.dim(0), width = cache.input.dim(1);
  const std::size_t units = params.w.dim(0);
  if (d_output.size() != frames * units) throw ShapeError("dense gradient shape mismatch");
  Tensor d_input({frames, width});
  std::vector<double> d_pre(units);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t j = 0; j < units; ++j) {
      d_pre[j] = cache.output[t * units + j] > 0.0 ? d_output[t * units + j] : 0.0;
      grads.b[j] += d_pre[j];
    }
    outer_add(d_pre.data(), cache.input.data.data() + t * width, grads.w.data.data(), units, width);
    matvec_t_add(params.w.data.data(), d_pre.data(), d_input.data.data() + t * width, units, width);
  }
  unmask(d_input, cache);
  return d_input;
}

// ---------------------------------------------------------------------------
// Classifier head and full network

TemporalPool temporal_max_pool(const Tensor& sequence) {
  if (sequence.shape.size() != 2 || sequence.dim(0) == 0) {
    throw ShapeError("temporal max-pool needs a non-empty T x H sequence");
  }
  const std::size_t frames = sequence.dim(0), width = sequence.dim(1);
  TemporalPool pool;
  pool.values.assign(sequence.data.begin(), sequence.data.begin() + static_cast<std::ptrdiff_t>(width));
  pool.argmax.assign(width, 0);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t j = 0; j < width; ++j) {
      const double v = sequence[t * width + j];
      if (v > pool.values[j]) {
        pool.values[j] = v;
        pool.argmax[j] = t;
      }
    }
  }
  return pool;
}

namespace {

double classifier_logit(const Parameters& params, const std::vector<double>& pooled) {
  if (pooled.size() != params.out_w.size()) throw ShapeError("classifier input width mismatch");
  double logit = params.out_b[0];
  for (std::size_t j = 0; j < pooled.size(); ++j) logit += params.out_w[j] * pooled[j];
  return logit;
}

Tensor to_sequence(const Tensor& maps) {
  const std::size_t channels = maps.dim(0), frames = maps.dim(1), bands = maps.dim(2);
  Tensor seq({frames, channels * bands});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t f = 0; f < bands; ++f) {
        seq[t * channels * bands + c * bands + f] = maps[(c * frames + t) * bands + f];
      }
    }
  }
  return seq;
}

Tensor from_sequence(const Tensor& seq, std::size_t channels) {
  const std::size_t frames = seq.dim(0), bands = seq.dim(1) / channels;
  Tensor maps({channels, frames, bands});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t f = 0; f < bands; ++f) {
        maps[(c * frames + t) * bands + f] = seq[t * channels * bands + c * bands + f];
      }
    }
  }
  return maps;
}

Tensor to_input(const FeatureMatrix& features, int n_mels) {
  if (features.bands != static_cast<std::size_t>(n_mels)) {
    throw ShapeError("features have " + std::to_string(features.bands) + " bands, model expects " +
                     std::to_string(n_mels));
  }
  if (features.frames == 0) throw ShapeError("features have no frames");
  for (double v : features.values) {
    if (!std::isfinite(v)) throw ValidationError("features of '" + features.clip_id + "' are not finite");
  }
  Tensor input({1, features.frames, features.bands});
  input.data = features.values;
  return input;
}

}  // namespace

double classify_sequence(const CrnnModel& model, const Tensor& sequence) {
  const auto pool = temporal_max_pool(sequence);
  return sigmoid(classifier_logit(model.params, pool.values));
}

ForwardResult forward(const CrnnModel& model, const FeatureMatrix& features, Mode mode, Rng* rng) {
  const auto& config = model.config;
  ForwardResult result;
  ForwardTrace& trace = result.trace;
  trace.mode = mode;

  Tensor x = to_input(features, config.n_mels);
  trace.conv.resize(model.params.conv.size());
  for (std::size_t l = 0; l < model.params.conv.size(); ++l) {
    x = conv_block_forward(x, model.params.conv[l], model.running[l], config.conv_pooling[l], mode,
                           config.dropout_rate, rng, trace.conv[l]);
  }

  // Maps are stacked over frequency into one vector per frame.
  Tensor seq = to_sequence(x);
  trace.recurrent.resize(model.params.recurrent.size());
  for (std::size_t l = 0; l < model.params.recurrent.size(); ++l) {
    // The first layer's input already went through conv-block dropout.
    const double rate = l == 0 ? 0.0 : config.dropout_rate;
    if (const auto* g = std::get_if<GruParams>(&model.params.recurrent[l])) {
      seq = gru_layer_forward(seq, *g, mode, rate, rng, trace.recurrent[l]);
    } else {
      seq = dense_layer_forward(seq, std::get<DenseParams>(model.params.recurrent[l]), mode, rate, rng,
                                trace.recurrent[l]);
    }
  }

  auto pool = temporal_max_pool(seq);
  trace.sequence = std::move(seq);
  trace.time_argmax = std::move(pool.argmax);
  trace.pooled = std::move(pool.values);
  trace.logit = classifier_logit(model.params, trace.pooled);
  trace.probability = sigmoid(trace.logit);
  result.probability = trace.probability;
  return result;
}

double predict(const CrnnModel& model, const FeatureMatrix& features) {
  return forward(model, features, Mode::infer).probability;
}

GradientSet backward(const CrnnModel& model, const ForwardTrace& trace, double d_probability) {
  if (trace.conv.size() != model.params.conv.size() ||
      trace.recurrent.size() != model.params.recurrent.size() ||
      trace.pooled.size() != model.params.out_w.size()) {
    throw ShapeError("forward trace does not belong to this model");
  }
  GradientSet grads = zero_gradients(model);
  auto& g = grads.params;

  const double p = trace.probability;
  const double d_logit = d_probability * p * (1.0 - p);
  g.out_b[0] = d_logit;
  const std::size_t width = trace.pooled.size();
  const std::size_t frames = trace.sequence.dim(0);
  Tensor d_seq({frames, width});
  for (std::size_t j = 0; j < width; ++j) {
    g.out_w[j] = d_logit * trace.pooled[j];
    d_seq[trace.time_argmax[j] * width + j] = d_logit * model.params.out_w[j];
  }

  for (std::size_t l = model.params.recurrent.size(); l-- > 0;) {
    if (const auto* gru = std::get_if<GruParams>(&model.params.recurrent[l])) {
      d_seq = gru_layer_backward(d_seq, *gru, trace.recurrent[l], std::get<GruParams>(g.recurrent[l]));
    } else {
      d_seq = dense_layer_backward(d_seq, std::get<DenseParams>(model.params.recurrent[l]),
                                   trace.recurrent[l], std::get<DenseParams>(g.recurrent[l]));
    }
  }

  Tensor d_maps = from_sequence(d_seq, static_cast<std::size_t>(model.config.n_feature_maps));
  for (std::size_t l = model.params.conv.size(); l-- > 0;) {
    d_maps = conv_block_backward(d_maps, model.params.conv[l], trace.conv[l], g.conv[l]);
  }
  return grads;
}

void update_running_stats(CrnnModel& model, const ForwardTrace& trace) {
  if (trace.mode != Mode::train) return;
  for (std::size_t l = 0; l < model.running.size(); ++l) {
    auto& stats = model.running[l];
    const auto& cache = trace.conv.at(l);
    for (std::size_t c = 0; c < stats.mean.size(); ++c) {
      stats.mean[c] = kBatchNormMomentum * stats.mean[c] + (1.0 - kBatchNormMomentum) * cache.batch_mean[c];
      stats.var[c] = kBatchNormMomentum * stats.var[c] + (1.0 - kBatchNormMomentum) * cache.batch_var[c];
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient check

double gradient_check(const ModelConfig& config, std::uint64_t seed, const GradientCheckOptions& options) {
  ModelConfig cfg = config;
  cfg.dropout_rate = 0.0;
  cfg.seed = seed;
  CrnnModel model = init_model(cfg);

  // Move every parameter away from its initial value so no term is trivially zero.
  Rng rng = Rng::derive(seed, 1);
  for (auto& c : model.params.conv) {
    for (double& v : c.bias.data) v = rng.uniform(-0.5, 0.5);
    for (double& v : c.gamma.data) v = rng.uniform(0.5, 1.5);
    for (double& v : c.beta.data) v = rng.uniform(-0.5, 0.5);
  }
  for (auto& r : model.params.recurrent) {
    if (auto* g = std::get_if<GruParams>(&r)) {
      for (Tensor* b : {&g->b_z, &g->b_r, &g->b_h}) {
        for (double& v : b->data) v = rng.uniform(-0.5, 0.5);
      }
    } else {
      for (double& v : std::get<DenseParams>(r).b.data) v = rng.uniform(-0.5, 0.5);
    }
  }
  model.params.out_b[0] = rng.uniform(-0.5, 0.5);

  FeatureMatrix input;
  input.frames = options.frames;
  input.bands = static_cast<std::size_t>(cfg.n_mels);
  input.values.resize(input.frames * input.bands);
  Rng data_rng = Rng::derive(seed, 2);
  for (double& v : input.values) v = data_rng.normal();

  const auto fwd = forward(model, input, Mode::train);
  GradientSet analytic = backward(model, fwd.trace, 1.0);
  if (options.corrupt) options.corrupt(analytic);

  const auto probe = [&] { return forward(model, input, Mode::train).probability; };
  const auto params = model.params.tensors();
  const auto grads = std::as_const(analytic.params).tensors();
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t k = 0; k < params[i]->size(); ++k) {
      double& theta = params[i]->data[k];
      const double saved = theta;
      theta = saved + options.step;
      const double up = probe();
      theta = saved - options.step;
      const double down = probe();
      theta = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double exact = grads[i]->data[k];
      const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(exact - numeric) / denom);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Activation export

Tensor export_activations(const CrnnModel& model, const FeatureMatrix& features,
                          std::size_t conv_layer, std::size_t filter) {
  if (conv_layer >= model.params.conv.size()) {
    throw std::invalid_argument("conv layer index " + std::to_string(conv_layer) + " out of range");
  }
  if (filter >= static_cast<std::size_t>(model.config.n_feature_maps)) {
    throw std::invalid_argument("filter index " + std::to_string(filter) + " out of range");
  }
  Tensor x = to_input(features, model.config.n_mels);
  ConvCache cache;
  for (std::size_t l = 0; l <= conv_layer; ++l) {
    x = conv_block_forward(x, model.params.conv[l], model.running[l], model.config.conv_pooling[l],
                           Mode::infer, 0.0, nullptr, cache);
  }
  const std::size_t frames = cache.activation.dim(1), bands = cache.activation.dim(2);
  Tensor map({frames, bands});
  std::copy_n(cache.activation.data.begin() + static_cast<std::ptrdiff_t>(filter * frames * bands),
              frames * bands, map.data.begin());
  return map;
}

std::string activations_to_csv(const Tensor& map) {
  std::string out;
  const std::size_t frames = map.dim(0), bands = map.dim(1);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t f = 0; f < bands; ++f) {
      if (f) out += ',';
      out += io::format_g9(map[t * bands + f]);
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {
constexpr std::string_view kModelMagic = "BADC";
constexpr std::uint16_t kModelVersion = 1;

// Canonical file order: per conv layer kernel, bias, gamma, beta,
// running_mean, running_var; then recurrent tensors; then the output layer.
std::vector<const Tensor*> file_tensors(const CrnnModel& model) {
  std::vector<const Tensor*> out;
  for (std::size_t l = 0; l < model.params.conv.size(); ++l) {
    const auto& c = model.params.conv[l];
    out.insert(out.end(), {&c.kernel, &c.bias, &c.gamma, &c.beta, &model.running[l].mean,
                           &model.running[l].var});
  }
  const auto learnable = model.params.tensors();
  out.insert(out.end(), learnable.begin() + static_cast<std::ptrdiff_t>(4 * model.params.conv.size()),
             learnable.end());
  return out;
}
}  // namespace

std::vector<std::uint8_t> encode_model(const CrnnModel& model) {
  io::ByteWriter w;
  w.bytes(kModelMagic);
  w.u16(kModelVersion);
  const auto json = config_to_json(model.config);
  w.u32(static_cast<std::uint32_t>(json.size()));
  w.bytes(json);
  for (const Tensor* t : file_tensors(model)) {
    for (double v : t->data) w.f64(v);
  }
  return w.buffer();
}

CrnnModel decode_model(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 4 || r.bytes(4) != kModelMagic) throw FormatError("not a BADC model file");
  if (const auto version = r.u16(); version != kModelVersion) {
    throw FormatError("unsupported model file version " + std::to_string(version));
  }
  const auto config = config_from_json(r.bytes(r.u32()));
  CrnnModel model = init_model(config);
  for (const Tensor* t : file_tensors(model)) {
    auto* dst = const_cast<Tensor*>(t);
    for (double& v : dst->data) v = r.f64();
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after model parameters");
  return model;
}

void save_model(const CrnnModel& model, const std::filesystem::path& path) {
  io::write_atomic(path, encode_model(model));
}

CrnnModel load_model(const std::filesystem::path& path) { return decode_model(io::read_bytes(path)); }

}  // namespace badcrnn
