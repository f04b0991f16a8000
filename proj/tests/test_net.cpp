#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "badcrnn/errors.hpp"
#include "badcrnn/net.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace badcrnn;

namespace {

FeatureMatrix random_input(std::size_t frames, std::size_t bands, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix fm{"x", frames, bands, std::vector<double>(frames * bands)};
  for (double& v : fm.values) v = rng.normal();
  return fm;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_feature_maps = 2;
  c.conv_pooling = {2};
  c.n_recurrent_layers = 1;
  c.n_recurrent_units = 4;
  c.dropout_rate = 0.0;
  c.n_mels = 8;
  return c;
}

// Infer-mode batch norm that leaves values untouched: (x - 0) / sqrt(1 - eps + eps).
RunningStats identity_stats(std::size_t maps) {
  return {Tensor({maps}, 0.0), Tensor({maps}, 1.0 - kBatchNormEpsilon)};
}

ConvParams conv_params(std::size_t out, std::size_t in, std::size_t kt, std::size_t kf) {
  return {Tensor({out, in, kt, kf}), Tensor({out}), Tensor({out}, 1.0), Tensor({out})};
}

void zero_all(CrnnModel& m) {
  for (Tensor* t : m.params.tensors()) t->fill(0.0);
  for (auto& c : m.params.conv) c.gamma.fill(1.0);
}

}  // namespace

TEST_CASE("initialisation") {
  ModelConfig c;
  c.n_feature_maps = 8;
  c.seed = 3;
  const auto a = init_model(c), b = init_model(c);
  CHECK(encode_model(a) == encode_model(b));
  c.seed = 4;
  CHECK(init_model(c).params.conv[0].kernel != a.params.conv[0].kernel);

  CHECK(c.output_bands() == 1);
  CHECK(c.sequence_width() == 8);
  const auto& gru = std::get<GruParams>(a.params.recurrent[0]);
  CHECK(gru.w_z.shape == std::vector<std::size_t>{8, 8});
  CHECK(a.params.conv[1].kernel.shape == std::vector<std::size_t>{8, 8, 3, 3});

  // Glorot bound and zero biases.
  const double bound = std::sqrt(6.0 / (9.0 + 72.0));
  for (double v : a.params.conv[0].kernel.data) CHECK(std::abs(v) <= bound);
  for (double v : gru.b_z.data) CHECK(v == 0.0);
  CHECK(a.running[0].var[0] == 1.0);

  ModelConfig bad;
  bad.conv_pooling = {3};
  CHECK_THROWS_AS(init_model(bad), ConfigError);
  bad.conv_pooling = {2, 2, 2, 1, 1};
  CHECK_THROWS_AS(init_model(bad), ConfigError);
}

TEST_CASE("config JSON round trip") {
  ModelConfig c = tiny_config();
  c.recurrent_type = RecurrentType::feedforward;
  c.kernel = {1, 5};
  c.seed = 123456789012345ULL;
  CHECK(config_from_json(config_to_json(c)) == c);
  CHECK_THROWS_AS(config_from_json("{\"recurrent_type\":\"lstm\"}"), ConfigError);
  CHECK_THROWS_AS(config_from_json("not json"), FormatError);
}

TEST_CASE("conv block") {
  Rng rng(1);
  SUBCASE("identity kernel gives ReLU of the input") {
    auto p = conv_params(1, 1, 1, 1);
    p.kernel[0] = 1.0;
    const Tensor input = random_tensor({1, 5, 6}, rng);
    ConvCache cache;
    const auto out = conv_block_forward(input, p, identity_stats(1), 1, Mode::infer, 0.0, nullptr, cache);
    for (std::size_t i = 0; i < input.size(); ++i) {
      CHECK(out[i] == doctest::Approx(std::max(0.0, input[i])).epsilon(1e-12));
    }
  }
  SUBCASE("negative pre-activations are zeroed") {
    auto p = conv_params(2, 1, 3, 3);
    p.beta.fill(-50.0);
    const Tensor input = random_tensor({1, 4, 4}, rng);
    ConvCache cache;
    for (Mode mode : {Mode::train, Mode::infer}) {
      const auto out = conv_block_forward(input, p, identity_stats(2), 2, mode, 0.0, nullptr, cache);
      CHECK(out.shape == std::vector<std::size_t>{2, 4, 2});
      for (double v : out.data) CHECK(v == 0.0);
    }
  }
  SUBCASE("matches a sliding-window convolution") {
    auto p = conv_params(1, 1, 3, 3);
    p.kernel = random_tensor({1, 1, 3, 3}, rng);
    p.bias[0] = 0.3;
    p.beta[0] = 100.0;  // keeps everything above the ReLU knee
    const Tensor input = random_tensor({1, 8, 8}, rng);
    ConvCache cache;
    const auto out = conv_block_forward(input, p, identity_stats(1), 1, Mode::infer, 0.0, nullptr, cache);
    const auto ref = oracle::conv2d_same(input.data, 8, 8, p.kernel.data, 3, 3);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out[i] - 100.0 - (ref[i] + 0.3)) < 1e-10);
  }
  SUBCASE("multi-channel convolution sums per input map") {
    auto p = conv_params(2, 3, 3, 5);
    p.kernel = random_tensor({2, 3, 3, 5}, rng);
    p.beta.fill(100.0);
    const Tensor input = random_tensor({3, 6, 10}, rng);
    ConvCache cache;
    const auto out = conv_block_forward(input, p, identity_stats(2), 1, Mode::infer, 0.0, nullptr, cache);
    for (std::size_t co = 0; co < 2; ++co) {
      std::vector<double> expect(60, 0.0);
      for (std::size_t ci = 0; ci < 3; ++ci) {
        const std::vector<double> map(input.data.begin() + static_cast<long>(ci * 60),
                                      input.data.begin() + static_cast<long>((ci + 1) * 60));
        const std::vector<double> k(p.kernel.data.begin() + static_cast<long>((co * 3 + ci) * 15),
                                    p.kernel.data.begin() + static_cast<long>((co * 3 + ci + 1) * 15));
        const auto part = oracle::conv2d_same(map, 6, 10, k, 3, 5);
        for (std::size_t i = 0; i < 60; ++i) expect[i] += part[i];
      }
      for (std::size_t i = 0; i < 60; ++i) CHECK(std::abs(out[co * 60 + i] - 100.0 - expect[i]) < 1e-10);
    }
  }
  SUBCASE("train-mode batch norm standardises each map") {
    auto p = conv_params(3, 1, 3, 3);
    p.kernel = random_tensor({3, 1, 3, 3}, rng);
    p.beta.fill(100.0);
    const Tensor input = random_tensor({1, 10, 6}, rng);
    ConvCache cache;
    const auto out = conv_block_forward(input, p, identity_stats(3), 1, Mode::train, 0.0, nullptr, cache);
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0.0;
      for (std::size_t k = 0; k < 60; ++k) mean += out[c * 60 + k] - 100.0;
      CHECK(std::abs(mean / 60.0) < 1e-10);
    }
  }
  SUBCASE("pool size must divide the width") {
    auto p = conv_params(1, 1, 3, 3);
    ConvCache cache;
    CHECK_THROWS_AS(conv_block_forward(Tensor({1, 4, 6}), p, identity_stats(1), 4, Mode::infer, 0.0, nullptr, cache),
                    ShapeError);
  }
  SUBCASE("frequency shift by the pool size shifts pooled outputs") {
    auto p = conv_params(2, 1, 3, 3);
    p.kernel = random_tensor({2, 1, 3, 3}, rng);
    const std::size_t frames = 5, bands = 32, pool = 4;
    const Tensor input = random_tensor({1, frames, bands}, rng);
    Tensor shifted({1, frames, bands});
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t f = 0; f < bands; ++f) shifted[t * bands + (f + pool) % bands] = input[t * bands + f];
    }
    ConvCache c1, c2;
    const RunningStats stats{Tensor({2}, 0.1), Tensor({2}, 2.0)};
    const auto a = conv_block_forward(input, p, stats, pool, Mode::infer, 0.0, nullptr, c1);
    const auto b = conv_block_forward(shifted, p, stats, pool, Mode::infer, 0.0, nullptr, c2);
    const std::size_t groups = bands / pool;
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t g = 2; g + 2 <= groups; ++g) {
          CHECK(b[(c * frames + t) * groups + g] == a[(c * frames + t) * groups + g - 1]);
        }
      }
    }
  }
}

TEST_CASE("GRU layer") {
  Rng rng(2);
  auto make = [&](std::size_t h, std::size_t d, double scale) {
    GruParams g;
    g.w_z = random_tensor({h, d}, rng, scale);
    g.w_r = random_tensor({h, d}, rng, scale);
    g.w_h = random_tensor({h, d}, rng, scale);
    g.u_z = random_tensor({h, h}, rng, scale);
    g.u_r = random_tensor({h, h}, rng, scale);
    g.u_h = random_tensor({h, h}, rng, scale);
    g.b_z = random_tensor({h}, rng, scale);
    g.b_r = random_tensor({h}, rng, scale);
    g.b_h = random_tensor({h}, rng, scale);
    return g;
  };
  SUBCASE("zero weights keep the state at zero") {
    const auto g = make(3, 2, 0.0);
    RecurrentCache cache;
    const auto out = gru_layer_forward(random_tensor({6, 2}, rng), g, Mode::infer, 0.0, nullptr, cache);
    for (double v : out.data) CHECK(v == 0.0);
  }
  SUBCASE("zero weights halve a forced initial state") {
    const auto g = make(3, 2, 0.0);
    RecurrentCache cache;
    const std::vector<double> h0{0.4, -1.0, 2.0};
    const auto out = gru_layer_forward(random_tensor({1, 2}, rng), g, Mode::infer, 0.0, nullptr, cache, &h0);
    for (std::size_t j = 0; j < 3; ++j) CHECK(out[j] == 0.5 * h0[j]);
  }
  SUBCASE("matches the scalar-loop oracle") {
    const auto g = make(4, 4, 0.7);
    const Tensor x = random_tensor({5, 4}, rng);
    RecurrentCache cache;
    const auto out = gru_layer_forward(x, g, Mode::infer, 0.0, nullptr, cache);
    auto mat = [](const Tensor& t) {
      oracle::Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
      for (std::size_t i = 0; i < t.dim(0); ++i) {
        for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t[i * t.dim(1) + j];
      }
      return m;
    };
    const auto ref = oracle::gru(mat(x), mat(g.w_z), mat(g.w_r), mat(g.w_h), mat(g.u_z), mat(g.u_r),
                                 mat(g.u_h), g.b_z.data, g.b_r.data, g.b_h.data);
    for (std::size_t t = 0; t < 5; ++t) {
      for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(out[t * 4 + j] - ref[t][j]) < 1e-12);
    }
  }
  SUBCASE("width mismatch") {
    const auto g = make(3, 2, 1.0);
    RecurrentCache cache;
    CHECK_THROWS_AS(gru_layer_forward(Tensor({4, 5}), g, Mode::infer, 0.0, nullptr, cache), ShapeError);
  }
}

TEST_CASE("temporal max pool") {
  Tensor single({1, 3});
  single.data = {1.0, -2.0, 0.5};
  CHECK(temporal_max_pool(single).values == single.data);

  Tensor column({3, 1});
  column.data = {-1.0, 3.0, 2.0};
  const auto pool = temporal_max_pool(column);
  CHECK(pool.values[0] == 3.0);
  CHECK(pool.argmax[0] == 1);

  Tensor ties({3, 1});
  ties.data = {2.0, 2.0, 1.0};
  CHECK(temporal_max_pool(ties).argmax[0] == 0);
  CHECK_THROWS_AS(temporal_max_pool(Tensor({0, 2})), ShapeError);

  Rng rng(3);
  Tensor seq = random_tensor({9, 4}, rng);
  Tensor reversed({9, 4});
  for (std::size_t t = 0; t < 9; ++t) {
    std::copy_n(seq.data.begin() + static_cast<long>(t * 4), 4, reversed.data.begin() + static_cast<long>((8 - t) * 4));
  }
  CHECK(temporal_max_pool(seq).values == temporal_max_pool(reversed).values);

  ModelConfig c = tiny_config();
  const auto model = init_model(c);
  CHECK(classify_sequence(model, seq) == classify_sequence(model, reversed));
}

TEST_CASE("forward pass") {
  SUBCASE("zero network outputs one half") {
    auto model = init_model(tiny_config());
    zero_all(model);
    for (Mode mode : {Mode::train, Mode::infer}) {
      CHECK(forward(model, random_input(6, 8, 1), mode).probability == 0.5);
    }
  }
  SUBCASE("probability stays inside (0, 1)") {
    for (std::uint64_t s = 0; s < 10; ++s) {
      ModelConfig c = tiny_config();
      c.seed = s;
      c.recurrent_type = s % 2 ? RecurrentType::gru : RecurrentType::feedforward;
      const double p = predict(init_model(c), random_input(5 + s, 8, s));
      CHECK(p > 0.0);
      CHECK(p < 1.0);
    }
  }
  SUBCASE("duplicating frames leaves a frame-local network unchanged") {
    ModelConfig c = tiny_config();
    c.kernel = {1, 3};
    c.n_recurrent_layers = 0;
    c.n_feature_maps = 3;
    auto model = init_model(c);
    model.running[0].mean.fill(0.2);
    model.running[0].var.fill(1.7);
    const auto fm = random_input(7, 8, 4);
    FeatureMatrix twice = fm;
    twice.frames *= 2;
    twice.values.insert(twice.values.end(), fm.values.begin(), fm.values.end());
    CHECK(predict(model, twice) == predict(model, fm));
  }
  SUBCASE("infer mode is pure") {
    ModelConfig c = tiny_config();
    c.dropout_rate = 0.25;
    const auto model = init_model(c);
    const auto fm = random_input(6, 8, 2);
    CHECK(predict(model, fm) == predict(model, fm));
    Rng rng(1);
    const auto infer = forward(model, fm, Mode::infer, &rng);
    CHECK(infer.trace.conv[0].dropout_mask.data.empty());
  }
  SUBCASE("dropout masks apply in train mode") {
    ModelConfig c = tiny_config();
    c.dropout_rate = 0.25;
    c.n_recurrent_layers = 2;
    const auto model = init_model(c);
    Rng rng(5);
    const auto out = forward(model, random_input(40, 8, 2), Mode::train, &rng);
    const auto& mask = out.trace.conv[0].dropout_mask.data;
    const auto dropped = std::count(mask.begin(), mask.end(), 0.0);
    CHECK(dropped > 0);
    CHECK(std::count(mask.begin(), mask.end(), 1.0 / 0.75) + dropped == static_cast<long>(mask.size()));
    CHECK(out.trace.recurrent[0].input_mask.empty());
    CHECK(out.trace.recurrent[1].input_mask.size() == 4);
  }
  SUBCASE("wrong band count") {
    CHECK_THROWS_AS(predict(init_model(tiny_config()), random_input(4, 10, 1)), ShapeError);
  }
  SUBCASE("feedforward baseline has the same stage shapes") {
    ModelConfig c = tiny_config();
    c.n_recurrent_layers = 2;
    const auto fm = random_input(6, 8, 3);
    const auto a = forward(init_model(c), fm, Mode::infer);
    c.recurrent_type = RecurrentType::feedforward;
    const auto b = forward(init_model(c), fm, Mode::infer);
    for (std::size_t l = 0; l < a.trace.conv.size(); ++l) {
      CHECK(a.trace.conv[l].activation.shape == b.trace.conv[l].activation.shape);
    }
    for (std::size_t l = 0; l < 2; ++l) {
      CHECK(a.trace.recurrent[l].input.shape == b.trace.recurrent[l].input.shape);
      CHECK(a.trace.recurrent[l].output.shape == b.trace.recurrent[l].output.shape);
    }
    CHECK(a.trace.pooled.size() == b.trace.pooled.size());
  }
}

TEST_CASE("backward pass") {
  const auto model = init_model(tiny_config());
  const auto fm = random_input(7, 8, 9);
  const auto fwd = forward(model, fm, Mode::train);

  SUBCASE("zero upstream gradient") {
    const auto g = backward(model, fwd.trace, 0.0);
    for (const Tensor* t : std::as_const(g.params).tensors()) {
      for (double v : t->data) CHECK(v == 0.0);
    }
  }
  SUBCASE("output bias closed form") {
    const auto g = backward(model, fwd.trace, 0.7);
    const double p = fwd.probability;
    CHECK(g.params.out_b[0] == doctest::Approx(0.7 * p * (1.0 - p)).epsilon(1e-15));
  }
  SUBCASE("trace from another model") {
    ModelConfig other = tiny_config();
    other.conv_pooling = {2, 2};
    CHECK_THROWS_AS(backward(init_model(other), fwd.trace, 1.0), ShapeError);
  }
  SUBCASE("infer-mode trace differentiates the running-stat path") {
    const auto infer = forward(model, fm, Mode::infer);
    const auto g = backward(model, infer.trace, 1.0);
    // Finite difference on the first conv bias, which only matters in infer mode.
    CrnnModel m = model;
    const double h = 1e-5;
    m.params.conv[0].bias[0] += h;
    const double up = predict(m, fm);
    m.params.conv[0].bias[0] -= 2 * h;
    const double down = predict(m, fm);
    CHECK(g.params.conv[0].bias[0] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-5));
  }
}

TEST_CASE("gradient check") {
  SUBCASE("tiny model, T=7, F=8, 2 maps, GRU width 4") {
    CHECK(gradient_check(tiny_config(), 11) < 1e-4);
  }
  SUBCASE("negating one gradient is detected") {
    GradientCheckOptions opts;
    opts.corrupt = [](GradientSet& g) { g.params.out_b[0] = -g.params.out_b[0]; };
    CHECK(gradient_check(tiny_config(), 11, opts) > 1e-1);
  }
  SUBCASE("deterministic") {
    CHECK(gradient_check(tiny_config(), 5) == gradient_check(tiny_config(), 5));
  }
  SUBCASE("configuration matrix") {
    for (auto pooling : {std::vector<int>{2}, std::vector<int>{2, 2}}) {
      for (auto type : {RecurrentType::gru, RecurrentType::feedforward}) {
        for (int layers : {1, 2}) {
          ModelConfig c = tiny_config();
          c.conv_pooling = pooling;
          c.recurrent_type = type;
          c.n_recurrent_layers = layers;
          CAPTURE(layers);
          CAPTURE(pooling.size());
          CHECK(gradient_check(c, 21) < 1e-4);
        }
      }
    }
  }
}

TEST_CASE("activation export") {
  ModelConfig c = tiny_config();
  c.conv_pooling = {2, 2};
  auto model = init_model(c);
  const auto fm = random_input(6, 8, 1);
  const auto map = export_activations(model, fm, 1, 1);
  CHECK(map.shape == std::vector<std::size_t>{6, 4});
  CHECK(export_activations(model, fm, 0, 0).shape == std::vector<std::size_t>{6, 8});

  model.params.conv[0].kernel.fill(0.0);
  model.params.conv[0].beta.fill(0.0);
  for (double v : export_activations(model, fm, 0, 1).data) CHECK(v == 0.0);

  ModelConfig id = c;
  id.kernel = {1, 1};
  id.conv_pooling = {1};
  id.n_mels = 8;
  auto ident = init_model(id);
  ident.params.conv[0].kernel.fill(0.0);
  ident.params.conv[0].kernel[0] = 1.0;  // filter 0 <- input
  ident.running[0] = identity_stats(2);
  const auto out = export_activations(ident, fm, 0, 0);
  for (std::size_t i = 0; i < fm.values.size(); ++i) {
    CHECK(out[i] == doctest::Approx(std::max(0.0, fm.values[i])).epsilon(1e-12));
  }

  CHECK_THROWS_AS(export_activations(model, fm, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(export_activations(model, fm, 0, 2), std::invalid_argument);

  Tensor small({2, 2});
  small.data = {1.0, 0.0, 0.123456789012, 2.5};
  CHECK(activations_to_csv(small) == "1,0\n0.123456789,2.5\n");
}

TEST_CASE("model serialisation") {
  ModelConfig c = tiny_config();
  c.conv_pooling = {2, 2};
  c.n_recurrent_layers = 2;
  c.seed = 77;
  auto model = init_model(c);
  model.running[1].mean.fill(0.3);
  model.running[1].var.fill(2.2);
  testing::TempDir dir;
  save_model(model, dir / "m.badc");
  const auto loaded = load_model(dir / "m.badc");
  CHECK(loaded.config == model.config);
  const auto a = std::as_const(model.params).tensors();
  const auto b = std::as_const(loaded.params).tensors();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);
  CHECK(loaded.running[1].var == model.running[1].var);
  const auto fm = random_input(9, 8, 4);
  CHECK(predict(loaded, fm) == predict(model, fm));

  ModelConfig ff = c;
  ff.recurrent_type = RecurrentType::feedforward;
  const auto ffm = init_model(ff);
  CHECK(encode_model(decode_model(encode_model(ffm))) == encode_model(ffm));

  auto bytes = encode_model(model);
  bytes[1] = 'Z';
  CHECK_THROWS_AS(decode_model(bytes), FormatError);
  bytes = encode_model(model);
  bytes.resize(bytes.size() - 5);
  CHECK_THROWS_AS(decode_model(bytes), IoError);
  bytes = encode_model(model);
  bytes.push_back(0);
  CHECK_THROWS_AS(decode_model(bytes), FormatError);
}
