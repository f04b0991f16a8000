#include "badcrnn/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <numbers>

#include <fftw3.h>
#include <nlohmann/json.hpp>

#include "badcrnn/errors.hpp"
#include "badcrnn/io.hpp"

namespace badcrnn {

int FeatureConfig::frame_length(int sample_rate) const {
  return static_cast<int>(std::lround(frame_ms / 1000.0 * sample_rate));
}

int FeatureConfig::hop_length(int sample_rate) const {
  return static_cast<int>(std::lround(frame_length(sample_rate) * (1.0 - overlap_fraction)));
}

double FeatureConfig::resolved_fmax(int sample_rate) const {
  return fmax < 0.0 ? sample_rate / 2.0 : fmax;
}

namespace {

void check_config(const FeatureConfig& config, int sample_rate) {
  if (sample_rate <= 0) throw ConfigError("sample rate must be positive");
  if (!(config.overlap_fraction >= 0.0 && config.overlap_fraction < 1.0)) {
    throw ConfigError("overlap_fraction must lie in [0, 1)");
  }
  const int n = config.frame_length(sample_rate);
  if (n < 1) throw ConfigError("frame length rounds to zero samples");
  if (config.hop_length(sample_rate) < 1) throw ConfigError("hop length rounds to zero samples");
  if (config.fft_size < n || !std::has_single_bit(static_cast<unsigned>(config.fft_size))) {
    throw ConfigError("fft_size must be a power of two no smaller than the frame length (" +
                      std::to_string(n) + ")");
  }
  if (config.n_mels < 1) throw ConfigError("n_mels must be positive");
  if (!(config.log_epsilon > 0.0)) throw ConfigError("log_epsilon must be positive");
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> hamming_window(std::size_t length) {
  std::vector<double> w(length, 1.0);
  if (length < 2) return w;
  const double denom = static_cast<double>(length - 1);
  for (std::size_t n = 0; n < length; ++n) {
    w[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / denom);
  }
  return w;
}

Frames frame_signal(const AudioClip& clip, const FeatureConfig& config, bool apply_window) {
  if (clip.samples.empty()) throw ValidationError("cannot frame an empty clip");
  check_config(config, clip.sample_rate);
  const auto n = static_cast<std::size_t>(config.frame_length(clip.sample_rate));
  const auto hop = static_cast<std::size_t>(config.hop_length(clip.sample_rate));
  const std::size_t len = clip.samples.size();

  Frames frames;
  frames.length = n;
  frames.count = (len + hop - 1) / hop;
  frames.samples.assign(frames.count * n, 0.0);
  const auto window = apply_window ? hamming_window(n) : std::vector<double>(n, 1.0);
  for (std::size_t t = 0; t < frames.count; ++t) {
    const std::size_t start = t * hop;
    const std::size_t avail = std::min(n, len - start);
    double* out = frames.samples.data() + t * n;
    for (std::size_t i = 0; i < avail; ++i) out[i] = clip.samples[start + i] * window[i];
  }
  return frames;
}

namespace {

// FFTW planning is not thread-safe; execution with distinct buffers is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

struct PlanDestroy {
  void operator()(fftw_plan p) const {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(p);
  }
};

}  // namespace

Spectrogram stft_magnitude(const Frames& frames, const FeatureConfig& config) {
  const auto fft = static_cast<std::size_t>(config.fft_size);
  if (!std::has_single_bit(fft) || fft < frames.length) {
    throw ConfigError("fft_size must be a power of two no smaller than the frame length");
  }
  const std::size_t bins = fft / 2 + 1;

  std::unique_ptr<double, FftwFree> in(fftw_alloc_real(fft));
  std::unique_ptr<fftw_complex, FftwFree> out(fftw_alloc_complex(bins));
  std::unique_ptr<fftw_plan_s, PlanDestroy> plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan.reset(fftw_plan_dft_r2c_1d(static_cast<int>(fft), in.get(), out.get(), FFTW_ESTIMATE));
  }

  Spectrogram spec;
  spec.frames = frames.count;
  spec.bins = bins;
  spec.values.resize(frames.count * bins);
  for (std::size_t t = 0; t < frames.count; ++t) {
    const auto row = frames.row(t);
    std::copy(row.begin(), row.end(), in.get());
    std::fill(in.get() + row.size(), in.get() + fft, 0.0);
    fftw_execute(plan.get());
    double* dst = spec.values.data() + t * bins;
    for (std::size_t k = 0; k < bins; ++k) dst[k] = std::hypot(out.get()[k][0], out.get()[k][1]);
  }
  return spec;
}

FilterBank mel_filterbank(const FeatureConfig& config, int sample_rate) {
  check_config(config, sample_rate);
  const double nyquist = sample_rate / 2.0;
  const double fmax = config.resolved_fmax(sample_rate);
  if (fmax > nyquist) throw ConfigError("fmax exceeds the Nyquist frequency");
  if (!(config.fmin >= 0.0 && config.fmin < fmax)) throw ConfigError("fmin must lie in [0, fmax)");

  FilterBank bank;
  bank.n_mels = static_cast<std::size_t>(config.n_mels);
  bank.n_bins = static_cast<std::size_t>(config.fft_size) / 2 + 1;
  bank.weights.assign(bank.n_mels * bank.n_bins, 0.0);

  const double mel_lo = hz_to_mel(config.fmin);
  const double mel_hi = hz_to_mel(fmax);
  const std::size_t edges = bank.n_mels + 2;
  bank.boundary_hz.resize(edges);
  for (std::size_t i = 0; i < edges; ++i) {
    const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(edges - 1);
    bank.boundary_hz[i] = mel_to_hz(mel);
  }
  bank.boundary_hz.front() = config.fmin;
  bank.boundary_hz.back() = fmax;

  const double bin_hz = static_cast<double>(sample_rate) / config.fft_size;
  for (std::size_t b = 0; b < bank.n_mels; ++b) {
    const double left = bank.boundary_hz[b];
    const double centre = bank.boundary_hz[b + 1];
    const double right = bank.boundary_hz[b + 2];
    bool any = false;
    for (std::size_t k = 0; k < bank.n_bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      const double w = std::max(0.0, std::min((f - left) / (centre - left), (right - f) / (right - centre)));
      bank.weights[b * bank.n_bins + k] = w;
      any = any || w > 0.0;
    }
    if (!any) {
      throw ConfigError("mel band " + std::to_string(b) +
                        " covers no FFT bin; increase fft_size or reduce n_mels");
    }
  }
  return bank;
}

FeatureMatrix log_mel(const Spectrogram& magnitudes, const FilterBank& bank,
                      const FeatureConfig& config, std::string clip_id) {
  if (magnitudes.bins != bank.n_bins) {
    throw ShapeError("spectrogram has " + std::to_string(magnitudes.bins) +
                     " bins but the filterbank expects " + std::to_string(bank.n_bins));
  }
  FeatureMatrix fm;
  fm.clip_id = std::move(clip_id);
  fm.frames = magnitudes.frames;
  fm.bands = bank.n_mels;
  fm.values.resize(fm.frames * fm.bands);
  std::vector<double> power(bank.n_bins);
  for (std::size_t t = 0; t < fm.frames; ++t) {
    const auto row = magnitudes.row(t);
    for (std::size_t k = 0; k < bank.n_bins; ++k) power[k] = row[k] * row[k];
    for (std::size_t b = 0; b < bank.n_mels; ++b) {
      const double* w = bank.weights.data() + b * bank.n_bins;
      double energy = 0.0;
      for (std::size_t k = 0; k < bank.n_bins; ++k) energy += w[k] * power[k];
      fm.at(t, b) = std::log(energy + config.log_epsilon);
    }
  }
  return fm;
}

FeatureMatrix extract_features(const AudioClip& clip, const FeatureConfig& config) {
  const auto frames = frame_signal(clip, config);
  const auto spec = stft_magnitude(frames, config);
  const auto bank = mel_filterbank(config, clip.sample_rate);
  return log_mel(spec, bank, config, clip.id);
}

NormStats fit_norm_stats(const std::vector<FeatureMatrix>& features) {
  if (features.empty()) throw ValidationError("cannot fit normalisation on no features");
  const std::size_t bands = features.front().bands;
  NormStats stats;
  stats.mean.assign(bands, 0.0);
  stats.stddev.assign(bands, 0.0);
  // Running mean keeps a constant band exactly equal to its value.
  std::size_t n = 0;
  for (const auto& fm : features) {
    if (fm.bands != bands) throw ShapeError("feature matrices disagree on band count");
    for (std::size_t t = 0; t < fm.frames; ++t) {
      ++n;
      for (std::size_t b = 0; b < bands; ++b) {
        stats.mean[b] += (fm.at(t, b) - stats.mean[b]) / static_cast<double>(n);
      }
    }
  }
  if (n == 0) throw ValidationError("cannot fit normalisation on zero frames");
  for (const auto& fm : features) {
    for (std::size_t t = 0; t < fm.frames; ++t) {
      for (std::size_t b = 0; b < bands; ++b) {
        const double d = fm.at(t, b) - stats.mean[b];
        stats.stddev[b] += d * d;
      }
    }
  }
  for (double& s : stats.stddev) s = std::max(std::sqrt(s / static_cast<double>(n)), kStdFloor);
  return stats;
}

FeatureMatrix normalize(const FeatureMatrix& fm, const NormStats& stats) {
  if (stats.mean.size() != fm.bands || stats.stddev.size() != fm.bands) {
    throw ShapeError("normalisation statistics do not match the band count");
  }
  FeatureMatrix out = fm;
  for (std::size_t t = 0; t < fm.frames; ++t) {
    for (std::size_t b = 0; b < fm.bands; ++b) {
      out.at(t, b) = (fm.at(t, b) - stats.mean[b]) / stats.stddev[b];
    }
  }
  return out;
}

std::string norm_stats_to_json(const NormStats& stats) {
  nlohmann::ordered_json j;
  j["mean"] = stats.mean;
  j["std"] = stats.stddev;
  j["n_mels"] = stats.mean.size();
  return j.dump(2) + "\n";
}

NormStats norm_stats_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    NormStats stats{j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
    if (stats.mean.size() != stats.stddev.size() ||
        stats.mean.size() != j.at("n_mels").get<std::size_t>()) {
      throw FormatError("normalisation statistics have inconsistent lengths");
    }
    return stats;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("normalisation statistics: ") + e.what());
  }
}

namespace {
constexpr std::string_view kFeatureMagic = "BADF";
constexpr std::uint16_t kFeatureVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_features(const FeatureMatrix& fm) {
  io::ByteWriter w;
  w.bytes(kFeatureMagic);
  w.u16(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(fm.frames));
  w.u32(static_cast<std::uint32_t>(fm.bands));
  for (double v : fm.values) w.f32(static_cast<float>(v));
  w.u32(static_cast<std::uint32_t>(fm.clip_id.size()));
  w.bytes(fm.clip_id);
  return w.buffer();
}

FeatureMatrix decode_features(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 4 || r.bytes(4) != kFeatureMagic) throw FormatError("not a BADF feature file");
  if (const auto version = r.u16(); version != kFeatureVersion) {
    throw FormatError("unsupported feature file version " + std::to_string(version));
  }
  FeatureMatrix fm;
  fm.frames = r.u32();
  fm.bands = r.u32();
  if (r.remaining() / 4 < fm.frames * fm.bands) throw IoError("truncated feature file");
  fm.values.resize(fm.frames * fm.bands);
  for (double& v : fm.values) v = r.f32();
  fm.clip_id = r.bytes(r.u32());
  return fm;
}

void save_features(const FeatureMatrix& fm, const std::filesystem::path& path) {
  io::write_atomic(path, encode_features(fm));
}

FeatureMatrix load_features(const std::filesystem::path& path) {
  return decode_features(io::read_bytes(path));
}

}  // namespace badcrnn
