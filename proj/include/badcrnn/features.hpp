#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "badcrnn/dataset.hpp"

namespace badcrnn {

struct FeatureConfig {
  double frame_ms = 40.0;
  double overlap_fraction = 0.5;
  int n_mels = 40;
  int fft_size = 2048;
  double fmin = 0.0;
  // Negative means the Nyquist frequency of the clip being processed.
  double fmax = -1.0;
  double log_epsilon = 1e-10;

  int frame_length(int sample_rate) const;
  int hop_length(int sample_rate) const;
  double resolved_fmax(int sample_rate) const;
};

// Row-major T x F matrix of log mel-band energies.
struct FeatureMatrix {
  std::string clip_id;
  std::size_t frames = 0;
  std::size_t bands = 0;
  std::vector<double> values;

  double at(std::size_t t, std::size_t b) const { return values[t * bands + b]; }
  double& at(std::size_t t, std::size_t b) { return values[t * bands + b]; }
  bool operator==(const FeatureMatrix&) const = default;
};

// Row-major frames x frame_length windowed samples.
struct Frames {
  std::size_t count = 0;
  std::size_t length = 0;
  std::vector<double> samples;

  std::span<const double> row(std::size_t t) const { return {samples.data() + t * length, length}; }
};

// Row-major frames x bins magnitudes.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t t) const { return {values.data() + t * bins, bins}; }
};

struct FilterBank {
  std::size_t n_mels = 0;
  std::size_t n_bins = 0;
  std::vector<double> weights;       // n_mels x n_bins
  std::vector<double> boundary_hz;   // n_mels + 2 edges

  double weight(std::size_t band, std::size_t bin) const { return weights[band * n_bins + bin]; }
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

inline constexpr double kStdFloor = 1e-8;

double hz_to_mel(double hz);
double mel_to_hz(double mel);

std::vector<double> hamming_window(std::size_t length);

// Splits the clip into Hamming-windowed frames; frame t starts at t*hop and
// trailing frames are zero padded. Pass `apply_window = false` for raw frames.
Frames frame_signal(const AudioClip& clip, const FeatureConfig& config, bool apply_window = true);

// One-sided DFT magnitudes, bins 0..fft_size/2, of each zero-padded frame.
Spectrogram stft_magnitude(const Frames& frames, const FeatureConfig& config);

FilterBank mel_filterbank(const FeatureConfig& config, int sample_rate);

// ln(|X|^2 . W^T + eps) per frame.
FeatureMatrix log_mel(const Spectrogram& magnitudes, const FilterBank& bank,
                      const FeatureConfig& config, std::string clip_id = {});

// Full pipeline: frame, STFT, mel filterbank, log.
FeatureMatrix extract_features(const AudioClip& clip, const FeatureConfig& config);

NormStats fit_norm_stats(const std::vector<FeatureMatrix>& features);
FeatureMatrix normalize(const FeatureMatrix& fm, const NormStats& stats);

std::string norm_stats_to_json(const NormStats& stats);
NormStats norm_stats_from_json(const std::string& text);

// "BADF" binary container; values are stored as float32.
std::vector<std::uint8_t> encode_features(const FeatureMatrix& fm);
FeatureMatrix decode_features(const std::vector<std::uint8_t>& bytes);
void save_features(const FeatureMatrix& fm, const std::filesystem::path& path);
FeatureMatrix load_features(const std::filesystem::path& path);

}  // namespace badcrnn
