#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace badcrnn {

// One mono recording. Samples lie in [-1, 1].
struct AudioClip {
  std::string id;
  std::vector<double> samples;
  int sample_rate = 0;

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

// Throws ValidationError if the clip is empty, has a non-positive rate, or
// a sample outside [-1, 1].
void validate(const AudioClip& clip);

struct ManifestEntry {
  std::string clip_id;
  int label = 0;  // 1 = bird present
  std::filesystem::path path;
};

struct Manifest {
  std::vector<ManifestEntry> entries;

  std::size_t count(int label) const;
  const ManifestEntry* find(const std::string& id) const;
};

// Reads the challenge-style CSV: header `itemid,hasbird[,path]`. Relative
// paths resolve against the manifest's directory; a missing path column
// defaults to `<itemid>.wav`.
Manifest load_manifest(const std::filesystem::path& path);
Manifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

enum class WavEncoding { pcm16, float32 };

AudioClip decode_wav(const std::filesystem::path& path);
AudioClip decode_wav_bytes(const std::vector<std::uint8_t>& bytes, std::string id);
std::vector<std::uint8_t> encode_wav(const AudioClip& clip,
                                     WavEncoding encoding = WavEncoding::pcm16,
                                     int channels = 1);
void write_wav(const AudioClip& clip, const std::filesystem::path& path,
               WavEncoding encoding = WavEncoding::pcm16);

using SplitRatios = std::array<double, 3>;

struct SplitAssignment {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
  std::uint64_t seed = 0;
};

// Stratified random partitions. Split k shuffles each class independently
// with a generator seeded by `seed + k`.
std::vector<SplitAssignment> make_splits(const Manifest& manifest, SplitRatios ratios,
                                         int n_splits, std::uint64_t seed);

struct SplitFile {
  std::uint64_t seed = 0;
  SplitRatios ratios{};
  std::vector<SplitAssignment> splits;
};

std::string splits_to_json(const SplitFile& file);
SplitFile splits_from_json(const std::string& text);

struct SynthSpec {
  double duration_s = 10.0;
  int sample_rate = 44100;
  std::pair<int, int> n_chirps{1, 4};
  std::pair<double, double> chirp_band{2000.0, 8000.0};
  double noise_level = 0.1;
  // Amplitude of a steady tone below 1 kHz; 0 disables it.
  double distractor_level = 0.0;
  bool positive = true;
};

void validate(const SynthSpec& spec);

// Deterministic synthetic recording. Positives carry linear-FM chirps inside
// `chirp_band`; both classes carry white noise. Output is peak-normalised.
std::pair<AudioClip, int> synth_clip(const SynthSpec& spec, std::uint64_t seed,
                                     std::string id = "synth");

}  // namespace badcrnn
