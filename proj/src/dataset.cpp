#include "badcrnn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "badcrnn/errors.hpp"
#include "badcrnn/io.hpp"
#include "badcrnn/random.hpp"

namespace badcrnn {

void validate(const AudioClip& clip) {
  if (clip.samples.empty()) throw ValidationError("clip '" + clip.id + "' has no samples");
  if (clip.sample_rate <= 0) throw ValidationError("clip '" + clip.id + "' has invalid sample rate");
  for (double s : clip.samples) {
    if (!(s >= -1.0 && s <= 1.0)) {
      throw ValidationError("clip '" + clip.id + "' has a sample outside [-1, 1]");
    }
  }
}

// ---------------------------------------------------------------------------
// Manifest

std::size_t Manifest::count(int label) const {
  return static_cast<std::size_t>(std::count_if(
      entries.begin(), entries.end(), [&](const auto& e) { return e.label == label; }));
}

const ManifestEntry* Manifest::find(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.clip_id == id) return &e;
  }
  return nullptr;
}

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

Manifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;

  // Skip a UTF-8 byte order mark if present.
  if (!std::getline(in, line)) throw ParseError("missing header row", 1);
  ++line_no;
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  const auto header = split_csv(trim(line));
  if (header.size() < 2 || header[0] != "itemid" || header[1] != "hasbird" ||
      header.size() > 3 || (header.size() == 3 && header[2] != "path")) {
    throw ParseError("expected header 'itemid,hasbird[,path]'", line_no);
  }

  Manifest manifest;
  std::unordered_set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() < 2 || cells.size() > header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " columns", line_no);
    }
    if (cells[0].empty()) throw ParseError("empty itemid", line_no);
    if (cells[1] != "0" && cells[1] != "1") {
      throw ParseError("hasbird must be 0 or 1, got '" + cells[1] + "'", line_no);
    }
    if (!seen.insert(cells[0]).second) {
      throw ValidationError("duplicate itemid '" + cells[0] + "' at line " +
                            std::to_string(line_no));
    }
    ManifestEntry entry;
    entry.clip_id = cells[0];
    entry.label = cells[1] == "1" ? 1 : 0;
    std::filesystem::path p =
        cells.size() == 3 && !cells[2].empty() ? cells[2] : cells[0] + ".wav";
    entry.path = p.is_absolute() ? p : base_dir / p;
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

Manifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(io::read_text(path), path.parent_path());
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::string out = "itemid,hasbird\n";
  for (const auto& e : manifest.entries) {
    out += e.clip_id + "," + std::to_string(e.label) + "\n";
  }
  io::write_atomic(path, out);
}

// ---------------------------------------------------------------------------
// WAV

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

}  // namespace

AudioClip decode_wav_bytes(const std::vector<std::uint8_t>& bytes, std::string id) {
  io::ByteReader r(bytes);
  if (bytes.size() < 12) throw FormatError("'" + id + "': not a RIFF/WAVE file");
  if (r.bytes(4) != "RIFF") throw FormatError("'" + id + "': missing RIFF tag");
  r.u32();
  if (r.bytes(4) != "WAVE") throw FormatError("'" + id + "': missing WAVE tag");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (r.remaining() >= 8) {
    const auto tag = r.bytes(4);
    const std::uint32_t size = r.u32();
    if (tag == "fmt ") {
      if (size < 16 || r.remaining() < size) throw FormatError("'" + id + "': bad fmt chunk");
      format = r.u16();
      channels = r.u16();
      rate = r.u32();
      r.u32();  // byte rate
      r.u16();  // block align
      bits = r.u16();
      std::uint32_t consumed = 16;
      if (format == kFormatExtensible && size >= 40) {
        r.u16();  // cbSize
        r.u16();  // valid bits
        r.u32();  // channel mask
        format = r.u16();  // first two bytes of the sub-format GUID
        consumed += 10;
      }
      r.bytes(size - consumed + (size & 1u));
      have_fmt = true;
    } else if (tag == "data") {
      if (!have_fmt) throw FormatError("'" + id + "': data chunk before fmt chunk");
      const bool pcm16 = format == kFormatPcm && bits == 16;
      const bool f32 = format == kFormatFloat && bits == 32;
      if (!pcm16 && !f32) {
        throw FormatError("'" + id + "': unsupported codec (format " + std::to_string(format) +
                          ", " + std::to_string(bits) + " bits)");
      }
      if (channels == 0 || rate == 0) throw FormatError("'" + id + "': invalid fmt fields");
      if (r.remaining() < size) throw IoError("'" + id + "': truncated data chunk");
      const std::size_t width = bits / 8;
      const std::size_t frames = size / (width * channels);

      AudioClip clip;
      clip.id = std::move(id);
      clip.sample_rate = static_cast<int>(rate);
      clip.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          double v = pcm16 ? static_cast<std::int16_t>(r.u16()) / 32768.0 : r.f32();
          acc += std::clamp(v, -1.0, 1.0);
        }
        clip.samples[i] = acc / channels;
      }
      validate(clip);
      return clip;
    } else {
      if (r.remaining() < size) throw IoError("'" + id + "': truncated chunk " + tag);
      r.bytes(size + (size & 1u));
    }
  }
  throw FormatError("'" + id + "': no data chunk");
}

AudioClip decode_wav(const std::filesystem::path& path) {
  return decode_wav_bytes(io::read_bytes(path), path.stem().string());
}

std::vector<std::uint8_t> encode_wav(const AudioClip& clip, WavEncoding encoding,
                                     int channels) {
  const std::uint16_t width = encoding == WavEncoding::pcm16 ? 2 : 4;
  const auto data_size =
      static_cast<std::uint32_t>(clip.samples.size() * width * static_cast<std::size_t>(channels));
  io::ByteWriter w;
  w.bytes("RIFF");
  w.u32(36 + data_size);
  w.bytes("WAVE");
  w.bytes("fmt ");
  w.u32(16);
  w.u16(encoding == WavEncoding::pcm16 ? kFormatPcm : kFormatFloat);
  w.u16(static_cast<std::uint16_t>(channels));
  w.u32(static_cast<std::uint32_t>(clip.sample_rate));
  w.u32(static_cast<std::uint32_t>(clip.sample_rate) * width * channels);
  w.u16(static_cast<std::uint16_t>(width * channels));
  w.u16(static_cast<std::uint16_t>(width * 8));
  w.bytes("data");
  w.u32(data_size);
  for (double s : clip.samples) {
    for (int c = 0; c < channels; ++c) {
      if (encoding == WavEncoding::pcm16) {
        const double scaled = std::round(std::clamp(s, -1.0, 1.0) * 32768.0);
        w.u16(static_cast<std::uint16_t>(
            static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0))));
      } else {
        w.f32(static_cast<float>(s));
      }
    }
  }
  return w.buffer();
}

void write_wav(const AudioClip& clip, const std::filesystem::path& path, WavEncoding encoding) {
  io::write_atomic(path, encode_wav(clip, encoding));
}

// ---------------------------------------------------------------------------
// Splits

std::vector<SplitAssignment> make_splits(const Manifest& manifest, SplitRatios ratios,
                                         int n_splits, std::uint64_t seed) {
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  if (ratios[0] <= 0.0) throw ConfigError("training ratio must be positive");
  if (n_splits < 1) throw ConfigError("n_splits must be at least 1");
  if (manifest.entries.empty()) throw ValidationError("manifest is empty");

  const auto partitions =
      static_cast<std::size_t>(std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0.0; }));
  std::array<std::vector<std::string>, 2> by_class;
  for (const auto& e : manifest.entries) by_class[e.label].push_back(e.clip_id);
  for (int c = 0; c < 2; ++c) {
    if (by_class[c].size() < partitions) {
      throw StratificationError("class " + std::to_string(c) + " has " +
                                std::to_string(by_class[c].size()) + " items for " +
                                std::to_string(partitions) + " partitions");
    }
  }

  std::vector<SplitAssignment> splits;
  for (int k = 0; k < n_splits; ++k) {
    Rng rng(seed + static_cast<std::uint64_t>(k));
    SplitAssignment split;
    split.seed = seed + static_cast<std::uint64_t>(k);
    for (auto ids : by_class) {
      rng.shuffle(std::span(ids));
      const auto n = static_cast<double>(ids.size());
      auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * n));
      auto n_val = static_cast<std::size_t>(std::llround(ratios[1] * n));
      n_train = std::min(n_train, ids.size());
      n_val = std::min(n_val, ids.size() - n_train);
      if (ratios[2] == 0.0) n_val = ids.size() - n_train;
      split.train.insert(split.train.end(), ids.begin(), ids.begin() + n_train);
      split.validation.insert(split.validation.end(), ids.begin() + n_train,
                              ids.begin() + n_train + n_val);
      split.test.insert(split.test.end(), ids.begin() + n_train + n_val, ids.end());
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.validation.begin(), split.validation.end());
    std::sort(split.test.begin(), split.test.end());
    splits.push_back(std::move(split));
  }
  return splits;
}

std::string splits_to_json(const SplitFile& file) {
  nlohmann::ordered_json j;
  j["seed"] = file.seed;
  j["ratios"] = file.ratios;
  j["splits"] = nlohmann::ordered_json::array();
  for (const auto& s : file.splits) {
    j["splits"].push_back({{"train", s.train}, {"val", s.validation}, {"test", s.test}});
  }
  return j.dump(2) + "\n";
}

SplitFile splits_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    SplitFile file;
    file.seed = j.at("seed").get<std::uint64_t>();
    file.ratios = j.at("ratios").get<SplitRatios>();
    std::uint64_t k = 0;
    for (const auto& s : j.at("splits")) {
      SplitAssignment a;
      a.train = s.at("train").get<std::vector<std::string>>();
      a.validation = s.at("val").get<std::vector<std::string>>();
      a.test = s.at("test").get<std::vector<std::string>>();
      a.seed = file.seed + k++;
      file.splits.push_back(std::move(a));
    }
    return file;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("split file: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Synthesis

void validate(const SynthSpec& spec) {
  if (!(spec.duration_s > 0.0)) throw ConfigError("synth duration must be positive");
  if (spec.sample_rate <= 0) throw ConfigError("synth sample rate must be positive");
  if (spec.n_chirps.first < 0 || spec.n_chirps.first > spec.n_chirps.second) {
    throw ConfigError("synth chirp count range is invalid");
  }
  const auto [lo, hi] = spec.chirp_band;
  if (!(lo >= 0.0 && lo < hi && hi < spec.sample_rate / 2.0)) {
    throw ConfigError("synth chirp band must satisfy 0 <= low < high < sample_rate/2");
  }
  if (!(spec.noise_level >= 0.0) || !(spec.distractor_level >= 0.0)) {
    throw ConfigError("synth levels must be non-negative");
  }
}

std::pair<AudioClip, int> synth_clip(const SynthSpec& spec, std::uint64_t seed, std::string id) {
  validate(spec);
  const double fs = spec.sample_rate;
  const auto n = static_cast<std::size_t>(std::llround(spec.duration_s * fs));
  constexpr double two_pi = 2.0 * std::numbers::pi;

  Rng rng(seed);
  std::vector<double> x(std::max<std::size_t>(n, 1), 0.0);
  if (spec.noise_level > 0.0) {
    for (double& v : x) v = spec.noise_level * rng.normal();
  }

  if (spec.distractor_level > 0.0) {
    const double f = rng.uniform(100.0, 900.0);
    const double phase = rng.uniform(0.0, two_pi);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += spec.distractor_level * std::sin(two_pi * f * i / fs + phase);
    }
  }

  if (spec.positive) {
    const auto [lo, hi] = spec.chirp_band;
    const int span = spec.n_chirps.second - spec.n_chirps.first + 1;
    const int count = spec.n_chirps.first + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
    for (int c = 0; c < count; ++c) {
      const double dur = std::min(rng.uniform(0.05, 0.3), spec.duration_s);
      const double onset = rng.uniform(0.0, spec.duration_s - dur);
      const double f0 = rng.uniform(lo, hi);
      const double f1 = rng.uniform(lo, hi);
      const double amp = rng.uniform(0.3, 1.0);
      const auto start = static_cast<std::size_t>(onset * fs);
      const auto len = static_cast<std::size_t>(dur * fs);
      for (std::size_t i = 0; i < len && start + i < x.size(); ++i) {
        const double t = i / fs;
        const double phase = two_pi * (f0 * t + 0.5 * (f1 - f0) / dur * t * t);
        const double env = 0.5 - 0.5 * std::cos(two_pi * i / std::max<double>(len - 1, 1));
        x[start + i] += amp * env * std::sin(phase);
      }
    }
  }

  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.0) {
    const double gain = 0.99 / peak;
    for (double& v : x) v *= gain;
  }

  AudioClip clip{std::move(id), std::move(x), spec.sample_rate};
  return {std::move(clip), spec.positive ? 1 : 0};
}

}  // namespace badcrnn
