#pragma once

#include <cstdint>

#include "badcrnn/dataset.hpp"
#include "badcrnn/features.hpp"
#include "badcrnn/train.hpp"

namespace testing {

struct SyntheticSplit {
  badcrnn::Dataset train;
  badcrnn::Dataset validation;
};

// Synthetic chirp-vs-noise clips turned into normalised log-mel features.
// Normalisation statistics come from the training clips only.
inline SyntheticSplit synthetic_split(std::size_t n_train, std::size_t n_val, double duration_s,
                                      int sample_rate, std::uint64_t seed) {
  badcrnn::SynthSpec spec;
  spec.duration_s = duration_s;
  spec.sample_rate = sample_rate;
  badcrnn::FeatureConfig config;
  auto make = [&](std::size_t count, std::uint64_t offset) {
    badcrnn::Dataset set;
    for (std::size_t i = 0; i < count; ++i) {
      spec.positive = i % 2 == 0;
      const auto [clip, label] =
          badcrnn::synth_clip(spec, seed * 100003 + offset + i, "clip" + std::to_string(offset + i));
      set.push_back({badcrnn::extract_features(clip, config), label});
    }
    return set;
  };
  SyntheticSplit split{make(n_train, 0), make(n_val, 1'000'000)};
  std::vector<badcrnn::FeatureMatrix> fit;
  for (const auto& c : split.train) fit.push_back(c.features);
  const auto stats = badcrnn::fit_norm_stats(fit);
  for (auto* set : {&split.train, &split.validation}) {
    for (auto& c : *set) c.features = badcrnn::normalize(c.features, stats);
  }
  return split;
}

}  // namespace testing
