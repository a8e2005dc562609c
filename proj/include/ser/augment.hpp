// ser/augment.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef SER_AUGMENT_HPP_
#define SER_AUGMENT_HPP_

#include <array>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ser/corpus.hpp"
#include "ser/features.hpp"
#include "ser/random.hpp"

namespace ser {

// ---------------------------------------------------------------------------
// Mixup

enum class LambdaDistribution { kBeta, kUniform };

struct MixupConfig {
  double alpha = 0.2;  // Beta(alpha, alpha) concentration
  bool enabled = false;
  LambdaDistribution distribution = LambdaDistribution::kBeta;

  void validate() const;  // BadConfig unless alpha > 0
};

double sample_mixup_lambda(const MixupConfig& cfg, Rng& rng);

// x~_i = lambda * x_i + (1 - lambda) * x_partner[i], same for labels.
SegmentBatch mix_pairs(const SegmentBatch& batch, double lambda,
                       std::span<const int> partner);

// One lambda per batch, partners from a random permutation.
// Throws BatchTooSmall for fewer than two items.
SegmentBatch mixup_batch(const SegmentBatch& batch, const MixupConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Speed perturbation

inline constexpr std::array<double, 2> kSpeedFactors = {0.9, 1.1};

// Resampling speed change (tempo and pitch together) by linear
// interpolation; output length is round(len / factor).
std::vector<float> speed_perturb(std::span<const float> waveform, double factor);

std::string speed_copy_id(const std::string& source_id, double factor);

// Original utterances plus one copy per factor in kSpeedFactors, written as
// WAV under out_dir. Copies keep speaker, session and label.
CorpusManifest augment_corpus_sp(const CorpusManifest& manifest,
                                 const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Additive noise

inline constexpr std::array<const char*, 5> kNoiseTypes = {
    "kitchen", "park", "station", "traffic", "cafeteria"};

struct NoiseEntry {
  std::string type;
  std::string name;  // file stem
  std::vector<float> samples;
};

struct NoiseBank {
  std::vector<NoiseEntry> entries;

  // Every *.wav in dir whose name starts with a known noise type
  // ("park.wav", "park_02.wav"). Rejects silent or non-16 kHz files.
  static NoiseBank load(const std::filesystem::path& dir);
};

inline constexpr double kNoNoise = std::numeric_limits<double>::infinity();

struct NoisyMix {
  std::vector<float> samples;
  std::size_t offset = 0;  // start of the (looped) noise crop
  double gain = 0.0;       // alpha applied to the crop
};

// Output = clean + gain * crop, crop = noise looped from a random offset,
// gain = sqrt(P_clean / (P_crop * 10^(snr_db / 10))). snr_db = kNoNoise
// returns the clean signal untouched.
NoisyMix mix_noise_at_snr(std::span<const float> clean, std::span<const float> noise,
                          double snr_db, Rng& rng);

// Deterministic core of mix_noise_at_snr for a given offset.
NoisyMix mix_noise_at_offset(std::span<const float> clean, std::span<const float> noise,
                             double snr_db, std::size_t offset);

double mean_power(std::span<const float> x);

}  // namespace ser

#endif  // SER_AUGMENT_HPP_
