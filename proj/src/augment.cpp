// src/augment.cpp

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

#include "ser/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ser/error.hpp"
#include "ser/wav.hpp"

namespace ser {

namespace fs = std::filesystem;

void MixupConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw Error(Errc::kBadConfig, "mixup.alpha", "must be positive");
  }
}

double sample_mixup_lambda(const MixupConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.distribution == LambdaDistribution::kUniform) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  }
  std::gamma_distribution<double> gamma(cfg.alpha, 1.0);
  const double a = gamma(rng);
  const double b = gamma(rng);
  // Both draws underflow for tiny alpha; either endpoint is then equally likely.
  if (a + b == 0.0) return std::uniform_int_distribution<int>(0, 1)(rng);
  return a / (a + b);
}

SegmentBatch mix_pairs(const SegmentBatch& batch, double lambda,
                       std::span<const int> partner) {
  if (static_cast<int>(partner.size()) != batch.n) {
    throw Error(Errc::kShapeMismatch, "mixup", "partner list does not match batch");
  }
  SegmentBatch out = batch;
  const auto lam = static_cast<float>(lambda);
  const float rest = 1.0f - lam;
  const std::size_t item = batch.item_size();
  for (int i = 0; i < batch.n; ++i) {
    const float* xi = batch.values.data() + i * item;
    const float* xj = batch.values.data() + static_cast<std::size_t>(partner[i]) * item;
    float* dst = out.values.data() + i * item;
    for (std::size_t k = 0; k < item; ++k) dst[k] = lam * xi[k] + rest * xj[k];
    for (int c = 0; c < kNumClasses; ++c) {
      out.labels[i][c] = lam * batch.labels[i][c] + rest * batch.labels[partner[i]][c];
    }
  }
  return out;
}

SegmentBatch mixup_batch(const SegmentBatch& batch, const MixupConfig& cfg, Rng& rng) {
  if (batch.n < 2) throw Error(Errc::kBatchTooSmall, std::to_string(batch.n));
  const double lambda = sample_mixup_lambda(cfg, rng);
  std::vector<int> partner(static_cast<std::size_t>(batch.n));
  std::iota(partner.begin(), partner.end(), 0);
  std::shuffle(partner.begin(), partner.end(), rng);
  return mix_pairs(batch, lambda, partner);
}

std::vector<float> speed_perturb(std::span<const float> waveform, double factor) {
  if (!(factor > 0.0) || !std::isfinite(factor)) {
    throw Error(Errc::kBadFactor, std::to_string(factor));
  }
  const std::size_t len = waveform.size();
  const auto out_len =
      static_cast<std::size_t>(std::llround(static_cast<double>(len) / factor));
  std::vector<float> out(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    const double pos = static_cast<double>(i) * factor;
    const auto i0 = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(i0);
    if (i0 + 1 >= len) {
      out[i] = waveform[std::min(i0, len - 1)];
    } else if (frac == 0.0) {
      out[i] = waveform[i0];
    } else {
      out[i] = static_cast<float>((1.0 - frac) * waveform[i0] + frac * waveform[i0 + 1]);
    }
  }
  return out;
}

std::string speed_copy_id(const std::string& source_id, double factor) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "#sp%g", factor);
  return source_id + buf;
}

CorpusManifest augment_corpus_sp(const CorpusManifest& manifest, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(Errc::kIoError, out_dir.string(), ec.message());

  CorpusManifest out;
  out.corpus_id = manifest.corpus_id;
  out.label_set = manifest.label_set;
  for (const auto& u : manifest.utterances) {
    out.utterances.push_back(u);
    if (is_augmented_copy(u.id)) continue;
    const Waveform wave = read_wav(u.audio_path);
    for (double factor : kSpeedFactors) {
      Waveform copy;
      copy.sample_rate = wave.sample_rate;
      copy.samples = speed_perturb(wave.samples, factor);
      std::string file = speed_copy_id(u.id, factor);
      std::replace(file.begin(), file.end(), '/', '_');
      std::replace(file.begin(), file.end(), '#', '_');
      Utterance c = u;
      c.id = speed_copy_id(u.id, factor);
      c.audio_path = (fs::absolute(out_dir) / (file + ".wav")).lexically_normal();
      c.duration = copy.duration();
      write_wav(c.audio_path, copy);
      out.utterances.push_back(std::move(c));
    }
  }
  return out;
}

NoiseBank NoiseBank::load(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(Errc::kNotFound, dir.string(), "no noise directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".wav") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  NoiseBank bank;
  for (const auto& path : files) {
    const std::string stem = path.stem().string();
    const auto type_it = std::find_if(kNoiseTypes.begin(), kNoiseTypes.end(),
                                      [&](const char* t) { return stem.rfind(t, 0) == 0; });
    if (type_it == kNoiseTypes.end()) continue;
    Waveform wave = read_wav(path);
    if (wave.sample_rate != kSampleRate) {
      throw Error(Errc::kBadSampleRate, path.string());
    }
    if (wave.samples.empty() || mean_power(wave.samples) == 0.0) {
      throw Error(Errc::kSilentNoise, path.string());
    }
    bank.entries.push_back({*type_it, stem, std::move(wave.samples)});
  }
  if (bank.entries.empty()) {
    throw Error(Errc::kNotFound, dir.string(), "no noise recordings of a known type");
  }
  return bank;
}

double mean_power(std::span<const float> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (float v : x) acc += static_cast<double>(v) * v;
  return acc / static_cast<double>(x.size());
}

NoisyMix mix_noise_at_offset(std::span<const float> clean, std::span<const float> noise,
                             double snr_db, std::size_t offset) {
  NoisyMix mix;
  mix.samples.assign(clean.begin(), clean.end());
  if (std::isinf(snr_db) && snr_db > 0) return mix;
  if (noise.empty()) throw Error(Errc::kSilentNoise, "empty noise");
  const double p_clean = mean_power(clean);
  if (p_clean == 0.0) throw Error(Errc::kBadArgument, "clean", "silent clean signal");

  std::vector<float> crop(clean.size());
  for (std::size_t i = 0; i < crop.size(); ++i) crop[i] = noise[(offset + i) % noise.size()];
  const double p_noise = mean_power(crop);
  if (p_noise == 0.0) throw Error(Errc::kSilentNoise, "noise crop at offset " +
                                                          std::to_string(offset));

  mix.offset = offset % noise.size();
  mix.gain = std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));
  for (std::size_t i = 0; i < crop.size(); ++i) {
    mix.samples[i] = static_cast<float>(clean[i] + mix.gain * crop[i]);
  }
  return mix;
}

NoisyMix mix_noise_at_snr(std::span<const float> clean, std::span<const float> noise,
                          double snr_db, Rng& rng) {
  if (std::isinf(snr_db) && snr_db > 0) return mix_noise_at_offset(clean, noise, snr_db, 0);
  if (noise.empty() || mean_power(noise) == 0.0) throw Error(Errc::kSilentNoise, "noise");
  const std::size_t offset =
      std::uniform_int_distribution<std::size_t>(0, noise.size() - 1)(rng);
  return mix_noise_at_offset(clean, noise, snr_db, offset);
}

}  // namespace ser
