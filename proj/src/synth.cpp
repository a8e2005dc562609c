// src/synth.cpp

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

// Synthetic corpora for desk-scale experiments. Every utterance is generated
// from its own seeded stream, so files do not depend on generation order.

#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include "ser/corpus.hpp"
#include "ser/error.hpp"
#include "ser/random.hpp"
#include "ser/wav.hpp"

namespace ser {

namespace fs = std::filesystem;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct ClassVoice {
  double f0;        // Hz, before speaker offset
  double band_lo;   // harmonics outside [band_lo, band_hi] are silent
  double band_hi;
  double am_rate;   // Hz
};

// Index order follows kEmotionLabels: angry, happy, neutral, sad. Bands
// overlap; each utterance jitters pitch, band edges, tilt and envelope.
constexpr std::array<ClassVoice, kNumClasses> kVoices = {{
    {205.0, 450.0, 3600.0, 7.5},
    {235.0, 350.0, 2900.0, 5.0},
    {165.0, 180.0, 2300.0, 3.2},
    {135.0, 120.0, 1700.0, 2.0},
}};

std::vector<float> render_utterance(int cls, double speaker_factor,
                                    Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto jitter = [&](double spread) { return 1.0 + spread * (2.0 * unit(rng) - 1.0); };
  const ClassVoice& v = kVoices[cls];
  const double seconds = 1.2 + 1.2 * unit(rng);
  const auto n = static_cast<std::size_t>(seconds * kSampleRate);
  const double f0 = v.f0 * speaker_factor * jitter(0.08);
  const double lo = v.band_lo * jitter(0.12);
  const double hi = v.band_hi * jitter(0.12);
  const double tilt = -0.8 + 1.2 * unit(rng);  // power-law slope of partial amplitudes
  const double am_rate = v.am_rate * jitter(0.2);
  const double am_depth = 0.3 + 0.3 * unit(rng);
  const double am_phase = kTwoPi * unit(rng);

  struct Partial {
    double freq, amp, phase;
  };
  std::vector<Partial> partials;
  for (int k = 1; k * f0 < 7600.0; ++k) {
    const double f = k * f0;
    if (f < lo || f > hi) continue;
    partials.push_back({f, (0.6 + 0.4 * unit(rng)) * std::pow(f / 1000.0, tilt),
                        kTwoPi * unit(rng)});
  }

  std::vector<double> x(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    double s = 0.0;
    for (const auto& p : partials) s += p.amp * std::sin(kTwoPi * p.freq * t + p.phase);
    const double env = 1.0 - am_depth + am_depth * std::sin(kTwoPi * am_rate * t + am_phase);
    x[i] = env * s;
  }

  double energy = 0.0;
  for (double s : x) energy += s * s;
  const double rms = std::sqrt(energy / static_cast<double>(n));
  const double level = 0.08 + 0.06 * unit(rng);
  const double snr_db = 10.0 + 15.0 * unit(rng);
  std::normal_distribution<double> noise(0.0, level * std::pow(10.0, -snr_db / 20.0));
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<float>(x[i] * level / rms + noise(rng));
  }
  return out;
}

std::string two_digits(int v) {
  return (v < 10 ? "0" : "") + std::to_string(v);
}

}  // namespace

CorpusManifest synth_corpus(int n_speakers, int utts_per_speaker,
                            std::uint64_t seed, const fs::path& out_dir) {
  if (n_speakers < 2 || n_speakers % 2 != 0) {
    throw Error(Errc::kBadArgument, "n_speakers", "must be a positive even number");
  }
  if (utts_per_speaker < 1) {
    throw Error(Errc::kBadArgument, "utts_per_speaker", "must be positive");
  }
  std::error_code ec;
  fs::create_directories(out_dir / "wav", ec);
  if (ec) throw Error(Errc::kIoError, out_dir.string(), ec.message());

  CorpusManifest manifest;
  manifest.corpus_id = fs::absolute(out_dir).lexically_normal().filename().string();
  if (manifest.corpus_id.empty()) {
    manifest.corpus_id =
        fs::absolute(out_dir).lexically_normal().parent_path().filename().string();
  }

  for (int s = 0; s < n_speakers; ++s) {
    Rng speaker_rng = make_rng(seed, {static_cast<std::uint64_t>(s), 0});
    const double speaker_factor =
        1.0 + 0.2 * (std::uniform_real_distribution<double>(0.0, 1.0)(speaker_rng) - 0.5);
    const std::string speaker = "spk" + two_digits(s + 1);
    const std::string session = "ses" + two_digits(s / 2 + 1);

    for (int k = 0; k < utts_per_speaker; ++k) {
      const int cls = k % kNumClasses;
      Rng rng = make_rng(seed, {static_cast<std::uint64_t>(s),
                               static_cast<std::uint64_t>(k) + 1});
      Waveform wave;
      wave.samples = render_utterance(cls, speaker_factor, rng);

      char name[32];
      std::snprintf(name, sizeof(name), "_u%03d", k);
      Utterance u;
      u.id = speaker + name;
      u.speaker_id = speaker;
      u.session_id = session;
      u.label = std::string(kEmotionLabels[cls]);
      u.audio_path = (fs::absolute(out_dir) / "wav" / (u.id + ".wav")).lexically_normal();
      u.sample_rate = kSampleRate;
      u.duration = wave.duration();
      write_wav(u.audio_path, wave);
      manifest.label_set.insert(u.label);
      manifest.utterances.push_back(std::move(u));
    }
  }
  write_manifest(manifest, out_dir / "manifest.jsonl");
  return manifest;
}

void synth_noise_bank(std::uint64_t seed, const fs::path& out_dir, double seconds) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(Errc::kIoError, out_dir.string(), ec.message());
  const auto n = static_cast<std::size_t>(seconds * kSampleRate);
  const std::array<const char*, 5> types = {"kitchen", "park", "station", "traffic",
                                            "cafeteria"};

  for (std::size_t type = 0; type < types.size(); ++type) {
    Rng rng = make_rng(seed, {static_cast<std::uint64_t>(type), 99});
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> x(n, 0.0);

    switch (type) {
      case 0: {  // kitchen: decaying clatter bursts over a faint hiss
        for (auto& s : x) s = 0.05 * gauss(rng);
        for (std::size_t start = 0; start < n;
             start += static_cast<std::size_t>((0.05 + 0.3 * unit(rng)) * kSampleRate)) {
          const double amp = 0.5 + unit(rng);
          const double decay = 0.004 + 0.02 * unit(rng);
          for (std::size_t i = start; i < n && i < start + kSampleRate / 8; ++i) {
            const double t = static_cast<double>(i - start) / kSampleRate;
            x[i] += amp * std::exp(-t / decay) * gauss(rng);
          }
        }
        break;
      }
      case 1: {  // park: pink-ish wind plus bird chirps
        double b0 = 0, b1 = 0, b2 = 0;
        for (auto& s : x) {
          const double w = gauss(rng);
          b0 = 0.99765 * b0 + w * 0.0990460;
          b1 = 0.96300 * b1 + w * 0.2965164;
          b2 = 0.57000 * b2 + w * 1.0526913;
          s = 0.3 * (b0 + b1 + b2 + w * 0.1848);
        }
        for (std::size_t start = 0; start < n;
             start += static_cast<std::size_t>((0.2 + 0.6 * unit(rng)) * kSampleRate)) {
          const double f_start = 2500.0 + 2000.0 * unit(rng);
          const double sweep = (unit(rng) - 0.5) * 3000.0;
          const std::size_t len = kSampleRate / 12;
          double phase = 0.0;
          for (std::size_t i = start; i < n && i < start + len; ++i) {
            const double t = static_cast<double>(i - start) / kSampleRate;
            phase += kTwoPi * (f_start + sweep * t * 12.0) / kSampleRate;
            x[i] += 0.4 * std::sin(phase) * std::sin(std::numbers::pi * (i - start) / len);
          }
        }
        break;
      }
      case 2: {  // station: low rumble, mains hum, broadband reverberant hiss
        double lp = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double t = static_cast<double>(i) / kSampleRate;
          lp = 0.995 * lp + 0.05 * gauss(rng);
          x[i] = 2.0 * lp + 0.1 * std::sin(kTwoPi * 50.0 * t) +
                 0.05 * std::sin(kTwoPi * 100.0 * t) + 0.08 * gauss(rng);
        }
        break;
      }
      case 3: {  // traffic: brown noise with slow passing-vehicle swells
        double brown = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double t = static_cast<double>(i) / kSampleRate;
          brown = 0.998 * brown + 0.04 * gauss(rng);
          const double swell = 0.6 + 0.4 * std::sin(kTwoPi * 0.25 * t);
          x[i] = swell * brown + 0.01 * gauss(rng);
        }
        break;
      }
      default: {  // cafeteria: babble of unrelated voiced streams
        for (int voice = 0; voice < 6; ++voice) {
          const double f0 = 100.0 + 150.0 * unit(rng);
          const double am = 2.0 + 4.0 * unit(rng);
          const double phase = kTwoPi * unit(rng);
          for (std::size_t i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / kSampleRate;
            double s = 0.0;
            for (int k = 1; k * f0 < 3500.0; k += 1) {
              s += std::sin(kTwoPi * k * f0 * t + k * phase) / k;
            }
            x[i] += 0.15 * std::max(0.0, std::sin(kTwoPi * am * t + phase)) * s;
          }
        }
        for (auto& s : x) s += 0.02 * gauss(rng);
        break;
      }
    }

    double peak = 0.0;
    for (double s : x) peak = std::max(peak, std::abs(s));
    Waveform wave;
    wave.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      wave.samples[i] = static_cast<float>(0.5 * x[i] / peak);
    }
    write_wav(out_dir / (std::string(types[type]) + ".wav"), wave);
  }
}

}  // namespace ser
