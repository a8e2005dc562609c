// tests/test_features.cpp

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

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ser/features.hpp"
#include "ser/wav.hpp"
#include "support.hpp"

namespace ser {
namespace {

namespace fs = std::filesystem;
using ser::testing::Fixture;
using ser::testing::TempDir;

std::vector<float> sine(double hz, int n, double amp = 0.5) {
  std::vector<float> x(n);
  for (int i = 0; i < n; ++i) {
    x[i] = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * hz * i / kSampleRate));
  }
  return x;
}

TEST(Stft, SilenceHitsTheLogFloor) {
  const SpectrogramParams p;
  const Spectrogram s = stft_spectrogram(std::vector<float>(16000, 0.0f), p);
  EXPECT_EQ(s.n_bins, 128);
  EXPECT_EQ(s.n_frames, 98);
  for (float v : s.values) EXPECT_EQ(v, static_cast<float>(std::log(p.log_floor)));
}

TEST(Stft, SinePeaksAtItsBin) {
  const Spectrogram s = stft_spectrogram(sine(1000.0, 16000), SpectrogramParams{});
  // Bin 32 = 1000 * 512 / 16000; the DC bin is dropped so it sits in row 31.
  for (int t = 0; t < s.n_frames; ++t) {
    int best = 0;
    for (int b = 1; b < s.n_bins; ++b) {
      if (s.at(b, t) > s.at(best, t)) best = b;
    }
    EXPECT_EQ(best, 31) << "frame " << t;
  }
}

TEST(Stft, ParsevalOnWindowedFrames) {
  const SpectrogramParams p;
  Rng rng = make_rng(1);
  std::normal_distribution<double> g(0.0, 0.3);
  const auto window = hamming_window(p.window_samples());
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<float> frame(p.window_samples());
    for (auto& v : frame) v = static_cast<float>(g(rng));
    const auto power = frame_power_spectrum(frame, p);
    ASSERT_EQ(power.size(), static_cast<std::size_t>(p.fft_size / 2 + 1));
    double spectral = power.front() + power.back();
    for (std::size_t k = 1; k + 1 < power.size(); ++k) spectral += 2.0 * power[k];
    double temporal = 0.0;
    for (std::size_t i = 0; i < frame.size(); ++i) {
      temporal += (window[i] * frame[i]) * (window[i] * frame[i]);
    }
    EXPECT_NEAR(spectral / (p.fft_size * temporal), 1.0, 1e-6);
  }
}

TEST(Stft, TooShortAndBadParams) {
  EXPECT_THROW(stft_spectrogram(std::vector<float>(100, 0.1f), SpectrogramParams{}), Error);
  SpectrogramParams p;
  p.n_bins = 300;
  EXPECT_THROW(p.validate(), Error);
}

Spectrogram ramp(int frames, int bins = 3) {
  Spectrogram s;
  s.n_bins = bins;
  s.n_frames = frames;
  s.utterance_id = "r";
  s.values.resize(static_cast<std::size_t>(bins) * frames);
  for (std::size_t k = 0; k < s.values.size(); ++k) s.values[k] = static_cast<float>(k);
  return s;
}

TEST(Segment, ExactFit) {
  const Spectrogram s = ramp(256);
  const auto segs = segment(s, 256, 128, 2);
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_EQ(segs[0].values, s.values);
  EXPECT_EQ(segs[0].label, one_hot(2));
  EXPECT_EQ(segs[0].utterance_id, "r");
}

TEST(Segment, HopGrid) {
  const Spectrogram s = ramp(512);
  const auto segs = segment(s, 256, 128, 0);
  ASSERT_EQ(segs.size(), 3u);
  for (int k = 0; k < 3; ++k) {
    for (int b = 0; b < 3; ++b) EXPECT_EQ(segs[k].values[b * 256], s.at(b, 128 * k));
  }
}

TEST(Segment, ShortInputIsTiled) {
  const Spectrogram s = ramp(100);
  const auto segs = segment(s, 256, 128, 1);
  ASSERT_EQ(segs.size(), 1u);
  for (int b = 0; b < 3; ++b) {
    for (int t = 0; t < 256; ++t) EXPECT_EQ(segs[0].values[b * 256 + t], s.at(b, t % 100));
  }
}

TEST(Segment, TailWindowIsEndAligned) {
  const Spectrogram s = ramp(300);
  const auto segs = segment(s, 256, 128, 1);
  ASSERT_EQ(segs.size(), 2u);
  EXPECT_EQ(segs[1].values[255], s.at(0, 299));
}

TEST(Batch, PacksSegmentsContiguously) {
  const Spectrogram s = ramp(512);
  const auto segs = segment(s, 256, 128, 3);
  std::vector<const SpectrogramSegment*> ptrs{&segs[2], &segs[0]};
  const SegmentBatch b = make_batch(std::span<const SpectrogramSegment* const>(ptrs));
  EXPECT_EQ(b.n, 2);
  EXPECT_EQ(b.n_frames, 256);
  EXPECT_TRUE(std::equal(segs[2].values.begin(), segs[2].values.end(), b.item(0).begin()));
  EXPECT_EQ(b.labels[1], one_hot(3));
}

TEST(FeatureCache, SecondBuildReusesEverything) {
  const auto& f = Fixture::get();
  TempDir dir("cache");
  FeatureCache::BuildStats first, second;
  FeatureCache::build(f.manifest, SpectrogramParams{}, dir / "c", false, &first);
  const auto stamp = fs::last_write_time(dir / "c" / "index");
  const FeatureCache again =
      FeatureCache::build(f.manifest, SpectrogramParams{}, dir / "c", false, &second);
  EXPECT_EQ(first.computed, 160u);
  EXPECT_EQ(second.computed, 0u);
  EXPECT_EQ(second.reused, 160u);
  EXPECT_EQ(fs::last_write_time(dir / "c" / "index"), stamp);

  SpectrogramParams other;
  other.log_floor = 1e-6;
  EXPECT_THROW(FeatureCache::build(f.manifest, other, dir / "c"), Error);
  FeatureCache::BuildStats forced;
  FeatureCache::build(f.manifest, other, dir / "c", true, &forced);
  EXPECT_EQ(forced.computed, 160u);
}

TEST(FeatureCache, RecordsEqualFreshFeatures) {
  const auto& f = Fixture::get();
  for (int i : {0, 57, 159}) {
    const auto& u = f.manifest.utterances[i];
    const Spectrogram fresh = stft_spectrogram(read_wav(u.audio_path).samples, SpectrogramParams{});
    const Spectrogram cached = f.cache.load(u.id);
    EXPECT_EQ(cached.values, fresh.values);
    EXPECT_EQ(cached.n_frames, fresh.n_frames);
  }
  EXPECT_THROW(f.cache.load("nope"), Error);
}

TEST(FeatureCache, ReadHookSeesEveryLoad) {
  FeatureCache cache = FeatureCache::open(Fixture::get().cache.dir());
  std::vector<std::string> seen;
  cache.set_read_hook([&](const std::string& id) { seen.push_back(id); });
  cache.load("spk01_u000");
  cache.load("spk02_u001");
  EXPECT_EQ(seen, (std::vector<std::string>{"spk01_u000", "spk02_u001"}));
}

TEST(Normalizer, IdenticalPoolEngagesTheFloor) {
  TempDir dir("norm");
  // One 160-sample period tiled, so every frame sees the same samples.
  const auto period = sine(100.0, 160);
  Waveform w;
  for (int k = 0; k < 50; ++k) w.samples.insert(w.samples.end(), period.begin(), period.end());
  write_wav(dir / "a.wav", w);
  CorpusManifest m;
  for (const char* id : {"a", "b", "c"}) {
    Utterance u;
    u.id = id;
    u.speaker_id = "s";
    u.session_id = "x";
    u.label = "sad";
    u.audio_path = dir / "a.wav";
    m.utterances.push_back(u);
  }
  const FeatureCache cache = FeatureCache::build(m, SpectrogramParams{}, dir / "c");
  const std::vector<std::string> ids{"a", "b", "c"};
  const Normalizer norm = fold_normalizer(cache, ids);
  for (float s : norm.stddev) EXPECT_EQ(s, static_cast<float>(Normalizer::kStdFloor));
  Spectrogram s = cache.load("b");
  norm.apply(s);
  for (float v : s.values) EXPECT_EQ(v, 0.0f);
}

TEST(Normalizer, TrainingPoolBecomesStandardized) {
  const auto& f = Fixture::get();
  std::vector<std::string> ids;
  for (int i = 0; i < 80; ++i) ids.push_back(f.manifest.utterances[i].id);
  const Normalizer norm = fold_normalizer(f.cache, ids);
  std::vector<double> sum(128, 0.0), sum_sq(128, 0.0);
  double frames = 0.0;
  for (const auto& id : ids) {
    Spectrogram s = f.cache.load(id);
    norm.apply(s);
    for (int b = 0; b < 128; ++b) {
      for (int t = 0; t < s.n_frames; ++t) {
        sum[b] += s.at(b, t);
        sum_sq[b] += s.at(b, t) * s.at(b, t);
      }
    }
    frames += s.n_frames;
  }
  for (int b = 0; b < 128; ++b) {
    EXPECT_NEAR(sum[b] / frames, 0.0, 1e-4);
    EXPECT_NEAR(sum_sq[b] / frames, 1.0, 1e-3);
  }
}

TEST(Normalizer, NoneIsTheIdentity) {
  const auto& f = Fixture::get();
  TempDir dir("norm_none");
  CorpusManifest m;
  m.utterances.assign(f.manifest.utterances.begin(), f.manifest.utterances.begin() + 3);
  SpectrogramParams p;
  p.normalization = Normalization::kNone;
  const FeatureCache cache = FeatureCache::build(m, p, dir / "c");
  const std::vector<std::string> ids{m.utterances[0].id, m.utterances[1].id};
  const Normalizer norm = fold_normalizer(cache, ids);
  Spectrogram s = cache.load(m.utterances[2].id);
  const Spectrogram raw = s;
  norm.apply(s);
  EXPECT_EQ(s.values, raw.values);
}

TEST(Normalizer, AppliesAsAFixedAffineMap) {
  const auto& f = Fixture::get();
  const std::vector<std::string> fold_a{"spk01_u000", "spk01_u001", "spk02_u002"};
  const Normalizer norm = fold_normalizer(f.cache, fold_a);
  const std::string hash = norm.hash();
  Spectrogram s = f.cache.load("spk04_u010");
  const Spectrogram raw = s;
  norm.apply(s);
  for (int b = 0; b < s.n_bins; ++b) {
    for (int t = 0; t < s.n_frames; t += 17) {
      EXPECT_EQ(s.at(b, t), (raw.at(b, t) - norm.mean[b]) / norm.stddev[b]);
    }
  }
  EXPECT_EQ(norm.hash(), hash);
}

}  // namespace
}  // namespace ser
