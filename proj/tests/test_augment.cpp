// tests/test_augment.cpp

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
#include <numeric>

#include "ser/augment.hpp"
#include "ser/wav.hpp"
#include "support.hpp"

namespace ser {
namespace {

SegmentBatch toy_batch(int n, int size, Rng& rng) {
  SegmentBatch b;
  b.n = n;
  b.n_bins = 1;
  b.n_frames = size;
  b.values.resize(static_cast<std::size_t>(n) * size);
  testing::randomize(b.values, rng);
  for (int i = 0; i < n; ++i) b.labels.push_back(one_hot(i % kNumClasses));
  return b;
}

std::vector<int> swap_partner(int n) {
  std::vector<int> p(n);
  std::iota(p.rbegin(), p.rend(), 0);
  return p;
}

TEST(Mixup, LambdaOneKeepsTheBatch) {
  Rng rng = make_rng(3);
  const SegmentBatch b = toy_batch(4, 20, rng);
  const auto p = swap_partner(4);
  const SegmentBatch m = mix_pairs(b, 1.0, p);
  EXPECT_EQ(m.values, b.values);
  EXPECT_EQ(m.labels, b.labels);
}

TEST(Mixup, MidpointOfTwoItems) {
  SegmentBatch b;
  b.n = 2;
  b.n_bins = 1;
  b.n_frames = 1;
  b.values = {0.0f, 2.0f};
  b.labels = {one_hot(0), one_hot(1)};
  const std::vector<int> p{1, 0};
  const SegmentBatch m = mix_pairs(b, 0.5, p);
  EXPECT_EQ(m.values, (std::vector<float>{1.0f, 1.0f}));
  const LabelVector half{0.5f, 0.5f, 0.0f, 0.0f};
  EXPECT_EQ(m.labels[0], half);
  EXPECT_EQ(m.labels[1], half);
}

TEST(Mixup, SampledBatchesStayConvexAndOnTheSimplex) {
  MixupConfig cfg;
  cfg.enabled = true;
  Rng rng = make_rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const SegmentBatch b = toy_batch(6, 5, rng);
    const SegmentBatch m = mixup_batch(b, cfg, rng);
    ASSERT_EQ(m.n, b.n);
    for (int i = 0; i < m.n; ++i) {
      double total = 0.0;
      for (float v : m.labels[i]) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
      // Each mixed item lies between its own values and some partner's.
      bool found = false;
      for (int j = 0; j < b.n && !found; ++j) {
        bool inside = true;
        for (int k = 0; k < 5 && inside; ++k) {
          const float a = b.item(i)[k], c = b.item(j)[k], v = m.item(i)[k];
          inside = v >= std::min(a, c) - 1e-5f && v <= std::max(a, c) + 1e-5f;
        }
        found = inside;
      }
      EXPECT_TRUE(found) << "trial " << trial << " item " << i;
    }
  }
}

TEST(Mixup, SwappingRolesMirrorsLambda) {
  Rng rng = make_rng(5);
  const SegmentBatch b = toy_batch(2, 30, rng);
  const std::vector<int> p{1, 0};
  const SegmentBatch a = mix_pairs(b, 0.3, p);
  const SegmentBatch c = mix_pairs(b, 0.7, p);
  for (int k = 0; k < 30; ++k) {
    EXPECT_NEAR(a.item(0)[k], c.item(1)[k], 1e-6);
    EXPECT_NEAR(a.item(1)[k], c.item(0)[k], 1e-6);
  }
  for (int j = 0; j < kNumClasses; ++j) EXPECT_NEAR(a.labels[0][j], c.labels[1][j], 1e-6);
}

TEST(Mixup, LambdaDrawsAreInRange) {
  MixupConfig cfg;
  Rng rng = make_rng(9);
  double extreme = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const double l = sample_mixup_lambda(cfg, rng);
    ASSERT_GE(l, 0.0);
    ASSERT_LE(l, 1.0);
    if (l < 0.1 || l > 0.9) extreme += 1.0;
  }
  // Beta(0.2, 0.2) puts most of its mass near the ends.
  EXPECT_GT(extreme / 2000.0, 0.5);
}

TEST(Mixup, Rejections) {
  Rng rng = make_rng(1);
  MixupConfig cfg;
  EXPECT_THROW(mixup_batch(toy_batch(1, 3, rng), cfg, rng), Error);
  cfg.alpha = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
}

std::vector<float> tone(double hz, int n) {
  std::vector<float> x(n);
  for (int i = 0; i < n; ++i) {
    x[i] = static_cast<float>(0.5 * std::sin(2.0 * std::numbers::pi * hz * i / kSampleRate));
  }
  return x;
}

double zero_crossing_hz(const std::vector<float>& x) {
  int first = -1, last = -1, count = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i - 1] < 0.0f && x[i] >= 0.0f) {
      if (first < 0) first = static_cast<int>(i);
      last = static_cast<int>(i);
      ++count;
    }
  }
  return (count - 1) * static_cast<double>(kSampleRate) / (last - first);
}

TEST(Speed, UnitFactorIsIdentity) {
  const auto x = tone(300.0, 5000);
  EXPECT_EQ(speed_perturb(x, 1.0), x);
}

TEST(Speed, OutputLength) {
  const std::vector<float> x(16000, 0.1f);
  EXPECT_EQ(speed_perturb(x, 1.1).size(), 14545u);
  EXPECT_EQ(speed_perturb(x, 0.9).size(), 17778u);
}

TEST(Speed, PitchScalesWithFactor) {
  const auto x = tone(440.0, 16000);
  EXPECT_NEAR(zero_crossing_hz(speed_perturb(x, 0.9)), 396.0, 1.0);
  EXPECT_NEAR(zero_crossing_hz(speed_perturb(x, 1.1)), 484.0, 1.0);
}

TEST(Speed, CopyIds) {
  EXPECT_EQ(speed_copy_id("u1", 0.9), "u1#sp0.9");
  EXPECT_EQ(speed_copy_id("u1", 1.1), "u1#sp1.1");
}

TEST(Noise, InfiniteSnrReturnsCleanInput) {
  Rng rng = make_rng(2);
  std::vector<float> clean(4000), noise(3000);
  testing::randomize(clean, rng, 0.1);
  testing::randomize(noise, rng, 0.1);
  EXPECT_EQ(mix_noise_at_snr(clean, noise, kNoNoise, rng).samples, clean);
}

TEST(Noise, EqualPowerAtZeroDbHasUnitGain) {
  std::vector<float> clean(1000), noise(1000);
  for (int i = 0; i < 1000; ++i) {
    clean[i] = (i % 2) ? 0.25f : -0.25f;
    noise[i] = (i % 3) ? 0.25f : -0.25f;
  }
  EXPECT_NEAR(mix_noise_at_offset(clean, noise, 0.0, 0).gain, 1.0, 1e-12);
}

TEST(Noise, AchievedSnrMatchesTarget) {
  const auto& bank = NoiseBank::load(testing::Fixture::get().noise_dir);
  ASSERT_EQ(bank.entries.size(), kNoiseTypes.size());
  Rng rng = make_rng(4);
  std::vector<float> clean = tone(220.0, 30000);
  for (const auto& e : bank.entries) {
    for (double snr : {0.0, 10.0, 20.0}) {
      const NoisyMix m = mix_noise_at_snr(clean, e.samples, snr, rng);
      std::vector<float> added(clean.size());
      for (std::size_t i = 0; i < clean.size(); ++i) added[i] = m.samples[i] - clean[i];
      const double achieved = 10.0 * std::log10(mean_power(clean) / mean_power(added));
      EXPECT_NEAR(achieved, snr, 0.01) << e.name;
    }
  }
}

TEST(Noise, LoopsShortNoiseFromTheOffset) {
  const std::vector<float> clean(10, 0.5f);
  const std::vector<float> noise{1.0f, -1.0f, 2.0f};
  const NoisyMix m = mix_noise_at_offset(clean, noise, 0.0, 2);
  for (int i = 0; i < 10; ++i) {
    EXPECT_NEAR(m.samples[i], 0.5f + m.gain * noise[(2 + i) % 3], 1e-6);
  }
}

TEST(Noise, BankRejectsEmptyDirectory) {
  testing::TempDir dir("bank");
  EXPECT_THROW(NoiseBank::load(dir.path()), Error);
}

}  // namespace
}  // namespace ser
