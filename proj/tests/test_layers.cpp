// tests/test_layers.cpp

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

#include "ser/nn/layers.hpp"
#include "support.hpp"

namespace ser::nn {
namespace {

using ser::testing::random_tensor;
using ser::testing::randomize;

TEST(DenseBlock, ChannelLawPerLayerCount) {
  for (int layers = 1; layers <= 6; ++layers) {
    for (int growth : {16, 24}) {
      ParamStore<float> store;
      DenseBlock<float> block(store, "b", 24, {layers, growth}, 0.99);
      Rng rng = make_rng(1);
      block.init(rng);
      const auto& y = block.forward(random_tensor<float>({2, 24, 4, 4}, rng), Mode::kTrain);
      EXPECT_EQ(y.dim(1), 24 + layers * growth);
      EXPECT_EQ(block.out_channels(), 24 + layers * growth);
    }
  }
}

TEST(DenseBlock, SixByTwentyFourOn24ChannelsGives168) {
  ParamStore<float> store;
  DenseBlock<float> block(store, "b", 24, {6, 24}, 0.99);
  EXPECT_EQ(block.out_channels(), 168);
}

TEST(DenseBlock, StackKeepsInputAsPrefix) {
  ParamStore<double> store;
  DenseBlock<double> block(store, "b", 3, {2, 4}, 0.99);
  Rng rng = make_rng(2);
  block.init(rng);
  const auto x = random_tensor<double>({2, 3, 5, 5}, rng);
  const auto& y = block.forward(x, Mode::kEval);
  for (int i = 0; i < 2; ++i) {
    for (int k = 0; k < 3 * 25; ++k) EXPECT_EQ(y[i * 11 * 25 + k], x[i * 3 * 25 + k]);
  }
}

TEST(DenseLayer, OneByOneManualOracle) {
  ParamStore<double> store;
  DenseLayer<double> layer(store, "l", 1, 1, 0.99);
  // Fresh running statistics: mean 0, var 1, so BN scales by 1/sqrt(1 + eps).
  auto& w = layer.conv().weight().value;  // 3x3 kernel, only the centre sees a 1x1 input
  for (std::size_t k = 0; k < w.size(); ++k) w[k] = 0.1 * static_cast<double>(k + 1);
  layer.conv().bias().value[0] = 0.25;
  Tensor<double> x({1, 1, 1, 1}, {2.0});
  Tensor<double> y({1, 1, 1, 1});
  layer.forward(maps(static_cast<const Tensor<double>&>(x)), maps(y), Mode::kEval);
  const double act = std::max(0.0, 2.0 / std::sqrt(1.0 + BatchNorm2d<double>::kEpsilon));
  EXPECT_NEAR(y[0], w[4] * act + 0.25, 1e-15);

  x[0] = -2.0;  // ReLU zeroes the activation
  layer.forward(maps(static_cast<const Tensor<double>&>(x)), maps(y), Mode::kEval);
  EXPECT_DOUBLE_EQ(y[0], 0.25);
}

TEST(DenseLayer, ZeroInputGivesBiasMap) {
  ParamStore<double> store;
  DenseLayer<double> layer(store, "l", 5, 7, 0.99);
  Rng rng = make_rng(3);
  layer.init(rng);
  randomize(layer.conv().bias().value, rng);
  Tensor<double> x({2, 5, 6, 4});
  Tensor<double> y({2, 7, 6, 4});
  layer.forward(maps(static_cast<const Tensor<double>&>(x)), maps(y), Mode::kEval);
  for (int i = 0; i < 2; ++i) {
    for (int c = 0; c < 7; ++c) {
      for (int p = 0; p < 24; ++p) {
        EXPECT_EQ(y[(i * 7 + c) * 24 + p], layer.conv().bias().value[c]);
      }
    }
  }
}

TEST(DenseLayer, OutputChannelsEqualGrowth) {
  for (int in : {1, 3, 24, 50}) {
    ParamStore<float> store;
    DenseLayer<float> layer(store, "l", in, 16, 0.99);
    EXPECT_EQ(layer.conv().spec().out_channels, 16);
    EXPECT_EQ(layer.conv().spec().in_channels, in);
  }
}

void set_identity_1x1(Conv2d<double>& conv) {
  auto& w = conv.weight().value;
  std::fill(w.begin(), w.end(), 0.0);
  const int c = conv.spec().out_channels;
  for (int o = 0; o < c; ++o) w[static_cast<std::size_t>(o) * conv.spec().in_channels + o] = 1.0;
  std::fill(conv.bias().value.begin(), conv.bias().value.end(), 0.0);
}

TEST(Transition, CompressesHalfTheChannels) {
  ParamStore<float> store;
  Transition<float> t(store, "t", 168, 84, 0.99);
  Rng rng = make_rng(4);
  t.init(rng);
  const auto& y = t.forward(random_tensor<float>({1, 168, 8, 6}, rng), Mode::kTrain);
  EXPECT_EQ(y.dim(1), 84);
  EXPECT_EQ(y.dim(2), 4);
  EXPECT_EQ(y.dim(3), 3);
}

TEST(Transition, ConstantPlaneSurvivesPooling) {
  ParamStore<double> store;
  Transition<double> t(store, "t", 2, 2, 0.99);
  set_identity_1x1(t.conv());
  Tensor<double> x({1, 2, 6, 6});
  for (std::size_t k = 0; k < 36; ++k) x[k] = 3.5;
  for (std::size_t k = 36; k < 72; ++k) x[k] = -1.25;
  const auto& y = t.forward(x, Mode::kEval);
  const double s = 1.0 / std::sqrt(1.0 + BatchNorm2d<double>::kEpsilon);
  for (int k = 0; k < 9; ++k) {
    EXPECT_NEAR(y[k], 3.5 * s, 1e-14);
    EXPECT_NEAR(y[9 + k], -1.25 * s, 1e-14);
  }
}

TEST(Transition, FourByFourBlockMeans) {
  ParamStore<double> store;
  Transition<double> t(store, "t", 1, 1, 0.99);
  set_identity_1x1(t.conv());
  Tensor<double> x({1, 1, 4, 4});
  for (int k = 0; k < 16; ++k) x[k] = k + 1;
  const auto& y = t.forward(x, Mode::kEval);
  const double s = 1.0 / std::sqrt(1.0 + BatchNorm2d<double>::kEpsilon);
  // Blocks {1,2,5,6}, {3,4,7,8}, {9,10,13,14}, {11,12,15,16}.
  const double expect[4] = {3.5, 5.5, 11.5, 13.5};
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(y[k], expect[k] * s, 1e-14);
}

TEST(Reshape, RoundTripAndLayout) {
  // [n, c, f, t] with C=2, F=2, T=3.
  Tensor<double> x({1, 2, 2, 3});
  for (int k = 0; k < 12; ++k) x[k] = 10.0 * k + 1.0;
  const auto seq = reshape_to_sequence(x);
  ASSERT_EQ(seq.dim(1), 3);
  ASSERT_EQ(seq.dim(2), 4);
  for (int t = 0; t < 3; ++t) {
    for (int c = 0; c < 2; ++c) {
      for (int f = 0; f < 2; ++f) EXPECT_EQ(seq[t * 4 + c * 2 + f], x[(c * 2 + f) * 3 + t]);
    }
  }
  EXPECT_EQ(sequence_to_maps(seq, 2, 2).vec(), x.vec());
}

TEST(Reshape, PerturbationStaysInItsStep) {
  Rng rng = make_rng(5);
  auto x = random_tensor<double>({2, 3, 4, 5}, rng);
  const auto base = reshape_to_sequence(x);
  for (int t = 0; t < 5; ++t) {
    auto y = x;
    for (int c = 0; c < 3; ++c) {
      for (int f = 0; f < 4; ++f) y[((1 * 3 + c) * 4 + f) * 5 + t] += 1.0;
    }
    const auto seq = reshape_to_sequence(y);
    for (int i = 0; i < 2; ++i) {
      for (int s = 0; s < 5; ++s) {
        bool changed = false;
        for (int k = 0; k < 12; ++k) {
          const std::size_t idx = (static_cast<std::size_t>(i) * 5 + s) * 12 + k;
          changed = changed || seq[idx] != base[idx];
        }
        EXPECT_EQ(changed, i == 1 && s == t);
      }
    }
  }
}

TEST(Reshape, SingleFrame) {
  Rng rng = make_rng(6);
  const auto x = random_tensor<float>({3, 2, 4, 1}, rng);
  const auto seq = reshape_to_sequence(x);
  EXPECT_EQ(seq.dim(1), 1);
  EXPECT_EQ(seq.dim(2), 8);
  EXPECT_EQ(sequence_to_maps(seq, 2, 4).vec(), x.vec());
}

// Independent evaluation of y = ReLU(Wh x + bh) * s(Wt x + bt) + x * s(Wc x + bc).
std::vector<double> highway_oracle(const std::vector<double>& x, Highway<double>& hw, int dim) {
  auto affine = [&](Linear<double>& l, int o) {
    double acc = l.bias().value[o];
    for (int i = 0; i < dim; ++i) acc += l.weight().value[static_cast<std::size_t>(o) * dim + i] * x[i];
    return acc;
  };
  std::vector<double> y(dim);
  for (int o = 0; o < dim; ++o) {
    const double h = std::max(0.0, affine(hw.transform(), o));
    const double t = 1.0 / (1.0 + std::exp(-affine(hw.transform_gate(), o)));
    const double c = 1.0 / (1.0 + std::exp(-affine(hw.carry_gate(), o)));
    y[o] = h * t + x[o] * c;
  }
  return y;
}

TEST(Highway, MatchesIndependentEvaluator) {
  constexpr int kDim = 128;
  ParamStore<double> store;
  Highway<double> hw(store, "hw", kDim, false);
  Rng rng = make_rng(7);
  hw.init(rng);
  randomize(hw.transform_gate().bias().value, rng);
  randomize(hw.carry_gate().bias().value, rng);
  randomize(hw.transform().bias().value, rng);
  auto x = random_tensor<double>({1000, kDim}, rng);
  Tensor<double> y;
  hw.forward(x, y);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::vector<double> xi(x.data() + i * kDim, x.data() + (i + 1) * kDim);
    const auto ref = highway_oracle(xi, hw, kDim);
    for (int o = 0; o < kDim; ++o) worst = std::max(worst, std::abs(ref[o] - y[i * kDim + o]));
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Highway, GateLimits) {
  constexpr int kDim = 16;
  ParamStore<double> store;
  Highway<double> hw(store, "hw", kDim, false);
  Rng rng = make_rng(8);
  hw.init(rng);
  auto x = random_tensor<double>({20, kDim}, rng);
  auto zero_weights = [](Linear<double>& l, double bias) {
    std::fill(l.weight().value.begin(), l.weight().value.end(), 0.0);
    std::fill(l.bias().value.begin(), l.bias().value.end(), bias);
  };
  Tensor<double> h;
  hw.transform().forward(x, h);
  for (auto& v : h.vec()) v = std::max(0.0, v);

  zero_weights(hw.transform_gate(), 50.0);
  zero_weights(hw.carry_gate(), -50.0);
  Tensor<double> y;
  hw.forward(x, y);
  for (std::size_t k = 0; k < y.size(); ++k) EXPECT_NEAR(y[k], h[k], 1e-9);

  zero_weights(hw.transform_gate(), -50.0);
  zero_weights(hw.carry_gate(), 50.0);
  hw.forward(x, y);
  for (std::size_t k = 0; k < y.size(); ++k) EXPECT_NEAR(y[k], x[k], 1e-9);
}

TEST(Highway, GatesInOpenIntervalAndCarryDominantAtInit) {
  ParamStore<double> store;
  Highway<double> hw(store, "hw", 128, false);
  Rng rng = make_rng(9);
  hw.init(rng);
  Tensor<double> y;
  hw.forward(random_tensor<double>({200, 128}, rng, 0.3), y);
  double mean_t = 0.0;
  for (double t : hw.last_transform_gate().vec()) {
    EXPECT_GT(t, 0.0);
    EXPECT_LT(t, 1.0);
    mean_t += t;
  }
  for (double c : hw.last_carry_gate().vec()) {
    EXPECT_GT(c, 0.0);
    EXPECT_LT(c, 1.0);
  }
  EXPECT_LT(mean_t / static_cast<double>(hw.last_transform_gate().size()), 0.5);
}

TEST(Highway, CoupledCarryIsComplement) {
  ParamStore<double> store;
  Highway<double> hw(store, "hw", 8, true);
  Rng rng = make_rng(10);
  hw.init(rng);
  Tensor<double> y;
  hw.forward(random_tensor<double>({4, 8}, rng), y);
  for (std::size_t k = 0; k < y.size(); ++k) {
    EXPECT_DOUBLE_EQ(hw.last_carry_gate()[k], 1.0 - hw.last_transform_gate()[k]);
  }
}

TEST(SkipAggregate, ConstantPlanesGiveLinearOracle) {
  ParamStore<double> store;
  SkipAggregate<double> skip(store, "skip", 3, 2, 4);
  Rng rng = make_rng(11);
  skip.init(rng);
  randomize(skip.projection_a().bias().value, rng);
  randomize(skip.projection_b().bias().value, rng);
  const double ca[3] = {1.5, -2.0, 0.25};
  const double cb[2] = {4.0, -0.5};
  Tensor<double> a({1, 3, 5, 7}), b({1, 2, 3, 2});
  for (int c = 0; c < 3; ++c) std::fill_n(a.data() + c * 35, 35, ca[c]);
  for (int c = 0; c < 2; ++c) std::fill_n(b.data() + c * 6, 6, cb[c]);
  Tensor<double> y;
  skip.forward(a, b, y);
  ASSERT_EQ(y.dim(1), 4);
  for (int o = 0; o < 4; ++o) {
    double ref = skip.projection_a().bias().value[o] + skip.projection_b().bias().value[o];
    for (int c = 0; c < 3; ++c) ref += skip.projection_a().weight().value[o * 3 + c] * ca[c];
    for (int c = 0; c < 2; ++c) ref += skip.projection_b().weight().value[o * 2 + c] * cb[c];
    EXPECT_NEAR(y[o], ref, 1e-13);
  }
}

TEST(SkipAggregate, ZeroMapsGiveBiasSum) {
  ParamStore<double> store;
  SkipAggregate<double> skip(store, "skip", 168, 228, 128);
  Rng rng = make_rng(12);
  skip.init(rng);
  randomize(skip.projection_a().bias().value, rng);
  randomize(skip.projection_b().bias().value, rng);
  Tensor<double> a({2, 168, 3, 4}), b({2, 228, 2, 9});
  Tensor<double> y;
  skip.forward(a, b, y);
  ASSERT_EQ(y.dim(1), 128);
  for (int i = 0; i < 2; ++i) {
    for (int o = 0; o < 128; ++o) {
      EXPECT_DOUBLE_EQ(y[i * 128 + o],
                       skip.projection_a().bias().value[o] + skip.projection_b().bias().value[o]);
    }
  }
}

TEST(Dropout, EvalIsIdentityAndTrainScalesKeptUnits) {
  Dropout<double> drop(0.5);
  Rng rng = make_rng(13);
  const auto x = random_tensor<double>({10, 100}, rng);
  Tensor<double> y;
  drop.forward(x, y, Mode::kEval, rng);
  EXPECT_EQ(y.vec(), x.vec());
  drop.forward(x, y, Mode::kTrain, rng);
  int kept = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (y[k] != 0.0) {
      EXPECT_DOUBLE_EQ(y[k], 2.0 * x[k]);
      ++kept;
    }
  }
  EXPECT_NEAR(kept / 1000.0, 0.5, 0.06);
}

TEST(Lstm, RecurrentBlocksAreOrthogonal) {
  ParamStore<double> store;
  Lstm<double> lstm(store, "lstm", 5, 6);
  Rng rng = make_rng(14);
  lstm.init(rng);
  const auto& w = store.get("lstm.w_hh").value;  // [4u, u]
  for (int g = 0; g < 4; ++g) {
    for (int a = 0; a < 6; ++a) {
      for (int b = 0; b < 6; ++b) {
        double dot = 0.0;
        for (int k = 0; k < 6; ++k) dot += w[(g * 6 + a) * 6 + k] * w[(g * 6 + b) * 6 + k];
        EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-12);
      }
    }
  }
}

TEST(BatchNorm, TrainModeNormalizesEachChannel) {
  ParamStore<double> store;
  BatchNorm2d<double> bn(store, "bn", 3, 0.99);
  Rng rng = make_rng(15);
  auto x = random_tensor<double>({4, 3, 5, 5}, rng, 3.0);
  for (std::size_t k = 0; k < x.size(); ++k) x[k] += 7.0;
  Tensor<double> y(x.shape());
  bn.forward(maps(static_cast<const Tensor<double>&>(x)), maps(y), Mode::kTrain, false);
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, ss = 0.0;
    for (int i = 0; i < 4; ++i) {
      for (int p = 0; p < 25; ++p) {
        const double v = y[(i * 3 + c) * 25 + p];
        s += v;
        ss += v * v;
      }
    }
    EXPECT_NEAR(s / 100.0, 0.0, 1e-12);
    EXPECT_NEAR(ss / 100.0, 1.0, 1e-3);
  }
}

}  // namespace
}  // namespace ser::nn
