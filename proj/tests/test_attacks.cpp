// tests/test_attacks.cpp

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
#include <limits>

#include "ser/attacks.hpp"
#include "support.hpp"

namespace ser {
namespace {

using nn::Tensor;
using ser::testing::micro_config;
using ser::testing::random_tensor;

// Softmax regression z = x W^T with mean cross-entropy; the input gradient
// is (p - y) W / n in closed form.
struct LinearSoftmax {
  int dim;
  std::vector<double> w;  // [classes, dim]

  std::vector<double> probs(const Tensor<float>& x, int i) const {
    std::vector<double> z(kNumClasses, 0.0);
    for (int c = 0; c < kNumClasses; ++c) {
      for (int k = 0; k < dim; ++k) z[c] += w[c * dim + k] * x[i * dim + k];
    }
    const double top = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (auto& v : z) total += (v = std::exp(v - top));
    for (auto& v : z) v /= total;
    return z;
  }

  double loss(const Tensor<float>& x, const Tensor<float>& y) const {
    const int n = x.dim(0);
    double l = 0.0;
    for (int i = 0; i < n; ++i) {
      const auto p = probs(x, i);
      for (int c = 0; c < kNumClasses; ++c) l -= y[i * kNumClasses + c] * std::log(p[c]);
    }
    return l / n;
  }

  InputGradientFn gradient(double scale = 1.0) const {
    return [this, scale](const Tensor<float>& x, const Tensor<float>& y) {
      const int n = x.dim(0);
      Tensor<float> g(x.shape());
      for (int i = 0; i < n; ++i) {
        const auto p = probs(x, i);
        for (int k = 0; k < dim; ++k) {
          double acc = 0.0;
          for (int c = 0; c < kNumClasses; ++c) {
            acc += (p[c] - y[i * kNumClasses + c]) * w[c * dim + k];
          }
          g[i * dim + k] = static_cast<float>(scale * acc / n);
        }
      }
      return g;
    };
  }
};

struct Problem {
  LinearSoftmax model;
  Tensor<float> x;
  Tensor<float> y;
};

// Features 0 and 1 carry no weight, so their gradient is exactly zero.
Problem make_problem(std::uint64_t seed, int n = 5, int dim = 12) {
  Rng rng = make_rng(seed);
  Problem p{LinearSoftmax{dim, std::vector<double>(kNumClasses * dim)},
            random_tensor<float>({n, 1, 1, dim}, rng), Tensor<float>({n, kNumClasses})};
  std::normal_distribution<double> g(0.0, 1.0);
  for (int c = 0; c < kNumClasses; ++c) {
    for (int k = 2; k < dim; ++k) p.model.w[c * dim + k] = g(rng);
  }
  for (int i = 0; i < n; ++i) p.y[i * kNumClasses + i % kNumClasses] = 1.0f;
  return p;
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

TEST(Fgsm, MatchesSignedGradientStep) {
  const Problem p = make_problem(1);
  const double eps = 0.08;
  const Tensor<float> g = p.model.gradient()(p.x, p.y);
  const Tensor<float> adv = fgsm(p.model.gradient(), p.x, p.y, eps);
  ASSERT_EQ(adv.shape(), p.x.shape());
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double sign = (g[i] > 0) - (g[i] < 0);
    EXPECT_NEAR(adv[i], p.x[i] + eps * sign, 1e-6) << i;
  }
  EXPECT_GT(p.model.loss(adv, p.y), p.model.loss(p.x, p.y));
}

TEST(Fgsm, PerturbationIsZeroOrEpsilon) {
  const Problem p = make_problem(2);
  for (double eps : {0.01, 0.08, 0.5}) {
    const Tensor<float> adv = fgsm(p.model.gradient(), p.x, p.y, eps);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      const double d = std::abs(static_cast<double>(adv[i]) - p.x[i]);
      EXPECT_LE(d, eps);
      if (i % 12 < 2) {
        EXPECT_EQ(d, 0.0);
      } else {
        EXPECT_NEAR(d, eps, 1e-6);
      }
    }
  }
}

TEST(Fgsm, ZeroEpsilonReturnsInput) {
  const Problem p = make_problem(3);
  EXPECT_EQ(fgsm(p.model.gradient(), p.x, p.y, 0.0).vec(), p.x.vec());
  EXPECT_EQ(bim(p.model.gradient(), p.x, p.y, 0.0, 10, 0.0).vec(), p.x.vec());
}

TEST(Fgsm, InvariantToLossScale) {
  const Problem p = make_problem(4);
  EXPECT_EQ(fgsm(p.model.gradient(), p.x, p.y, 0.08).vec(),
            fgsm(p.model.gradient(1000.0), p.x, p.y, 0.08).vec());
}

TEST(Bim, EveryIterateStaysInTheBall) {
  const Problem p = make_problem(5);
  const double eps = 0.08;
  int calls = 0;
  const Tensor<float> adv = bim(p.model.gradient(), p.x, p.y, eps, 10, eps / 5.0,
                                [&](int k, const Tensor<float>& xk) {
                                  EXPECT_EQ(k, ++calls);
                                  EXPECT_LE(max_abs_diff(xk, p.x), eps);
                                });
  EXPECT_EQ(calls, 10);
  EXPECT_LE(max_abs_diff(adv, p.x), eps);
  EXPECT_GE(p.model.loss(adv, p.y), p.model.loss(fgsm(p.model.gradient(), p.x, p.y, eps), p.y) - 1e-6);
}

TEST(Bim, OneFullStepIsFgsm) {
  const Problem p = make_problem(6);
  EXPECT_EQ(bim(p.model.gradient(), p.x, p.y, 0.08, 1, 0.08).vec(),
            fgsm(p.model.gradient(), p.x, p.y, 0.08).vec());
}

TEST(Bim, Deterministic) {
  const Problem p = make_problem(7);
  EXPECT_EQ(bim(p.model.gradient(), p.x, p.y, 0.08, 10, 0.016).vec(),
            bim(p.model.gradient(), p.x, p.y, 0.08, 10, 0.016).vec());
}

TEST(Bim, RejectsBadGradients) {
  const Problem p = make_problem(8);
  const InputGradientFn nan_grad = [](const Tensor<float>& x, const Tensor<float>&) {
    Tensor<float> g(x.shape());
    g[0] = std::numeric_limits<float>::quiet_NaN();
    return g;
  };
  const InputGradientFn short_grad = [](const Tensor<float>&, const Tensor<float>&) {
    return Tensor<float>({1, 3});
  };
  try {
    fgsm(nan_grad, p.x, p.y, 0.08);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kNonFiniteGradient);
  }
  EXPECT_THROW(fgsm(short_grad, p.x, p.y, 0.08), Error);
}

TEST(AttackConfig, ValidationAndJson) {
  AttackConfig c;
  EXPECT_DOUBLE_EQ(c.step_size(), 0.016);
  EXPECT_NO_THROW(c.validate());
  c.method = AttackMethod::kBim;
  c.bim_steps = 7;
  c.bim_step_size = 0.01;
  const AttackConfig back = AttackConfig::from_json(c.to_json());
  EXPECT_EQ(back.method, AttackMethod::kBim);
  EXPECT_EQ(back.bim_steps, 7);
  EXPECT_EQ(back.bim_step_size, 0.01);
  EXPECT_EQ(attack_condition(c), "attack(bim,eps=0.08,steps=7,step=0.01)");
  EXPECT_EQ(attack_condition(AttackConfig{}), "attack(fgsm,eps=0.08)");

  AttackConfig bad;
  bad.epsilon = -0.1;
  EXPECT_THROW(bad.validate(), Error);
  bad = AttackConfig{};
  bad.bim_steps = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = AttackConfig{};
  bad.bim_step_size = 0.5;
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_EQ(parse_attack_method("bim"), AttackMethod::kBim);
  EXPECT_THROW(parse_attack_method("pgd"), Error);
}

TEST(ModelAttack, RaisesLossAndKeepsMode) {
  Rng rng = make_rng(12);
  Model model(micro_config(Variant::kProposed), rng);
  const Tensor<float> x = random_tensor<float>({3, 1, 8, 8}, rng);
  Tensor<float> y({3, kNumClasses});
  for (int i = 0; i < 3; ++i) y[i * kNumClasses + i] = 1.0f;

  model.set_mode(nn::Mode::kTrain);
  AttackConfig cfg;
  cfg.epsilon = 0.5;
  const Tensor<float> adv = attack(model, x, y, cfg);
  EXPECT_EQ(model.mode(), nn::Mode::kTrain);
  EXPECT_LE(max_abs_diff(adv, x), cfg.epsilon);

  model.set_mode(nn::Mode::kEval);
  const double clean = model.loss_and_grads(x, y);
  EXPECT_GT(model.loss_and_grads(adv, y), clean);
  cfg.method = AttackMethod::kBim;
  EXPECT_GT(model.loss_and_grads(attack(model, x, y, cfg), y), clean);
}

}  // namespace
}  // namespace ser
