// tests/test_training.cpp

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

#include "ser/training.hpp"
#include "support.hpp"

namespace ser {
namespace {

using ser::testing::Fixture;
using ser::testing::micro_config;
using ser::testing::TempDir;

TrainState run_schedule(const std::vector<double>& accs, const TrainConfig& cfg) {
  TrainState s = initial_state(cfg);
  for (double a : accs) {
    if (s.stop) break;
    s = schedule_step(s, a, cfg);
  }
  return s;
}

TEST(Schedule, ImprovementKeepsCounterAtZero) {
  const TrainConfig cfg;
  const TrainState s = run_schedule({0.5, 0.6, 0.7}, cfg);
  EXPECT_EQ(s.epochs_since_improve, 0);
  EXPECT_EQ(s.best_epoch, 2);
  EXPECT_DOUBLE_EQ(s.best_val_acc, 0.7);
  EXPECT_DOUBLE_EQ(s.lr, 1e-3);
  EXPECT_FALSE(s.stop);
}

TEST(Schedule, FlatAccuracyHalvesEveryFiveAndStopsAtTwenty) {
  const TrainConfig cfg;
  TrainState s = initial_state(cfg);
  std::vector<double> lr_after;
  int epochs = 0;
  while (!s.stop && epochs < 100) {
    s = schedule_step(s, 0.5, cfg);
    lr_after.push_back(s.lr);
    ++epochs;
  }
  // Epoch 0 sets the best; epochs 1..20 do not improve.
  EXPECT_EQ(epochs, 21);
  EXPECT_EQ(s.epochs_since_improve, 20);
  EXPECT_DOUBLE_EQ(s.lr, 1e-3 / 16.0);
  EXPECT_DOUBLE_EQ(lr_after[4], 1e-3);
  EXPECT_DOUBLE_EQ(lr_after[5], 5e-4);
  EXPECT_DOUBLE_EQ(lr_after[10], 2.5e-4);
  EXPECT_DOUBLE_EQ(lr_after[15], 1.25e-4);
  EXPECT_EQ(s.best_epoch, 0);
}

TEST(Schedule, ImprovementResetsTheCounterButNotTheRate) {
  const TrainConfig cfg;
  const TrainState s = run_schedule({0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.6}, cfg);
  EXPECT_EQ(s.epochs_since_improve, 0);
  EXPECT_EQ(s.best_epoch, 7);
  EXPECT_DOUBLE_EQ(s.lr, 5e-4);
  const TrainState t = run_schedule({0.5, 0.5, 0.5, 0.5, 0.6, 0.6, 0.6}, cfg);
  EXPECT_EQ(t.epochs_since_improve, 2);
  EXPECT_DOUBLE_EQ(t.lr, 1e-3);
}

TEST(Schedule, EqualAccuracyIsNotImprovement) {
  const TrainState s = run_schedule({0.7, 0.7}, TrainConfig{});
  EXPECT_EQ(s.best_epoch, 0);
  EXPECT_EQ(s.epochs_since_improve, 1);
}

TEST(Adam, MatchesScalarReference) {
  nn::ParamStore<float> store;
  nn::Param<float>& p = store.add("w", {3});
  store.add("bn.mean", {3}, false).value = {7.0f, 7.0f, 7.0f};
  p.value = {0.5f, -1.0f, 2.0f};
  Adam adam(0.9, 0.999, 1e-8);
  const std::vector<std::vector<double>> grads = {{1.0, -0.5, 0.0}, {0.2, 0.1, 3.0}, {-2.0, 0.0, 1.0}};

  std::vector<double> w{0.5, -1.0, 2.0}, m(3, 0.0), v(3, 0.0);
  for (int t = 1; t <= 3; ++t) {
    for (int k = 0; k < 3; ++k) p.grad[k] = static_cast<float>(grads[t - 1][k]);
    adam.step(store, 1e-2);
    for (int k = 0; k < 3; ++k) {
      const double g = grads[t - 1][k];
      m[k] = 0.9 * m[k] + 0.1 * g;
      v[k] = 0.999 * v[k] + 0.001 * g * g;
      const double mh = m[k] / (1.0 - std::pow(0.9, t));
      const double vh = v[k] / (1.0 - std::pow(0.999, t));
      w[k] -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p.value[k], w[k], 1e-6) << "step " << t << " k " << k;
    }
  }
  EXPECT_EQ(store.get("bn.mean").value, (std::vector<float>{7.0f, 7.0f, 7.0f}));
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.augmentation = Augmentation::kSpMixup;
  c.seed = 42;
  c.batch_size = 8;
  EXPECT_EQ(TrainConfig::from_json(c.to_json()), c);
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).hash(), c.hash());
  TrainConfig d = c;
  d.lr_init = 2e-3;
  EXPECT_NE(d.hash(), c.hash());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(parse_augmentation("sp+mixup"), Augmentation::kSpMixup);
  EXPECT_THROW(parse_augmentation("specaugment"), Error);
}

TEST(History, TabSeparatedWithHeader) {
  TrainState s;
  s.history = {{0, 1.25, 0.5, 1e-3}, {1, 0.75, 0.625, 5e-4}};
  const std::string text = history_text(s);
  EXPECT_EQ(text.substr(0, text.find('\n')), "epoch\ttrain_loss\tval_acc\tlr");
  int lines = 0;
  for (char c : text) lines += c == '\n';
  EXPECT_EQ(lines, 3);
  EXPECT_NE(text.find("\n1\t"), std::string::npos);
}

TEST(TrainingSources, CopiesOnlyWithSp) {
  FoldSpec f;
  f.fold_id = "spk01";
  f.train_utterances = {"a", "a#sp0.9", "a#sp1.1", "b", "b#sp0.9", "b#sp1.1"};
  EXPECT_EQ(training_sources(f, Augmentation::kNone), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(training_sources(f, Augmentation::kMixup), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(training_sources(f, Augmentation::kSp).size(), 6u);
  EXPECT_EQ(training_sources(f, Augmentation::kSpMixup).size(), 6u);
  f.train_utterances = {"a", "b"};
  EXPECT_THROW(training_sources(f, Augmentation::kSp), Error);
}

// The fixture corpus featurized at 8 bins, for micro models.
struct SmallSetup {
  TempDir dir{"train"};
  FeatureCache cache;
  FoldData data;

  SmallSetup() {
    const auto& f = Fixture::get();
    SpectrogramParams p;
    p.n_bins = 8;
    cache = FeatureCache::build(f.manifest, p, dir / "cache");
    data.fold = loso_folds(f.manifest).front();
    data.train = {&f.manifest, &cache};
    data.eval = data.train;
  }
};

ModelConfig small_model() {
  ModelConfig c = micro_config(Variant::kProposed);
  c.input_frames = 32;
  return c;
}

TrainConfig small_train(std::uint64_t seed) {
  TrainConfig t;
  t.seed = seed;
  t.max_epochs = 4;
  t.batch_size = 16;
  t.lr_init = 3e-3;
  t.repeats = 2;
  return t;
}

std::vector<float> flat_params(const Model& m) {
  std::vector<float> out;
  m.params().for_each([&](const nn::Param<float>& p) {
    out.insert(out.end(), p.value.begin(), p.value.end());
  });
  return out;
}

TEST(TrainFold, SameSeedSameRun) {
  SmallSetup s;
  const TrainResult a = train_fold(small_model(), s.data, small_train(3));
  const TrainResult b = train_fold(small_model(), s.data, small_train(3));
  ASSERT_EQ(a.state.history.size(), 4u);
  EXPECT_EQ(a.state.history, b.state.history);
  EXPECT_EQ(flat_params(*a.model), flat_params(*b.model));
  EXPECT_EQ(a.normalizer, b.normalizer);
  const TrainResult c = train_fold(small_model(), s.data, small_train(4));
  EXPECT_NE(flat_params(*a.model), flat_params(*c.model));
}

TEST(TrainFold, LossFallsAndBestEpochIsRestored) {
  SmallSetup s;
  TrainConfig t = small_train(5);
  t.max_epochs = 8;
  t.augmentation = Augmentation::kMixup;
  const TrainResult r = train_fold(small_model(), s.data, t);
  const auto& h = r.state.history;
  EXPECT_LT(h.back().train_loss, h.front().train_loss);
  EXPECT_EQ(r.model->mode(), nn::Mode::kEval);
  // The restored weights reproduce the best validation accuracy.
  const SegmentScorer scorer = model_scorer(*r.model);
  const double acc = accuracy(
      score_utterances(scorer, s.data.eval, s.data.fold.val_utterances, r.normalizer, 32));
  EXPECT_DOUBLE_EQ(acc, r.state.best_val_acc);
  EXPECT_DOUBLE_EQ(h[r.state.best_epoch].val_acc, r.state.best_val_acc);
}

TEST(TrainFold, RejectsMismatchedInputAndEmptyTrain) {
  SmallSetup s;
  ModelConfig wide = small_model();
  wide.input_bins = 16;
  EXPECT_THROW(train_fold(wide, s.data, small_train(1)), Error);
  FoldData empty = s.data;
  empty.fold.train_utterances.clear();
  try {
    train_fold(small_model(), empty, small_train(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kEmptyTrainSet);
  }
}

TEST(RepeatRuns, ConsecutiveSeedsAndSummary) {
  SmallSetup s;
  TrainConfig t = small_train(10);
  t.max_epochs = 2;
  std::vector<std::uint64_t> seeds;
  const auto reports = repeat_runs(small_model(), s.data, t,
                                   [&](int, std::uint64_t seed, TrainResult&, const EvalReport&) {
                                     seeds.push_back(seed);
                                   });
  EXPECT_EQ(seeds, (std::vector<std::uint64_t>{10, 11}));
  ASSERT_EQ(reports.size(), 3u);
  const EvalReport& summary = reports.back();
  EXPECT_EQ(summary.model, "proposed");
  EXPECT_EQ(summary.condition, "clean");
  ASSERT_EQ(summary.runs.size(), 2u);
  EXPECT_EQ(summary.runs[0], reports[0].runs[0]);
  EXPECT_EQ(summary.runs[1], reports[1].runs[0]);
  EXPECT_EQ(summary.provenance.at("fold"), s.data.fold.fold_id);
}

}  // namespace
}  // namespace ser
