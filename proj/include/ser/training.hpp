// ser/training.hpp

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

#ifndef SER_TRAINING_HPP_
#define SER_TRAINING_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ser/augment.hpp"
#include "ser/evaluation.hpp"
#include "ser/network.hpp"

namespace ser {

enum class Augmentation { kNone, kSp, kMixup, kSpMixup };

std::string augmentation_name(Augmentation a);
// none, sp, mixup, sp+mixup. Throws BadArgument.
Augmentation parse_augmentation(const std::string& name);
bool uses_sp(Augmentation a);
bool uses_mixup(Augmentation a);

struct TrainConfig {
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double lr_init = 1e-3;
  int plateau_patience = 5;
  int halt_patience = 20;
  int batch_size = 32;
  int max_epochs = 200;
  Augmentation augmentation = Augmentation::kNone;
  double mixup_alpha = 0.2;
  std::uint64_t seed = 0;
  int repeats = 10;
  bool deterministic = false;

  void validate() const;  // BadConfig
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
  std::string hash() const;
  bool operator==(const TrainConfig&) const = default;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;  // rate used during the epoch
  bool operator==(const EpochRecord&) const = default;
};

struct TrainState {
  int epoch = 0;
  double lr = 1e-3;
  double best_val_acc = -1.0;
  int best_epoch = -1;
  int epochs_since_improve = 0;
  bool stop = false;
  std::vector<EpochRecord> history;
};

TrainState initial_state(const TrainConfig& cfg);

// Plateau bookkeeping after one epoch: a strictly better val_acc resets the
// counter, otherwise the counter grows, the rate halves at every multiple of
// plateau_patience and training stops at halt_patience.
TrainState schedule_step(TrainState state, double val_acc, const TrainConfig& cfg);

// Adam with bias correction over the trainable parameters.
class Adam {
 public:
  Adam(double beta1, double beta2, double epsilon);
  void step(nn::ParamStore<float>& params, double lr);

 private:
  double beta1_, beta2_, epsilon_;
  long steps_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// Training utterances the loader draws segments from: speed-perturbed
// copies only when the augmentation uses them. Throws BadConfig when sp
// is requested but the fold has no copies.
std::vector<std::string> training_sources(const FoldSpec& fold, Augmentation augmentation);

struct TrainResult {
  std::unique_ptr<Model> model;  // restored to the best-validation epoch
  Normalizer normalizer;
  TrainState state;
};

// Throws EmptyTrainSet, DivergedTraining.
TrainResult train_fold(const ModelConfig& model_cfg, const FoldData& data,
                       const TrainConfig& train_cfg);

// Called after each repeat with the trained model and its clean test report.
using RunCallback = std::function<void(int run, std::uint64_t seed, TrainResult& result,
                                       const EvalReport& clean)>;

// Trains with seeds seed + 0 .. seed + repeats - 1 and evaluates each run on
// the fold's test utterances. Returns the per-run reports followed by the
// summary report.
std::vector<EvalReport> repeat_runs(const ModelConfig& model_cfg, const FoldData& data,
                                    const TrainConfig& train_cfg,
                                    const RunCallback& on_run = {});

// Tab-separated "epoch train_loss val_acc lr" with a header line.
std::string history_text(const TrainState& state);
void write_history(const std::filesystem::path& path, const TrainState& state);

}  // namespace ser

#endif  // SER_TRAINING_HPP_
