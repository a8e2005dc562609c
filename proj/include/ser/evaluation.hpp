// ser/evaluation.hpp

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

#ifndef SER_EVALUATION_HPP_
#define SER_EVALUATION_HPP_

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ser/augment.hpp"
#include "ser/corpus.hpp"
#include "ser/features.hpp"
#include "ser/network.hpp"

namespace ser {

using Posterior = std::array<double, kNumClasses>;
// confusion[true class][predicted class]
using Confusion = std::array<std::array<int, kNumClasses>, kNumClasses>;

// Where a fold's utterances live. LOSO folds read train, val and test from
// one corpus; cross-corpus folds train on one and validate/test on another.
struct DataSource {
  const CorpusManifest* manifest = nullptr;
  const FeatureCache* cache = nullptr;
};

struct FoldData {
  FoldSpec fold;
  DataSource train;
  DataSource eval;  // val and test utterances
};

// Class ids of utterances in the source's manifest. Throws NotFound.
std::vector<int> utterance_classes(const DataSource& source, std::span<const std::string> ids);

// Elementwise mean. Throws EmptyList.
Posterior utterance_posterior(std::span<const Posterior> segment_posteriors);
// Highest posterior, ties to the lowest class index.
int argmax(const Posterior& p);

// Mean per-class recall over classes 0..n_classes-1. Throws MissingClass if
// a class has no label, ShapeMismatch on length mismatch.
double uar(std::span<const int> predictions, std::span<const int> labels,
           int n_classes = kNumClasses);
Confusion confusion_matrix(std::span<const int> predictions, std::span<const int> labels);

// Segment-level posteriors for a batch; lets evaluation run on any model.
using SegmentScorer = std::function<std::vector<Posterior>(const SegmentBatch&)>;
// Eval-mode forward of the model in chunks of batch_size segments; the
// model's mode is restored afterwards.
SegmentScorer model_scorer(Model& model, int batch_size = 16);

// Normalized, non-overlapping (hop = window) segments of one utterance.
std::vector<SpectrogramSegment> eval_segments(Spectrogram spec, const Normalizer& norm,
                                              int class_id, int frames = kSegmentFrames);

struct PreparedUtterance {
  std::string id;
  int label = 0;
  std::vector<SpectrogramSegment> segments;
};

std::vector<PreparedUtterance> prepare_utterances(const DataSource& source,
                                                  std::span<const std::string> ids,
                                                  const Normalizer& norm,
                                                  int frames = kSegmentFrames);

struct UtteranceScores {
  std::vector<int> predictions;
  std::vector<int> labels;
};

// Each utterance is predicted from the mean of its segment posteriors.
UtteranceScores score_prepared(const SegmentScorer& scorer,
                               std::span<const PreparedUtterance> utterances);
UtteranceScores score_utterances(const SegmentScorer& scorer, const DataSource& source,
                                 std::span<const std::string> ids, const Normalizer& norm,
                                 int frames = kSegmentFrames);
// Utterance-level accuracy (validation metric).
double accuracy(const UtteranceScores& scores);

struct RunResult {
  std::uint64_t seed = 0;
  double uar = 0.0;
  Confusion confusion{};
  bool operator==(const RunResult&) const = default;
};

RunResult make_run_result(const UtteranceScores& scores, std::uint64_t seed);

struct EvalReport {
  std::string condition;  // clean, noise(snr=10), attack(fgsm,eps=0.08,...), ...
  std::string model;      // row label, e.g. "proposed" or "proposed+mixup"
  std::vector<RunResult> runs;
  double uar_mean = 0.0;
  double uar_std = 0.0;   // sample standard deviation, 0 for one run
  Confusion confusion{};  // summed over runs
  std::map<std::string, std::string> provenance;

  // Recomputes mean, std and the summed confusion from runs.
  void summarize();
  bool operator==(const EvalReport&) const = default;
};

// Concatenates the runs of reports sharing condition and model, in order.
std::vector<EvalReport> merge_reports(const std::vector<EvalReport>& reports);

EvalReport eval_clean(const SegmentScorer& scorer, const FoldData& data,
                      const Normalizer& norm, std::uint64_t seed, int frames = kSegmentFrames);
EvalReport eval_clean(Model& model, const FoldData& data, const Normalizer& norm,
                      std::uint64_t seed);

std::string noise_condition(double snr_db);

// One report per SNR. Each (utterance, SNR) pair draws its noise file and
// offset from its own stream of seed, the waveform is mixed, re-featurized
// with the cache's params and normalized with norm (the training fold's).
// kNoNoise reproduces the clean condition.
std::vector<EvalReport> eval_noisy(const SegmentScorer& scorer, const FoldData& data,
                                   const Normalizer& norm, const NoiseBank& bank,
                                   std::span<const double> snrs_db, std::uint64_t seed,
                                   int frames = kSegmentFrames);
std::vector<EvalReport> eval_noisy(Model& model, const FoldData& data, const Normalizer& norm,
                                   const NoiseBank& bank, std::span<const double> snrs_db,
                                   std::uint64_t seed);

struct TrainConfig;

// Trains on all of train (its cache keyed by its own corpus), selects the
// checkpoint on a val_fraction split of test and reports UAR on the rest,
// TrainConfig::repeats times.
EvalReport eval_crosscorpus(const ModelConfig& model_cfg, const DataSource& train,
                            const DataSource& test, const TrainConfig& train_cfg,
                            double val_fraction = 0.3, std::uint64_t split_seed = 0);

enum class ReportFormat { kTable, kJsonl };

// "64.1 ± 1.3": percentages with one decimal.
std::string format_cell(double mean, double std);
// Table: one row per model, one column per condition. JSONL: one record per
// (condition, run) and a summary record per report.
std::string render_report(const std::vector<EvalReport>& reports, ReportFormat format);
// Inverse of the JSONL rendering. Throws ParseError.
std::vector<EvalReport> parse_report_jsonl(const std::string& text);

}  // namespace ser

#endif  // SER_EVALUATION_HPP_
