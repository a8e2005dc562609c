// src/training.cpp

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

#include "ser/training.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "json.hpp"
#include "ser/hash.hpp"
#include "ser/io.hpp"

namespace ser {

using Json = nlohmann::ordered_json;

namespace {

// Stream tags for make_rng.
constexpr std::uint64_t kInitTag = 1;
constexpr std::uint64_t kShuffleTag = 2;
constexpr std::uint64_t kMixupTag = 3;
constexpr std::uint64_t kDropoutTag = 4;

constexpr const char* kAugmentationNames[] = {"none", "sp", "mixup", "sp+mixup"};

}  // namespace

std::string augmentation_name(Augmentation a) {
  return kAugmentationNames[static_cast<int>(a)];
}

Augmentation parse_augmentation(const std::string& name) {
  for (int i = 0; i < 4; ++i) {
    if (name == kAugmentationNames[i]) return static_cast<Augmentation>(i);
  }
  throw Error(Errc::kBadArgument, name, "unknown augmentation; valid: none, sp, mixup, sp+mixup");
}

bool uses_sp(Augmentation a) { return a == Augmentation::kSp || a == Augmentation::kSpMixup; }
bool uses_mixup(Augmentation a) {
  return a == Augmentation::kMixup || a == Augmentation::kSpMixup;
}

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  auto fail = [](const char* field, const char* why) { throw Error(Errc::kBadConfig, field, why); };
  if (!(lr_init > 0.0)) fail("lr_init", "must be > 0");
  if (plateau_patience < 1 || plateau_patience >= halt_patience) {
    fail("plateau_patience", "need 1 <= plateau_patience < halt_patience");
  }
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (max_epochs < 1) fail("max_epochs", "must be >= 1");
  if (repeats < 1) fail("repeats", "must be >= 1");
  if (!(mixup_alpha > 0.0)) fail("mixup_alpha", "must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail("adam", "betas must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) fail("adam_epsilon", "must be > 0");
}

std::string TrainConfig::to_json() const {
  Json j;
  j["adam_beta1"] = adam_beta1;
  j["adam_beta2"] = adam_beta2;
  j["adam_epsilon"] = adam_epsilon;
  j["lr_init"] = lr_init;
  j["plateau_patience"] = plateau_patience;
  j["halt_patience"] = halt_patience;
  j["batch_size"] = batch_size;
  j["max_epochs"] = max_epochs;
  j["augmentation"] = augmentation_name(augmentation);
  j["mixup_alpha"] = mixup_alpha;
  j["seed"] = seed;
  j["repeats"] = repeats;
  j["deterministic"] = deterministic;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const Json j = Json::parse(text);
    if (!j.is_object()) throw Error(Errc::kBadConfig, "train", "expected a JSON object");
    for (const auto& [key, v] : j.items()) {
      if (key == "adam_beta1") c.adam_beta1 = v.get<double>();
      else if (key == "adam_beta2") c.adam_beta2 = v.get<double>();
      else if (key == "adam_epsilon") c.adam_epsilon = v.get<double>();
      else if (key == "lr_init") c.lr_init = v.get<double>();
      else if (key == "plateau_patience") c.plateau_patience = v.get<int>();
      else if (key == "halt_patience") c.halt_patience = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "max_epochs") c.max_epochs = v.get<int>();
      else if (key == "augmentation") c.augmentation = parse_augmentation(v.get<std::string>());
      else if (key == "mixup_alpha") c.mixup_alpha = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "repeats") c.repeats = v.get<int>();
      else if (key == "deterministic") c.deterministic = v.get<bool>();
      else throw Error(Errc::kBadConfig, key, "unknown train field");
    }
  } catch (const Json::exception& e) {
    throw Error(Errc::kBadConfig, "train", e.what());
  }
  c.validate();
  return c;
}

std::string TrainConfig::hash() const { return sha256_hex(to_json()); }

// ---------------------------------------------------------------------------
// Schedule

TrainState initial_state(const TrainConfig& cfg) {
  TrainState s;
  s.lr = cfg.lr_init;
  return s;
}

TrainState schedule_step(TrainState state, double val_acc, const TrainConfig& cfg) {
  if (val_acc > state.best_val_acc) {
    state.best_val_acc = val_acc;
    state.best_epoch = state.epoch;
    state.epochs_since_improve = 0;
  } else {
    ++state.epochs_since_improve;
    if (state.epochs_since_improve % cfg.plateau_patience == 0) state.lr *= 0.5;
    if (state.epochs_since_improve >= cfg.halt_patience) state.stop = true;
  }
  ++state.epoch;
  return state;
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(double beta1, double beta2, double epsilon)
    : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

void Adam::step(nn::ParamStore<float>& params, double lr) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  const auto b1 = static_cast<float>(beta1_);
  const auto b2 = static_cast<float>(beta2_);
  const auto step = static_cast<float>(lr / c1);
  const auto inv_c2 = static_cast<float>(1.0 / c2);
  const auto eps = static_cast<float>(epsilon_);
  std::size_t slot = 0;
  params.for_each([&](nn::Param<float>& p) {
    if (!p.trainable) return;
    if (slot == m_.size()) {
      m_.emplace_back(p.size(), 0.0f);
      v_.emplace_back(p.size(), 0.0f);
    }
    auto& m = m_[slot];
    auto& v = v_[slot];
    ++slot;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const float g = p.grad[k];
      m[k] = b1 * m[k] + (1.0f - b1) * g;
      v[k] = b2 * v[k] + (1.0f - b2) * g * g;
      p.value[k] -= step * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
    }
  });
}

// ---------------------------------------------------------------------------
// train_fold

std::vector<std::string> training_sources(const FoldSpec& fold, Augmentation augmentation) {
  std::vector<std::string> out;
  bool any_copy = false;
  for (const auto& id : fold.train_utterances) {
    const bool copy = is_augmented_copy(id);
    any_copy = any_copy || copy;
    if (!copy || uses_sp(augmentation)) out.push_back(id);
  }
  if (uses_sp(augmentation) && !any_copy && !out.empty()) {
    throw Error(Errc::kBadConfig, fold.fold_id,
                "speed perturbation requested but the corpus has no #sp copies");
  }
  return out;
}

namespace {

std::vector<std::vector<float>> snapshot(const Model& model) {
  std::vector<std::vector<float>> out;
  model.params().for_each([&](const nn::Param<float>& p) { out.push_back(p.value); });
  return out;
}

void restore(Model& model, const std::vector<std::vector<float>>& values) {
  std::size_t k = 0;
  model.params().for_each([&](nn::Param<float>& p) { p.value = values[k++]; });
}

}  // namespace

TrainResult train_fold(const ModelConfig& model_cfg, const FoldData& data,
                       const TrainConfig& cfg) {
  model_cfg.validate();
  cfg.validate();
  const FeatureCache& train_cache = *data.train.cache;
  if (train_cache.params().n_bins != model_cfg.input_bins) {
    throw Error(Errc::kBadConfig, "input_bins", "model input height differs from the cache");
  }
  const std::vector<std::string> sources = training_sources(data.fold, cfg.augmentation);
  if (sources.empty()) throw Error(Errc::kEmptyTrainSet, data.fold.fold_id, "no training utterances");

  std::vector<std::string> originals;
  for (const auto& id : sources) {
    if (!is_augmented_copy(id)) originals.push_back(id);
  }
  TrainResult result;
  result.normalizer = fold_normalizer(train_cache, originals.empty() ? sources : originals);

  const int frames = model_cfg.input_frames;
  const std::vector<int> classes = utterance_classes(data.train, sources);
  std::vector<SpectrogramSegment> segments;
  for (std::size_t u = 0; u < sources.size(); ++u) {
    Spectrogram spec = train_cache.load(sources[u]);
    result.normalizer.apply(spec);
    for (auto& s : segment(spec, frames, std::max(1, frames / 2), classes[u])) {
      segments.push_back(std::move(s));
    }
  }
  const auto val = prepare_utterances(data.eval, data.fold.val_utterances, result.normalizer,
                                      frames);
  spdlog::info("fold {}: {} training segments from {} utterances, {} validation utterances",
               data.fold.fold_id, segments.size(), sources.size(), val.size());

  Rng init_rng = make_rng(cfg.seed, {kInitTag});
  result.model = std::make_unique<Model>(model_cfg, init_rng);
  Model& model = *result.model;
  model.reseed_dropout(cfg.seed ^ (kDropoutTag << 56));
  const SegmentScorer scorer = model_scorer(model);
  Adam adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
  MixupConfig mix;
  mix.alpha = cfg.mixup_alpha;
  mix.enabled = uses_mixup(cfg.augmentation);

  TrainState state = initial_state(cfg);
  auto best = snapshot(model);
  std::vector<std::size_t> order(segments.size());
  for (int epoch = 0; epoch < cfg.max_epochs && !state.stop; ++epoch) {
    Rng shuffle_rng = make_rng(cfg.seed, {kShuffleTag, static_cast<std::uint64_t>(epoch)});
    Rng mix_rng = make_rng(cfg.seed, {kMixupTag, static_cast<std::uint64_t>(epoch)});
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    model.set_mode(nn::Mode::kTrain);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::vector<const SpectrogramSegment*> items;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      items.clear();
      for (std::size_t k = start; k < end; ++k) items.push_back(&segments[order[k]]);
      SegmentBatch batch = make_batch(std::span<const SpectrogramSegment* const>(items));
      if (mix.enabled && batch.n >= 2) batch = mixup_batch(batch, mix, mix_rng);
      double loss = 0.0;
      try {
        loss = model.loss_and_grads(input_tensor(batch), target_tensor(batch));
      } catch (const Error& e) {
        if (e.code() != Errc::kNonFiniteLoss && e.code() != Errc::kNonFiniteActivation) throw;
        throw Error(Errc::kDivergedTraining, data.fold.fold_id,
                    "epoch " + std::to_string(epoch) + ": " + e.what());
      }
      adam.step(model.params(), state.lr);
      loss_sum += loss * batch.n;
      seen += static_cast<std::size_t>(batch.n);
    }

    model.set_mode(nn::Mode::kEval);
    const double val_acc = val.empty() ? 0.0 : accuracy(score_prepared(scorer, val));
    const double lr_used = state.lr;
    const double train_loss = loss_sum / static_cast<double>(seen);
    if (val_acc > state.best_val_acc) best = snapshot(model);
    state = schedule_step(std::move(state), val_acc, cfg);
    state.history.push_back({epoch, train_loss, val_acc, lr_used});
    spdlog::info("fold {} epoch {}: loss {:.4f} val_acc {:.4f} lr {:.3g}", data.fold.fold_id,
                 epoch, train_loss, val_acc, lr_used);
  }
  restore(model, best);
  model.set_mode(nn::Mode::kEval);
  result.state = std::move(state);
  return result;
}

// ---------------------------------------------------------------------------
// repeat_runs

std::vector<EvalReport> repeat_runs(const ModelConfig& model_cfg, const FoldData& data,
                                    const TrainConfig& train_cfg, const RunCallback& on_run) {
  train_cfg.validate();
  std::string model_tag = variant_name(model_cfg.variant);
  if (train_cfg.augmentation != Augmentation::kNone) {
    model_tag += "+" + augmentation_name(train_cfg.augmentation);
  }
  std::vector<EvalReport> reports;
  for (int r = 0; r < train_cfg.repeats; ++r) {
    TrainConfig cfg = train_cfg;
    cfg.seed = train_cfg.seed + static_cast<std::uint64_t>(r);
    TrainResult result = train_fold(model_cfg, data, cfg);
    EvalReport report = eval_clean(*result.model, data, result.normalizer, cfg.seed);
    report.model = model_tag;
    report.provenance["model_config_hash"] = model_cfg.hash();
    report.provenance["train_config_hash"] = cfg.hash();
    report.provenance["best_epoch"] = std::to_string(result.state.best_epoch);
    if (on_run) on_run(r, cfg.seed, result, report);
    reports.push_back(std::move(report));
  }
  EvalReport summary = merge_reports(reports).front();
  summary.provenance = {{"fold", data.fold.fold_id},
                        {"model_config_hash", model_cfg.hash()},
                        {"train_config_hash", train_cfg.hash()},
                        {"repeats", std::to_string(train_cfg.repeats)}};
  reports.push_back(std::move(summary));
  return reports;
}

// ---------------------------------------------------------------------------
// History

std::string history_text(const TrainState& state) {
  std::string out = "epoch\ttrain_loss\tval_acc\tlr\n";
  char line[160];
  for (const auto& h : state.history) {
    std::snprintf(line, sizeof(line), "%d\t%.9g\t%.9g\t%.9g\n", h.epoch, h.train_loss, h.val_acc,
                  h.lr);
    out += line;
  }
  return out;
}

void write_history(const std::filesystem::path& path, const TrainState& state) {
  write_file_atomic(path, history_text(state));
}

}  // namespace ser
