// src/evaluation.cpp

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

#include "ser/evaluation.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>

#include "json.hpp"
#include "ser/hash.hpp"
#include "ser/training.hpp"
#include "ser/wav.hpp"

namespace ser {

using Json = nlohmann::ordered_json;

std::vector<int> utterance_classes(const DataSource& source, std::span<const std::string> ids) {
  const auto index = index_by_id(*source.manifest);
  std::vector<int> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw Error(Errc::kNotFound, id, "utterance not in manifest");
    out.push_back(class_index(source.manifest->utterances[it->second].label));
  }
  return out;
}

Posterior utterance_posterior(std::span<const Posterior> segment_posteriors) {
  if (segment_posteriors.empty()) throw Error(Errc::kEmptyList, "utterance_posterior", "no segments");
  Posterior mean{};
  for (const auto& p : segment_posteriors) {
    for (int c = 0; c < kNumClasses; ++c) mean[c] += p[c];
  }
  for (auto& v : mean) v /= static_cast<double>(segment_posteriors.size());
  return mean;
}

int argmax(const Posterior& p) {
  int best = 0;
  for (int c = 1; c < kNumClasses; ++c) {
    if (p[c] > p[best]) best = c;
  }
  return best;
}

double uar(std::span<const int> predictions, std::span<const int> labels, int n_classes) {
  if (predictions.size() != labels.size()) {
    throw Error(Errc::kShapeMismatch, "uar", "predictions and labels differ in length");
  }
  std::vector<long> total(n_classes, 0), correct(n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes) {
      throw Error(Errc::kBadArgument, "uar", "label outside the class range");
    }
    ++total[labels[i]];
    if (predictions[i] == labels[i]) ++correct[labels[i]];
  }
  double sum = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    if (total[c] == 0) throw Error(Errc::kMissingClass, std::to_string(c), "class has no labels");
    sum += static_cast<double>(correct[c]) / static_cast<double>(total[c]);
  }
  return sum / n_classes;
}

Confusion confusion_matrix(std::span<const int> predictions, std::span<const int> labels) {
  Confusion m{};
  for (std::size_t i = 0; i < labels.size(); ++i) ++m[labels[i]][predictions[i]];
  return m;
}

SegmentScorer model_scorer(Model& model, int batch_size) {
  return [&model, batch_size](const SegmentBatch& batch) {
    const nn::Mode previous = model.mode();
    model.set_mode(nn::Mode::kEval);
    std::vector<Posterior> out;
    out.reserve(batch.n);
    const std::size_t item = batch.item_size();
    for (int start = 0; start < batch.n; start += batch_size) {
      const int m = std::min(batch.n, start + batch_size) - start;
      std::vector<float> values(batch.values.begin() + start * item,
                                batch.values.begin() + (start + m) * item);
      nn::Tensor<float> x({m, 1, batch.n_bins, batch.n_frames}, std::move(values));
      const nn::Tensor<float> p = model.posteriors(x);
      for (int i = 0; i < m; ++i) {
        Posterior row{};
        for (int c = 0; c < kNumClasses; ++c) row[c] = p[static_cast<std::size_t>(i) * kNumClasses + c];
        out.push_back(row);
      }
    }
    model.set_mode(previous);
    return out;
  };
}

std::vector<SpectrogramSegment> eval_segments(Spectrogram spec, const Normalizer& norm,
                                              int class_id, int frames) {
  norm.apply(spec);
  return segment(spec, frames, frames, class_id);
}

std::vector<PreparedUtterance> prepare_utterances(const DataSource& source,
                                                  std::span<const std::string> ids,
                                                  const Normalizer& norm, int frames) {
  const std::vector<int> classes = utterance_classes(source, ids);
  std::vector<PreparedUtterance> out;
  out.reserve(ids.size());
  for (std::size_t u = 0; u < ids.size(); ++u) {
    out.push_back({ids[u], classes[u],
                   eval_segments(source.cache->load(ids[u]), norm, classes[u], frames)});
  }
  return out;
}

UtteranceScores score_prepared(const SegmentScorer& scorer,
                               std::span<const PreparedUtterance> utterances) {
  constexpr std::size_t kChunk = 64;
  std::vector<const SpectrogramSegment*> pending;
  std::vector<Posterior> posteriors;
  auto flush = [&] {
    if (pending.empty()) return;
    const auto scored = scorer(make_batch(std::span<const SpectrogramSegment* const>(pending)));
    posteriors.insert(posteriors.end(), scored.begin(), scored.end());
    pending.clear();
  };
  for (const auto& u : utterances) {
    for (const auto& s : u.segments) {
      pending.push_back(&s);
      if (pending.size() == kChunk) flush();
    }
  }
  flush();
  UtteranceScores scores;
  std::size_t offset = 0;
  for (const auto& u : utterances) {
    const std::span<const Posterior> mine(posteriors.data() + offset, u.segments.size());
    offset += u.segments.size();
    scores.predictions.push_back(argmax(utterance_posterior(mine)));
    scores.labels.push_back(u.label);
  }
  return scores;
}

UtteranceScores score_utterances(const SegmentScorer& scorer, const DataSource& source,
                                 std::span<const std::string> ids, const Normalizer& norm,
                                 int frames) {
  const auto prepared = prepare_utterances(source, ids, norm, frames);
  return score_prepared(scorer, prepared);
}

double accuracy(const UtteranceScores& scores) {
  if (scores.labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.labels.size(); ++i) {
    correct += scores.predictions[i] == scores.labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.labels.size());
}

RunResult make_run_result(const UtteranceScores& scores, std::uint64_t seed) {
  return {seed, uar(scores.predictions, scores.labels),
          confusion_matrix(scores.predictions, scores.labels)};
}

// ---------------------------------------------------------------------------
// Reports

void EvalReport::summarize() {
  confusion = {};
  uar_mean = 0.0;
  uar_std = 0.0;
  if (runs.empty()) return;
  for (const auto& r : runs) {
    uar_mean += r.uar;
    for (int a = 0; a < kNumClasses; ++a) {
      for (int b = 0; b < kNumClasses; ++b) confusion[a][b] += r.confusion[a][b];
    }
  }
  uar_mean /= static_cast<double>(runs.size());
  if (runs.size() > 1) {
    double ss = 0.0;
    for (const auto& r : runs) ss += (r.uar - uar_mean) * (r.uar - uar_mean);
    uar_std = std::sqrt(ss / static_cast<double>(runs.size() - 1));
  }
}

std::vector<EvalReport> merge_reports(const std::vector<EvalReport>& reports) {
  std::vector<EvalReport> out;
  for (const auto& r : reports) {
    auto it = std::find_if(out.begin(), out.end(), [&](const EvalReport& o) {
      return o.condition == r.condition && o.model == r.model;
    });
    if (it == out.end()) {
      out.push_back(r);
    } else {
      it->runs.insert(it->runs.end(), r.runs.begin(), r.runs.end());
    }
  }
  for (auto& r : out) r.summarize();
  return out;
}

EvalReport eval_clean(const SegmentScorer& scorer, const FoldData& data, const Normalizer& norm,
                      std::uint64_t seed, int frames) {
  EvalReport report;
  report.condition = "clean";
  report.runs.push_back(make_run_result(
      score_utterances(scorer, data.eval, data.fold.test_utterances, norm, frames), seed));
  report.provenance = {{"fold", data.fold.fold_id}, {"normalizer_hash", norm.hash()}};
  report.summarize();
  return report;
}

EvalReport eval_clean(Model& model, const FoldData& data, const Normalizer& norm,
                      std::uint64_t seed) {
  EvalReport report =
      eval_clean(model_scorer(model), data, norm, seed, model.config().input_frames);
  report.model = variant_name(model.config().variant);
  report.provenance["model_config_hash"] = model.config().hash();
  return report;
}

std::string noise_condition(double snr_db) {
  if (std::isinf(snr_db)) return "noise(snr=inf)";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "noise(snr=%g)", snr_db);
  return buf;
}

std::vector<EvalReport> eval_noisy(const SegmentScorer& scorer, const FoldData& data,
                                   const Normalizer& norm, const NoiseBank& bank,
                                   std::span<const double> snrs_db, std::uint64_t seed,
                                   int frames) {
  if (bank.entries.empty()) throw Error(Errc::kBadArgument, "noise bank", "no noise files");
  const auto& ids = data.fold.test_utterances;
  const auto index = index_by_id(*data.eval.manifest);
  const std::vector<int> classes = utterance_classes(data.eval, ids);
  const SpectrogramParams& params = data.eval.cache->params();
  std::string types;
  for (const auto& e : bank.entries) types += (types.empty() ? "" : ",") + e.name;

  std::vector<EvalReport> reports;
  for (const double snr : snrs_db) {
    Sha256 digest;
    std::vector<PreparedUtterance> prepared;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const Utterance& utt = data.eval.manifest->utterances[index.at(ids[t])];
      Waveform wave = read_wav(utt.audio_path);
      std::vector<float> samples;
      if (std::isinf(snr)) {
        samples = std::move(wave.samples);
      } else {
        Rng rng = make_rng(seed, {std::bit_cast<std::uint64_t>(snr), t});
        std::uniform_int_distribution<std::size_t> pick(0, bank.entries.size() - 1);
        const NoiseEntry& noise = bank.entries[pick(rng)];
        samples = mix_noise_at_snr(wave.samples, noise.samples, snr, rng).samples;
      }
      digest.update_values(std::span<const float>(samples));
      prepared.push_back(
          {ids[t], classes[t], eval_segments(stft_spectrogram(samples, params), norm, classes[t], frames)});
    }
    EvalReport report;
    report.condition = noise_condition(snr);
    report.runs.push_back(make_run_result(score_prepared(scorer, prepared), seed));
    report.provenance = {{"fold", data.fold.fold_id},
                         {"normalizer_hash", norm.hash()},
                         {"noisy_audio_sha256", digest.hex_digest()},
                         {"noise_files", types},
                         {"noise_seed", std::to_string(seed)}};
    report.summarize();
    reports.push_back(std::move(report));
  }
  return reports;
}

std::vector<EvalReport> eval_noisy(Model& model, const FoldData& data, const Normalizer& norm,
                                   const NoiseBank& bank, std::span<const double> snrs_db,
                                   std::uint64_t seed) {
  auto reports = eval_noisy(model_scorer(model), data, norm, bank, snrs_db, seed,
                            model.config().input_frames);
  for (auto& r : reports) {
    r.model = variant_name(model.config().variant);
    r.provenance["model_config_hash"] = model.config().hash();
  }
  return reports;
}

EvalReport eval_crosscorpus(const ModelConfig& model_cfg, const DataSource& train,
                            const DataSource& test, const TrainConfig& train_cfg,
                            double val_fraction, std::uint64_t split_seed) {
  FoldData data{crosscorpus_split(*train.manifest, *test.manifest, val_fraction, split_seed),
                train, test};
  auto reports = repeat_runs(model_cfg, data, train_cfg);
  EvalReport summary = reports.back();
  summary.condition = "crosscorpus(" + data.fold.fold_id + ")";
  summary.provenance["train_corpus"] = train.manifest->corpus_id;
  summary.provenance["test_corpus"] = test.manifest->corpus_id;
  summary.provenance["split_seed"] = std::to_string(split_seed);
  return summary;
}

// ---------------------------------------------------------------------------
// Rendering

std::string format_cell(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f ± %.1f", mean * 100.0, std * 100.0);
  return buf;
}

namespace {

std::size_t display_width(const std::string& s) {
  // Count code points; every character in a cell is one column wide.
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80 ? 1 : 0;
  return n;
}

std::string pad(const std::string& s, std::size_t width) {
  return s + std::string(width - std::min(width, display_width(s)), ' ');
}

Json confusion_json(const Confusion& m) {
  Json flat = Json::array();
  for (const auto& row : m) {
    for (int v : row) flat.push_back(v);
  }
  return flat;
}

Confusion confusion_from_json(const Json& j) {
  if (!j.is_array() || j.size() != kNumClasses * kNumClasses) {
    throw Error(Errc::kParseError, "confusion", "expected 16 entries");
  }
  Confusion m{};
  for (int k = 0; k < kNumClasses * kNumClasses; ++k) m[k / kNumClasses][k % kNumClasses] = j[k].get<int>();
  return m;
}

std::string render_table(const std::vector<EvalReport>& reports) {
  std::vector<std::string> models, conditions;
  for (const auto& r : reports) {
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
    if (std::find(conditions.begin(), conditions.end(), r.condition) == conditions.end()) {
      conditions.push_back(r.condition);
    }
  }
  std::vector<std::vector<std::string>> cells(models.size() + 1,
                                              std::vector<std::string>(conditions.size() + 1, "-"));
  cells[0][0] = "model";
  for (std::size_t c = 0; c < conditions.size(); ++c) cells[0][c + 1] = conditions[c];
  for (std::size_t m = 0; m < models.size(); ++m) cells[m + 1][0] = models[m];
  for (const auto& r : reports) {
    const auto m = std::find(models.begin(), models.end(), r.model) - models.begin();
    const auto c = std::find(conditions.begin(), conditions.end(), r.condition) - conditions.begin();
    cells[m + 1][c + 1] = format_cell(r.uar_mean, r.uar_std);
  }
  std::vector<std::size_t> widths(conditions.size() + 1, 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], display_width(row[c]));
  }
  std::string out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    std::string line;
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      line += (c == 0 ? "" : " | ") + pad(cells[r][c], widths[c]);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
    if (r == 0) {
      std::string rule;
      for (std::size_t c = 0; c < widths.size(); ++c) {
        rule += (c == 0 ? "" : "-|-") + std::string(widths[c], '-');
      }
      out += rule + "\n";
    }
  }
  return out;
}

std::string render_jsonl(const std::vector<EvalReport>& reports) {
  std::string out;
  for (const auto& r : reports) {
    const auto hash = r.provenance.find("model_config_hash");
    const std::string config_hash = hash == r.provenance.end() ? "" : hash->second;
    for (const auto& run : r.runs) {
      Json j;
      j["record"] = "run";
      j["condition"] = r.condition;
      j["model"] = r.model;
      j["run_seed"] = run.seed;
      j["uar"] = run.uar;
      j["confusion"] = confusion_json(run.confusion);
      j["config_hash"] = config_hash;
      out += j.dump() + "\n";
    }
    Json s;
    s["record"] = "summary";
    s["condition"] = r.condition;
    s["model"] = r.model;
    s["runs"] = r.runs.size();
    s["uar_mean"] = r.uar_mean;
    s["uar_std"] = r.uar_std;
    s["confusion"] = confusion_json(r.confusion);
    s["config_hash"] = config_hash;
    s["provenance"] = r.provenance;
    out += s.dump() + "\n";
  }
  return out;
}

}  // namespace

std::string render_report(const std::vector<EvalReport>& reports, ReportFormat format) {
  return format == ReportFormat::kTable ? render_table(reports) : render_jsonl(reports);
}

std::vector<EvalReport> parse_report_jsonl(const std::string& text) {
  std::vector<EvalReport> out;
  std::vector<RunResult> pending;
  std::string pending_key;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const Json j = Json::parse(line);
      const std::string key =
          j.at("condition").get<std::string>() + "\n" + j.at("model").get<std::string>();
      const std::string kind = j.at("record").get<std::string>();
      if (kind == "run") {
        if (!pending.empty() && key != pending_key) {
          throw Error(Errc::kParseError, "line " + std::to_string(line_no),
                      "run record without its summary");
        }
        pending_key = key;
        pending.push_back({j.at("run_seed").get<std::uint64_t>(), j.at("uar").get<double>(),
                           confusion_from_json(j.at("confusion"))});
      } else if (kind == "summary") {
        if (!pending.empty() && key != pending_key) {
          throw Error(Errc::kParseError, "line " + std::to_string(line_no),
                      "summary does not match the preceding runs");
        }
        EvalReport r;
        r.condition = j.at("condition").get<std::string>();
        r.model = j.at("model").get<std::string>();
        r.runs = std::move(pending);
        pending.clear();
        r.uar_mean = j.at("uar_mean").get<double>();
        r.uar_std = j.at("uar_std").get<double>();
        r.confusion = confusion_from_json(j.at("confusion"));
        r.provenance = j.at("provenance").get<std::map<std::string, std::string>>();
        if (r.runs.size() != j.at("runs").get<std::size_t>()) {
          throw Error(Errc::kParseError, "line " + std::to_string(line_no), "run count mismatch");
        }
        out.push_back(std::move(r));
      } else {
        throw Error(Errc::kParseError, "line " + std::to_string(line_no), "unknown record " + kind);
      }
    } catch (const Json::exception& e) {
      throw Error(Errc::kParseError, "line " + std::to_string(line_no), e.what());
    }
  }
  if (!pending.empty()) throw Error(Errc::kParseError, "report", "trailing run records");
  return out;
}

}  // namespace ser
