// src/cli.cpp

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

#include "ser/cli.hpp"

#include <spdlog/spdlog.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "ser/augment.hpp"
#include "ser/corpus.hpp"
#include "ser/io.hpp"

namespace ser {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// ExperimentSpec

namespace {

Normalization parse_normalization(const std::string& name) {
  if (name == "per-fold-zscore") return Normalization::kPerFoldZscore;
  if (name == "none") return Normalization::kNone;
  throw Error(Errc::kBadConfig, "features.normalization",
              "unknown value " + name + " (valid: per-fold-zscore, none)");
}

Json features_json(const SpectrogramParams& p) {
  Json j;
  j["window_ms"] = p.window_ms;
  j["hop_ms"] = p.hop_ms;
  j["n_bins"] = p.n_bins;
  j["fft_size"] = p.fft_size;
  j["log_floor"] = p.log_floor;
  j["normalization"] = p.normalization == Normalization::kNone ? "none" : "per-fold-zscore";
  return j;
}

SpectrogramParams features_from_json(const Json& j) {
  SpectrogramParams p;
  for (const auto& [key, value] : j.items()) {
    if (key == "window_ms") p.window_ms = value.get<double>();
    else if (key == "hop_ms") p.hop_ms = value.get<double>();
    else if (key == "n_bins") p.n_bins = value.get<int>();
    else if (key == "fft_size") p.fft_size = value.get<int>();
    else if (key == "log_floor") p.log_floor = value.get<double>();
    else if (key == "normalization") p.normalization = parse_normalization(value.get<std::string>());
    else throw Error(Errc::kBadConfig, "features." + key, "unknown key");
  }
  p.validate();
  return p;
}

std::string snr_text(double snr) {
  if (std::isinf(snr)) return "inf";
  std::ostringstream ss;
  ss << snr;
  return ss.str();
}

double parse_snr(const std::string& text) {
  if (text == "inf" || text == "clean") return kNoNoise;
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw Error(Errc::kBadArgument, text, "SNR must be a number, inf or clean");
}

std::vector<double> parse_snr_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_snr(item));
  if (out.empty()) throw Error(Errc::kBadArgument, "--snr", "empty list");
  return out;
}

}  // namespace

std::string ExperimentSpec::to_json() const {
  Json j;
  j["manifest"] = manifest.string();
  j["labels"] = labels;
  j["speed_perturb"] = speed_perturb;
  j["test_manifest"] = test_manifest.string();
  j["test_labels"] = test_labels;
  j["cache_dir"] = cache_dir.string();
  j["noise_dir"] = noise_dir.string();
  j["features"] = features_json(features);
  j["model"] = Json::parse(model.to_json());
  j["train"] = Json::parse(train.to_json());
  j["fold"] = fold;
  j["harness"] = harness;
  Json snr_list = Json::array();
  for (double s : snrs) snr_list.push_back(snr_text(s));
  j["snrs"] = snr_list;
  j["attack"] = Json::parse(attack.to_json());
  j["val_fraction"] = val_fraction;
  j["split_seed"] = split_seed;
  j["eval_seed"] = eval_seed;
  j["workers"] = workers;
  j["out"] = out.string();
  return j.dump(2) + "\n";
}

ExperimentSpec ExperimentSpec::from_json(const std::string& text) {
  ExperimentSpec s;
  try {
    const Json j = Json::parse(text);
    if (!j.is_object()) throw Error(Errc::kParseError, "spec", "expected an object");
    for (const auto& [key, value] : j.items()) {
      if (key == "manifest") s.manifest = value.get<std::string>();
      else if (key == "labels") s.labels = value.get<std::string>();
      else if (key == "speed_perturb") s.speed_perturb = value.get<bool>();
      else if (key == "test_manifest") s.test_manifest = value.get<std::string>();
      else if (key == "test_labels") s.test_labels = value.get<std::string>();
      else if (key == "cache_dir") s.cache_dir = value.get<std::string>();
      else if (key == "noise_dir") s.noise_dir = value.get<std::string>();
      else if (key == "features") s.features = features_from_json(value);
      else if (key == "model") s.model = ModelConfig::from_json(value.dump());
      else if (key == "train") s.train = TrainConfig::from_json(value.dump());
      else if (key == "fold") s.fold = value.get<std::string>();
      else if (key == "harness") s.harness = value.get<std::string>();
      else if (key == "snrs") {
        s.snrs.clear();
        for (const auto& v : value) {
          s.snrs.push_back(v.is_string() ? parse_snr(v.get<std::string>()) : v.get<double>());
        }
      } else if (key == "attack") s.attack = AttackConfig::from_json(value.dump());
      else if (key == "val_fraction") s.val_fraction = value.get<double>();
      else if (key == "split_seed") s.split_seed = value.get<std::uint64_t>();
      else if (key == "eval_seed") s.eval_seed = value.get<std::uint64_t>();
      else if (key == "workers") s.workers = value.get<int>();
      else if (key == "out") s.out = value.get<std::string>();
      else throw Error(Errc::kBadConfig, key, "unknown spec key");
    }
  } catch (const Json::exception& e) {
    throw Error(Errc::kParseError, "spec", e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

// Flag values; unset optionals leave the spec untouched.
struct Flags {
  std::string spec;
  std::optional<std::string> manifest, labels, test_manifest, test_labels, cache_dir, noise_dir;
  std::optional<std::string> variant, augment, fold, harness, snr, method, out;
  std::optional<int> repeats, max_epochs, batch, workers, steps;
  std::optional<std::uint64_t> seed, eval_seed, split_seed;
  std::optional<double> eps, step_size, val_fraction;
  bool speed_perturb = false;
  bool deterministic = false;
  bool force = false;
  std::string checkpoint;
  std::string format = "table";
  std::vector<std::string> inputs;
  int speakers = 4;
  int utts = 40;
  std::uint64_t synth_seed = 0;
  bool no_noise = false;
};

class Console {
 public:
  Console(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}
  void print(const std::string& text) {
    std::lock_guard lock(mu_);
    out_ << text << std::flush;
  }
  void note(const std::string& text) {
    std::lock_guard lock(mu_);
    err_ << text << '\n' << std::flush;
  }

 private:
  std::ostream& out_;
  std::ostream& err_;
  std::mutex mu_;
};

fs::path resolve_input(const fs::path& p) { return p.empty() ? p : fs::absolute(p); }

fs::path resolve_output(const ExperimentSpec& spec, const fs::path& p) {
  return p.is_absolute() ? p : spec.out / p;
}

ExperimentSpec resolve_spec(const Flags& f) {
  ExperimentSpec s;
  if (!f.spec.empty()) {
    if (!fs::exists(f.spec)) throw Error(Errc::kNotFound, f.spec, "spec file not found");
    s = ExperimentSpec::from_json(read_file(f.spec));
  }
  if (f.manifest) s.manifest = *f.manifest;
  if (f.labels) s.labels = *f.labels;
  if (f.speed_perturb) s.speed_perturb = true;
  if (f.test_manifest) s.test_manifest = *f.test_manifest;
  if (f.test_labels) s.test_labels = *f.test_labels;
  if (f.cache_dir) s.cache_dir = *f.cache_dir;
  if (f.noise_dir) s.noise_dir = *f.noise_dir;
  if (f.variant) {
    const Variant v = parse_variant(*f.variant);
    if (v != s.model.variant) s.model = default_config(v);
  }
  if (f.augment) s.train.augmentation = parse_augmentation(*f.augment);
  if (f.fold) s.fold = *f.fold;
  if (f.harness) s.harness = *f.harness;
  if (f.snr) s.snrs = parse_snr_list(*f.snr);
  if (f.method) s.attack.method = parse_attack_method(*f.method);
  if (f.eps) s.attack.epsilon = *f.eps;
  if (f.steps) s.attack.bim_steps = *f.steps;
  if (f.step_size) s.attack.bim_step_size = *f.step_size;
  if (f.repeats) s.train.repeats = *f.repeats;
  if (f.max_epochs) s.train.max_epochs = *f.max_epochs;
  if (f.batch) s.train.batch_size = *f.batch;
  if (f.seed) s.train.seed = *f.seed;
  if (f.eval_seed) s.eval_seed = *f.eval_seed;
  if (f.split_seed) s.split_seed = *f.split_seed;
  if (f.val_fraction) s.val_fraction = *f.val_fraction;
  if (f.workers) s.workers = *f.workers;
  if (f.deterministic) {
    s.train.deterministic = true;
    s.workers = 1;
  }
  if (f.out) s.out = *f.out;
  if (s.out.empty()) throw Error(Errc::kBadArgument, "--out", "an output directory is required");
  s.out = fs::absolute(s.out);
  s.manifest = resolve_input(s.manifest);
  s.test_manifest = resolve_input(s.test_manifest);
  s.noise_dir = resolve_input(s.noise_dir);
  if (s.workers < 1) throw Error(Errc::kBadArgument, "--workers", "must be >= 1");
  if (s.harness != "clean" && s.harness != "noise" && s.harness != "attack" &&
      s.harness != "crosscorpus") {
    throw Error(Errc::kBadArgument, s.harness,
                "unknown harness (valid: clean, noise, attack, crosscorpus)");
  }
  s.model.validate();
  s.train.validate();
  s.attack.validate();
  return s;
}

void refuse_existing(const fs::path& p, bool force) {
  if (!force && fs::exists(p)) {
    throw Error(Errc::kIoError, p.string(), "refusing to overwrite (pass --force)");
  }
}

LabelScheme scheme_for(const std::string& name, const CorpusManifest& m) {
  if (name == "identity") return identity_scheme(m.label_set);
  if (name == "iemocap") return iemocap_scheme();
  if (name == "msp_improv") return msp_improv_scheme();
  throw Error(Errc::kBadArgument, name, "unknown label scheme (valid: identity, iemocap, msp_improv)");
}

fs::path cache_root(const ExperimentSpec& spec) {
  if (!spec.cache_dir.empty()) return resolve_output(spec, spec.cache_dir);
  if (const char* env = std::getenv("SER_CACHE_ROOT"); env != nullptr && *env != '\0') {
    return fs::absolute(env);
  }
  return spec.out / "cache";
}

struct LoadedCorpus {
  CorpusManifest manifest;
  FeatureCache cache;
};

LoadedCorpus load_corpus(const ExperimentSpec& spec, const fs::path& manifest_path,
                         const std::string& labels, bool sp, Console& console) {
  if (manifest_path.empty()) throw Error(Errc::kBadArgument, "--manifest", "a manifest is required");
  CorpusManifest m = load_manifest(manifest_path);
  m = map_labels(m, scheme_for(labels, m));
  const fs::path root = cache_root(spec);
  if (sp) m = augment_corpus_sp(m, root / (m.corpus_id + "_sp_audio"));
  const fs::path dir = root / (sp ? m.corpus_id + "_sp" : m.corpus_id);
  FeatureCache::BuildStats stats;
  FeatureCache cache = FeatureCache::build(m, spec.features, dir, false, &stats);
  if (stats.computed == 0) {
    console.note("cache hit: " + std::to_string(stats.reused) + " records in " + dir.string());
  } else {
    console.note("features: computed " + std::to_string(stats.computed) + ", reused " +
                 std::to_string(stats.reused) + " in " + dir.string());
  }
  return {std::move(m), std::move(cache)};
}

std::vector<FoldSpec> select_folds(const CorpusManifest& m, const std::string& wanted) {
  std::vector<FoldSpec> folds = loso_folds(m);
  if (wanted.empty()) return folds;
  std::string valid;
  for (auto& f : folds) {
    if (f.fold_id == wanted) return {f};
    valid += (valid.empty() ? "" : ", ") + f.fold_id;
  }
  throw Error(Errc::kBadArgument, wanted, "unknown fold (valid: " + valid + ")");
}

std::string model_tag(const ExperimentSpec& spec) {
  std::string tag = variant_name(spec.model.variant);
  if (spec.train.augmentation != Augmentation::kNone) {
    tag += "+" + augmentation_name(spec.train.augmentation);
  }
  return tag;
}

void emit_reports(const std::vector<EvalReport>& reports, const fs::path& path,
                  const std::string& format, Console& console) {
  write_file_atomic(path, render_report(reports, ReportFormat::kJsonl));
  console.print(render_report(reports, format == "jsonl" ? ReportFormat::kJsonl : ReportFormat::kTable));
  console.note("report written to " + path.string());
}

int cmd_synth(const Flags& f, Console& console) {
  const fs::path out = fs::absolute(*f.out);
  if (f.speakers < 1 || f.utts < 1) {
    throw Error(Errc::kBadArgument, "--speakers/--utts", "must be >= 1");
  }
  refuse_existing(out / "manifest.jsonl", f.force);
  const CorpusManifest m = synth_corpus(f.speakers, f.utts, f.synth_seed, out);
  if (!f.no_noise) synth_noise_bank(f.synth_seed, out / "noise");
  console.note("wrote " + std::to_string(m.utterances.size()) + " utterances to " +
               (out / "manifest.jsonl").string());
  return kExitOk;
}

int cmd_prepare(const Flags& f, Console& console) {
  const ExperimentSpec spec = resolve_spec(f);
  fs::create_directories(spec.out);
  load_corpus(spec, spec.manifest, spec.labels, spec.speed_perturb, console);
  if (!spec.test_manifest.empty()) {
    load_corpus(spec, spec.test_manifest, spec.test_labels, false, console);
  }
  write_file_atomic(spec.out / "resolved_spec.json", spec.to_json());
  return kExitOk;
}

int cmd_train(const Flags& f, Console& console) {
  const ExperimentSpec spec = resolve_spec(f);
  const LoadedCorpus corpus =
      load_corpus(spec, spec.manifest, spec.labels, spec.speed_perturb, console);
  const std::vector<FoldSpec> folds = select_folds(corpus.manifest, spec.fold);
  const std::string tag = model_tag(spec);
  refuse_existing(spec.out / "report.jsonl", f.force);
  for (const auto& fold : folds) refuse_existing(spec.out / "runs" / fold.fold_id / tag, f.force);
  write_file_atomic(spec.out / "resolved_spec.json", spec.to_json());

  const DataSource source{&corpus.manifest, &corpus.cache};
  std::vector<EvalReport> summaries(folds.size());
  std::vector<std::exception_ptr> failures(folds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < folds.size(); i = next++) {
      try {
        const FoldData data{folds[i], source, source};
        const fs::path fold_dir = spec.out / "runs" / folds[i].fold_id / tag;
        auto on_run = [&](int run, std::uint64_t seed, TrainResult& result, const EvalReport& clean) {
          const fs::path dir = fold_dir / ("run" + std::to_string(run));
          save_checkpoint(dir / "checkpoint.bin", *result.model, result.normalizer);
          write_history(dir / "history.tsv", result.state);
          Json j;
          j["fold"] = folds[i].fold_id;
          j["model"] = tag;
          j["run"] = run;
          j["seed"] = seed;
          j["manifest"] = spec.manifest.string();
          j["labels"] = spec.labels;
          j["features"] = features_json(spec.features);
          j["best_epoch"] = result.state.best_epoch;
          j["best_val_acc"] = result.state.best_val_acc;
          j["clean_uar"] = clean.uar_mean;
          j["model_config_hash"] = spec.model.hash();
          j["train_config_hash"] = clean.provenance.at("train_config_hash");
          write_file_atomic(dir / "run.json", j.dump(2) + "\n");
          char line[160];
          std::snprintf(line, sizeof(line), "fold %s run %d: clean UAR %.4f",
                        folds[i].fold_id.c_str(), run, clean.uar_mean);
          console.note(line);
        };
        summaries[i] = repeat_runs(spec.model, data, spec.train, on_run).back();
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  const int n_threads = std::min<int>(spec.workers, static_cast<int>(folds.size()));
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : failures) {
    if (e) std::rethrow_exception(e);
  }
  emit_reports(summaries, spec.out / "report.jsonl", f.format, console);
  return kExitOk;
}

int cmd_eval(const Flags& f, Console& console) {
  ExperimentSpec spec = resolve_spec(f);
  const fs::path report_path = spec.out / ("report_" + spec.harness + ".jsonl");

  if (spec.harness == "crosscorpus") {
    if (spec.test_manifest.empty()) {
      throw Error(Errc::kBadArgument, "--test-manifest", "cross-corpus evaluation needs a target");
    }
    refuse_existing(report_path, f.force);
    const LoadedCorpus train = load_corpus(spec, spec.manifest, spec.labels, false, console);
    const LoadedCorpus test = load_corpus(spec, spec.test_manifest, spec.test_labels, false, console);
    write_file_atomic(spec.out / "resolved_spec.json", spec.to_json());
    EvalReport report = eval_crosscorpus(spec.model, {&train.manifest, &train.cache},
                                         {&test.manifest, &test.cache}, spec.train,
                                         spec.val_fraction, spec.split_seed);
    emit_reports({report}, report_path, f.format, console);
    return kExitOk;
  }

  if (f.checkpoint.empty()) throw Error(Errc::kBadArgument, "--checkpoint", "a checkpoint is required");
  const fs::path ckpt = fs::absolute(f.checkpoint);
  if (!fs::is_regular_file(ckpt)) throw Error(Errc::kNotFound, ckpt.string(), "checkpoint not found");
  LoadedModel loaded = load_checkpoint(ckpt);

  // Defaults recorded next to the checkpoint by the train command.
  std::string tag = variant_name(loaded.model->config().variant);
  if (const fs::path run_json = ckpt.parent_path() / "run.json"; fs::exists(run_json)) {
    const Json j = Json::parse(read_file(run_json));
    tag = j.value("model", tag);
    if (!f.fold && spec.fold.empty()) spec.fold = j.value("fold", "");
    if (!f.manifest && f.spec.empty()) spec.manifest = j.value("manifest", "");
    if (!f.labels && f.spec.empty()) spec.labels = j.value("labels", spec.labels);
    if (f.spec.empty() && j.contains("features")) spec.features = features_from_json(j["features"]);
  }
  spec.model = loaded.model->config();
  if (spec.fold.empty()) throw Error(Errc::kBadArgument, "--fold", "the evaluation fold is required");
  refuse_existing(report_path, f.force);
  const LoadedCorpus corpus = load_corpus(spec, spec.manifest, spec.labels, false, console);
  const std::vector<FoldSpec> folds = select_folds(corpus.manifest, spec.fold);
  const DataSource source{&corpus.manifest, &corpus.cache};
  const FoldData data{folds.front(), source, source};
  write_file_atomic(spec.out / "resolved_spec.json", spec.to_json());

  std::vector<EvalReport> reports;
  if (spec.harness == "clean") {
    reports.push_back(eval_clean(*loaded.model, data, loaded.normalizer, spec.eval_seed));
  } else if (spec.harness == "noise") {
    fs::path noise_dir = spec.noise_dir;
    if (noise_dir.empty()) noise_dir = spec.manifest.parent_path() / "noise";
    if (!fs::is_directory(noise_dir)) {
      throw Error(Errc::kNotFound, noise_dir.string(), "noise directory not found");
    }
    const NoiseBank bank = NoiseBank::load(noise_dir);
    reports = eval_noisy(*loaded.model, data, loaded.normalizer, bank, spec.snrs, spec.eval_seed);
  } else {
    reports.push_back(attack_eval(*loaded.model, data, loaded.normalizer, spec.attack, spec.eval_seed));
  }
  for (auto& r : reports) r.model = tag;
  emit_reports(reports, report_path, f.format, console);
  return kExitOk;
}

int cmd_report(const Flags& f, Console& console) {
  std::vector<EvalReport> all;
  for (const auto& in : f.inputs) {
    if (!fs::exists(in)) throw Error(Errc::kNotFound, in, "report not found");
    auto parsed = parse_report_jsonl(read_file(in));
    all.insert(all.end(), parsed.begin(), parsed.end());
  }
  const auto merged = merge_reports(all);
  const std::string text =
      render_report(merged, f.format == "jsonl" ? ReportFormat::kJsonl : ReportFormat::kTable);
  if (f.out) {
    const fs::path path = fs::absolute(*f.out);
    refuse_existing(path, f.force);
    write_file_atomic(path, text);
    console.note("report written to " + path.string());
  } else {
    console.print(text);
  }
  return kExitOk;
}

void add_spec_options(CLI::App* cmd, Flags& f) {
  cmd->add_option("--spec", f.spec, "Experiment spec (JSON); flags override its fields");
  cmd->add_option("--manifest", f.manifest, "Corpus manifest (JSONL)");
  cmd->add_option("--labels", f.labels, "Label scheme: identity, iemocap, msp_improv");
  cmd->add_option("--cache-dir", f.cache_dir, "Feature cache root (default $SER_CACHE_ROOT or <out>/cache)");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--workers", f.workers, "Parallel folds (default 1)");
  cmd->add_flag("--force", f.force, "Overwrite existing outputs");
  cmd->add_option("--format", f.format, "Console report format")
      ->check(CLI::IsMember({"table", "jsonl"}));
}

void add_train_options(CLI::App* cmd, Flags& f) {
  cmd->add_option("--variant", f.variant,
                  "Model: proposed, cnn, cnn_lstm, densenet, densenet_lstm");
  cmd->add_option("--augment", f.augment, "Augmentation: none, sp, mixup, sp+mixup");
  cmd->add_option("--fold", f.fold, "LOSO fold (held-out speaker); default all");
  cmd->add_option("--repeats", f.repeats, "Independent runs per fold");
  cmd->add_option("--max-epochs", f.max_epochs, "Epoch cap");
  cmd->add_option("--batch", f.batch, "Batch size");
  cmd->add_option("--seed", f.seed, "Base seed");
  cmd->add_flag("--deterministic", f.deterministic, "Single worker, reproducible artifacts");
  cmd->add_flag("--speed-perturb", f.speed_perturb, "Add 0.9x and 1.1x copies of the corpus");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Console console(out, err);
  Flags f;
  CLI::App app{"Speech emotion recognition experiments", "ser"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  CLI::App* synth = app.add_subcommand("synth", "Write a synthetic corpus and noise bank");
  synth->add_option("--speakers", f.speakers, "Speakers")->capture_default_str();
  synth->add_option("--utts", f.utts, "Utterances per speaker")->capture_default_str();
  synth->add_option("--seed", f.synth_seed, "Seed")->capture_default_str();
  synth->add_option("--out", f.out, "Output directory")->required();
  synth->add_flag("--force", f.force, "Overwrite an existing corpus");
  synth->add_flag("--no-noise", f.no_noise, "Skip the noise bank");

  CLI::App* prepare = app.add_subcommand("prepare", "Load manifests and build the feature cache");
  add_spec_options(prepare, f);
  prepare->add_option("--test-manifest", f.test_manifest, "Second corpus to featurize");
  prepare->add_option("--test-labels", f.test_labels, "Label scheme of the second corpus");
  prepare->add_flag("--speed-perturb", f.speed_perturb, "Add 0.9x and 1.1x copies of the corpus");

  CLI::App* train = app.add_subcommand("train", "Train repeated runs per LOSO fold");
  add_spec_options(train, f);
  add_train_options(train, f);

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint or run cross-corpus training");
  add_spec_options(eval, f);
  add_train_options(eval, f);
  eval->add_option("--checkpoint", f.checkpoint, "Checkpoint file");
  eval->add_option("--harness", f.harness, "clean, noise, attack or crosscorpus");
  eval->add_option("--snr", f.snr, "Comma-separated SNRs in dB (inf for clean)");
  eval->add_option("--noise-dir", f.noise_dir, "Noise bank directory");
  eval->add_option("--eval-seed", f.eval_seed, "Seed for noise selection");
  eval->add_option("--method", f.method, "Attack: fgsm or bim");
  eval->add_option("--eps", f.eps, "Attack budget (L-infinity)");
  eval->add_option("--steps", f.steps, "BIM iterations");
  eval->add_option("--step-size", f.step_size, "BIM step (default eps/5)");
  eval->add_option("--test-manifest", f.test_manifest, "Cross-corpus target manifest");
  eval->add_option("--test-labels", f.test_labels, "Label scheme of the target corpus");
  eval->add_option("--val-fraction", f.val_fraction, "Target share used for validation");
  eval->add_option("--split-seed", f.split_seed, "Seed of the target split");

  CLI::App* report = app.add_subcommand("report", "Merge JSONL reports and render them");
  report->add_option("--in", f.inputs, "Report files")->required();
  report->add_option("--format", f.format, "table or jsonl")->check(CLI::IsMember({"table", "jsonl"}));
  report->add_option("--out", f.out, "Write to a file instead of stdout");
  report->add_flag("--force", f.force, "Overwrite the output file");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    CLI::App* active = &app;
    for (CLI::App* sub : app.get_subcommands()) active = sub;
    err << active->help();
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(f, console);
    if (prepare->parsed()) return cmd_prepare(f, console);
    if (train->parsed()) return cmd_train(f, console);
    if (eval->parsed()) return cmd_eval(f, console);
    return cmd_report(f, console);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.code() == Errc::kBadArgument ? kExitUsage : kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace ser
