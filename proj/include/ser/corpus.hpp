// ser/corpus.hpp

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

#ifndef SER_CORPUS_HPP_
#define SER_CORPUS_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ser {

inline constexpr int kNumClasses = 4;

// Canonical class order; class ids index into this array everywhere.
inline constexpr std::array<std::string_view, kNumClasses> kEmotionLabels = {
    "angry", "happy", "neutral", "sad"};

// Throws UnmappedLabel for anything outside kEmotionLabels.
int class_index(std::string_view label);

struct Utterance {
  std::string id;
  std::string speaker_id;
  std::string session_id;
  std::string label;
  std::filesystem::path audio_path;  // absolute once loaded
  int sample_rate = 16000;
  double duration = 0.0;  // seconds

  bool operator==(const Utterance&) const = default;
};

struct CorpusManifest {
  std::string corpus_id;
  std::vector<Utterance> utterances;
  std::set<std::string> label_set;

  bool operator==(const CorpusManifest&) const = default;
};

std::unordered_map<std::string, std::size_t> index_by_id(
    const CorpusManifest& manifest);

// Speed-perturbed copies carry a "#sp<factor>" suffix on the source id.
bool is_augmented_copy(std::string_view utterance_id);

// Manifests are JSON lines, one utterance per line, with the fields
// id, speaker_id, session_id, label, audio_path, sample_rate, duration.
// Relative audio paths resolve against the manifest's directory. The corpus
// id is the parent directory name for files called "manifest.jsonl" and the
// file stem otherwise.
CorpusManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const CorpusManifest& manifest,
                    const std::filesystem::path& path);

// source label -> target label
using LabelScheme = std::map<std::string, std::string>;

LabelScheme iemocap_scheme();
LabelScheme msp_improv_scheme();
LabelScheme identity_scheme(const std::set<std::string>& labels);

// Throws UnmappedLabel if a record's label is not a key of the scheme.
CorpusManifest map_labels(const CorpusManifest& manifest,
                          const LabelScheme& scheme);

struct FoldSpec {
  std::string fold_id;
  std::vector<std::string> test_utterances;
  std::vector<std::string> val_utterances;
  std::vector<std::string> train_utterances;

  bool operator==(const FoldSpec&) const = default;
};

// Leave-one-speaker-out over two-speaker sessions. The test speaker's
// session partner is the validation speaker; every other session trains.
// Fold ids are the test speaker ids. Speed-perturbed copies follow their
// source into train and are dropped when the source is in val or test.
std::vector<FoldSpec> loso_folds(const CorpusManifest& manifest);

// Train on all of train_manifest; split test_manifest into a label-stratified
// validation part of round(val_fraction * N) utterances and a test part.
FoldSpec crosscorpus_split(const CorpusManifest& train_manifest,
                           const CorpusManifest& test_manifest,
                           double val_fraction, std::uint64_t seed);

// Synthetic fixture: 2-speaker sessions, balanced classes, each class a
// distinct band-limited harmonic stack with its own amplitude-modulation
// rate, plus a per-speaker pitch offset and additive noise. Writes
// <out_dir>/wav/*.wav and <out_dir>/manifest.jsonl.
CorpusManifest synth_corpus(int n_speakers, int utts_per_speaker,
                            std::uint64_t seed,
                            const std::filesystem::path& out_dir);

// Five synthetic environmental noises named after the noise types
// (kitchen.wav, park.wav, station.wav, traffic.wav, cafeteria.wav).
void synth_noise_bank(std::uint64_t seed, const std::filesystem::path& out_dir,
                      double seconds = 8.0);

}  // namespace ser

#endif  // SER_CORPUS_HPP_
