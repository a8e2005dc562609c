// src/corpus.cpp

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

#include "ser/corpus.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"
#include "ser/error.hpp"
#include "ser/random.hpp"

namespace ser {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

int class_index(std::string_view label) {
  for (int c = 0; c < kNumClasses; ++c) {
    if (kEmotionLabels[c] == label) return c;
  }
  throw Error(Errc::kUnmappedLabel, std::string(label));
}

std::unordered_map<std::string, std::size_t> index_by_id(
    const CorpusManifest& manifest) {
  std::unordered_map<std::string, std::size_t> index;
  index.reserve(manifest.utterances.size());
  for (std::size_t i = 0; i < manifest.utterances.size(); ++i) {
    index.emplace(manifest.utterances[i].id, i);
  }
  return index;
}

bool is_augmented_copy(std::string_view utterance_id) {
  return utterance_id.find("#sp") != std::string_view::npos;
}

namespace {

std::string corpus_id_for(const fs::path& path) {
  if (path.filename() == "manifest.jsonl") {
    const auto parent = fs::absolute(path).lexically_normal().parent_path();
    if (!parent.filename().empty()) return parent.filename().string();
  }
  return path.stem().string();
}

template <typename T>
T required(const ordered_json& rec, const char* field, const std::string& who) {
  auto it = rec.find(field);
  if (it == rec.end() || it->is_null()) {
    throw Error(Errc::kMissingField, who, std::string("missing '") + field + "'");
  }
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(Errc::kParseError, who, std::string("bad type for '") + field + "'");
  }
}

}  // namespace

CorpusManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIoError, path.string(), "cannot open manifest");
  const fs::path base = fs::absolute(path).lexically_normal().parent_path();

  CorpusManifest manifest;
  manifest.corpus_id = corpus_id_for(path);
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ordered_json rec;
    try {
      rec = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(Errc::kParseError, "line " + std::to_string(line_no), e.what());
    }
    const std::string where = "line " + std::to_string(line_no);
    Utterance u;
    u.id = required<std::string>(rec, "id", where);
    u.speaker_id = required<std::string>(rec, "speaker_id", u.id);
    u.session_id = required<std::string>(rec, "session_id", u.id);
    u.label = required<std::string>(rec, "label", u.id);
    const auto audio = required<std::string>(rec, "audio_path", u.id);
    u.sample_rate = required<int>(rec, "sample_rate", u.id);
    u.duration = required<double>(rec, "duration", u.id);

    if (!seen.insert(u.id).second) throw Error(Errc::kDuplicateId, u.id);
    if (u.sample_rate != 16000) {
      throw Error(Errc::kBadSampleRate, u.id,
                  "expected 16000 Hz, got " + std::to_string(u.sample_rate));
    }
    if (!(u.duration > 0.0)) {
      throw Error(Errc::kParseError, u.id, "duration must be positive");
    }
    fs::path audio_path(audio);
    u.audio_path = (audio_path.is_absolute() ? audio_path : base / audio_path)
                       .lexically_normal();
    if (!fs::exists(u.audio_path)) {
      throw Error(Errc::kMissingAudio, u.id, u.audio_path.string());
    }
    manifest.label_set.insert(u.label);
    manifest.utterances.push_back(std::move(u));
  }
  return manifest;
}

void write_manifest(const CorpusManifest& manifest, const fs::path& path) {
  const fs::path base = fs::absolute(path).lexically_normal().parent_path();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(Errc::kIoError, path.string(), "cannot write manifest");
    for (const auto& u : manifest.utterances) {
      const fs::path abs = fs::absolute(u.audio_path).lexically_normal();
      fs::path rel = abs.lexically_relative(base);
      const bool inside = !rel.empty() && *rel.begin() != "..";
      ordered_json rec;
      rec["id"] = u.id;
      rec["speaker_id"] = u.speaker_id;
      rec["session_id"] = u.session_id;
      rec["label"] = u.label;
      rec["audio_path"] = inside ? rel.generic_string() : abs.generic_string();
      rec["sample_rate"] = u.sample_rate;
      rec["duration"] = u.duration;
      out << rec.dump() << '\n';
    }
  }
  fs::rename(tmp, path);
}

LabelScheme iemocap_scheme() {
  return {{"angry", "angry"},
          {"happy", "happy"},
          {"excited", "happy"},
          {"neutral", "neutral"},
          {"sad", "sad"}};
}

LabelScheme msp_improv_scheme() {
  return {{"A", "angry"},   {"H", "happy"}, {"N", "neutral"}, {"S", "sad"},
          {"angry", "angry"}, {"happy", "happy"}, {"neutral", "neutral"},
          {"sad", "sad"}};
}

LabelScheme identity_scheme(const std::set<std::string>& labels) {
  LabelScheme scheme;
  for (const auto& l : labels) scheme.emplace(l, l);
  return scheme;
}

CorpusManifest map_labels(const CorpusManifest& manifest,
                          const LabelScheme& scheme) {
  CorpusManifest out;
  out.corpus_id = manifest.corpus_id;
  out.utterances.reserve(manifest.utterances.size());
  for (const auto& u : manifest.utterances) {
    auto it = scheme.find(u.label);
    if (it == scheme.end()) throw Error(Errc::kUnmappedLabel, u.label, u.id);
    Utterance mapped = u;
    mapped.label = it->second;
    out.utterances.push_back(std::move(mapped));
  }
  for (const auto& [from, to] : scheme) out.label_set.insert(to);
  return out;
}

std::vector<FoldSpec> loso_folds(const CorpusManifest& manifest) {
  std::map<std::string, std::set<std::string>> speakers_by_session;
  std::map<std::string, std::string> session_of_speaker;
  for (const auto& u : manifest.utterances) {
    speakers_by_session[u.session_id].insert(u.speaker_id);
    auto [it, fresh] = session_of_speaker.emplace(u.speaker_id, u.session_id);
    if (!fresh && it->second != u.session_id) {
      throw Error(Errc::kBadSessionStructure, u.speaker_id,
                  "speaker appears in sessions " + it->second + " and " +
                      u.session_id);
    }
  }
  for (const auto& [session, speakers] : speakers_by_session) {
    if (speakers.size() != 2) {
      throw Error(Errc::kBadSessionStructure, session,
                  "expected 2 speakers, found " + std::to_string(speakers.size()));
    }
  }

  std::vector<FoldSpec> folds;
  for (const auto& [session, speakers] : speakers_by_session) {
    for (const auto& test_speaker : speakers) {
      const std::string& val_speaker =
          *speakers.begin() == test_speaker ? *speakers.rbegin() : *speakers.begin();
      FoldSpec fold;
      fold.fold_id = test_speaker;
      for (const auto& u : manifest.utterances) {
        if (u.session_id != session) {
          fold.train_utterances.push_back(u.id);
        } else if (is_augmented_copy(u.id)) {
          continue;
        } else if (u.speaker_id == test_speaker) {
          fold.test_utterances.push_back(u.id);
        } else if (u.speaker_id == val_speaker) {
          fold.val_utterances.push_back(u.id);
        }
      }
      if (fold.train_utterances.empty()) {
        spdlog::warn("fold {}: empty training set (corpus has a single session)",
                     fold.fold_id);
      }
      folds.push_back(std::move(fold));
    }
  }
  return folds;
}

FoldSpec crosscorpus_split(const CorpusManifest& train_manifest,
                           const CorpusManifest& test_manifest,
                           double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw Error(Errc::kBadArgument, "val_fraction", "must lie in (0, 1)");
  }
  if (train_manifest.label_set != test_manifest.label_set) {
    throw Error(Errc::kLabelSetMismatch,
                train_manifest.corpus_id + " vs " + test_manifest.corpus_id);
  }

  std::map<std::string, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < test_manifest.utterances.size(); ++i) {
    by_label[test_manifest.utterances[i].label].push_back(i);
  }
  const std::size_t total = test_manifest.utterances.size();
  const auto target = static_cast<std::size_t>(std::llround(val_fraction * total));

  // Largest-remainder apportionment keeps every label within one utterance
  // of its exact share while hitting the rounded total.
  struct Share {
    std::string label;
    std::size_t count;
    double remainder;
  };
  std::vector<Share> shares;
  std::size_t assigned = 0;
  for (const auto& [label, idx] : by_label) {
    const double exact = val_fraction * static_cast<double>(idx.size());
    const auto base = static_cast<std::size_t>(std::floor(exact));
    shares.push_back({label, base, exact - static_cast<double>(base)});
    assigned += base;
  }
  std::vector<std::size_t> order(shares.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return shares[a].remainder > shares[b].remainder;
  });
  for (std::size_t k = 0; assigned < target && k < order.size(); ++k) {
    ++shares[order[k]].count;
    ++assigned;
  }

  Rng rng = make_rng(seed);
  std::vector<bool> in_val(total, false);
  for (const auto& share : shares) {
    auto idx = by_label[share.label];
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < share.count && k < idx.size(); ++k) in_val[idx[k]] = true;
  }

  FoldSpec fold;
  fold.fold_id = train_manifest.corpus_id + "->" + test_manifest.corpus_id;
  for (std::size_t i = 0; i < total; ++i) {
    (in_val[i] ? fold.val_utterances : fold.test_utterances)
        .push_back(test_manifest.utterances[i].id);
  }
  for (const auto& u : train_manifest.utterances) fold.train_utterances.push_back(u.id);
  return fold;
}

}  // namespace ser
