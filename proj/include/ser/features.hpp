// ser/features.hpp

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

#ifndef SER_FEATURES_HPP_
#define SER_FEATURES_HPP_

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ser/corpus.hpp"

namespace ser {

enum class Normalization { kPerFoldZscore, kNone };

struct SpectrogramParams {
  double window_ms = 25.0;
  double hop_ms = 10.0;
  int n_bins = 128;
  int fft_size = 512;
  double log_floor = 1e-10;
  Normalization normalization = Normalization::kPerFoldZscore;

  int window_samples() const;  // 400 at 16 kHz
  int hop_samples() const;     // 160 at 16 kHz
  // Throws BadConfig unless window <= fft_size and n_bins <= fft_size / 2.
  void validate() const;
  // Canonical text form; the cache keys its records by its hash.
  std::string canonical() const;

  bool operator==(const SpectrogramParams&) const = default;
};

// Log-magnitude spectrogram, row-major [n_bins x n_frames] (time contiguous).
struct Spectrogram {
  int n_bins = 0;
  int n_frames = 0;
  std::vector<float> values;
  std::string utterance_id;

  float at(int bin, int frame) const {
    return values[static_cast<std::size_t>(bin) * n_frames + frame];
  }
};

inline constexpr int kSegmentFrames = 256;
inline constexpr int kTrainSegmentHop = 128;
inline constexpr int kEvalSegmentHop = 256;

using LabelVector = std::array<float, kNumClasses>;

LabelVector one_hot(int class_id);

// Fixed-width window of a spectrogram, row-major [n_bins x kSegmentFrames].
struct SpectrogramSegment {
  int n_bins = 0;
  std::vector<float> values;
  std::string utterance_id;
  LabelVector label{};
};

// Frame t covers samples [t*hop, t*hop + window), Hamming-windowed and
// zero-padded to fft_size. Row b-1 holds log(|X[b]| + log_floor) for
// b = 1..n_bins; the DC bin is dropped. Throws TooShort below one window.
Spectrogram stft_spectrogram(std::span<const float> waveform,
                             const SpectrogramParams& params);

// |X[k]|^2 for k = 0..fft_size/2 of one windowed, zero-padded frame.
std::vector<double> frame_power_spectrum(std::span<const float> frame,
                                         const SpectrogramParams& params);

std::vector<double> hamming_window(int length);

// Windows start at 0, hop, 2*hop, ...; when the last regular window stops
// short of the end, one more window is aligned to the final frame. Inputs
// shorter than the window are tiled along time to exactly one window.
std::vector<SpectrogramSegment> segment(const Spectrogram& spec, int window,
                                        int hop, int class_id);

// Contiguous batch of equally shaped segments: values is row-major
// [n x n_bins x n_frames], labels are probability vectors.
struct SegmentBatch {
  int n = 0;
  int n_bins = 0;
  int n_frames = 0;
  std::vector<float> values;
  std::vector<LabelVector> labels;

  std::size_t item_size() const {
    return static_cast<std::size_t>(n_bins) * n_frames;
  }
  std::span<const float> item(int i) const {
    return std::span<const float>(values).subspan(i * item_size(), item_size());
  }
};

// Throws ShapeMismatch when segments differ in shape.
SegmentBatch make_batch(std::span<const SpectrogramSegment* const> segments);
SegmentBatch make_batch(std::span<const SpectrogramSegment> segments);

// Per-bin affine z-scoring fitted on training utterances only.
struct Normalizer {
  static constexpr double kStdFloor = 1e-8;
  std::vector<float> mean;
  std::vector<float> stddev;

  void apply(Spectrogram& spec) const;
  std::string hash() const;
  bool operator==(const Normalizer&) const = default;
};

class FeatureCache;

// Per-bin mean and population std over the training utterances; the identity
// map when the cache params ask for no normalization. Throws EmptyTrainSet
// for an empty id list.
Normalizer fold_normalizer(const FeatureCache& cache,
                           std::span<const std::string> train_ids);

// On-disk cache of full (unsegmented) spectrograms, one binary record per
// utterance: uint32 n_bins, uint32 n_frames, then n_bins*n_frames
// little-endian float32 values, bin-major. <dir>/index lists the params,
// their hash, and per record: utterance id, file name, audio sha256,
// record sha256.
class FeatureCache {
 public:
  struct BuildStats {
    std::size_t computed = 0;
    std::size_t reused = 0;
  };

  // Reuses records whose audio hash matches. Throws StaleCache when the
  // index was built with other params, unless force_rebuild is set.
  static FeatureCache build(const CorpusManifest& manifest,
                            const SpectrogramParams& params,
                            const std::filesystem::path& dir,
                            bool force_rebuild = false,
                            BuildStats* stats = nullptr);
  static FeatureCache open(const std::filesystem::path& dir);

  const SpectrogramParams& params() const { return params_; }
  const std::filesystem::path& dir() const { return dir_; }
  bool contains(const std::string& id) const;
  std::vector<std::string> ids() const;
  const std::string& record_hash(const std::string& id) const;

  // Throws NotFound for unknown ids. Every call is reported to the read hook.
  Spectrogram load(const std::string& id) const;

  using ReadHook = std::function<void(const std::string&)>;
  void set_read_hook(ReadHook hook) { read_hook_ = std::move(hook); }

 private:
  struct Record {
    std::string file;
    std::string audio_hash;
    std::string feature_hash;
  };

  void write_index() const;

  std::filesystem::path dir_;
  SpectrogramParams params_;
  std::map<std::string, Record> records_;
  ReadHook read_hook_;
};

void write_spectrogram_record(const std::filesystem::path& path,
                              const Spectrogram& spec);
Spectrogram read_spectrogram_record(const std::filesystem::path& path);

}  // namespace ser

#endif  // SER_FEATURES_HPP_
