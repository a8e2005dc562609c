// src/features.cpp

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

#include "ser/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>

#include "ser/error.hpp"
#include "ser/hash.hpp"
#include "ser/wav.hpp"

namespace ser {

namespace fs = std::filesystem;

int SpectrogramParams::window_samples() const {
  return static_cast<int>(std::lround(window_ms * kSampleRate / 1000.0));
}

int SpectrogramParams::hop_samples() const {
  return static_cast<int>(std::lround(hop_ms * kSampleRate / 1000.0));
}

void SpectrogramParams::validate() const {
  if (window_samples() < 1 || hop_samples() < 1) {
    throw Error(Errc::kBadConfig, "spectrogram", "window and hop must be positive");
  }
  if (window_samples() > fft_size) {
    throw Error(Errc::kBadConfig, "spectrogram", "window longer than fft_size");
  }
  if (n_bins < 1 || n_bins > fft_size / 2) {
    throw Error(Errc::kBadConfig, "spectrogram", "n_bins must lie in [1, fft_size/2]");
  }
  if (!(log_floor > 0.0)) {
    throw Error(Errc::kBadConfig, "spectrogram", "log_floor must be positive");
  }
}

std::string SpectrogramParams::canonical() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "window_ms=%.17g;hop_ms=%.17g;n_bins=%d;fft_size=%d;log_floor=%.17g",
                window_ms, hop_ms, n_bins, fft_size, log_floor);
  return buf;
}

LabelVector one_hot(int class_id) {
  if (class_id < 0 || class_id >= kNumClasses) {
    throw Error(Errc::kBadArgument, std::to_string(class_id), "class id out of range");
  }
  LabelVector v{};
  v[static_cast<std::size_t>(class_id)] = 1.0f;
  return v;
}

std::vector<double> hamming_window(int length) {
  std::vector<double> w(static_cast<std::size_t>(length), 1.0);
  if (length == 1) return w;
  for (int n = 0; n < length; ++n) {
    w[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (length - 1));
  }
  return w;
}

namespace {

// FFTW planning is not thread-safe; execution on a private plan is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(int size) : size_(size) {
    in_ = fftw_alloc_real(static_cast<std::size_t>(size));
    out_ = fftw_alloc_complex(static_cast<std::size_t>(size / 2 + 1));
    std::lock_guard<std::mutex> lock(planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(size, in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    {
      std::lock_guard<std::mutex> lock(planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  void execute() { fftw_execute(plan_); }
  double power(int k) const { return out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1]; }

 private:
  int size_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

void load_frame(RealFft& fft, std::span<const float> samples,
                const std::vector<double>& window, int fft_size) {
  double* in = fft.input();
  const auto n = static_cast<int>(window.size());
  for (int i = 0; i < n; ++i) in[i] = window[i] * static_cast<double>(samples[i]);
  std::fill(in + n, in + fft_size, 0.0);
}

}  // namespace

std::vector<double> frame_power_spectrum(std::span<const float> frame,
                                         const SpectrogramParams& params) {
  params.validate();
  const int win = params.window_samples();
  if (static_cast<int>(frame.size()) < win) {
    throw Error(Errc::kTooShort, std::to_string(frame.size()) + " samples");
  }
  const auto window = hamming_window(win);
  RealFft fft(params.fft_size);
  load_frame(fft, frame, window, params.fft_size);
  fft.execute();
  std::vector<double> power(static_cast<std::size_t>(params.fft_size / 2 + 1));
  for (std::size_t k = 0; k < power.size(); ++k) power[k] = fft.power(static_cast<int>(k));
  return power;
}

Spectrogram stft_spectrogram(std::span<const float> waveform,
                             const SpectrogramParams& params) {
  params.validate();
  const int win = params.window_samples();
  const int hop = params.hop_samples();
  const auto len = static_cast<long>(waveform.size());
  if (len < win) {
    throw Error(Errc::kTooShort, std::to_string(len) + " samples",
                "need at least " + std::to_string(win));
  }

  Spectrogram spec;
  spec.n_bins = params.n_bins;
  spec.n_frames = static_cast<int>((len - win) / hop + 1);
  spec.values.resize(static_cast<std::size_t>(spec.n_bins) * spec.n_frames);

  const auto window = hamming_window(win);
  RealFft fft(params.fft_size);
  for (int t = 0; t < spec.n_frames; ++t) {
    load_frame(fft, waveform.subspan(static_cast<std::size_t>(t) * hop, win), window,
               params.fft_size);
    fft.execute();
    for (int b = 1; b <= spec.n_bins; ++b) {
      const double mag = std::sqrt(fft.power(b));
      spec.values[static_cast<std::size_t>(b - 1) * spec.n_frames + t] =
          static_cast<float>(std::log(mag + params.log_floor));
    }
  }
  return spec;
}

std::vector<SpectrogramSegment> segment(const Spectrogram& spec, int window, int hop,
                                        int class_id) {
  if (hop < 1) throw Error(Errc::kBadArgument, "hop", "must be >= 1");
  if (spec.n_frames < 1) throw Error(Errc::kBadArgument, spec.utterance_id, "empty spectrogram");
  const LabelVector label = one_hot(class_id);

  std::vector<int> starts;
  if (spec.n_frames <= window) {
    starts.push_back(0);
  } else {
    int s = 0;
    for (; s + window <= spec.n_frames; s += hop) starts.push_back(s);
    if (starts.back() + window < spec.n_frames) starts.push_back(spec.n_frames - window);
  }

  std::vector<SpectrogramSegment> out;
  out.reserve(starts.size());
  for (int start : starts) {
    SpectrogramSegment seg;
    seg.n_bins = spec.n_bins;
    seg.utterance_id = spec.utterance_id;
    seg.label = label;
    seg.values.resize(static_cast<std::size_t>(spec.n_bins) * window);
    for (int b = 0; b < spec.n_bins; ++b) {
      const float* row = spec.values.data() + static_cast<std::size_t>(b) * spec.n_frames;
      float* dst = seg.values.data() + static_cast<std::size_t>(b) * window;
      for (int t = 0; t < window; ++t) dst[t] = row[(start + t) % spec.n_frames];
    }
    out.push_back(std::move(seg));
  }
  return out;
}

SegmentBatch make_batch(std::span<const SpectrogramSegment* const> segments) {
  SegmentBatch batch;
  batch.n = static_cast<int>(segments.size());
  if (segments.empty()) return batch;
  batch.n_bins = segments.front()->n_bins;
  batch.n_frames = static_cast<int>(segments.front()->values.size() /
                                    std::max(1, segments.front()->n_bins));
  batch.values.reserve(segments.size() * batch.item_size());
  batch.labels.reserve(segments.size());
  for (const SpectrogramSegment* s : segments) {
    if (s->n_bins != batch.n_bins || s->values.size() != batch.item_size()) {
      throw Error(Errc::kShapeMismatch, s->utterance_id, "segment shape differs in batch");
    }
    batch.values.insert(batch.values.end(), s->values.begin(), s->values.end());
    batch.labels.push_back(s->label);
  }
  return batch;
}

SegmentBatch make_batch(std::span<const SpectrogramSegment> segments) {
  std::vector<const SpectrogramSegment*> ptrs;
  ptrs.reserve(segments.size());
  for (const auto& s : segments) ptrs.push_back(&s);
  return make_batch(std::span<const SpectrogramSegment* const>(ptrs));
}

void Normalizer::apply(Spectrogram& spec) const {
  if (static_cast<int>(mean.size()) != spec.n_bins) {
    throw Error(Errc::kShapeMismatch, spec.utterance_id,
                "normalizer has " + std::to_string(mean.size()) + " bins");
  }
  for (int b = 0; b < spec.n_bins; ++b) {
    float* row = spec.values.data() + static_cast<std::size_t>(b) * spec.n_frames;
    const float m = mean[b];
    const float s = stddev[b];
    for (int t = 0; t < spec.n_frames; ++t) row[t] = (row[t] - m) / s;
  }
}

std::string Normalizer::hash() const {
  Sha256 h;
  h.update_values(std::span<const float>(mean));
  h.update_values(std::span<const float>(stddev));
  return h.hex_digest();
}

Normalizer fold_normalizer(const FeatureCache& cache,
                           std::span<const std::string> train_ids) {
  if (train_ids.empty()) throw Error(Errc::kEmptyTrainSet, "fold_normalizer");
  const int bins = cache.params().n_bins;
  if (cache.params().normalization == Normalization::kNone) {
    return {std::vector<float>(static_cast<std::size_t>(bins), 0.0f),
            std::vector<float>(static_cast<std::size_t>(bins), 1.0f)};
  }
  std::vector<double> sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> sum_sq(static_cast<std::size_t>(bins), 0.0);
  double frames = 0.0;
  // Two passes keep the variance well conditioned for large log values.
  for (const auto& id : train_ids) {
    const Spectrogram spec = cache.load(id);
    for (int b = 0; b < bins; ++b) {
      const float* row = spec.values.data() + static_cast<std::size_t>(b) * spec.n_frames;
      for (int t = 0; t < spec.n_frames; ++t) sum[b] += row[t];
    }
    frames += spec.n_frames;
  }
  Normalizer norm;
  norm.mean.resize(static_cast<std::size_t>(bins));
  norm.stddev.resize(static_cast<std::size_t>(bins));
  std::vector<double> mean_d(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) mean_d[b] = sum[b] / frames;
  for (const auto& id : train_ids) {
    const Spectrogram spec = cache.load(id);
    for (int b = 0; b < bins; ++b) {
      const float* row = spec.values.data() + static_cast<std::size_t>(b) * spec.n_frames;
      for (int t = 0; t < spec.n_frames; ++t) {
        const double d = row[t] - mean_d[b];
        sum_sq[b] += d * d;
      }
    }
  }
  for (int b = 0; b < bins; ++b) {
    norm.mean[b] = static_cast<float>(mean_d[b]);
    norm.stddev[b] =
        static_cast<float>(std::max(std::sqrt(sum_sq[b] / frames), Normalizer::kStdFloor));
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Cache records

void write_spectrogram_record(const fs::path& path, const Spectrogram& spec) {
  static_assert(std::endian::native == std::endian::little,
                "record format is little-endian");
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::kIoError, path.string(), "cannot write record");
    const std::uint32_t header[2] = {static_cast<std::uint32_t>(spec.n_bins),
                                     static_cast<std::uint32_t>(spec.n_frames)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    out.write(reinterpret_cast<const char*>(spec.values.data()),
              static_cast<std::streamsize>(spec.values.size() * sizeof(float)));
    if (!out) throw Error(Errc::kIoError, path.string(), "short write");
  }
  fs::rename(tmp, path);
}

Spectrogram read_spectrogram_record(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::kIoError, path.string(), "cannot open record");
  std::uint32_t header[2] = {0, 0};
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  Spectrogram spec;
  spec.n_bins = static_cast<int>(header[0]);
  spec.n_frames = static_cast<int>(header[1]);
  spec.values.resize(static_cast<std::size_t>(header[0]) * header[1]);
  in.read(reinterpret_cast<char*>(spec.values.data()),
          static_cast<std::streamsize>(spec.values.size() * sizeof(float)));
  if (!in) throw Error(Errc::kIoError, path.string(), "truncated record");
  return spec;
}

namespace {

constexpr const char* kIndexMagic = "ser-feature-cache 1";

SpectrogramParams parse_params(const std::string& canonical, const fs::path& where) {
  SpectrogramParams p;
  std::istringstream ss(canonical);
  std::string kv;
  while (std::getline(ss, kv, ';')) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error(Errc::kParseError, where.string(), kv);
    const std::string key = kv.substr(0, eq);
    const std::string val = kv.substr(eq + 1);
    if (key == "window_ms") p.window_ms = std::stod(val);
    else if (key == "hop_ms") p.hop_ms = std::stod(val);
    else if (key == "n_bins") p.n_bins = std::stoi(val);
    else if (key == "fft_size") p.fft_size = std::stoi(val);
    else if (key == "log_floor") p.log_floor = std::stod(val);
    else throw Error(Errc::kParseError, where.string(), "unknown param " + key);
  }
  return p;
}

std::string record_name(const std::string& id) {
  return sha256_hex(id).substr(0, 20) + ".f32";
}

}  // namespace

FeatureCache FeatureCache::open(const fs::path& dir) {
  std::ifstream in(dir / "index");
  if (!in) throw Error(Errc::kNotFound, (dir / "index").string(), "no feature cache index");
  FeatureCache cache;
  cache.dir_ = dir;
  std::string line;
  if (!std::getline(in, line) || line != kIndexMagic) {
    throw Error(Errc::kParseError, (dir / "index").string(), "bad header");
  }
  std::string params_hash;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields[0] == "params" && fields.size() == 2) {
      cache.params_ = parse_params(fields[1], dir / "index");
    } else if (fields[0] == "params_hash" && fields.size() == 2) {
      params_hash = fields[1];
    } else if (fields[0] == "record" && fields.size() == 5) {
      cache.records_[fields[1]] = Record{fields[2], fields[3], fields[4]};
    } else {
      throw Error(Errc::kParseError, (dir / "index").string(), line);
    }
  }
  if (params_hash != sha256_hex(cache.params_.canonical())) {
    throw Error(Errc::kParseError, (dir / "index").string(), "params hash mismatch");
  }
  return cache;
}

void FeatureCache::write_index() const {
  const auto path = dir_ / "index";
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(Errc::kIoError, path.string(), "cannot write index");
    out << kIndexMagic << '\n';
    out << "params\t" << params_.canonical() << '\n';
    out << "params_hash\t" << sha256_hex(params_.canonical()) << '\n';
    for (const auto& [id, rec] : records_) {
      out << "record\t" << id << '\t' << rec.file << '\t' << rec.audio_hash << '\t'
          << rec.feature_hash << '\n';
    }
  }
  fs::rename(tmp, path);
}

FeatureCache FeatureCache::build(const CorpusManifest& manifest,
                                 const SpectrogramParams& params, const fs::path& dir,
                                 bool force_rebuild, BuildStats* stats) {
  params.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(Errc::kIoError, dir.string(), ec.message());

  FeatureCache cache;
  if (fs::exists(dir / "index")) {
    cache = open(dir);
    if (cache.params_.canonical() != params.canonical()) {
      if (!force_rebuild) {
        throw Error(Errc::kStaleCache, dir.string(),
                    "built with " + cache.params_.canonical());
      }
      cache.records_.clear();
    }
  }
  cache.dir_ = dir;
  cache.params_ = params;

  BuildStats local;
  bool dirty = !fs::exists(dir / "index");
  for (const auto& u : manifest.utterances) {
    const std::string audio_hash = sha256_file(u.audio_path);
    auto it = cache.records_.find(u.id);
    if (it != cache.records_.end() && it->second.audio_hash == audio_hash &&
        fs::exists(dir / it->second.file)) {
      ++local.reused;
      continue;
    }
    const Waveform wave = read_wav(u.audio_path);
    if (wave.sample_rate != kSampleRate) {
      throw Error(Errc::kBadSampleRate, u.id,
                  "audio is " + std::to_string(wave.sample_rate) + " Hz");
    }
    Spectrogram spec;
    try {
      spec = stft_spectrogram(wave.samples, params);
    } catch (const Error& e) {
      throw Error(e.code(), u.id, e.what());
    }
    spec.utterance_id = u.id;
    Record rec{record_name(u.id), audio_hash, {}};
    write_spectrogram_record(dir / rec.file, spec);
    rec.feature_hash = sha256_file(dir / rec.file);
    cache.records_[u.id] = std::move(rec);
    ++local.computed;
    dirty = true;
  }
  if (dirty) cache.write_index();
  if (stats) *stats = local;
  return cache;
}

bool FeatureCache::contains(const std::string& id) const {
  return records_.count(id) != 0;
}

std::vector<std::string> FeatureCache::ids() const {
  std::vector<std::string> out;
  out.reserve(records_.size());
  for (const auto& [id, rec] : records_) out.push_back(id);
  return out;
}

const std::string& FeatureCache::record_hash(const std::string& id) const {
  auto it = records_.find(id);
  if (it == records_.end()) throw Error(Errc::kNotFound, id, "not in feature cache");
  return it->second.feature_hash;
}

Spectrogram FeatureCache::load(const std::string& id) const {
  auto it = records_.find(id);
  if (it == records_.end()) throw Error(Errc::kNotFound, id, "not in feature cache");
  if (read_hook_) read_hook_(id);
  Spectrogram spec = read_spectrogram_record(dir_ / it->second.file);
  spec.utterance_id = id;
  return spec;
}

}  // namespace ser
