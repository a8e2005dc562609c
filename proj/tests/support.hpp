// tests/support.hpp

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

#ifndef SER_TESTS_SUPPORT_HPP_
#define SER_TESTS_SUPPORT_HPP_

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ser/corpus.hpp"
#include "ser/features.hpp"
#include "ser/network.hpp"
#include "ser/nn/tensor.hpp"
#include "ser/random.hpp"

namespace ser::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("ser_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

template <typename T>
nn::Tensor<T> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  nn::Tensor<T> t(std::move(shape));
  std::normal_distribution<double> g(0.0, scale);
  for (auto& v : t.vec()) v = static_cast<T>(g(rng));
  return t;
}

template <typename T>
void randomize(std::vector<T>& v, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  for (auto& x : v) x = static_cast<T>(g(rng));
}

// Small enough for finite differences in 64-bit.
inline ModelConfig micro_config(Variant v) {
  ModelConfig c = default_config(v);
  c.input_bins = 8;
  c.input_frames = 8;
  c.stem_channels = 2;
  c.lstm_units = 8;
  c.highway_dim = 16;
  c.fc_units = 6;
  c.cnn_channels = {2, 3, 3};
  if (v == Variant::kProposed) {
    c.dense_blocks = {{1, 2}, {1, 2}};
  } else if (!c.dense_blocks.empty()) {
    c.dense_blocks = {{1, 2}, {1, 2}, {1, 2}};
    c.input_bins = c.input_frames = 16;
  }
  return c;
}

// The 4-speaker x 40-utterance synthetic corpus with its feature cache and
// noise bank, built once per test binary.
struct Fixture {
  TempDir dir{"fixture"};
  CorpusManifest manifest;
  FeatureCache cache;
  std::filesystem::path noise_dir;

  static Fixture& get() {
    static Fixture f;
    return f;
  }

 private:
  Fixture() {
    manifest = synth_corpus(4, 40, 7, dir / "corpus");
    cache = FeatureCache::build(manifest, SpectrogramParams{}, dir / "features");
    noise_dir = dir / "noise";
    synth_noise_bank(7, noise_dir);
  }
};

}  // namespace ser::testing

#endif  // SER_TESTS_SUPPORT_HPP_
