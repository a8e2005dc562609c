// ser/network.hpp

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

// Model configurations, the proposed DenseNet-LSTM-Highway network and the
// four benchmark variants, soft-target cross-entropy, and checkpoints.

#ifndef SER_NETWORK_HPP_
#define SER_NETWORK_HPP_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "ser/features.hpp"
#include "ser/nn/layers.hpp"
#include "ser/random.hpp"

namespace ser {

enum class Variant { kProposed, kCnn, kCnnLstm, kDenseNet, kDenseNetLstm };

std::string variant_name(Variant v);
// Throws BadArgument for names other than proposed, cnn, cnn_lstm,
// densenet and densenet_lstm.
Variant parse_variant(const std::string& name);
const std::vector<std::string>& variant_names();

struct ModelConfig {
  Variant variant = Variant::kProposed;
  int input_bins = 128;
  int input_frames = 256;
  int stem_channels = 24;
  std::vector<nn::DenseBlockConfig> dense_blocks{{6, 24}, {6, 24}};
  double compression = 0.5;
  std::vector<int> cnn_channels{16, 32, 64};
  int lstm_units = 128;
  int highway_layers = 3;
  int highway_dim = 128;
  bool coupled_gates = false;
  int fc_units = 128;
  double dropout = 0.5;
  int n_classes = kNumClasses;
  double bn_momentum = 0.99;

  // Throws BadConfig.
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  // sha256 of the canonical JSON form.
  std::string hash() const;

  bool operator==(const ModelConfig&) const = default;
};

ModelConfig proposed_config();
ModelConfig cnn_config();
ModelConfig cnn_lstm_config();
ModelConfig densenet_config();
ModelConfig densenet_lstm_config();
ModelConfig default_config(Variant v);

// Row-wise softmax of logits [n, k].
template <typename T>
nn::Tensor<T> softmax_rows(const nn::Tensor<T>& logits);

// Mean over rows of -sum_c y_c log softmax(z)_c. When dlogits is given it
// receives (softmax(z) - y) / n.
template <typename T>
double soft_cross_entropy(const nn::Tensor<T>& logits, const nn::Tensor<T>& targets,
                          nn::Tensor<T>* dlogits = nullptr);

// Maps an [n, 1, bins, frames] input batch to logits [n, classes].
template <typename T>
class Network {
 public:
  virtual ~Network() = default;
  virtual void init(Rng& rng) = 0;
  virtual const nn::Tensor<T>& forward(const nn::Tensor<T>& x, nn::Mode mode,
                                       Rng& dropout_rng) = 0;
  // Backpropagates d(logits) through the last forward. Parameter gradients
  // accumulate; the input gradient is returned when requested.
  virtual nn::Tensor<T> backward(const nn::Tensor<T>& dlogits, bool want_input_grad) = 0;
};

template <typename T>
class BasicModel {
 public:
  // Builds the network for cfg and initializes it from rng.
  BasicModel(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return config_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  std::size_t parameter_count() const { return params_.trainable_count(); }

  nn::Mode mode() const { return mode_; }
  void set_mode(nn::Mode mode) { mode_ = mode; }
  void reseed_dropout(std::uint64_t seed) { dropout_rng_ = make_rng(seed, {0xd0}); }

  // x: [n, 1, bins, frames]. Throws ShapeMismatch, NonFiniteActivation.
  nn::Tensor<T> logits(const nn::Tensor<T>& x);
  nn::Tensor<T> posteriors(const nn::Tensor<T>& x);
  // Zeroes gradients, then runs forward and backward in the current mode.
  // Returns the mean soft-target cross-entropy; throws NonFiniteLoss.
  double loss_and_grads(const nn::Tensor<T>& x, const nn::Tensor<T>& targets,
                        nn::Tensor<T>* input_grad = nullptr);

 private:
  void check_input(const nn::Tensor<T>& x) const;

  ModelConfig config_;
  nn::ParamStore<T> params_;
  std::unique_ptr<Network<T>> net_;
  nn::Mode mode_ = nn::Mode::kEval;
  Rng dropout_rng_;
};

using Model = BasicModel<float>;

Model build_model(const ModelConfig& cfg, Rng& rng);

// SegmentBatch -> [n, 1, bins, frames] and its label matrix [n, classes].
nn::Tensor<float> input_tensor(const SegmentBatch& batch);
nn::Tensor<float> target_tensor(const SegmentBatch& batch);

// Named-tensor checkpoint: "SERCKPT1", uint32 header length, JSON header
// (model config, its hash, normalizer hash, tensor table), then the
// little-endian float32 payload. The normalizer is stored as two tensors.
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const Normalizer& normalizer);

struct LoadedModel {
  std::unique_ptr<Model> model;
  Normalizer normalizer;
};

// Throws NotFound, ParseError, or ConfigMismatch when the stored config hash
// disagrees with the stored config.
LoadedModel load_checkpoint(const std::filesystem::path& path);
// As above, but also requires the stored config to equal expected.
LoadedModel load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace ser

#endif  // SER_NETWORK_HPP_
