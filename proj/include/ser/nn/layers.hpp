// ser/nn/layers.hpp

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

// Layers with hand-written backward passes. Every layer registers its
// parameters in a ParamStore, caches what its backward pass needs during
// forward, and accumulates parameter gradients (callers zero them).
// Instantiated for float (training) and double (gradient checks).

#ifndef SER_NN_LAYERS_HPP_
#define SER_NN_LAYERS_HPP_

#include <memory>
#include <string>
#include <vector>

#include "ser/nn/tensor.hpp"
#include "ser/random.hpp"

namespace ser::nn {

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
};

template <typename T>
class Conv2d {
 public:
  Conv2d(ParamStore<T>& store, const std::string& name, ConvSpec spec);

  const ConvSpec& spec() const { return spec_; }
  int out_size(int in) const { return (in + 2 * spec_.pad - spec_.kernel) / spec_.stride + 1; }

  void forward(MapsView<const T> x, MapsView<T> y);
  // dx is accumulated; pass a view with data == nullptr to skip it.
  void backward(MapsView<const T> x, MapsView<const T> dy, MapsView<T> dx);
  void init(Rng& rng);  // He-normal weights, zero bias

  Param<T>& weight() { return *weight_; }
  Param<T>& bias() { return *bias_; }

 private:
  ConvSpec spec_;
  Param<T>* weight_;  // [out, in * k * k]
  Param<T>* bias_;    // [out]
};

// Normalizes each channel over (batch, h, w). Eval mode uses running
// averages kept with the given momentum; the averages are debiased by
// 1 - momentum^updates so that early checkpoints are usable.
template <typename T>
class BatchNorm2d {
 public:
  static constexpr double kEpsilon = 1e-5;

  BatchNorm2d(ParamStore<T>& store, const std::string& name, int channels, double momentum);

  // y = gamma * xhat + beta, optionally followed by ReLU.
  void forward(MapsView<const T> x, MapsView<T> y, Mode mode, bool relu);
  // Same output as the last forward, without touching running statistics.
  void replay(MapsView<const T> x, MapsView<T> y, bool relu) const;
  // dy is the gradient at the normalized (pre-ReLU) output; dx accumulates.
  void backward(MapsView<const T> x, MapsView<const T> dy, MapsView<T> dx);

  Param<T>& gamma() { return *gamma_; }
  Param<T>& beta() { return *beta_; }
  int channels() const { return static_cast<int>(gamma_->size()); }

 private:
  Param<T>* gamma_;
  Param<T>* beta_;
  Param<T>* running_mean_;
  Param<T>* running_var_;
  Param<T>* updates_;
  double momentum_;
  std::vector<T> mean_;
  std::vector<T> invstd_;
  Mode mode_ = Mode::kEval;
};

// Composite BN -> ReLU -> 3x3 conv producing growth-many maps.
template <typename T>
class DenseLayer {
 public:
  DenseLayer(ParamStore<T>& store, const std::string& name, int in_channels, int growth,
             double momentum);

  void forward(MapsView<const T> x, MapsView<T> y, Mode mode);
  void backward(MapsView<const T> x, MapsView<const T> dy, MapsView<T> dx);
  void init(Rng& rng) { conv_.init(rng); }

  BatchNorm2d<T>& bn() { return bn_; }
  Conv2d<T>& conv() { return conv_; }

 private:
  BatchNorm2d<T> bn_;
  Conv2d<T> conv_;
};

struct DenseBlockConfig {
  int layers = 6;
  int growth = 24;
  bool operator==(const DenseBlockConfig&) const = default;
};

// Layer l sees the concatenation of the block input and layers 0..l-1.
template <typename T>
class DenseBlock {
 public:
  DenseBlock(ParamStore<T>& store, const std::string& name, int in_channels,
             DenseBlockConfig cfg, double momentum);

  int in_channels() const { return in_channels_; }
  int out_channels() const { return in_channels_ + cfg_.layers * cfg_.growth; }

  // x: [n, in, h, w]. Returns the stack [n, in + L*G, h, w].
  const Tensor<T>& forward(const Tensor<T>& x, Mode mode);
  // Consumes the gradient w.r.t. the whole stack; returns d(input).
  Tensor<T> backward(Tensor<T>& dstack);
  void init(Rng& rng);

  const Tensor<T>& stack() const { return stack_; }
  DenseLayer<T>& layer(int i) { return *layers_[i]; }

 private:
  int in_channels_;
  DenseBlockConfig cfg_;
  std::vector<std::unique_ptr<DenseLayer<T>>> layers_;
  Tensor<T> stack_;
};

// BN -> 1x1 conv -> 2x2 average pool (stride 2).
template <typename T>
class Transition {
 public:
  Transition(ParamStore<T>& store, const std::string& name, int in_channels,
             int out_channels, double momentum);

  const Tensor<T>& forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy);
  void init(Rng& rng) { conv_.init(rng); }

  BatchNorm2d<T>& bn() { return bn_; }
  Conv2d<T>& conv() { return conv_; }

 private:
  BatchNorm2d<T> bn_;
  Conv2d<T> conv_;
  Tensor<T> conv_out_;
  Tensor<T> out_;
};

// Conv -> BN -> ReLU, the unit of the plain CNN benchmarks.
template <typename T>
class ConvBnRelu {
 public:
  ConvBnRelu(ParamStore<T>& store, const std::string& name, ConvSpec spec, double momentum);

  const Tensor<T>& forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy);
  void init(Rng& rng) { conv_.init(rng); }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  Tensor<T> conv_out_;
  Tensor<T> out_;
};

template <typename T>
void avg_pool2_forward(MapsView<const T> x, MapsView<T> y);
template <typename T>
void avg_pool2_backward(MapsView<const T> dy, MapsView<T> dx);  // assigns dx

// [n, c, h, w] -> [n, c]
template <typename T>
void global_avg_pool(MapsView<const T> x, Tensor<T>& y);
template <typename T>
void global_avg_pool_backward(const Tensor<T>& dy, MapsView<T> dx);  // accumulates

// [n, c, f, t] -> [n, t, c * f]: time becomes the sequence axis, each step
// is the flattened (channel, frequency) slice at that time.
template <typename T>
Tensor<T> reshape_to_sequence(const Tensor<T>& maps);
// Inverse of reshape_to_sequence.
template <typename T>
Tensor<T> sequence_to_maps(const Tensor<T>& seq, int channels, int freq);

template <typename T>
class Linear {
 public:
  Linear(ParamStore<T>& store, const std::string& name, int in, int out);

  void forward(const Tensor<T>& x, Tensor<T>& y);  // [n, in] -> [n, out]
  // dx may be null.
  void backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx);
  // He-normal weights times gain, zero bias.
  void init(Rng& rng, double gain = 1.0);

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Param<T>& weight() { return *weight_; }
  Param<T>& bias() { return *bias_; }

 private:
  int in_, out_;
  Param<T>* weight_;  // [out, in]
  Param<T>* bias_;
};

// Single-layer LSTM (gate order i, f, g, o) returning the final hidden state.
template <typename T>
class Lstm {
 public:
  Lstm(ParamStore<T>& store, const std::string& name, int input_dim, int units);

  // seq: [n, steps, input_dim] -> [n, units]
  const Tensor<T>& forward(const Tensor<T>& seq);
  Tensor<T> backward(const Tensor<T>& seq, const Tensor<T>& dh_last);
  // He-normal input weights, orthogonal recurrent blocks, zero bias.
  void init(Rng& rng);

  int units() const { return units_; }

 private:
  int input_dim_, units_;
  Param<T>* w_ih_;  // [4u, input_dim]
  Param<T>* w_hh_;  // [4u, u]
  Param<T>* bias_;  // [4u]
  int n_ = 0, steps_ = 0;
  std::vector<T> gates_;  // [steps, n, 4u] post-activation
  std::vector<T> cells_;  // [steps + 1, n, u]
  std::vector<T> hidden_; // [steps + 1, n, u]
  Tensor<T> out_;
};

// y = H(x) * T(x) + x * C(x) with H = ReLU(W_H x + b_H), T = sigmoid(W_T x + b_T)
// and C = sigmoid(W_C x + b_C), or C = 1 - T when gates are coupled.
template <typename T>
class Highway {
 public:
  Highway(ParamStore<T>& store, const std::string& name, int dim, bool coupled);

  void forward(const Tensor<T>& x, Tensor<T>& y);
  Tensor<T> backward(const Tensor<T>& dy);
  // He-normal weights, zero biases except the transform gate at -1.
  void init(Rng& rng);

  bool coupled() const { return c_ == nullptr; }
  Linear<T>& transform() { return h_; }
  Linear<T>& transform_gate() { return t_; }
  Linear<T>& carry_gate() { return *c_; }
  // Gate activations of the last forward, [n, dim].
  const Tensor<T>& last_transform_gate() const { return gate_t_; }
  const Tensor<T>& last_carry_gate() const { return gate_c_; }

 private:
  int dim_;
  Linear<T> h_;
  Linear<T> t_;
  std::unique_ptr<Linear<T>> c_;
  Tensor<T> x_, act_h_, gate_t_, gate_c_;
};

// Inverted dropout: kept units are scaled by 1 / (1 - rate).
template <typename T>
class Dropout {
 public:
  explicit Dropout(double rate) : rate_(rate) {}

  void forward(const Tensor<T>& x, Tensor<T>& y, Mode mode, Rng& rng);
  void backward(const Tensor<T>& dy, Tensor<T>& dx) const;

 private:
  double rate_;
  std::vector<T> mask_;
};

// Global-average-pools two dense-block outputs, projects each to
// dim features and sums the projections.
template <typename T>
class SkipAggregate {
 public:
  SkipAggregate(ParamStore<T>& store, const std::string& name, int channels_a,
                int channels_b, int dim);

  void forward(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y);
  // Accumulates into da / db (shaped like a / b).
  void backward(const Tensor<T>& dy, Tensor<T>& da, Tensor<T>& db);
  void init(Rng& rng);

  Linear<T>& projection_a() { return proj_a_; }
  Linear<T>& projection_b() { return proj_b_; }

 private:
  Linear<T> proj_a_, proj_b_;
  Tensor<T> pooled_a_, pooled_b_, tmp_;
};

}  // namespace ser::nn

#endif  // SER_NN_LAYERS_HPP_
