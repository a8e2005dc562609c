// src/nn/layers.cpp

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

#include "ser/nn/layers.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>

#include "ser/nn/ops.hpp"

namespace ser::nn {

namespace {

// Per-thread scratch arenas shared by all layers: 0 = im2col, 1 = col
// gradient, 2 = recomputed activations, 3 = activation gradient.
template <typename T>
T* scratch(int slot, std::size_t n) {
  thread_local std::array<std::vector<T>, 4> buffers;
  auto& b = buffers[static_cast<std::size_t>(slot)];
  if (b.size() < n) b.resize(n);
  return b.data();
}

template <typename T>
MapsView<T> dense_view(T* data, int n, int c, int h, int w) {
  return {data, n, c, h, w, static_cast<std::size_t>(c) * h * w};
}

template <typename T>
void he_normal(std::vector<T>& w, int fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : w) v = static_cast<T>(dist(rng));
}

// Sums of a and of a * b over n elements, accumulated in double across
// eight independent lanes so the loop vectorizes.
template <typename T>
void lane_sums(const T* a, const T* b, std::size_t n, double& sum_a, double& sum_ab) {
  constexpr std::size_t kLanes = 8;
  double acc_a[kLanes] = {};
  double acc_ab[kLanes] = {};
  std::size_t k = 0;
  for (; k + kLanes <= n; k += kLanes) {
    for (std::size_t j = 0; j < kLanes; ++j) {
      const double va = a[k + j];
      acc_a[j] += va;
      acc_ab[j] += va * static_cast<double>(b[k + j]);
    }
  }
  for (; k < n; ++k) {
    acc_a[0] += a[k];
    acc_ab[0] += static_cast<double>(a[k]) * b[k];
  }
  for (std::size_t j = 0; j < kLanes; ++j) {
    sum_a += acc_a[j];
    sum_ab += acc_ab[j];
  }
}

void require(bool ok, const char* what, const std::string& detail) {
  if (!ok) throw Error(Errc::kShapeMismatch, what, detail);
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

template <typename T>
Conv2d<T>::Conv2d(ParamStore<T>& store, const std::string& name, ConvSpec spec)
    : spec_(spec),
      weight_(&store.add(name + ".weight",
                         {spec.out_channels, spec.in_channels * spec.kernel * spec.kernel})),
      bias_(&store.add(name + ".bias", {spec.out_channels})) {}

template <typename T>
void Conv2d<T>::init(Rng& rng) {
  he_normal(weight_->value, spec_.in_channels * spec_.kernel * spec_.kernel, rng);
  std::fill(bias_->value.begin(), bias_->value.end(), T(0));
}

// Both passes walk each sample in tiles of whole output rows so that the
// unfolded input of a tile stays cache-resident between im2col and GEMM.
constexpr int kConvTile = 256;

template <typename T>
void Conv2d<T>::forward(MapsView<const T> x, MapsView<T> y) {
  require(x.c == spec_.in_channels && y.c == spec_.out_channels && y.n == x.n &&
              y.h == out_size(x.h) && y.w == out_size(x.w),
          "conv2d", "input/output maps do not match the convolution");
  const int k = spec_.kernel;
  const int kdim = spec_.in_channels * k * k;
  const int ohw = y.h * y.w;
  const int rows = std::max(1, kConvTile / y.w);
  const bool direct = k == 1 && spec_.stride == 1 && spec_.pad == 0;
  T* col = direct ? nullptr
                  : scratch<T>(0, static_cast<std::size_t>(kdim) * rows * y.w);
  const T* w = weight_->value.data();
  for (int i = 0; i < x.n; ++i) {
    T* out = y.sample(i);
    for (int oy0 = 0; oy0 < y.h; oy0 += rows) {
      const int oy1 = std::min(y.h, oy0 + rows);
      const int p0 = oy0 * y.w;
      const int nt = (oy1 - oy0) * y.w;
      if (direct) {
        gemm<T>(false, false, spec_.out_channels, nt, kdim, T(1), w, kdim, x.sample(i) + p0,
                ohw, T(0), out + p0, ohw);
      } else {
        im2col(x.sample(i), x.c, x.h, x.w, k, spec_.stride, spec_.pad, oy0, oy1, y.w, col);
        gemm<T>(false, false, spec_.out_channels, nt, kdim, T(1), w, kdim, col, nt, T(0),
                out + p0, ohw);
      }
    }
    for (int c = 0; c < spec_.out_channels; ++c) {
      const T b = bias_->value[c];
      T* row = out + static_cast<std::size_t>(c) * ohw;
      for (int p = 0; p < ohw; ++p) row[p] += b;
    }
  }
}

template <typename T>
void Conv2d<T>::backward(MapsView<const T> x, MapsView<const T> dy, MapsView<T> dx) {
  const int k = spec_.kernel;
  const int kdim = spec_.in_channels * k * k;
  const int ohw = dy.h * dy.w;
  const int rows = std::max(1, kConvTile / dy.w);
  const bool direct = k == 1 && spec_.stride == 1 && spec_.pad == 0;
  const std::size_t tile_size = static_cast<std::size_t>(kdim) * rows * dy.w;
  T* col = direct ? nullptr : scratch<T>(0, tile_size);
  T* dcol = (direct || dx.data == nullptr) ? nullptr : scratch<T>(1, tile_size);
  const T* w = weight_->value.data();
  T* dw = weight_->grad.data();
  for (int i = 0; i < x.n; ++i) {
    const T* g = dy.sample(i);
    for (int c = 0; c < spec_.out_channels; ++c) {
      const T* row = g + static_cast<std::size_t>(c) * ohw;
      T acc = 0;
      for (int p = 0; p < ohw; ++p) acc += row[p];
      bias_->grad[c] += acc;
    }
    for (int oy0 = 0; oy0 < dy.h; oy0 += rows) {
      const int oy1 = std::min(dy.h, oy0 + rows);
      const int p0 = oy0 * dy.w;
      const int nt = (oy1 - oy0) * dy.w;
      if (direct) {
        gemm<T>(false, true, spec_.out_channels, kdim, nt, T(1), g + p0, ohw,
                x.sample(i) + p0, ohw, T(1), dw, kdim);
        if (dx.data != nullptr) {
          gemm<T>(true, false, kdim, nt, spec_.out_channels, T(1), w, kdim, g + p0, ohw, T(1),
                  dx.sample(i) + p0, ohw);
        }
        continue;
      }
      im2col(x.sample(i), x.c, x.h, x.w, k, spec_.stride, spec_.pad, oy0, oy1, dy.w, col);
      gemm<T>(false, true, spec_.out_channels, kdim, nt, T(1), g + p0, ohw, col, nt, T(1), dw,
              kdim);
      if (dx.data != nullptr) {
        gemm<T>(true, false, kdim, nt, spec_.out_channels, T(1), w, kdim, g + p0, ohw, T(0),
                dcol, nt);
        col2im_add(dcol, x.c, x.h, x.w, k, spec_.stride, spec_.pad, oy0, oy1, dy.w,
                   dx.sample(i));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(ParamStore<T>& store, const std::string& name, int channels,
                            double momentum)
    : gamma_(&store.add(name + ".gamma", {channels})),
      beta_(&store.add(name + ".beta", {channels})),
      running_mean_(&store.add(name + ".running_mean", {channels}, false)),
      running_var_(&store.add(name + ".running_var", {channels}, false)),
      updates_(&store.add(name + ".updates", {1}, false)),
      momentum_(momentum),
      mean_(static_cast<std::size_t>(channels), T(0)),
      invstd_(static_cast<std::size_t>(channels), T(1)) {
  std::fill(gamma_->value.begin(), gamma_->value.end(), T(1));
}

template <typename T>
void BatchNorm2d<T>::forward(MapsView<const T> x, MapsView<T> y, Mode mode, bool relu) {
  require(x.c == channels() && y.c == x.c && y.n == x.n && y.h == x.h && y.w == x.w,
          "batchnorm", "channel count mismatch");
  mode_ = mode;
  const std::size_t plane = x.plane();
  const double count = static_cast<double>(x.n) * static_cast<double>(plane);
  for (int c = 0; c < x.c; ++c) {
    if (mode == Mode::kTrain) {
      double sum = 0.0;
      double sq = 0.0;
      for (int i = 0; i < x.n; ++i) {
        const T* p = x.channel(i, c);
        lane_sums(p, p, plane, sum, sq);
      }
      const double mean = sum / count;
      const double var = std::max(0.0, sq / count - mean * mean);
      mean_[c] = static_cast<T>(mean);
      invstd_[c] = static_cast<T>(1.0 / std::sqrt(var + kEpsilon));
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      running_mean_->value[c] =
          static_cast<T>(momentum_ * running_mean_->value[c] + (1 - momentum_) * mean);
      running_var_->value[c] =
          static_cast<T>(momentum_ * running_var_->value[c] + (1 - momentum_) * unbiased);
    } else {
      const double updates = updates_->value[0];
      double mean = 0.0;
      double var = 1.0;
      if (updates > 0) {
        const double debias = 1.0 - std::pow(momentum_, updates);
        mean = running_mean_->value[c] / debias;
        var = running_var_->value[c] / debias;
      }
      mean_[c] = static_cast<T>(mean);
      invstd_[c] = static_cast<T>(1.0 / std::sqrt(std::max(var, 0.0) + kEpsilon));
    }
  }
  if (mode == Mode::kTrain) updates_->value[0] += T(1);
  replay(x, y, relu);
}

template <typename T>
void BatchNorm2d<T>::replay(MapsView<const T> x, MapsView<T> y, bool relu) const {
  const std::size_t plane = x.plane();
  for (int c = 0; c < x.c; ++c) {
    const T scale = gamma_->value[c] * invstd_[c];
    const T shift = beta_->value[c] - mean_[c] * scale;
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.channel(i, c);
      T* q = y.channel(i, c);
      if (relu) {
        for (std::size_t k = 0; k < plane; ++k) q[k] = std::max(T(0), p[k] * scale + shift);
      } else {
        for (std::size_t k = 0; k < plane; ++k) q[k] = p[k] * scale + shift;
      }
    }
  }
}

template <typename T>
void BatchNorm2d<T>::backward(MapsView<const T> x, MapsView<const T> dy, MapsView<T> dx) {
  const std::size_t plane = x.plane();
  const double count = static_cast<double>(x.n) * static_cast<double>(plane);
  for (int c = 0; c < x.c; ++c) {
    const T mean = mean_[c];
    const T invstd = invstd_[c];
    double sum_dy = 0.0;
    double sum_dy_x = 0.0;
    for (int i = 0; i < x.n; ++i) lane_sums(dy.channel(i, c), x.channel(i, c), plane, sum_dy, sum_dy_x);
    const double sum_dy_xhat = (sum_dy_x - static_cast<double>(mean) * sum_dy) * invstd;
    gamma_->grad[c] += static_cast<T>(sum_dy_xhat);
    beta_->grad[c] += static_cast<T>(sum_dy);
    const T k_scale = gamma_->value[c] * invstd;
    if (mode_ == Mode::kTrain) {
      const T mean_dy = static_cast<T>(sum_dy / count);
      const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / count);
      for (int i = 0; i < x.n; ++i) {
        const T* p = x.channel(i, c);
        const T* g = dy.channel(i, c);
        T* d = dx.channel(i, c);
        for (std::size_t k = 0; k < plane; ++k) {
          const T xhat = (p[k] - mean) * invstd;
          d[k] += k_scale * (g[k] - mean_dy - xhat * mean_dy_xhat);
        }
      }
    } else {
      for (int i = 0; i < x.n; ++i) {
        const T* g = dy.channel(i, c);
        T* d = dx.channel(i, c);
        for (std::size_t k = 0; k < plane; ++k) d[k] += k_scale * g[k];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// DenseLayer / DenseBlock

template <typename T>
DenseLayer<T>::DenseLayer(ParamStore<T>& store, const std::string& name, int in_channels,
                          int growth, double momentum)
    : bn_(store, name + ".bn", in_channels, momentum),
      conv_(store, name + ".conv", ConvSpec{in_channels, growth, 3, 1, 1}) {}

template <typename T>
void DenseLayer<T>::forward(MapsView<const T> x, MapsView<T> y, Mode mode) {
  T* act = scratch<T>(2, static_cast<std::size_t>(x.n) * x.sample_size());
  const auto act_view = dense_view(act, x.n, x.c, x.h, x.w);
  bn_.forward(x, act_view, mode, true);
  conv_.forward(act_view, y);
}

template <typename T>
void DenseLayer<T>::backward(MapsView<const T> x, MapsView<const T> dy, MapsView<T> dx) {
  const std::size_t total = static_cast<std::size_t>(x.n) * x.sample_size();
  T* act = scratch<T>(2, total);
  T* dact = scratch<T>(3, total);
  const auto act_view = dense_view(act, x.n, x.c, x.h, x.w);
  const auto dact_view = dense_view(dact, x.n, x.c, x.h, x.w);
  bn_.replay(x, act_view, true);
  std::fill(dact, dact + total, T(0));
  conv_.backward(act_view, dy, dact_view);
  for (std::size_t k = 0; k < total; ++k) {
    if (act[k] <= T(0)) dact[k] = T(0);
  }
  bn_.backward(x, dact_view, dx);
}

template <typename T>
DenseBlock<T>::DenseBlock(ParamStore<T>& store, const std::string& name, int in_channels,
                          DenseBlockConfig cfg, double momentum)
    : in_channels_(in_channels), cfg_(cfg) {
  if (cfg.layers < 1 || cfg.growth < 1) {
    throw Error(Errc::kBadConfig, name, "dense block needs L >= 1 and G >= 1");
  }
  for (int l = 0; l < cfg.layers; ++l) {
    layers_.push_back(std::make_unique<DenseLayer<T>>(
        store, name + ".layer" + std::to_string(l), in_channels + l * cfg.growth,
        cfg.growth, momentum));
  }
}

template <typename T>
void DenseBlock<T>::init(Rng& rng) {
  for (auto& l : layers_) l->init(rng);
}

template <typename T>
const Tensor<T>& DenseBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  require(x.dim(1) == in_channels_, "dense_block", "input channel mismatch");
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  stack_.resize({n, out_channels(), h, w});
  const std::size_t in_size = static_cast<std::size_t>(in_channels_) * h * w;
  const std::size_t out_size = static_cast<std::size_t>(out_channels()) * h * w;
  for (int i = 0; i < n; ++i) {
    std::copy(x.data() + i * in_size, x.data() + (i + 1) * in_size,
              stack_.data() + i * out_size);
  }
  for (int l = 0; l < cfg_.layers; ++l) {
    const int c_in = in_channels_ + l * cfg_.growth;
    layers_[l]->forward(channels(static_cast<const Tensor<T>&>(stack_), 0, c_in),
                        channels(stack_, c_in, c_in + cfg_.growth), mode);
  }
  return stack_;
}

template <typename T>
Tensor<T> DenseBlock<T>::backward(Tensor<T>& dstack) {
  for (int l = cfg_.layers - 1; l >= 0; --l) {
    const int c_in = in_channels_ + l * cfg_.growth;
    layers_[l]->backward(channels(static_cast<const Tensor<T>&>(stack_), 0, c_in),
                         channels(static_cast<const Tensor<T>&>(dstack), c_in,
                                  c_in + cfg_.growth),
                         channels(dstack, 0, c_in));
  }
  const int n = dstack.dim(0), h = dstack.dim(2), w = dstack.dim(3);
  Tensor<T> dx({n, in_channels_, h, w});
  const std::size_t in_size = static_cast<std::size_t>(in_channels_) * h * w;
  const std::size_t out_size = static_cast<std::size_t>(out_channels()) * h * w;
  for (int i = 0; i < n; ++i) {
    std::copy(dstack.data() + i * out_size, dstack.data() + i * out_size + in_size,
              dx.data() + i * in_size);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Transition / ConvBnRelu

template <typename T>
Transition<T>::Transition(ParamStore<T>& store, const std::string& name, int in_channels,
                          int out_channels, double momentum)
    : bn_(store, name + ".bn", in_channels, momentum),
      conv_(store, name + ".conv", ConvSpec{in_channels, out_channels, 1, 1, 0}) {}

template <typename T>
const Tensor<T>& Transition<T>::forward(const Tensor<T>& x, Mode mode) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h >= 2 && w >= 2, "transition", "spatial dims must be >= 2");
  T* z = scratch<T>(2, x.size());
  const auto z_view = dense_view(z, n, c, h, w);
  bn_.forward(maps(x), z_view, mode, false);
  conv_out_.resize({n, conv_.spec().out_channels, h, w});
  conv_.forward(z_view, maps(conv_out_));
  out_.resize({n, conv_.spec().out_channels, h / 2, w / 2});
  avg_pool2_forward(maps(static_cast<const Tensor<T>&>(conv_out_)), maps(out_));
  return out_;
}

template <typename T>
Tensor<T> Transition<T>::backward(const Tensor<T>& x, const Tensor<T>& dy) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> dconv({n, conv_.spec().out_channels, h, w});
  avg_pool2_backward(maps(dy), maps(dconv));
  T* z = scratch<T>(2, x.size());
  T* dz = scratch<T>(3, x.size());
  const auto z_view = dense_view(z, n, c, h, w);
  const auto dz_view = dense_view(dz, n, c, h, w);
  bn_.replay(maps(x), z_view, false);
  std::fill(dz, dz + x.size(), T(0));
  conv_.backward(z_view, maps(static_cast<const Tensor<T>&>(dconv)), dz_view);
  Tensor<T> dx(x.shape());
  bn_.backward(maps(x), dz_view, maps(dx));
  return dx;
}

template <typename T>
ConvBnRelu<T>::ConvBnRelu(ParamStore<T>& store, const std::string& name, ConvSpec spec,
                          double momentum)
    : conv_(store, name + ".conv", spec), bn_(store, name + ".bn", spec.out_channels, momentum) {}

template <typename T>
const Tensor<T>& ConvBnRelu<T>::forward(const Tensor<T>& x, Mode mode) {
  const int n = x.dim(0);
  const int oh = conv_.out_size(x.dim(2)), ow = conv_.out_size(x.dim(3));
  conv_out_.resize({n, conv_.spec().out_channels, oh, ow});
  conv_.forward(maps(x), maps(conv_out_));
  out_.resize(conv_out_.shape());
  bn_.forward(maps(static_cast<const Tensor<T>&>(conv_out_)), maps(out_), mode, true);
  return out_;
}

template <typename T>
Tensor<T> ConvBnRelu<T>::backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dz(dy.shape());
  for (std::size_t k = 0; k < dy.size(); ++k) dz[k] = out_[k] > T(0) ? dy[k] : T(0);
  Tensor<T> dconv(conv_out_.shape());
  bn_.backward(maps(static_cast<const Tensor<T>&>(conv_out_)),
               maps(static_cast<const Tensor<T>&>(dz)), maps(dconv));
  Tensor<T> dx(x.shape());
  conv_.backward(maps(x), maps(static_cast<const Tensor<T>&>(dconv)), maps(dx));
  return dx;
}

// ---------------------------------------------------------------------------
// Pooling and reshapes

template <typename T>
void avg_pool2_forward(MapsView<const T> x, MapsView<T> y) {
  require(y.h == x.h / 2 && y.w == x.w / 2 && y.c == x.c, "avg_pool2", "bad output shape");
  for (int i = 0; i < x.n; ++i) {
    for (int c = 0; c < x.c; ++c) {
      const T* p = x.channel(i, c);
      T* q = y.channel(i, c);
      for (int r = 0; r < y.h; ++r) {
        const T* a = p + static_cast<std::size_t>(2 * r) * x.w;
        const T* b = a + x.w;
        for (int s = 0; s < y.w; ++s) {
          q[r * y.w + s] = (a[2 * s] + a[2 * s + 1] + b[2 * s] + b[2 * s + 1]) * T(0.25);
        }
      }
    }
  }
}

template <typename T>
void avg_pool2_backward(MapsView<const T> dy, MapsView<T> dx) {
  for (int i = 0; i < dx.n; ++i) {
    for (int c = 0; c < dx.c; ++c) {
      const T* g = dy.channel(i, c);
      T* d = dx.channel(i, c);
      std::fill(d, d + dx.plane(), T(0));
      for (int r = 0; r < dy.h; ++r) {
        T* a = d + static_cast<std::size_t>(2 * r) * dx.w;
        T* b = a + dx.w;
        for (int s = 0; s < dy.w; ++s) {
          const T v = g[r * dy.w + s] * T(0.25);
          a[2 * s] = v;
          a[2 * s + 1] = v;
          b[2 * s] = v;
          b[2 * s + 1] = v;
        }
      }
    }
  }
}

template <typename T>
void global_avg_pool(MapsView<const T> x, Tensor<T>& y) {
  y.resize({x.n, x.c});
  const std::size_t plane = x.plane();
  for (int i = 0; i < x.n; ++i) {
    for (int c = 0; c < x.c; ++c) {
      const T* p = x.channel(i, c);
      T acc = 0;
      for (std::size_t k = 0; k < plane; ++k) acc += p[k];
      y[static_cast<std::size_t>(i) * x.c + c] = acc / static_cast<T>(plane);
    }
  }
}

template <typename T>
void global_avg_pool_backward(const Tensor<T>& dy, MapsView<T> dx) {
  const std::size_t plane = dx.plane();
  for (int i = 0; i < dx.n; ++i) {
    for (int c = 0; c < dx.c; ++c) {
      const T g = dy[static_cast<std::size_t>(i) * dx.c + c] / static_cast<T>(plane);
      T* d = dx.channel(i, c);
      for (std::size_t k = 0; k < plane; ++k) d[k] += g;
    }
  }
}

template <typename T>
Tensor<T> reshape_to_sequence(const Tensor<T>& maps) {
  const int n = maps.dim(0), c = maps.dim(1), f = maps.dim(2), t = maps.dim(3);
  Tensor<T> seq({n, t, c * f});
  const std::size_t feat = static_cast<std::size_t>(c) * f;
  for (int i = 0; i < n; ++i) {
    const T* src = maps.data() + static_cast<std::size_t>(i) * feat * t;
    T* dst = seq.data() + static_cast<std::size_t>(i) * feat * t;
    for (std::size_t row = 0; row < feat; ++row) {
      for (int step = 0; step < t; ++step) dst[step * feat + row] = src[row * t + step];
    }
  }
  return seq;
}

template <typename T>
Tensor<T> sequence_to_maps(const Tensor<T>& seq, int channels_count, int freq) {
  const int n = seq.dim(0), t = seq.dim(1);
  require(seq.dim(2) == channels_count * freq, "sequence_to_maps", "feature size mismatch");
  Tensor<T> maps({n, channels_count, freq, t});
  const std::size_t feat = static_cast<std::size_t>(channels_count) * freq;
  for (int i = 0; i < n; ++i) {
    const T* src = seq.data() + static_cast<std::size_t>(i) * feat * t;
    T* dst = maps.data() + static_cast<std::size_t>(i) * feat * t;
    for (std::size_t row = 0; row < feat; ++row) {
      for (int step = 0; step < t; ++step) dst[row * t + step] = src[step * feat + row];
    }
  }
  return maps;
}

// ---------------------------------------------------------------------------
// Linear

template <typename T>
Linear<T>::Linear(ParamStore<T>& store, const std::string& name, int in, int out)
    : in_(in),
      out_(out),
      weight_(&store.add(name + ".weight", {out, in})),
      bias_(&store.add(name + ".bias", {out})) {}

template <typename T>
void Linear<T>::init(Rng& rng, double gain) {
  he_normal(weight_->value, in_, rng);
  for (auto& w : weight_->value) w = static_cast<T>(w * gain);
  std::fill(bias_->value.begin(), bias_->value.end(), T(0));
}

template <typename T>
void Linear<T>::forward(const Tensor<T>& x, Tensor<T>& y) {
  require(x.rank() == 2 && x.dim(1) == in_, "linear", "expected [n, " + std::to_string(in_) + "]");
  const int n = x.dim(0);
  y.resize({n, out_});
  gemm<T>(false, true, n, out_, in_, T(1), x.data(), weight_->value.data(), T(0), y.data());
  for (int i = 0; i < n; ++i) {
    T* row = y.data() + static_cast<std::size_t>(i) * out_;
    for (int o = 0; o < out_; ++o) row[o] += bias_->value[o];
  }
}

template <typename T>
void Linear<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx) {
  const int n = x.dim(0);
  gemm<T>(true, false, out_, in_, n, T(1), dy.data(), x.data(), T(1), weight_->grad.data());
  for (int i = 0; i < n; ++i) {
    const T* row = dy.data() + static_cast<std::size_t>(i) * out_;
    for (int o = 0; o < out_; ++o) bias_->grad[o] += row[o];
  }
  if (dx) {
    dx->resize({n, in_});
    gemm<T>(false, false, n, in_, out_, T(1), dy.data(), weight_->value.data(), T(0),
            dx->data());
  }
}

// ---------------------------------------------------------------------------
// Lstm

template <typename T>
Lstm<T>::Lstm(ParamStore<T>& store, const std::string& name, int input_dim, int units)
    : input_dim_(input_dim),
      units_(units),
      w_ih_(&store.add(name + ".w_ih", {4 * units, input_dim})),
      w_hh_(&store.add(name + ".w_hh", {4 * units, units})),
      bias_(&store.add(name + ".bias", {4 * units})) {}

template <typename T>
void Lstm<T>::init(Rng& rng) {
  he_normal(w_ih_->value, input_dim_, rng);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int u = units_;
  for (int gate = 0; gate < 4; ++gate) {
    Eigen::MatrixXd a(u, u);
    for (int r = 0; r < u; ++r) {
      for (int c = 0; c < u; ++c) a(r, c) = gauss(rng);
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().template triangularView<Eigen::Upper>();
    for (int c = 0; c < u; ++c) {
      if (r(c, c) < 0) q.col(c) *= -1.0;
    }
    for (int r2 = 0; r2 < u; ++r2) {
      for (int c = 0; c < u; ++c) {
        w_hh_->value[static_cast<std::size_t>(gate * u + r2) * u + c] = static_cast<T>(q(r2, c));
      }
    }
  }
  std::fill(bias_->value.begin(), bias_->value.end(), T(0));
}

template <typename T>
const Tensor<T>& Lstm<T>::forward(const Tensor<T>& seq) {
  require(seq.rank() == 3 && seq.dim(2) == input_dim_, "lstm", "bad input feature size");
  n_ = seq.dim(0);
  steps_ = seq.dim(1);
  const int u = units_;
  const int g4 = 4 * u;
  const std::size_t step_gates = static_cast<std::size_t>(n_) * g4;
  const std::size_t step_state = static_cast<std::size_t>(n_) * u;

  // Input projections for every (sample, step) in one product: [n*steps, 4u].
  std::vector<T> zx(static_cast<std::size_t>(n_) * steps_ * g4);
  gemm<T>(false, true, n_ * steps_, g4, input_dim_, T(1), seq.data(), w_ih_->value.data(),
          T(0), zx.data());

  gates_.assign(step_gates * steps_, T(0));
  cells_.assign(step_state * (steps_ + 1), T(0));
  hidden_.assign(step_state * (steps_ + 1), T(0));
  for (int t = 0; t < steps_; ++t) {
    T* z = gates_.data() + t * step_gates;
    for (int i = 0; i < n_; ++i) {
      const T* src = zx.data() + (static_cast<std::size_t>(i) * steps_ + t) * g4;
      T* dst = z + static_cast<std::size_t>(i) * g4;
      for (int k = 0; k < g4; ++k) dst[k] = src[k] + bias_->value[k];
    }
    const T* h_prev = hidden_.data() + t * step_state;
    gemm<T>(false, true, n_, g4, u, T(1), h_prev, w_hh_->value.data(), T(1), z);
    const T* c_prev = cells_.data() + t * step_state;
    T* c_next = cells_.data() + (t + 1) * step_state;
    T* h_next = hidden_.data() + (t + 1) * step_state;
    for (int i = 0; i < n_; ++i) {
      T* zi = z + static_cast<std::size_t>(i) * g4;
      for (int k = 0; k < u; ++k) {
        const T ig = sigmoid(zi[k]);
        const T fg = sigmoid(zi[u + k]);
        const T gg = std::tanh(zi[2 * u + k]);
        const T og = sigmoid(zi[3 * u + k]);
        zi[k] = ig;
        zi[u + k] = fg;
        zi[2 * u + k] = gg;
        zi[3 * u + k] = og;
        const std::size_t s = static_cast<std::size_t>(i) * u + k;
        c_next[s] = fg * c_prev[s] + ig * gg;
        h_next[s] = og * std::tanh(c_next[s]);
      }
    }
  }
  out_.resize({n_, u});
  std::copy(hidden_.data() + steps_ * step_state, hidden_.data() + (steps_ + 1) * step_state,
            out_.data());
  return out_;
}

template <typename T>
Tensor<T> Lstm<T>::backward(const Tensor<T>& seq, const Tensor<T>& dh_last) {
  const int u = units_;
  const int g4 = 4 * u;
  const std::size_t step_gates = static_cast<std::size_t>(n_) * g4;
  const std::size_t step_state = static_cast<std::size_t>(n_) * u;

  std::vector<T> dz_all(static_cast<std::size_t>(n_) * steps_ * g4);  // [n, steps, 4u]
  std::vector<T> dz(step_gates);
  std::vector<T> dh(dh_last.vec());
  std::vector<T> dc(step_state, T(0));
  for (int t = steps_ - 1; t >= 0; --t) {
    const T* gates = gates_.data() + t * step_gates;
    const T* c_prev = cells_.data() + t * step_state;
    const T* c_cur = cells_.data() + (t + 1) * step_state;
    for (int i = 0; i < n_; ++i) {
      const T* gi = gates + static_cast<std::size_t>(i) * g4;
      T* d = dz.data() + static_cast<std::size_t>(i) * g4;
      for (int k = 0; k < u; ++k) {
        const std::size_t s = static_cast<std::size_t>(i) * u + k;
        const T ig = gi[k], fg = gi[u + k], gg = gi[2 * u + k], og = gi[3 * u + k];
        const T tc = std::tanh(c_cur[s]);
        const T d_o = dh[s] * tc;
        const T d_c = dc[s] + dh[s] * og * (T(1) - tc * tc);
        d[k] = d_c * gg * ig * (T(1) - ig);
        d[u + k] = d_c * c_prev[s] * fg * (T(1) - fg);
        d[2 * u + k] = d_c * ig * (T(1) - gg * gg);
        d[3 * u + k] = d_o * og * (T(1) - og);
        dc[s] = d_c * fg;
      }
      std::copy(d, d + g4, dz_all.data() + (static_cast<std::size_t>(i) * steps_ + t) * g4);
      for (int k = 0; k < g4; ++k) bias_->grad[k] += d[k];
    }
    const T* h_prev = hidden_.data() + t * step_state;
    gemm<T>(true, false, g4, u, n_, T(1), dz.data(), h_prev, T(1), w_hh_->grad.data());
    gemm<T>(false, false, n_, u, g4, T(1), dz.data(), w_hh_->value.data(), T(0), dh.data());
  }
  gemm<T>(true, false, g4, input_dim_, n_ * steps_, T(1), dz_all.data(), seq.data(), T(1),
          w_ih_->grad.data());
  Tensor<T> dseq(seq.shape());
  gemm<T>(false, false, n_ * steps_, input_dim_, g4, T(1), dz_all.data(), w_ih_->value.data(),
          T(0), dseq.data());
  return dseq;
}

// ---------------------------------------------------------------------------
// Highway

template <typename T>
Highway<T>::Highway(ParamStore<T>& store, const std::string& name, int dim, bool coupled)
    : dim_(dim),
      h_(store, name + ".H", dim, dim),
      t_(store, name + ".T", dim, dim),
      c_(coupled ? nullptr : std::make_unique<Linear<T>>(store, name + ".C", dim, dim)) {}

template <typename T>
void Highway<T>::init(Rng& rng) {
  h_.init(rng);
  t_.init(rng);
  std::fill(t_.bias().value.begin(), t_.bias().value.end(), T(-1));
  if (c_) c_->init(rng);
}

template <typename T>
void Highway<T>::forward(const Tensor<T>& x, Tensor<T>& y) {
  x_ = x;
  h_.forward(x, act_h_);
  for (auto& v : act_h_.vec()) v = std::max(T(0), v);
  t_.forward(x, gate_t_);
  for (auto& v : gate_t_.vec()) v = sigmoid(v);
  if (c_) {
    c_->forward(x, gate_c_);
    for (auto& v : gate_c_.vec()) v = sigmoid(v);
  } else {
    gate_c_.resize(gate_t_.shape());
    for (std::size_t k = 0; k < gate_t_.size(); ++k) gate_c_[k] = T(1) - gate_t_[k];
  }
  y.resize(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) {
    y[k] = act_h_[k] * gate_t_[k] + x[k] * gate_c_[k];
  }
}

template <typename T>
Tensor<T> Highway<T>::backward(const Tensor<T>& dy) {
  const std::size_t size = dy.size();
  Tensor<T> d_h(dy.shape()), d_t(dy.shape()), d_c(dy.shape()), dx(dy.shape());
  for (std::size_t k = 0; k < size; ++k) {
    const T tg = gate_t_[k];
    const T cg = gate_c_[k];
    d_h[k] = act_h_[k] > T(0) ? dy[k] * tg : T(0);
    T dt = dy[k] * act_h_[k];
    const T dcarry = dy[k] * x_[k];
    if (c_) {
      d_c[k] = dcarry * cg * (T(1) - cg);
    } else {
      dt -= dcarry;
    }
    d_t[k] = dt * tg * (T(1) - tg);
    dx[k] = dy[k] * cg;
  }
  Tensor<T> tmp;
  h_.backward(x_, d_h, &tmp);
  for (std::size_t k = 0; k < size; ++k) dx[k] += tmp[k];
  t_.backward(x_, d_t, &tmp);
  for (std::size_t k = 0; k < size; ++k) dx[k] += tmp[k];
  if (c_) {
    c_->backward(x_, d_c, &tmp);
    for (std::size_t k = 0; k < size; ++k) dx[k] += tmp[k];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Dropout

template <typename T>
void Dropout<T>::forward(const Tensor<T>& x, Tensor<T>& y, Mode mode, Rng& rng) {
  y = x;
  if (mode != Mode::kTrain || rate_ <= 0.0) {
    mask_.clear();
    return;
  }
  mask_.resize(x.size());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t k = 0; k < x.size(); ++k) {
    mask_[k] = unit(rng) < rate_ ? T(0) : keep_scale;
    y[k] *= mask_[k];
  }
}

template <typename T>
void Dropout<T>::backward(const Tensor<T>& dy, Tensor<T>& dx) const {
  dx = dy;
  if (mask_.empty()) return;
  for (std::size_t k = 0; k < dx.size(); ++k) dx[k] *= mask_[k];
}

// ---------------------------------------------------------------------------
// SkipAggregate

template <typename T>
SkipAggregate<T>::SkipAggregate(ParamStore<T>& store, const std::string& name,
                                int channels_a, int channels_b, int dim)
    : proj_a_(store, name + ".proj_a", channels_a, dim),
      proj_b_(store, name + ".proj_b", channels_b, dim) {}

template <typename T>
void SkipAggregate<T>::init(Rng& rng) {
  proj_a_.init(rng);
  proj_b_.init(rng);
}

template <typename T>
void SkipAggregate<T>::forward(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y) {
  global_avg_pool(maps(a), pooled_a_);
  global_avg_pool(maps(b), pooled_b_);
  proj_a_.forward(pooled_a_, y);
  proj_b_.forward(pooled_b_, tmp_);
  for (std::size_t k = 0; k < y.size(); ++k) y[k] += tmp_[k];
}

template <typename T>
void SkipAggregate<T>::backward(const Tensor<T>& dy, Tensor<T>& da, Tensor<T>& db) {
  Tensor<T> dpool;
  proj_a_.backward(pooled_a_, dy, &dpool);
  global_avg_pool_backward(dpool, maps(da));
  proj_b_.backward(pooled_b_, dy, &dpool);
  global_avg_pool_backward(dpool, maps(db));
}

#define SER_INSTANTIATE_LAYERS(T)                                                   \
  template class Conv2d<T>;                                                         \
  template class BatchNorm2d<T>;                                                    \
  template class DenseLayer<T>;                                                     \
  template class DenseBlock<T>;                                                     \
  template class Transition<T>;                                                     \
  template class ConvBnRelu<T>;                                                     \
  template class Linear<T>;                                                         \
  template class Lstm<T>;                                                           \
  template class Highway<T>;                                                        \
  template class Dropout<T>;                                                        \
  template class SkipAggregate<T>;                                                  \
  template void avg_pool2_forward<T>(MapsView<const T>, MapsView<T>);               \
  template void avg_pool2_backward<T>(MapsView<const T>, MapsView<T>);              \
  template void global_avg_pool<T>(MapsView<const T>, Tensor<T>&);                  \
  template void global_avg_pool_backward<T>(const Tensor<T>&, MapsView<T>);         \
  template Tensor<T> reshape_to_sequence<T>(const Tensor<T>&);                      \
  template Tensor<T> sequence_to_maps<T>(const Tensor<T>&, int, int);

SER_INSTANTIATE_LAYERS(float)
SER_INSTANTIATE_LAYERS(double)

#undef SER_INSTANTIATE_LAYERS

}  // namespace ser::nn
