// ser/nn/tensor.hpp

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

#ifndef SER_NN_TENSOR_HPP_
#define SER_NN_TENSOR_HPP_

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "ser/error.hpp"

namespace ser::nn {

enum class Mode { kTrain, kEval };

inline std::size_t numel(const std::vector<int>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

// Dense row-major array with a runtime shape.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), data_(numel(shape_), T(0)) {}
  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_)) {
      throw Error(Errc::kShapeMismatch, "tensor", "data does not match shape");
    }
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Reallocates (zero-filled) only when the element count changes.
  void resize(std::vector<int> shape) {
    shape_ = std::move(shape);
    data_.resize(numel(shape_));
  }
  void reshape(std::vector<int> shape) {
    if (numel(shape) != data_.size()) {
      throw Error(Errc::kShapeMismatch, "reshape", "element count differs");
    }
    shape_ = std::move(shape);
  }
  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

// Batch of [c, h, w] feature maps. Samples sit sample_stride apart, which
// lets a view address a channel prefix of a wider dense-block stack.
template <typename T>
struct MapsView {
  T* data = nullptr;
  int n = 0, c = 0, h = 0, w = 0;
  std::size_t sample_stride = 0;

  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_size() const { return plane() * c; }
  T* sample(int i) const { return data + static_cast<std::size_t>(i) * sample_stride; }
  T* channel(int i, int ch) const { return sample(i) + static_cast<std::size_t>(ch) * plane(); }

  operator MapsView<const T>() const { return {data, n, c, h, w, sample_stride}; }
};

// Channels [c0, c1) of a [n, C, h, w] tensor.
template <typename T>
MapsView<T> channels(Tensor<T>& t, int c0, int c1) {
  const std::size_t plane = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
  return {t.data() + c0 * plane, t.dim(0), c1 - c0, t.dim(2), t.dim(3), plane * t.dim(1)};
}
template <typename T>
MapsView<const T> channels(const Tensor<T>& t, int c0, int c1) {
  const std::size_t plane = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
  return {t.data() + c0 * plane, t.dim(0), c1 - c0, t.dim(2), t.dim(3), plane * t.dim(1)};
}
template <typename T>
MapsView<T> maps(Tensor<T>& t) {
  return channels(t, 0, t.dim(1));
}
template <typename T>
MapsView<const T> maps(const Tensor<T>& t) {
  return channels(t, 0, t.dim(1));
}

template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;  // false for batch-norm running statistics

  std::size_t size() const { return value.size(); }
};

// Owns every named tensor of a model. Params are heap-allocated so layer
// references stay valid when the store moves.
template <typename T>
class ParamStore {
 public:
  Param<T>& add(std::string name, std::vector<int> shape, bool trainable = true) {
    for (const auto& p : params_) {
      if (p->name == name) throw Error(Errc::kBadConfig, name, "duplicate parameter");
    }
    auto p = std::make_unique<Param<T>>();
    p->name = std::move(name);
    p->shape = std::move(shape);
    p->value.assign(numel(p->shape), T(0));
    p->grad.assign(trainable ? p->value.size() : 0, T(0));
    p->trainable = trainable;
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Param<T>* find(const std::string& name) {
    for (auto& p : params_) {
      if (p->name == name) return p.get();
    }
    return nullptr;
  }
  Param<T>& get(const std::string& name) {
    if (Param<T>* p = find(name)) return *p;
    throw Error(Errc::kNotFound, name, "no such parameter");
  }

  template <typename F>
  void for_each(F&& f) {
    for (auto& p : params_) f(*p);
  }
  template <typename F>
  void for_each(F&& f) const {
    for (const auto& p : params_) f(static_cast<const Param<T>&>(*p));
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p->grad.begin(), p->grad.end(), T(0));
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->trainable ? p->size() : 0;
    return n;
  }
  std::size_t tensor_count() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<Param<T>>> params_;
};

}  // namespace ser::nn

#endif  // SER_NN_TENSOR_HPP_
