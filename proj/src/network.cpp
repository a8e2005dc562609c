// src/network.cpp

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

#include "ser/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "json.hpp"
#include "ser/hash.hpp"
#include "ser/io.hpp"

namespace ser {

using nn::Mode;
using nn::Tensor;
using Json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host order");

// ---------------------------------------------------------------------------
// Variants and configs

namespace {

struct VariantEntry {
  Variant variant;
  const char* name;
};

constexpr VariantEntry kVariants[] = {
    {Variant::kProposed, "proposed"},     {Variant::kCnn, "cnn"},
    {Variant::kCnnLstm, "cnn_lstm"},      {Variant::kDenseNet, "densenet"},
    {Variant::kDenseNetLstm, "densenet_lstm"},
};

bool is_dense(Variant v) {
  return v == Variant::kProposed || v == Variant::kDenseNet || v == Variant::kDenseNetLstm;
}

int stem_out(int n) { return (n + 2 - 3) / 2 + 1; }

}  // namespace

std::string variant_name(Variant v) {
  for (const auto& e : kVariants) {
    if (e.variant == v) return e.name;
  }
  return "unknown";
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& e : kVariants) out.emplace_back(e.name);
    return out;
  }();
  return names;
}

Variant parse_variant(const std::string& name) {
  for (const auto& e : kVariants) {
    if (name == e.name) return e.variant;
  }
  std::string valid;
  for (const auto& n : variant_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw Error(Errc::kBadArgument, name, "unknown variant; valid variants: " + valid);
}

ModelConfig proposed_config() { return ModelConfig{}; }

ModelConfig cnn_config() {
  ModelConfig c;
  c.variant = Variant::kCnn;
  c.dense_blocks.clear();
  c.fc_units = 128;
  return c;
}

ModelConfig cnn_lstm_config() {
  ModelConfig c = cnn_config();
  c.variant = Variant::kCnnLstm;
  return c;
}

ModelConfig densenet_config() {
  ModelConfig c;
  c.variant = Variant::kDenseNet;
  c.stem_channels = 32;
  c.dense_blocks = {{6, 16}, {6, 16}, {6, 16}};
  c.fc_units = 1000;
  return c;
}

ModelConfig densenet_lstm_config() {
  ModelConfig c = densenet_config();
  c.variant = Variant::kDenseNetLstm;
  return c;
}

ModelConfig default_config(Variant v) {
  switch (v) {
    case Variant::kProposed: return proposed_config();
    case Variant::kCnn: return cnn_config();
    case Variant::kCnnLstm: return cnn_lstm_config();
    case Variant::kDenseNet: return densenet_config();
    case Variant::kDenseNetLstm: return densenet_lstm_config();
  }
  return proposed_config();
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error(Errc::kBadConfig, field, why);
  };
  if (input_bins < 1 || input_frames < 1) fail("input", "input dims must be positive");
  if (n_classes < 2) fail("n_classes", "need at least two classes");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout", "must lie in [0, 1)");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) fail("bn_momentum", "must lie in [0, 1)");
  if (!(compression > 0.0 && compression <= 1.0)) fail("compression", "must lie in (0, 1]");
  if (lstm_units < 1) fail("lstm_units", "must be >= 1");
  for (const auto& b : dense_blocks) {
    if (b.layers < 1 || b.growth < 1) fail("dense_blocks", "each block needs L >= 1, G >= 1");
  }
  if (is_dense(variant)) {
    if (stem_channels < 1) fail("stem_channels", "must be >= 1");
    if (dense_blocks.empty()) fail("dense_blocks", "at least one block required");
    if (variant == Variant::kProposed && dense_blocks.size() != 2) {
      fail("dense_blocks", "the proposed model has exactly two blocks");
    }
    int h = stem_out(input_bins), w = stem_out(input_frames);
    int c = stem_channels;
    for (std::size_t b = 0; b + 1 < dense_blocks.size(); ++b) {
      c += dense_blocks[b].layers * dense_blocks[b].growth;
      if (h < 2 || w < 2) fail("input", "feature maps too small for a transition");
      if (static_cast<int>(std::floor(compression * c)) < 1) fail("compression", "no channels left");
      c = static_cast<int>(std::floor(compression * c));
      h /= 2;
      w /= 2;
    }
  } else {
    if (cnn_channels.size() != 3) fail("cnn_channels", "exactly three conv stages");
    for (int ch : cnn_channels) {
      if (ch < 1) fail("cnn_channels", "must be >= 1");
    }
  }
  if (variant == Variant::kProposed) {
    if (highway_dim < 1 || highway_layers < 0) fail("highway", "bad highway shape");
  }
  if (variant != Variant::kProposed && variant != Variant::kCnnLstm && fc_units < 1) {
    fail("fc_units", "must be >= 1");
  }
}

std::string ModelConfig::to_json() const {
  Json j;
  j["variant"] = variant_name(variant);
  j["input_bins"] = input_bins;
  j["input_frames"] = input_frames;
  j["stem_channels"] = stem_channels;
  Json blocks = Json::array();
  for (const auto& b : dense_blocks) blocks.push_back({{"layers", b.layers}, {"growth", b.growth}});
  j["dense_blocks"] = blocks;
  j["compression"] = compression;
  j["cnn_channels"] = cnn_channels;
  j["lstm_units"] = lstm_units;
  j["highway_layers"] = highway_layers;
  j["highway_dim"] = highway_dim;
  j["coupled_gates"] = coupled_gates;
  j["fc_units"] = fc_units;
  j["dropout"] = dropout;
  j["n_classes"] = n_classes;
  j["bn_momentum"] = bn_momentum;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw Error(Errc::kBadConfig, "model", e.what());
  }
  if (!j.is_object()) throw Error(Errc::kBadConfig, "model", "expected a JSON object");
  ModelConfig c = j.contains("variant")
                      ? default_config(parse_variant(j.at("variant").get<std::string>()))
                      : ModelConfig{};
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "variant") {
        continue;
      } else if (key == "input_bins") {
        c.input_bins = value.get<int>();
      } else if (key == "input_frames") {
        c.input_frames = value.get<int>();
      } else if (key == "stem_channels") {
        c.stem_channels = value.get<int>();
      } else if (key == "dense_blocks") {
        c.dense_blocks.clear();
        for (const auto& b : value) {
          c.dense_blocks.push_back({b.at("layers").get<int>(), b.at("growth").get<int>()});
        }
      } else if (key == "compression") {
        c.compression = value.get<double>();
      } else if (key == "cnn_channels") {
        c.cnn_channels = value.get<std::vector<int>>();
      } else if (key == "lstm_units") {
        c.lstm_units = value.get<int>();
      } else if (key == "highway_layers") {
        c.highway_layers = value.get<int>();
      } else if (key == "highway_dim") {
        c.highway_dim = value.get<int>();
      } else if (key == "coupled_gates") {
        c.coupled_gates = value.get<bool>();
      } else if (key == "fc_units") {
        c.fc_units = value.get<int>();
      } else if (key == "dropout") {
        c.dropout = value.get<double>();
      } else if (key == "n_classes") {
        c.n_classes = value.get<int>();
      } else if (key == "bn_momentum") {
        c.bn_momentum = value.get<double>();
      } else {
        throw Error(Errc::kBadConfig, key, "unknown model field");
      }
    }
  } catch (const Json::exception& e) {
    throw Error(Errc::kBadConfig, "model", e.what());
  }
  c.validate();
  return c;
}

std::string ModelConfig::hash() const { return sha256_hex(to_json()); }

// ---------------------------------------------------------------------------
// Loss

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (int i = 0; i < n; ++i) {
    const T* z = logits.data() + static_cast<std::size_t>(i) * k;
    T* out = p.data() + static_cast<std::size_t>(i) * k;
    const double m = *std::max_element(z, z + k);
    double sum = 0.0;
    for (int c = 0; c < k; ++c) sum += std::exp(z[c] - m);
    for (int c = 0; c < k; ++c) out[c] = static_cast<T>(std::exp(z[c] - m) / sum);
  }
  return p;
}

template <typename T>
double soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets,
                          Tensor<T>* dlogits) {
  if (logits.shape() != targets.shape() || logits.rank() != 2) {
    throw Error(Errc::kShapeMismatch, "cross_entropy", "logits and targets differ in shape");
  }
  const int n = logits.dim(0), k = logits.dim(1);
  if (dlogits) dlogits->resize(logits.shape());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const T* z = logits.data() + static_cast<std::size_t>(i) * k;
    const T* y = targets.data() + static_cast<std::size_t>(i) * k;
    const double m = *std::max_element(z, z + k);
    double sum = 0.0;
    for (int c = 0; c < k; ++c) sum += std::exp(z[c] - m);
    const double lse = m + std::log(sum);
    double y_sum = 0.0;
    for (int c = 0; c < k; ++c) {
      if (y[c] != T(0)) total -= y[c] * (z[c] - lse);
      y_sum += y[c];
    }
    if (dlogits) {
      T* d = dlogits->data() + static_cast<std::size_t>(i) * k;
      for (int c = 0; c < k; ++c) {
        d[c] = static_cast<T>((std::exp(z[c] - lse) * y_sum - y[c]) / n);
      }
    }
  }
  return total / n;
}

// ---------------------------------------------------------------------------
// Networks

namespace {

// Shrinks the classifier's initial weights so an untrained model starts
// close to uniform posteriors.
constexpr double kOutputGain = 0.1;

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.vec()) v = std::max(T(0), v);
}

template <typename T>
void relu_mask(const Tensor<T>& out, Tensor<T>& grad) {
  for (std::size_t k = 0; k < grad.size(); ++k) {
    if (out[k] <= T(0)) grad[k] = T(0);
  }
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  const int n = a.dim(0), da = a.dim(1), db = b.dim(1);
  Tensor<T> out({n, da + db});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.data() + static_cast<std::size_t>(i) * da, da,
                out.data() + static_cast<std::size_t>(i) * (da + db));
    std::copy_n(b.data() + static_cast<std::size_t>(i) * db, db,
                out.data() + static_cast<std::size_t>(i) * (da + db) + da);
  }
  return out;
}

template <typename T>
void split_cols(const Tensor<T>& in, int da, Tensor<T>& a, Tensor<T>& b) {
  const int n = in.dim(0), d = in.dim(1), db = d - da;
  a.resize({n, da});
  b.resize({n, db});
  for (int i = 0; i < n; ++i) {
    std::copy_n(in.data() + static_cast<std::size_t>(i) * d, da,
                a.data() + static_cast<std::size_t>(i) * da);
    std::copy_n(in.data() + static_cast<std::size_t>(i) * d + da, db,
                b.data() + static_cast<std::size_t>(i) * db);
  }
}

template <typename T>
nn::MapsView<T> null_maps() {
  return {};
}

// 3x3 stride-2 stem followed by dense blocks separated by transitions.
template <typename T>
class DenseTrunk {
 public:
  DenseTrunk(nn::ParamStore<T>& store, const ModelConfig& cfg)
      : stem_(store, "stem", nn::ConvSpec{1, cfg.stem_channels, 3, 2, 1}) {
    int c = cfg.stem_channels;
    h_ = stem_out(cfg.input_bins);
    w_ = stem_out(cfg.input_frames);
    for (std::size_t b = 0; b < cfg.dense_blocks.size(); ++b) {
      const std::string name = "block" + std::to_string(b + 1);
      blocks_.push_back(std::make_unique<nn::DenseBlock<T>>(store, name, c, cfg.dense_blocks[b],
                                                            cfg.bn_momentum));
      c = blocks_.back()->out_channels();
      if (b + 1 < cfg.dense_blocks.size()) {
        const int out = static_cast<int>(std::floor(cfg.compression * c));
        transitions_.push_back(std::make_unique<nn::Transition<T>>(
            store, "transition" + std::to_string(b + 1), c, out, cfg.bn_momentum));
        c = out;
        h_ /= 2;
        w_ /= 2;
      }
    }
    out_channels_ = c;
  }

  void init(Rng& rng) {
    stem_.init(rng);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      blocks_[b]->init(rng);
      if (b < transitions_.size()) transitions_[b]->init(rng);
    }
  }

  const Tensor<T>& forward(const Tensor<T>& x, Mode mode) {
    x_ = &x;
    const int n = x.dim(0);
    stem_y_.resize({n, stem_.spec().out_channels, stem_.out_size(x.dim(2)),
                    stem_.out_size(x.dim(3))});
    stem_.forward(nn::maps(x), nn::maps(stem_y_));
    const Tensor<T>* cur = &stem_y_;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      cur = &blocks_[b]->forward(*cur, mode);
      if (b < transitions_.size()) cur = &transitions_[b]->forward(*cur, mode);
    }
    return *cur;
  }

  // dlast: gradient w.r.t. the last block stack (consumed).
  Tensor<T> backward(Tensor<T>& dlast, bool want_input_grad,
                     Tensor<T>* extra_first = nullptr) {
    Tensor<T> grad = std::move(dlast);
    for (std::size_t b = blocks_.size(); b-- > 0;) {
      Tensor<T> din = blocks_[b]->backward(grad);
      if (b == 0) {
        grad = std::move(din);
        break;
      }
      grad = transitions_[b - 1]->backward(blocks_[b - 1]->stack(), din);
      if (b == 1 && extra_first != nullptr) {
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += (*extra_first)[k];
      }
    }
    Tensor<T> dx;
    if (want_input_grad) {
      dx.resize(x_->shape());
      dx.fill(T(0));
      stem_.backward(nn::maps(*x_), nn::maps(static_cast<const Tensor<T>&>(grad)),
                     nn::maps(dx));
    } else {
      stem_.backward(nn::maps(*x_), nn::maps(static_cast<const Tensor<T>&>(grad)),
                     null_maps<T>());
    }
    return dx;
  }

  int out_channels() const { return out_channels_; }
  int out_h() const { return h_; }
  int out_w() const { return w_; }
  nn::DenseBlock<T>& block(std::size_t b) { return *blocks_[b]; }

 private:
  nn::Conv2d<T> stem_;
  std::vector<std::unique_ptr<nn::DenseBlock<T>>> blocks_;
  std::vector<std::unique_ptr<nn::Transition<T>>> transitions_;
  int out_channels_ = 0;
  int h_ = 0, w_ = 0;
  const Tensor<T>* x_ = nullptr;
  Tensor<T> stem_y_;
};

// Stem -> DenseBlock -> transition -> DenseBlock, then an LSTM over time and
// a global-pooled skip path from both blocks, fused and passed through the
// highway stack.
template <typename T>
class ProposedNet final : public Network<T> {
 public:
  ProposedNet(nn::ParamStore<T>& store, const ModelConfig& cfg)
      : trunk_(store, cfg),
        lstm_(store, "lstm", trunk_.out_channels() * trunk_.out_h(), cfg.lstm_units),
        dropout_(cfg.dropout),
        skip_(store, "skip", trunk_.block(0).out_channels(), trunk_.block(1).out_channels(),
              cfg.highway_dim),
        fuse_(store, "fuse", cfg.highway_dim + cfg.lstm_units, cfg.highway_dim),
        out_(store, "output", cfg.highway_dim, cfg.n_classes) {
    for (int l = 0; l < cfg.highway_layers; ++l) {
      highways_.push_back(std::make_unique<nn::Highway<T>>(
          store, "highway" + std::to_string(l + 1), cfg.highway_dim, cfg.coupled_gates));
    }
  }

  void init(Rng& rng) override {
    trunk_.init(rng);
    lstm_.init(rng);
    skip_.init(rng);
    fuse_.init(rng);
    for (auto& h : highways_) h->init(rng);
    out_.init(rng, kOutputGain);
  }

  const Tensor<T>& forward(const Tensor<T>& x, Mode mode, Rng& rng) override {
    const Tensor<T>& b2 = trunk_.forward(x, mode);
    seq_ = nn::reshape_to_sequence(b2);
    const Tensor<T>& h = lstm_.forward(seq_);
    dropout_.forward(h, h_drop_, mode, rng);
    skip_.forward(trunk_.block(0).stack(), b2, skip_out_);
    cat_ = concat_cols(skip_out_, h_drop_);
    hw_in_.resize(highways_.size() + 1);
    fuse_.forward(cat_, hw_in_[0]);
    for (std::size_t l = 0; l < highways_.size(); ++l) {
      highways_[l]->forward(hw_in_[l], hw_in_[l + 1]);
    }
    out_.forward(hw_in_.back(), logits_);
    return logits_;
  }

  Tensor<T> backward(const Tensor<T>& dlogits, bool want_input_grad) override {
    Tensor<T> d;
    out_.backward(hw_in_.back(), dlogits, &d);
    for (std::size_t l = highways_.size(); l-- > 0;) d = highways_[l]->backward(d);
    Tensor<T> dcat;
    fuse_.backward(cat_, d, &dcat);
    Tensor<T> dskip, dh_drop, dh;
    split_cols(dcat, skip_out_.dim(1), dskip, dh_drop);
    dropout_.backward(dh_drop, dh);
    Tensor<T> dseq = lstm_.backward(seq_, dh);
    const Tensor<T>& b1 = trunk_.block(0).stack();
    const Tensor<T>& b2 = trunk_.block(1).stack();
    Tensor<T> db2 = nn::sequence_to_maps(dseq, b2.dim(1), b2.dim(2));
    Tensor<T> db1(b1.shape());
    skip_.backward(dskip, db1, db2);
    return trunk_.backward(db2, want_input_grad, &db1);
  }

 private:
  DenseTrunk<T> trunk_;
  nn::Lstm<T> lstm_;
  nn::Dropout<T> dropout_;
  nn::SkipAggregate<T> skip_;
  nn::Linear<T> fuse_;
  std::vector<std::unique_ptr<nn::Highway<T>>> highways_;
  nn::Linear<T> out_;
  Tensor<T> seq_, h_drop_, skip_out_, cat_, logits_;
  std::vector<Tensor<T>> hw_in_;  // input of each highway layer, then the head input
};

// DenseNet benchmarks: trunk -> (global mean pool | LSTM) -> FC + ReLU ->
// dropout -> classifier.
template <typename T>
class DenseNetNet final : public Network<T> {
 public:
  DenseNetNet(nn::ParamStore<T>& store, const ModelConfig& cfg)
      : use_lstm_(cfg.variant == Variant::kDenseNetLstm),
        trunk_(store, cfg),
        lstm_(use_lstm_ ? std::make_unique<nn::Lstm<T>>(
                              store, "lstm", trunk_.out_channels() * trunk_.out_h(),
                              cfg.lstm_units)
                        : nullptr),
        fc_(store, "fc", use_lstm_ ? cfg.lstm_units : trunk_.out_channels(), cfg.fc_units),
        dropout_(cfg.dropout),
        out_(store, "output", cfg.fc_units, cfg.n_classes) {}

  void init(Rng& rng) override {
    trunk_.init(rng);
    if (lstm_) lstm_->init(rng);
    fc_.init(rng);
    out_.init(rng, kOutputGain);
  }

  const Tensor<T>& forward(const Tensor<T>& x, Mode mode, Rng& rng) override {
    const Tensor<T>& last = trunk_.forward(x, mode);
    last_shape_ = last.shape();
    if (lstm_) {
      seq_ = nn::reshape_to_sequence(last);
      feat_ = lstm_->forward(seq_);
    } else {
      nn::global_avg_pool(nn::maps(last), feat_);
    }
    fc_.forward(feat_, fc_out_);
    relu_inplace(fc_out_);
    dropout_.forward(fc_out_, drop_out_, mode, rng);
    out_.forward(drop_out_, logits_);
    return logits_;
  }

  Tensor<T> backward(const Tensor<T>& dlogits, bool want_input_grad) override {
    Tensor<T> d, dfc, dfeat;
    out_.backward(drop_out_, dlogits, &d);
    dropout_.backward(d, dfc);
    relu_mask(fc_out_, dfc);
    fc_.backward(feat_, dfc, &dfeat);
    Tensor<T> dlast;
    if (lstm_) {
      Tensor<T> dseq = lstm_->backward(seq_, dfeat);
      dlast = nn::sequence_to_maps(dseq, last_shape_[1], last_shape_[2]);
    } else {
      dlast.resize(last_shape_);
      dlast.fill(T(0));
      nn::global_avg_pool_backward(dfeat, nn::maps(dlast));
    }
    return trunk_.backward(dlast, want_input_grad);
  }

 private:
  bool use_lstm_;
  DenseTrunk<T> trunk_;
  std::unique_ptr<nn::Lstm<T>> lstm_;
  nn::Linear<T> fc_;
  nn::Dropout<T> dropout_;
  nn::Linear<T> out_;
  std::vector<int> last_shape_;
  Tensor<T> seq_, feat_, fc_out_, drop_out_, logits_;
};

// Plain CNN benchmarks: three conv-BN-ReLU stages, then either an LSTM over
// time (cnn_lstm) or a flattening FC + ReLU layer (cnn), dropout, classifier.
template <typename T>
class CnnNet final : public Network<T> {
 public:
  CnnNet(nn::ParamStore<T>& store, const ModelConfig& cfg)
      : use_lstm_(cfg.variant == Variant::kCnnLstm), dropout_(cfg.dropout) {
    const nn::ConvSpec specs[3] = {
        {1, cfg.cnn_channels[0], 5, 2, 2},
        {cfg.cnn_channels[0], cfg.cnn_channels[1], 3, 2, 1},
        {cfg.cnn_channels[1], cfg.cnn_channels[2], 3, 2, 1},
    };
    int h = cfg.input_bins, w = cfg.input_frames;
    for (int s = 0; s < 3; ++s) {
      convs_.push_back(std::make_unique<nn::ConvBnRelu<T>>(
          store, "conv" + std::to_string(s + 1), specs[s], cfg.bn_momentum));
      h = (h + 2 * specs[s].pad - specs[s].kernel) / specs[s].stride + 1;
      w = (w + 2 * specs[s].pad - specs[s].kernel) / specs[s].stride + 1;
    }
    const int c = cfg.cnn_channels[2];
    int head_in = 0;
    if (use_lstm_) {
      lstm_ = std::make_unique<nn::Lstm<T>>(store, "lstm", c * h, cfg.lstm_units);
      head_in = cfg.lstm_units;
    } else {
      fc_ = std::make_unique<nn::Linear<T>>(store, "fc", c * h * w, cfg.fc_units);
      head_in = cfg.fc_units;
    }
    out_ = std::make_unique<nn::Linear<T>>(store, "output", head_in, cfg.n_classes);
  }

  void init(Rng& rng) override {
    for (auto& c : convs_) c->init(rng);
    if (lstm_) lstm_->init(rng);
    if (fc_) fc_->init(rng);
    out_->init(rng, kOutputGain);
  }

  const Tensor<T>& forward(const Tensor<T>& x, Mode mode, Rng& rng) override {
    inputs_.clear();
    inputs_.push_back(&x);
    for (auto& c : convs_) inputs_.push_back(&c->forward(*inputs_.back(), mode));
    const Tensor<T>& last = *inputs_.back();
    last_shape_ = last.shape();
    if (use_lstm_) {
      seq_ = nn::reshape_to_sequence(last);
      feat_ = lstm_->forward(seq_);
    } else {
      flat_ = last;
      flat_.reshape({last.dim(0), static_cast<int>(last.size() / last.dim(0))});
      fc_->forward(flat_, feat_);
      relu_inplace(feat_);
    }
    dropout_.forward(feat_, drop_out_, mode, rng);
    out_->forward(drop_out_, logits_);
    return logits_;
  }

  Tensor<T> backward(const Tensor<T>& dlogits, bool want_input_grad) override {
    Tensor<T> d, dfeat;
    out_->backward(drop_out_, dlogits, &d);
    dropout_.backward(d, dfeat);
    Tensor<T> grad;
    if (use_lstm_) {
      Tensor<T> dseq = lstm_->backward(seq_, dfeat);
      grad = nn::sequence_to_maps(dseq, last_shape_[1], last_shape_[2]);
    } else {
      relu_mask(feat_, dfeat);
      fc_->backward(flat_, dfeat, &grad);
      grad.reshape(last_shape_);
    }
    for (std::size_t s = convs_.size(); s-- > 0;) {
      if (s == 0 && !want_input_grad) {
        // The first stage still needs its parameter gradients.
        convs_[0]->backward(*inputs_[0], grad);
        return {};
      }
      grad = convs_[s]->backward(*inputs_[s], grad);
    }
    return grad;
  }

 private:
  bool use_lstm_;
  std::vector<std::unique_ptr<nn::ConvBnRelu<T>>> convs_;
  std::unique_ptr<nn::Lstm<T>> lstm_;
  std::unique_ptr<nn::Linear<T>> fc_;
  nn::Dropout<T> dropout_;
  std::unique_ptr<nn::Linear<T>> out_;
  std::vector<const Tensor<T>*> inputs_;
  std::vector<int> last_shape_;
  Tensor<T> seq_, flat_, feat_, drop_out_, logits_;
};

template <typename T>
std::unique_ptr<Network<T>> make_network(nn::ParamStore<T>& store, const ModelConfig& cfg) {
  switch (cfg.variant) {
    case Variant::kProposed: return std::make_unique<ProposedNet<T>>(store, cfg);
    case Variant::kDenseNet:
    case Variant::kDenseNetLstm: return std::make_unique<DenseNetNet<T>>(store, cfg);
    case Variant::kCnn:
    case Variant::kCnnLstm: return std::make_unique<CnnNet<T>>(store, cfg);
  }
  throw Error(Errc::kBadConfig, "variant", "unhandled variant");
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.vec().begin(), t.vec().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace

// ---------------------------------------------------------------------------
// BasicModel

template <typename T>
BasicModel<T>::BasicModel(const ModelConfig& cfg, Rng& rng)
    : config_(cfg), dropout_rng_(make_rng(0, {0xd0})) {
  config_.validate();
  net_ = make_network(params_, config_);
  net_->init(rng);
}

template <typename T>
void BasicModel<T>::check_input(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != config_.input_bins ||
      x.dim(3) != config_.input_frames || x.dim(0) < 1) {
    throw Error(Errc::kShapeMismatch, "model input",
                "expected [n, 1, " + std::to_string(config_.input_bins) + ", " +
                    std::to_string(config_.input_frames) + "]");
  }
}

template <typename T>
Tensor<T> BasicModel<T>::logits(const Tensor<T>& x) {
  check_input(x);
  Tensor<T> z = net_->forward(x, mode_, dropout_rng_);
  if (!all_finite(z)) throw Error(Errc::kNonFiniteActivation, "logits", "non-finite output");
  return z;
}

template <typename T>
Tensor<T> BasicModel<T>::posteriors(const Tensor<T>& x) {
  return softmax_rows(logits(x));
}

template <typename T>
double BasicModel<T>::loss_and_grads(const Tensor<T>& x, const Tensor<T>& targets,
                                     Tensor<T>* input_grad) {
  check_input(x);
  params_.zero_grad();
  const Tensor<T>& z = net_->forward(x, mode_, dropout_rng_);
  Tensor<T> dlogits;
  const double loss = soft_cross_entropy(z, targets, &dlogits);
  if (!std::isfinite(loss)) throw Error(Errc::kNonFiniteLoss, "loss", "non-finite loss");
  Tensor<T> dx = net_->backward(dlogits, input_grad != nullptr);
  if (input_grad) *input_grad = std::move(dx);
  return loss;
}

template class BasicModel<float>;
template class BasicModel<double>;
template Tensor<float> softmax_rows(const Tensor<float>&);
template Tensor<double> softmax_rows(const Tensor<double>&);
template double soft_cross_entropy(const Tensor<float>&, const Tensor<float>&, Tensor<float>*);
template double soft_cross_entropy(const Tensor<double>&, const Tensor<double>&,
                                   Tensor<double>*);

Model build_model(const ModelConfig& cfg, Rng& rng) { return Model(cfg, rng); }

Tensor<float> input_tensor(const SegmentBatch& batch) {
  return Tensor<float>({batch.n, 1, batch.n_bins, batch.n_frames}, batch.values);
}

Tensor<float> target_tensor(const SegmentBatch& batch) {
  Tensor<float> t({batch.n, kNumClasses});
  for (int i = 0; i < batch.n; ++i) {
    std::copy(batch.labels[i].begin(), batch.labels[i].end(),
              t.data() + static_cast<std::size_t>(i) * kNumClasses);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'E', 'R', 'C', 'K', 'P', 'T', '1'};

void append_floats(std::string& out, const std::vector<float>& v) {
  const auto* p = reinterpret_cast<const char*>(v.data());
  out.append(p, v.size() * sizeof(float));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const Normalizer& normalizer) {
  Json header;
  header["config"] = Json::parse(model.config().to_json());
  header["config_hash"] = model.config().hash();
  header["normalizer_hash"] = normalizer.hash();
  Json tensors = Json::array();
  std::string payload;
  auto add = [&](const std::string& name, const std::vector<int>& shape,
                 const std::vector<float>& values) {
    tensors.push_back({{"name", name},
                       {"shape", shape},
                       {"dtype", "f32"},
                       {"offset", payload.size()},
                       {"count", values.size()}});
    append_floats(payload, values);
  };
  model.params().for_each([&](const nn::Param<float>& p) { add(p.name, p.shape, p.value); });
  add("normalizer.mean", {static_cast<int>(normalizer.mean.size())}, normalizer.mean);
  add("normalizer.stddev", {static_cast<int>(normalizer.stddev.size())}, normalizer.stddev);
  header["tensors"] = tensors;

  const std::string head = header.dump();
  std::string bytes(kMagic, sizeof(kMagic));
  const auto len = static_cast<std::uint32_t>(head.size());
  bytes.append(reinterpret_cast<const char*>(&len), sizeof(len));
  bytes += head;
  bytes += payload;
  write_file_atomic(path, bytes);
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string subject = path.string();
  if (bytes.size() < sizeof(kMagic) + 4 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(Errc::kParseError, subject, "not a checkpoint");
  }
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), sizeof(len));
  const std::size_t data_start = sizeof(kMagic) + sizeof(len) + len;
  if (data_start > bytes.size()) throw Error(Errc::kParseError, subject, "truncated header");
  Json header;
  try {
    header = Json::parse(bytes.substr(sizeof(kMagic) + sizeof(len), len));
  } catch (const Json::exception& e) {
    throw Error(Errc::kParseError, subject, e.what());
  }
  const ModelConfig cfg = ModelConfig::from_json(header.at("config").dump());
  if (cfg.hash() != header.at("config_hash").get<std::string>()) {
    throw Error(Errc::kConfigMismatch, subject, "config hash does not match stored config");
  }
  Rng rng = make_rng(0);
  LoadedModel out{std::make_unique<Model>(cfg, rng), Normalizer{}};
  std::size_t loaded = 0;
  for (const auto& t : header.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<std::vector<int>>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if (t.at("dtype") != "f32" || nn::numel(shape) != count ||
        data_start + offset + count * sizeof(float) > bytes.size()) {
      throw Error(Errc::kParseError, subject, "bad tensor entry " + name);
    }
    std::vector<float> values(count);
    std::memcpy(values.data(), bytes.data() + data_start + offset, count * sizeof(float));
    if (name == "normalizer.mean") {
      out.normalizer.mean = std::move(values);
    } else if (name == "normalizer.stddev") {
      out.normalizer.stddev = std::move(values);
    } else {
      nn::Param<float>* p = out.model->params().find(name);
      if (p == nullptr || p->shape != shape) {
        throw Error(Errc::kConfigMismatch, subject, "tensor " + name + " does not fit the model");
      }
      p->value = std::move(values);
      ++loaded;
    }
  }
  if (loaded != out.model->params().tensor_count()) {
    throw Error(Errc::kParseError, subject, "checkpoint lacks some model tensors");
  }
  if (out.normalizer.hash() != header.at("normalizer_hash").get<std::string>()) {
    throw Error(Errc::kParseError, subject, "normalizer hash mismatch");
  }
  return out;
}

LoadedModel load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  LoadedModel m = load_checkpoint(path);
  if (m.model->config().hash() != expected.hash()) {
    throw Error(Errc::kConfigMismatch, path.string(),
                "checkpoint config differs from the requested model");
  }
  return m;
}

}  // namespace ser
