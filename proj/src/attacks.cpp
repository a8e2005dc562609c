// src/attacks.cpp

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

#include "ser/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "json.hpp"

namespace ser {

using Json = nlohmann::ordered_json;

std::string_view attack_method_name(AttackMethod m) {
  return m == AttackMethod::kFgsm ? "fgsm" : "bim";
}

AttackMethod parse_attack_method(std::string_view name) {
  if (name == "fgsm") return AttackMethod::kFgsm;
  if (name == "bim") return AttackMethod::kBim;
  throw Error(Errc::kBadArgument, std::string(name), "unknown attack method (valid: fgsm, bim)");
}

void AttackConfig::validate() const {
  const double step = step_size();
  if (!std::isfinite(epsilon) || epsilon < 0.0) {
    throw Error(Errc::kBadConfig, "epsilon", "must be finite and >= 0");
  }
  if (bim_steps < 1) throw Error(Errc::kBadConfig, "bim_steps", "must be >= 1");
  if (!std::isfinite(step) || step < 0.0 || step > epsilon || (step == 0.0 && epsilon > 0.0)) {
    throw Error(Errc::kBadConfig, "bim_step_size", "must lie in (0, epsilon]");
  }
}

std::string AttackConfig::to_json() const {
  Json j;
  j["method"] = attack_method_name(method);
  j["epsilon"] = epsilon;
  j["bim_steps"] = bim_steps;
  j["bim_step_size"] = step_size();
  return j.dump();
}

AttackConfig AttackConfig::from_json(const std::string& text) {
  AttackConfig cfg;
  try {
    const Json j = Json::parse(text);
    for (const auto& [key, value] : j.items()) {
      if (key == "method") {
        cfg.method = parse_attack_method(value.get<std::string>());
      } else if (key == "epsilon") {
        cfg.epsilon = value.get<double>();
      } else if (key == "bim_steps") {
        cfg.bim_steps = value.get<int>();
      } else if (key == "bim_step_size") {
        cfg.bim_step_size = value.get<double>();
      } else {
        throw Error(Errc::kBadConfig, key, "unknown attack field");
      }
    }
  } catch (const Json::exception& e) {
    throw Error(Errc::kParseError, "attack config", e.what());
  }
  cfg.validate();
  return cfg;
}

InputGradientFn model_input_gradient(Model& model) {
  return [&model](const nn::Tensor<float>& x, const nn::Tensor<float>& y) {
    const nn::Mode previous = model.mode();
    model.set_mode(nn::Mode::kEval);
    nn::Tensor<float> g;
    try {
      model.loss_and_grads(x, y, &g);
    } catch (...) {
      model.set_mode(previous);
      throw;
    }
    model.set_mode(previous);
    return g;
  };
}

namespace {

float sign_of(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

// Float bounds of the epsilon ball around v, pulled inward when rounding
// would place them outside it.
void ball(float v, double epsilon, float& lo, float& hi) {
  lo = static_cast<float>(static_cast<double>(v) - epsilon);
  hi = static_cast<float>(static_cast<double>(v) + epsilon);
  if (static_cast<double>(v) - static_cast<double>(lo) > epsilon) lo = std::nextafter(lo, v);
  if (static_cast<double>(hi) - static_cast<double>(v) > epsilon) hi = std::nextafter(hi, v);
}

nn::Tensor<float> checked_gradient(const InputGradientFn& grad, const nn::Tensor<float>& x,
                                   const nn::Tensor<float>& y) {
  nn::Tensor<float> g = grad(x, y);
  if (g.size() != x.size()) throw Error(Errc::kShapeMismatch, "attack", "gradient shape");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) throw Error(Errc::kNonFiniteGradient, "attack", "input gradient");
  }
  return g;
}

// x_next = clip_{x0, eps}(xk + step * sign(g)).
void signed_step(const nn::Tensor<float>& x0, nn::Tensor<float>& xk, const nn::Tensor<float>& g,
                 double epsilon, double step) {
  for (std::size_t i = 0; i < xk.size(); ++i) {
    const double moved = static_cast<double>(xk[i]) + step * sign_of(g[i]);
    float lo, hi;
    ball(x0[i], epsilon, lo, hi);
    xk[i] = std::clamp(static_cast<float>(moved), lo, hi);
  }
}

}  // namespace

nn::Tensor<float> bim(const InputGradientFn& grad, const nn::Tensor<float>& x,
                      const nn::Tensor<float>& y, double epsilon, int steps, double step,
                      const AttackObserver& observer) {
  nn::Tensor<float> xk = x;
  if (epsilon == 0.0) return xk;
  for (int k = 0; k < steps; ++k) {
    const nn::Tensor<float> g = checked_gradient(grad, xk, y);
    signed_step(x, xk, g, epsilon, step);
    if (observer) observer(k + 1, xk);
  }
  return xk;
}

nn::Tensor<float> fgsm(const InputGradientFn& grad, const nn::Tensor<float>& x,
                       const nn::Tensor<float>& y, double epsilon) {
  return bim(grad, x, y, epsilon, 1, epsilon);
}

nn::Tensor<float> fgsm(Model& model, const nn::Tensor<float>& x, const nn::Tensor<float>& y,
                       const AttackConfig& cfg) {
  cfg.validate();
  return fgsm(model_input_gradient(model), x, y, cfg.epsilon);
}

nn::Tensor<float> bim(Model& model, const nn::Tensor<float>& x, const nn::Tensor<float>& y,
                      const AttackConfig& cfg) {
  cfg.validate();
  return bim(model_input_gradient(model), x, y, cfg.epsilon, cfg.bim_steps, cfg.step_size());
}

nn::Tensor<float> attack(Model& model, const nn::Tensor<float>& x, const nn::Tensor<float>& y,
                         const AttackConfig& cfg) {
  return cfg.method == AttackMethod::kFgsm ? fgsm(model, x, y, cfg) : bim(model, x, y, cfg);
}

std::string attack_condition(const AttackConfig& cfg) {
  char buf[128];
  if (cfg.method == AttackMethod::kFgsm) {
    std::snprintf(buf, sizeof(buf), "attack(fgsm,eps=%g)", cfg.epsilon);
  } else {
    std::snprintf(buf, sizeof(buf), "attack(bim,eps=%g,steps=%d,step=%g)", cfg.epsilon,
                  cfg.bim_steps, cfg.step_size());
  }
  return buf;
}

EvalReport attack_eval(Model& model, const FoldData& data, const Normalizer& norm,
                       const AttackConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  constexpr int kBatch = 16;
  const SegmentScorer clean = model_scorer(model, kBatch);
  // Same sub-batching as the clean scorer so a zero budget reproduces it.
  SegmentScorer scorer = [&](const SegmentBatch& batch) {
    std::vector<Posterior> out;
    const std::size_t item = batch.item_size();
    for (int start = 0; start < batch.n; start += kBatch) {
      const int m = std::min(batch.n, start + kBatch) - start;
      SegmentBatch part;
      part.n = m;
      part.n_bins = batch.n_bins;
      part.n_frames = batch.n_frames;
      part.values.assign(batch.values.begin() + start * item,
                         batch.values.begin() + (start + m) * item);
      part.labels.assign(batch.labels.begin() + start, batch.labels.begin() + start + m);
      const nn::Tensor<float> adv = attack(model, input_tensor(part), target_tensor(part), cfg);
      part.values.assign(adv.data(), adv.data() + adv.size());
      const auto scored = clean(part);
      out.insert(out.end(), scored.begin(), scored.end());
    }
    return out;
  };
  const auto prepared = prepare_utterances(data.eval, data.fold.test_utterances, norm,
                                           model.config().input_frames);
  EvalReport report;
  report.condition = attack_condition(cfg);
  report.model = variant_name(model.config().variant);
  report.runs.push_back(make_run_result(score_prepared(scorer, prepared), seed));
  report.provenance = {{"fold", data.fold.fold_id},
                       {"normalizer_hash", norm.hash()},
                       {"model_config_hash", model.config().hash()},
                       {"attack_config", cfg.to_json()}};
  report.summarize();
  return report;
}

}  // namespace ser
