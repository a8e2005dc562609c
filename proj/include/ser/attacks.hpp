// ser/attacks.hpp

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

#ifndef SER_ATTACKS_HPP_
#define SER_ATTACKS_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

#include "ser/evaluation.hpp"
#include "ser/network.hpp"

namespace ser {

enum class AttackMethod { kFgsm, kBim };

std::string_view attack_method_name(AttackMethod m);
AttackMethod parse_attack_method(std::string_view name);  // throws BadArgument

struct AttackConfig {
  AttackMethod method = AttackMethod::kFgsm;
  double epsilon = 0.08;
  int bim_steps = 10;
  std::optional<double> bim_step_size;  // unset means epsilon / 5

  double step_size() const { return bim_step_size.value_or(epsilon / 5.0); }
  // epsilon >= 0, bim_steps >= 1, 0 < step <= epsilon (or step = 0 when epsilon = 0).
  void validate() const;
  std::string to_json() const;
  static AttackConfig from_json(const std::string& text);
};

// Gradient of the loss with respect to x for the labels y (same shape as x).
using InputGradientFn =
    std::function<nn::Tensor<float>(const nn::Tensor<float>& x, const nn::Tensor<float>& y)>;

// Evaluates the model in eval mode and restores its previous mode.
InputGradientFn model_input_gradient(Model& model);

// Called after every BIM iterate with (iteration, x_k).
using AttackObserver = std::function<void(int, const nn::Tensor<float>&)>;

nn::Tensor<float> fgsm(const InputGradientFn& grad, const nn::Tensor<float>& x,
                       const nn::Tensor<float>& y, double epsilon);
nn::Tensor<float> bim(const InputGradientFn& grad, const nn::Tensor<float>& x,
                      const nn::Tensor<float>& y, double epsilon, int steps, double step,
                      const AttackObserver& observer = {});

nn::Tensor<float> fgsm(Model& model, const nn::Tensor<float>& x, const nn::Tensor<float>& y,
                       const AttackConfig& cfg);
nn::Tensor<float> bim(Model& model, const nn::Tensor<float>& x, const nn::Tensor<float>& y,
                      const AttackConfig& cfg);
nn::Tensor<float> attack(Model& model, const nn::Tensor<float>& x, const nn::Tensor<float>& y,
                         const AttackConfig& cfg);

std::string attack_condition(const AttackConfig& cfg);

// Attacks every test segment with its true label, then scores utterances.
EvalReport attack_eval(Model& model, const FoldData& data, const Normalizer& norm,
                       const AttackConfig& cfg, std::uint64_t seed);

}  // namespace ser

#endif  // SER_ATTACKS_HPP_
