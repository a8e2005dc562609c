// ser/cli.hpp

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

#ifndef SER_CLI_HPP_
#define SER_CLI_HPP_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ser/attacks.hpp"
#include "ser/features.hpp"
#include "ser/network.hpp"
#include "ser/training.hpp"

namespace ser {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Declarative experiment document. Input paths resolve against the current
// directory, output paths against out.
struct ExperimentSpec {
  std::filesystem::path manifest;
  std::string labels = "identity";  // identity | iemocap | msp_improv
  bool speed_perturb = false;
  std::filesystem::path test_manifest;  // cross-corpus target
  std::string test_labels = "identity";
  std::filesystem::path cache_dir;  // empty: $SER_CACHE_ROOT or <out>/cache
  std::filesystem::path noise_dir;  // empty: <manifest dir>/noise
  SpectrogramParams features;
  ModelConfig model;
  TrainConfig train;
  std::string fold;  // empty: every LOSO fold
  std::string harness = "clean";  // clean | noise | attack | crosscorpus
  std::vector<double> snrs = {0.0, 10.0, 20.0};
  AttackConfig attack;
  double val_fraction = 0.3;
  std::uint64_t split_seed = 0;
  std::uint64_t eval_seed = 0;
  int workers = 1;
  std::filesystem::path out;

  std::string to_json() const;
  // Rejects unknown keys; missing keys keep their defaults.
  static ExperimentSpec from_json(const std::string& text);
};

// Runs one subcommand (synth, prepare, train, eval, report). args excludes
// the program name. Returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ser

#endif  // SER_CLI_HPP_
