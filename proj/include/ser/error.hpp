// ser/error.hpp

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

#ifndef SER_ERROR_HPP_
#define SER_ERROR_HPP_

#include <stdexcept>
#include <string>
#include <string_view>

namespace ser {

enum class Errc {
  kMissingField,
  kDuplicateId,
  kMissingAudio,
  kBadSampleRate,
  kParseError,
  kUnmappedLabel,
  kBadSessionStructure,
  kLabelSetMismatch,
  kIoError,
  kTooShort,
  kStaleCache,
  kEmptyTrainSet,
  kBatchTooSmall,
  kBadFactor,
  kSilentNoise,
  kBadConfig,
  kShapeMismatch,
  kNonFiniteActivation,
  kNonFiniteLoss,
  kNonFiniteGradient,
  kDivergedTraining,
  kEmptyList,
  kMissingClass,
  kConfigMismatch,
  kBadArgument,
  kNotFound,
};

std::string_view errc_name(Errc code);

/// Every failure raised by the library. `subject()` names the offending
/// record, label, path or parameter so callers can surface it verbatim.
class Error : public std::runtime_error {
 public:
  Error(Errc code, std::string subject, const std::string& detail = {});

  Errc code() const noexcept { return code_; }
  const std::string& subject() const noexcept { return subject_; }

 private:
  Errc code_;
  std::string subject_;
};

}  // namespace ser

#endif  // SER_ERROR_HPP_
