// src/error.cpp

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

#include "ser/error.hpp"

namespace ser {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::kMissingField: return "MissingField";
    case Errc::kDuplicateId: return "DuplicateId";
    case Errc::kMissingAudio: return "MissingAudio";
    case Errc::kBadSampleRate: return "BadSampleRate";
    case Errc::kParseError: return "ParseError";
    case Errc::kUnmappedLabel: return "UnmappedLabel";
    case Errc::kBadSessionStructure: return "BadSessionStructure";
    case Errc::kLabelSetMismatch: return "LabelSetMismatch";
    case Errc::kIoError: return "IoError";
    case Errc::kTooShort: return "TooShort";
    case Errc::kStaleCache: return "StaleCache";
    case Errc::kEmptyTrainSet: return "EmptyTrainSet";
    case Errc::kBatchTooSmall: return "BatchTooSmall";
    case Errc::kBadFactor: return "BadFactor";
    case Errc::kSilentNoise: return "SilentNoise";
    case Errc::kBadConfig: return "BadConfig";
    case Errc::kShapeMismatch: return "ShapeMismatch";
    case Errc::kNonFiniteActivation: return "NonFiniteActivation";
    case Errc::kNonFiniteLoss: return "NonFiniteLoss";
    case Errc::kNonFiniteGradient: return "NonFiniteGradient";
    case Errc::kDivergedTraining: return "DivergedTraining";
    case Errc::kEmptyList: return "EmptyList";
    case Errc::kMissingClass: return "MissingClass";
    case Errc::kConfigMismatch: return "ConfigMismatch";
    case Errc::kBadArgument: return "BadArgument";
    case Errc::kNotFound: return "NotFound";
  }
  return "Unknown";
}

namespace {

std::string format_message(Errc code, const std::string& subject,
                           const std::string& detail) {
  std::string msg(errc_name(code));
  msg += "(" + subject + ")";
  if (!detail.empty()) msg += ": " + detail;
  return msg;
}

}  // namespace

Error::Error(Errc code, std::string subject, const std::string& detail)
    : std::runtime_error(format_message(code, subject, detail)),
      code_(code),
      subject_(std::move(subject)) {}

}  // namespace ser
