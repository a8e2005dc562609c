// ser/wav.hpp

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

#ifndef SER_WAV_HPP_
#define SER_WAV_HPP_

#include <filesystem>
#include <vector>

namespace ser {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  int sample_rate = kSampleRate;
  std::vector<float> samples;  // normalized to [-1, 1)

  double duration() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

// 16-bit linear PCM, mono, RIFF/WAVE. Reading tolerates extra chunks
// (LIST etc.) but rejects anything that is not mono 16-bit PCM.
Waveform read_wav(const std::filesystem::path& path);

// Samples are clipped to [-1, 1] and rounded to the nearest 16-bit code.
// The file is written to a temporary name and renamed into place.
void write_wav(const std::filesystem::path& path, const Waveform& wave);

// Value that a sample takes after a 16-bit PCM write/read cycle.
float quantize_pcm16(float sample);

}  // namespace ser

#endif  // SER_WAV_HPP_
