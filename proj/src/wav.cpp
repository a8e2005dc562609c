// src/wav.cpp

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

#include "ser/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "ser/error.hpp"

namespace ser {

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

std::int16_t to_pcm16(float sample) {
  const float clipped = std::clamp(sample, -1.0f, 1.0f);
  const long code = std::lround(clipped * 32768.0f);
  return static_cast<std::int16_t>(std::clamp<long>(code, -32768, 32767));
}

}  // namespace

float quantize_pcm16(float sample) {
  return static_cast<float>(to_pcm16(sample)) / 32768.0f;
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::kIoError, path.string(), "cannot open wav file");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw Error(Errc::kIoError, path.string(), "not a RIFF/WAVE file");
  }

  Waveform wave;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t size = read_u32(&bytes[pos + 4]);
    const unsigned char* body = &bytes[pos + 8];
    if (pos + 8 + size > bytes.size()) {
      throw Error(Errc::kIoError, path.string(), "truncated chunk");
    }
    if (std::memcmp(&bytes[pos], "fmt ", 4) == 0) {
      if (size < 16) throw Error(Errc::kIoError, path.string(), "short fmt chunk");
      const std::uint16_t format = read_u16(body);
      const std::uint16_t channels = read_u16(body + 2);
      const std::uint16_t bits = read_u16(body + 14);
      if (format != 1 || channels != 1 || bits != 16) {
        throw Error(Errc::kIoError, path.string(),
                    "expected mono 16-bit linear PCM");
      }
      wave.sample_rate = static_cast<int>(read_u32(body + 4));
      have_fmt = true;
    } else if (std::memcmp(&bytes[pos], "data", 4) == 0) {
      if (!have_fmt) throw Error(Errc::kIoError, path.string(), "data before fmt");
      const std::size_t n = size / 2;
      wave.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto code = static_cast<std::int16_t>(read_u16(body + 2 * i));
        wave.samples[i] = static_cast<float>(code) / 32768.0f;
      }
      return wave;
    }
    pos += 8 + size + (size & 1u);
  }
  throw Error(Errc::kIoError, path.string(), "no data chunk");
}

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  const auto n = static_cast<std::uint32_t>(wave.samples.size());
  std::string out;
  out.reserve(44 + 2 * static_cast<std::size_t>(n));
  out += "RIFF";
  put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, 2 * n);
  for (float s : wave.samples) put_u16(out, static_cast<std::uint16_t>(to_pcm16(s)));

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Errc::kIoError, path.string(), "cannot write wav file");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error(Errc::kIoError, path.string(), "short write");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace ser
