// ser/io.hpp

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

#ifndef SER_IO_HPP_
#define SER_IO_HPP_

#include <filesystem>
#include <string>
#include <string_view>

namespace ser {

// Writes through a sibling temp file and renames it into place, creating
// parent directories. Throws IoError.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// Throws NotFound for a missing file, IoError otherwise.
std::string read_file(const std::filesystem::path& path);

}  // namespace ser

#endif  // SER_IO_HPP_
