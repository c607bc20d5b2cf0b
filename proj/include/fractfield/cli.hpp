/*=========================================================================
 *
 *  Copyright FractField Contributors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *         http://www.apache.org/licenses/LICENSE-2.0.txt
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 *
 *=========================================================================*/
#ifndef FRACTFIELD_CLI_HPP
#define FRACTFIELD_CLI_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fractfield/volume.hpp"

namespace fractfield {

inline constexpr const char* kToolVersion = "0.1.0";

/// Plain-text key/value record of one CLI run, written atomically next to
/// the primary output. Re-running a deterministic subcommand from its
/// manifest reproduces the outputs bit-identically.
struct RunManifest {
    std::string subcommand;
    std::string version = kToolVersion;
    std::vector<std::string> argv;  // resolved arguments, program name excluded
    std::map<std::string, std::string> config;
    double wall_time_seconds = 0.0;
    std::uint64_t seed = 0;
};

void write_manifest(const RunManifest& m, const std::string& path);
RunManifest read_manifest(const std::string& path);

/// 8-bit binary portable graymap of one slice, min-max scaled; a constant
/// slice maps to 0.
void write_slice_pgm(const Volume3D& v, char axis, std::int64_t index, const std::string& path);

/// Runs one subcommand. Returns the process exit status: 0 success, 2 usage
/// error, 1 runtime failure.
int dispatch(const std::vector<std::string>& args);

}  // namespace fractfield

#endif
