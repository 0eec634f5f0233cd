// Copyright 2026 The ditm Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <filesystem>

#include "ditm/numerics/parameters.hpp"

namespace ditm::numerics {

/// Checkpoint layout, all integers little-endian:
///
///   "DITMCKPT"            8 bytes magic
///   u32 version           currently 1
///   u32 tensor count
///   per tensor, in store order:
///     u32 name length, name bytes (UTF-8, no terminator)
///     u32 rank, rank x u64 dims
///     product(dims) x IEEE-754 binary64, little-endian
///
/// The file is written to a sibling temporary and renamed into place, so an
/// interrupted save never leaves a truncated checkpoint at `path`.
inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'T', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ParameterStore& params, const std::filesystem::path& path);
ParameterStore load_checkpoint(const std::filesystem::path& path);

}  // namespace ditm::numerics
