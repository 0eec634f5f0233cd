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

#include <array>
#include <cstdint>

#include "ditm/numerics/tensor.hpp"
#include "ditm/scenegen/scene.hpp"

namespace ditm::scenegen {

inline constexpr std::size_t kImageSize = 32;
inline constexpr std::size_t kImageBytes = kImageSize * kImageSize * 3;
/// Background byte value on every channel.
inline constexpr std::uint8_t kGrayByte = 128;

/// 8-bit RGB, row-major, channels interleaved (HWC). Value v in [-1,1] is
/// v = byte / 127.5 - 1, so the background is 128/127.5 - 1.
struct Image {
  std::array<std::uint8_t, kImageBytes> bytes{};
  bool operator==(const Image&) const = default;
};

inline double byte_to_unit(std::uint8_t b) { return static_cast<double>(b) / 127.5 - 1.0; }
inline const double kGrayValue = byte_to_unit(kGrayByte);

std::array<std::uint8_t, 3> rgb_of(Color c);

/// Rasterises the scene with 4x4 supersampling on the gray background. Each
/// object's centre is its cell centre plus a seed-driven offset uniform in
/// [-1, 1] pixels per axis.
Image render(const SceneSpec& spec, std::uint64_t seed);
/// A scene-free image of background gray.
Image gray_image();

/// [32,32,3] tensor in [-1,1].
numerics::Tensor to_hwc(const Image& img);
/// [3,32,32] tensor in [-1,1], the layout the denoiser consumes.
numerics::Tensor to_chw(const Image& img);

}  // namespace ditm::scenegen
