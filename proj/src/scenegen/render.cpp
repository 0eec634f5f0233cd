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

#include "ditm/scenegen/render.hpp"

#include <cmath>
#include <random>

#include "ditm/common/rng.hpp"

namespace ditm::scenegen {

namespace {

constexpr int kSuper = 4;
constexpr double kCellPitch = 10.0;
constexpr double kFirstCentre = 6.0;

double half_extent(Size s) { return s == Size::kSmall ? 2.5 : 4.0; }

bool inside(ShapeKind shape, double dx, double dy, double h) {
  switch (shape) {
    case ShapeKind::kSquare: return std::abs(dx) <= h && std::abs(dy) <= h;
    case ShapeKind::kCircle: return dx * dx + dy * dy <= h * h;
    case ShapeKind::kTriangle:
      // Apex up at (0,-h), base along y = +h with half-width h.
      return dy >= -h && dy <= h && std::abs(dx) <= 0.5 * (dy + h);
  }
  return false;
}

}  // namespace

std::array<std::uint8_t, 3> rgb_of(Color c) {
  switch (c) {
    case Color::kRed: return {255, 0, 0};
    case Color::kGreen: return {0, 255, 0};
    case Color::kBlue: return {0, 0, 255};
    case Color::kYellow: return {255, 255, 0};
  }
  return {0, 0, 0};
}

Image gray_image() {
  Image img;
  img.bytes.fill(kGrayByte);
  return img;
}

Image render(const SceneSpec& spec, std::uint64_t seed) {
  validate(spec);
  Rng rng = make_rng(derive_seed(seed, "render"));
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  std::vector<double> canvas(kImageBytes, static_cast<double>(kGrayByte));
  for (const auto& o : spec.objects) {
    const double cx = kFirstCentre + kCellPitch * o.cell.col + jitter(rng);
    const double cy = kFirstCentre + kCellPitch * o.cell.row + jitter(rng);
    const double h = half_extent(o.size);
    const auto rgb = rgb_of(o.color);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - h - 1)));
    const int x1 = std::min<int>(kImageSize - 1, static_cast<int>(std::ceil(cx + h + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - h - 1)));
    const int y1 = std::min<int>(kImageSize - 1, static_cast<int>(std::ceil(cy + h + 1)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy)
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = x + (sx + 0.5) / kSuper;
            const double py = y + (sy + 0.5) / kSuper;
            hits += inside(o.shape, px - cx, py - cy, h);
          }
        if (hits == 0) continue;
        const double cover = static_cast<double>(hits) / (kSuper * kSuper);
        double* px = &canvas[(static_cast<std::size_t>(y) * kImageSize + x) * 3];
        for (int ch = 0; ch < 3; ++ch) px[ch] = px[ch] * (1.0 - cover) + rgb[ch] * cover;
      }
    }
  }
  Image img;
  for (std::size_t i = 0; i < kImageBytes; ++i)
    img.bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(canvas[i], 0.0, 255.0)));
  return img;
}

numerics::Tensor to_hwc(const Image& img) {
  numerics::Tensor t({kImageSize, kImageSize, 3});
  for (std::size_t i = 0; i < kImageBytes; ++i) t[i] = byte_to_unit(img.bytes[i]);
  return t;
}

numerics::Tensor to_chw(const Image& img) {
  numerics::Tensor t({3, kImageSize, kImageSize});
  constexpr std::size_t plane = kImageSize * kImageSize;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) t[c * plane + p] = byte_to_unit(img.bytes[p * 3 + c]);
  return t;
}

}  // namespace ditm::scenegen
