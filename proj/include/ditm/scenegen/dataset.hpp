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
#include <map>
#include <string>
#include <vector>

#include "ditm/scenegen/caption.hpp"
#include "ditm/scenegen/render.hpp"
#include "ditm/scenegen/scene.hpp"

namespace ditm::scenegen {

/// Train/val assignment by a hash of the scene's physical content (objects as
/// an unordered set, relation presence), so "A left of B" and "B right of A"
/// always land in the same split. About one scene in five is "val".
std::string split_of(const SceneSpec& spec);

struct Record {
  std::size_t id = 0;
  std::string split;
  SceneSpec scene;
  std::uint64_t render_seed = 0;
  std::string caption;
  /// Text hard negatives keyed by subtype (swap kinds and replace kinds); only
  /// subtypes applicable to the caption appear, and none matches the scene.
  std::map<std::string, std::string> text_negatives;
  SceneSpec image_negative;
  std::uint64_t negative_render_seed = 0;
  /// Byte offsets of the two renders in the blob.
  std::uint64_t image_offset = 0;
  std::uint64_t negative_offset = 0;
};

struct DatasetConfig {
  std::size_t n_train = 5000;
  std::size_t n_val = 500;
  std::uint64_t seed = 0;
  int threads = 1;
};

/// On disk: `manifest.jsonl` (one Record per line, train records first) and
/// `images.bin`, the renders as back-to-back 3072-byte HWC blocks (positive,
/// then image hard negative, per record).
struct Dataset {
  DatasetConfig config;
  std::vector<Record> records;
  std::vector<Image> images;  // 2 per record, in blob order

  const Image& positive(std::size_t i) const { return images.at(2 * i); }
  const Image& negative(std::size_t i) const { return images.at(2 * i + 1); }
  std::vector<std::size_t> indices(const std::string& split) const;
};

Dataset build_dataset(const DatasetConfig& config);
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace ditm::scenegen
