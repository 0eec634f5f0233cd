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
#include <string>
#include <vector>

#include "ditm/scenegen/render.hpp"
#include "ditm/scenegen/scene.hpp"

namespace ditm::scenegen {

enum class Direction { kImageRetrieval, kTextRetrieval };
std::string_view name_of(Direction d);
Direction direction_from(std::string_view name);

/// The seven subtasks, in report order.
const std::vector<std::string>& all_subtasks();

/// A rendered scene referenced by task instances.
struct SuiteScene {
  std::size_t id = 0;
  SceneSpec scene;
  std::uint64_t render_seed = 0;
  std::string caption;
};

/// Image retrieval: a caption query against candidate scene ids.
/// Text retrieval: a scene-id query against candidate captions.
struct TaskInstance {
  std::size_t id = 0;
  Direction direction = Direction::kTextRetrieval;
  std::string subtask;
  std::string query_caption;
  std::size_t query_scene = 0;
  std::vector<std::string> candidate_captions;
  std::vector<std::size_t> candidate_scenes;
  std::size_t gold = 0;

  std::size_t k() const {
    return direction == Direction::kTextRetrieval ? candidate_captions.size() : candidate_scenes.size();
  }
};

struct TaskConfig {
  std::uint64_t seed = 0;
  std::size_t k = 4;
  std::size_t n_per_subtask = 200;
  bool image_retrieval = true;
  bool text_retrieval = true;
  /// Chance that each image-retrieval candidate takes one extra resize or
  /// move edit (kept only if the cluster stays valid).
  double nuisance_rate = 0.5;
  std::vector<std::string> subtasks = all_subtasks();
  int threads = 1;
};

/// On disk: `suite.json` (config), `scenes.jsonl` + `images.bin` (one
/// 3072-byte render per scene, in id order) and `tasks.jsonl`.
struct TaskSuite {
  TaskConfig config;
  std::vector<SuiteScene> scenes;
  std::vector<Image> images;
  std::vector<TaskInstance> tasks;
};

/// Builds `n_per_subtask` instances per subtask and direction. Gold scenes come
/// from the "val" split.
///
/// Text retrieval: the gold caption plus k-1 negatives, first from the
/// subtask's own family (e.g. color-swap for pair-binding-color), then filled
/// from related replacements; none matches the query scene and no two assert
/// the same thing.
///
/// Image retrieval: k scenes drawn as a cluster around a base scene by editing
/// the subtask's attribute, pairwise 1-2 edits apart and pairwise
/// non-matching; the gold is a uniformly chosen member, so its rendering
/// difficulty is exchangeable with the distractors'. Members may also carry a
/// nuisance edit (see TaskConfig::nuisance_rate) so that candidates differ in
/// how hard they are to denoise, not only in the probed attribute.
TaskSuite build_tasks(const TaskConfig& config);

void write_suite(const TaskSuite& suite, const std::filesystem::path& dir);
TaskSuite read_suite(const std::filesystem::path& dir);

}  // namespace ditm::scenegen
