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
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ditm::scenegen {

enum class ShapeKind { kSquare, kCircle, kTriangle };
enum class Color { kRed, kGreen, kBlue, kYellow };
enum class Size { kSmall, kLarge };
/// Spatial relation of objects[0] to objects[1].
enum class Relation { kLeftOf, kRightOf, kAbove, kBelow };

inline constexpr std::array kAllShapes = {ShapeKind::kSquare, ShapeKind::kCircle, ShapeKind::kTriangle};
inline constexpr std::array kAllColors = {Color::kRed, Color::kGreen, Color::kBlue, Color::kYellow};
inline constexpr std::array kAllSizes = {Size::kSmall, Size::kLarge};
inline constexpr std::array kAllRelations = {Relation::kLeftOf, Relation::kRightOf, Relation::kAbove,
                                             Relation::kBelow};
inline constexpr int kGridCells = 3;

std::string_view name_of(ShapeKind v);
std::string_view name_of(Color v);
std::string_view name_of(Size v);
/// Caption phrase, e.g. "left of".
std::string_view name_of(Relation v);
Relation flipped(Relation r);

/// Cell of the 3x3 placement grid; row 0 is the top.
struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell&) const = default;
};

struct SceneObject {
  ShapeKind shape = ShapeKind::kSquare;
  Color color = Color::kRed;
  Size size = Size::kSmall;
  Cell cell;
  bool operator==(const SceneObject&) const = default;
};

/// One or two objects on distinct cells. When `relation` is set the scene has
/// two objects, the relation holds geometrically (left/right share a row,
/// above/below share a column) and the two objects differ in color or shape so
/// a relational caption refers to each unambiguously.
struct SceneSpec {
  std::vector<SceneObject> objects;
  std::optional<Relation> relation;
  bool operator==(const SceneSpec&) const = default;
};

/// Whether `r` holds from cell a to cell b.
bool relation_holds(Relation r, Cell a, Cell b);
/// Throws PreconditionError describing the first violated invariant.
void validate(const SceneSpec& spec);
bool is_valid(const SceneSpec& spec);

/// Stable text form used for hashing and the dataset manifest.
std::string canonical_key(const SceneSpec& spec);

/// Minimal number of single-attribute edits (shape, color, size, cell of one
/// object; adding or dropping the relation) between two scenes, minimised over
/// object correspondences. Object-count differences cost 4 per object.
int edit_distance(const SceneSpec& a, const SceneSpec& b);

enum class SceneFamily { kSingle, kPair, kRelational };
SceneFamily family_of(const SceneSpec& spec);

/// Draws a scene: first the scene family (single object, two objects, two
/// related objects) uniformly, then uniformly among legal scenes of that family.
SceneSpec sample_scene(std::uint64_t seed);
/// Uniform among legal scenes of one family.
SceneSpec sample_scene(std::uint64_t seed, SceneFamily family);

/// A legal scene exactly one attribute edit away from `spec`, chosen uniformly
/// among all such edits.
SceneSpec image_hard_negative(const SceneSpec& spec, std::uint64_t seed);
/// Every legal scene at edit distance 1 from `spec`, in a fixed order.
std::vector<SceneSpec> single_edits(const SceneSpec& spec);

}  // namespace ditm::scenegen
