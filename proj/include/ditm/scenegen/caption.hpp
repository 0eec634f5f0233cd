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
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ditm/scenegen/scene.hpp"

namespace ditm::scenegen {

/// The closed caption vocabulary. Token 0 is padding; it never appears in a
/// caption.
const std::vector<std::string>& vocabulary();
inline constexpr std::size_t kPadToken = 0;
/// Longest caption in tokens ("a small red square and a large blue circle").
inline constexpr std::size_t kMaxCaptionTokens = 9;

enum class CaptionKind { kSingle, kPair, kRelational };

struct ObjectPhrase {
  std::optional<Size> size;  // absent in relational captions
  Color color = Color::kRed;
  ShapeKind shape = ShapeKind::kSquare;
  bool operator==(const ObjectPhrase&) const = default;
};

/// What a caption asserts about a scene:
///   single      "a {size} {color} {shape}"
///   pair        "a {size} {color} {shape} and a {size} {color} {shape}"
///   relational  "a {color} {shape} {left of|right of|above|below} a {color} {shape}"
struct CaptionStructure {
  CaptionKind kind = CaptionKind::kSingle;
  std::vector<ObjectPhrase> objects;
  std::optional<Relation> relation;
  bool operator==(const CaptionStructure&) const = default;
};

struct Caption {
  std::vector<std::string> tokens;
  CaptionStructure structure;
  /// "positive" or the negative subtype that produced it.
  std::string kind = "positive";

  std::string text() const;
};

/// Realises a structure through the grammar.
Caption realize(const CaptionStructure& s, std::string kind = "positive");
/// Parses caption text; throws PreconditionError on anything off-grammar.
Caption parse(std::string_view text);
/// Token ids into vocabulary(), without padding.
std::vector<std::size_t> token_ids(const Caption& c);

Caption caption_of(const SceneSpec& spec);

/// Whether the scene satisfies everything the caption asserts. Single and pair
/// captions name the full object inventory (pair phrases as a multiset);
/// relational captions are checked geometrically on the cells.
bool matches(const CaptionStructure& s, const SceneSpec& spec);
/// Whether two structures assert the same thing ("A left of B" is "B right of A").
bool equivalent(const CaptionStructure& a, const CaptionStructure& b);

enum class SwapKind { kColorSwap, kShapeSwap, kRelationFlip, kAttributeRebind, kShuffleOrder };
inline constexpr std::array kAllSwaps = {SwapKind::kColorSwap, SwapKind::kShapeSwap, SwapKind::kRelationFlip,
                                         SwapKind::kAttributeRebind, SwapKind::kShuffleOrder};
std::string_view name_of(SwapKind k);
SwapKind swap_kind_from(std::string_view name);

/// Exchanges same-part-of-speech elements of a caption:
///   color-swap / shape-swap   the two objects' colors or shapes
///   attribute-rebind          the two objects' sizes (pair captions)
///   relation-flip             left of <-> right of, above <-> below
///   shuffle-order             the two noun phrases of a relational caption
/// Throws InapplicableError when the caption lacks what the swap needs or the
/// result would assert the same thing as the input.
Caption swap_negative(const Caption& c, SwapKind kind);

enum class ReplaceKind { kRecolor, kReshape, kResize, kRerelate };
std::string_view name_of(ReplaceKind k);

/// Every caption obtained by replacing one color, shape, size or relation word
/// with a different value, in a fixed order. Used for recognition negatives
/// and to fill candidate sets.
std::vector<Caption> replace_negatives(const Caption& c, ReplaceKind kind);

}  // namespace ditm::scenegen
