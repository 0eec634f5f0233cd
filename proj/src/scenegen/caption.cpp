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

#include "ditm/scenegen/caption.hpp"

#include <algorithm>
#include <sstream>

#include "ditm/common/error.hpp"

namespace ditm::scenegen {

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = {"<pad>", "a",      "small",  "large", "red",    "green",
                                             "blue",  "yellow", "square", "circle", "triangle", "and",
                                             "left",  "right",  "of",     "above", "below"};
  return v;
}

std::string Caption::text() const {
  std::string s;
  for (const auto& t : tokens) {
    if (!s.empty()) s += ' ';
    s += t;
  }
  return s;
}

namespace {

void append_phrase(std::vector<std::string>& out, const ObjectPhrase& p) {
  out.emplace_back("a");
  if (p.size) out.emplace_back(name_of(*p.size));
  out.emplace_back(name_of(p.color));
  out.emplace_back(name_of(p.shape));
}

template <typename E, std::size_t N>
std::optional<E> lookup(const std::array<E, N>& values, std::string_view word) {
  for (E v : values)
    if (name_of(v) == word) return v;
  return std::nullopt;
}

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {
    std::istringstream is{std::string(text)};
    std::string w;
    while (is >> w) words_.push_back(w);
  }

  CaptionStructure run() {
    CaptionStructure s;
    ObjectPhrase first = phrase(true);
    s.objects.push_back(first);
    if (done()) {
      if (!first.size) fail("single-object caption needs a size");
      s.kind = CaptionKind::kSingle;
      return s;
    }
    if (peek() == "and") {
      ++pos_;
      if (!first.size) fail("pair caption needs sizes");
      ObjectPhrase second = phrase(true);
      if (!second.size) fail("pair caption needs sizes");
      s.kind = CaptionKind::kPair;
      s.objects.push_back(second);
    } else {
      if (first.size) fail("relational caption takes no sizes");
      s.kind = CaptionKind::kRelational;
      s.relation = relation();
      ObjectPhrase second = phrase(false);
      s.objects.push_back(second);
    }
    if (!done()) fail("trailing words");
    return s;
  }

 private:
  bool done() const { return pos_ >= words_.size(); }
  std::string_view peek() const { return done() ? std::string_view() : std::string_view(words_[pos_]); }
  std::string_view next() {
    if (done()) fail("unexpected end");
    return words_[pos_++];
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw PreconditionError("cannot parse caption \"" + std::string(text_) + "\": " + why);
  }

  ObjectPhrase phrase(bool allow_size) {
    if (next() != "a") fail("expected 'a'");
    ObjectPhrase p;
    std::string_view w = next();
    if (auto sz = lookup(kAllSizes, w)) {
      if (!allow_size) fail("unexpected size");
      p.size = sz;
      w = next();
    }
    auto c = lookup(kAllColors, w);
    if (!c) fail("expected a color, got '" + std::string(w) + "'");
    p.color = *c;
    w = next();
    auto sh = lookup(kAllShapes, w);
    if (!sh) fail("expected a shape, got '" + std::string(w) + "'");
    p.shape = *sh;
    return p;
  }

  Relation relation() {
    std::string_view w = next();
    if (w == "above") return Relation::kAbove;
    if (w == "below") return Relation::kBelow;
    if (w == "left" || w == "right") {
      if (next() != "of") fail("expected 'of'");
      return w == "left" ? Relation::kLeftOf : Relation::kRightOf;
    }
    fail("expected 'and' or a relation, got '" + std::string(w) + "'");
  }

  std::string_view text_;
  std::vector<std::string> words_;
  std::size_t pos_ = 0;
};

bool same_descriptor(const ObjectPhrase& p, const SceneObject& o) {
  return p.color == o.color && p.shape == o.shape && (!p.size || *p.size == o.size);
}

bool same_multiset(const std::vector<ObjectPhrase>& a, const std::vector<ObjectPhrase>& b) {
  if (a.size() != b.size()) return false;
  if (a.size() == 1) return a[0] == b[0];
  return (a[0] == b[0] && a[1] == b[1]) || (a[0] == b[1] && a[1] == b[0]);
}

// "A right of B" is stored as "B left of A", "below" as "above".
CaptionStructure canonical_relational(const CaptionStructure& s) {
  CaptionStructure c = s;
  if (*s.relation == Relation::kRightOf || *s.relation == Relation::kBelow) {
    std::swap(c.objects[0], c.objects[1]);
    c.relation = flipped(*s.relation);
  }
  return c;
}

Caption checked_negative(const Caption& c, CaptionStructure s, std::string_view kind) {
  if (equivalent(s, c.structure))
    throw InapplicableError(std::string(kind) + " leaves \"" + c.text() + "\" asserting the same scene");
  return realize(s, std::string(kind));
}

}  // namespace

Caption realize(const CaptionStructure& s, std::string kind) {
  Caption c;
  c.structure = s;
  c.kind = std::move(kind);
  const std::size_t expected = s.kind == CaptionKind::kSingle ? 1 : 2;
  if (s.objects.size() != expected) throw PreconditionError("caption structure has wrong object count");
  if ((s.kind == CaptionKind::kRelational) != s.relation.has_value())
    throw PreconditionError("relation word present iff the caption is relational");
  for (const auto& p : s.objects)
    if ((s.kind == CaptionKind::kRelational) == p.size.has_value())
      throw PreconditionError("sizes appear exactly in non-relational captions");
  append_phrase(c.tokens, s.objects[0]);
  if (s.kind == CaptionKind::kPair) {
    c.tokens.emplace_back("and");
    append_phrase(c.tokens, s.objects[1]);
  } else if (s.kind == CaptionKind::kRelational) {
    std::istringstream is{std::string(name_of(*s.relation))};
    std::string w;
    while (is >> w) c.tokens.push_back(w);
    append_phrase(c.tokens, s.objects[1]);
  }
  return c;
}

Caption parse(std::string_view text) {
  Caption c = realize(Parser(text).run());
  return c;
}

std::vector<std::size_t> token_ids(const Caption& c) {
  const auto& vocab = vocabulary();
  std::vector<std::size_t> ids;
  for (const auto& t : c.tokens) {
    auto it = std::find(vocab.begin(), vocab.end(), t);
    if (it == vocab.end() || it == vocab.begin()) throw PreconditionError("token '" + t + "' not in vocabulary");
    ids.push_back(static_cast<std::size_t>(it - vocab.begin()));
  }
  return ids;
}

Caption caption_of(const SceneSpec& spec) {
  validate(spec);
  CaptionStructure s;
  for (const auto& o : spec.objects) {
    ObjectPhrase p;
    p.color = o.color;
    p.shape = o.shape;
    if (!spec.relation) p.size = o.size;
    s.objects.push_back(p);
  }
  if (spec.relation) {
    s.kind = CaptionKind::kRelational;
    s.relation = spec.relation;
  } else {
    s.kind = spec.objects.size() == 1 ? CaptionKind::kSingle : CaptionKind::kPair;
  }
  return realize(s);
}

bool matches(const CaptionStructure& s, const SceneSpec& spec) {
  const auto& obj = spec.objects;
  switch (s.kind) {
    case CaptionKind::kSingle:
      return obj.size() == 1 && same_descriptor(s.objects[0], obj[0]);
    case CaptionKind::kPair:
      if (obj.size() != 2) return false;
      return (same_descriptor(s.objects[0], obj[0]) && same_descriptor(s.objects[1], obj[1])) ||
             (same_descriptor(s.objects[0], obj[1]) && same_descriptor(s.objects[1], obj[0]));
    case CaptionKind::kRelational:
      if (obj.size() != 2) return false;
      for (int i = 0; i < 2; ++i) {
        const SceneObject& a = obj[i];
        const SceneObject& b = obj[1 - i];
        if (same_descriptor(s.objects[0], a) && same_descriptor(s.objects[1], b) &&
            relation_holds(*s.relation, a.cell, b.cell))
          return true;
      }
      return false;
  }
  return false;
}

bool equivalent(const CaptionStructure& a, const CaptionStructure& b) {
  if (a.kind != b.kind) return false;
  if (a.kind != CaptionKind::kRelational) return same_multiset(a.objects, b.objects);
  return canonical_relational(a) == canonical_relational(b);
}

std::string_view name_of(SwapKind k) {
  switch (k) {
    case SwapKind::kColorSwap: return "color-swap";
    case SwapKind::kShapeSwap: return "shape-swap";
    case SwapKind::kRelationFlip: return "relation-flip";
    case SwapKind::kAttributeRebind: return "attribute-rebind";
    case SwapKind::kShuffleOrder: return "shuffle-order";
  }
  return "?";
}

SwapKind swap_kind_from(std::string_view name) {
  for (SwapKind k : kAllSwaps)
    if (name_of(k) == name) return k;
  throw PreconditionError("unknown swap subtype '" + std::string(name) + "'");
}

Caption swap_negative(const Caption& c, SwapKind kind) {
  const CaptionStructure& in = c.structure;
  const std::string_view label = name_of(kind);
  auto inapplicable = [&](const std::string& why) -> Caption {
    throw InapplicableError(std::string(label) + " on \"" + c.text() + "\": " + why);
  };
  if (in.objects.size() < 2) return inapplicable("needs two objects");
  CaptionStructure s = in;
  switch (kind) {
    case SwapKind::kColorSwap:
      if (in.objects[0].color == in.objects[1].color) return inapplicable("colors are equal");
      std::swap(s.objects[0].color, s.objects[1].color);
      break;
    case SwapKind::kShapeSwap:
      if (in.objects[0].shape == in.objects[1].shape) return inapplicable("shapes are equal");
      std::swap(s.objects[0].shape, s.objects[1].shape);
      break;
    case SwapKind::kRelationFlip:
      if (in.kind != CaptionKind::kRelational) return inapplicable("no relation");
      s.relation = flipped(*in.relation);
      break;
    case SwapKind::kAttributeRebind:
      if (in.kind != CaptionKind::kPair) return inapplicable("no sizes");
      if (in.objects[0].size == in.objects[1].size) return inapplicable("sizes are equal");
      std::swap(s.objects[0].size, s.objects[1].size);
      break;
    case SwapKind::kShuffleOrder:
      if (in.kind != CaptionKind::kRelational) return inapplicable("order carries no meaning");
      std::swap(s.objects[0], s.objects[1]);
      break;
  }
  return checked_negative(c, std::move(s), label);
}

std::string_view name_of(ReplaceKind k) {
  switch (k) {
    case ReplaceKind::kRecolor: return "recolor";
    case ReplaceKind::kReshape: return "reshape";
    case ReplaceKind::kResize: return "resize";
    case ReplaceKind::kRerelate: return "rerelate";
  }
  return "?";
}

std::vector<Caption> replace_negatives(const Caption& c, ReplaceKind kind) {
  const CaptionStructure& in = c.structure;
  std::vector<Caption> out;
  auto emit = [&](CaptionStructure s) {
    if (!equivalent(s, in)) out.push_back(realize(s, std::string(name_of(kind))));
  };
  if (kind == ReplaceKind::kRerelate) {
    if (!in.relation) return out;
    for (Relation r : kAllRelations)
      if (r != *in.relation) {
        CaptionStructure s = in;
        s.relation = r;
        emit(s);
      }
    return out;
  }
  for (std::size_t i = 0; i < in.objects.size(); ++i) {
    const ObjectPhrase& p = in.objects[i];
    if (kind == ReplaceKind::kRecolor) {
      for (Color v : kAllColors)
        if (v != p.color) {
          CaptionStructure s = in;
          s.objects[i].color = v;
          emit(s);
        }
    } else if (kind == ReplaceKind::kReshape) {
      for (ShapeKind v : kAllShapes)
        if (v != p.shape) {
          CaptionStructure s = in;
          s.objects[i].shape = v;
          emit(s);
        }
    } else if (p.size) {
      CaptionStructure s = in;
      s.objects[i].size = *p.size == Size::kSmall ? Size::kLarge : Size::kSmall;
      emit(s);
    }
  }
  return out;
}

}  // namespace ditm::scenegen
