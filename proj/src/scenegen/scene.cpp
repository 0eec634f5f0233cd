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

#include "ditm/scenegen/scene.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include "ditm/common/error.hpp"
#include "ditm/common/rng.hpp"

namespace ditm::scenegen {

std::string_view name_of(ShapeKind v) {
  switch (v) {
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "?";
}

std::string_view name_of(Color v) {
  switch (v) {
    case Color::kRed: return "red";
    case Color::kGreen: return "green";
    case Color::kBlue: return "blue";
    case Color::kYellow: return "yellow";
  }
  return "?";
}

std::string_view name_of(Size v) { return v == Size::kSmall ? "small" : "large"; }

std::string_view name_of(Relation v) {
  switch (v) {
    case Relation::kLeftOf: return "left of";
    case Relation::kRightOf: return "right of";
    case Relation::kAbove: return "above";
    case Relation::kBelow: return "below";
  }
  return "?";
}

Relation flipped(Relation r) {
  switch (r) {
    case Relation::kLeftOf: return Relation::kRightOf;
    case Relation::kRightOf: return Relation::kLeftOf;
    case Relation::kAbove: return Relation::kBelow;
    case Relation::kBelow: return Relation::kAbove;
  }
  return r;
}

bool relation_holds(Relation r, Cell a, Cell b) {
  switch (r) {
    case Relation::kLeftOf: return a.row == b.row && a.col < b.col;
    case Relation::kRightOf: return a.row == b.row && a.col > b.col;
    case Relation::kAbove: return a.col == b.col && a.row < b.row;
    case Relation::kBelow: return a.col == b.col && a.row > b.row;
  }
  return false;
}

namespace {

bool in_grid(Cell c) { return c.row >= 0 && c.row < kGridCells && c.col >= 0 && c.col < kGridCells; }

std::optional<Relation> relation_between(Cell a, Cell b) {
  for (Relation r : kAllRelations)
    if (relation_holds(r, a, b)) return r;
  return std::nullopt;
}

int object_distance(const SceneObject& a, const SceneObject& b) {
  return (a.shape != b.shape) + (a.color != b.color) + (a.size != b.size) + !(a.cell == b.cell);
}

template <typename T, std::size_t N>
T pick(const std::array<T, N>& values, Rng& rng) {
  return values[std::uniform_int_distribution<std::size_t>(0, N - 1)(rng)];
}

Cell random_cell(Rng& rng) {
  std::uniform_int_distribution<int> d(0, kGridCells - 1);
  Cell c;
  c.row = d(rng);
  c.col = d(rng);
  return c;
}

SceneObject random_object(Rng& rng, Cell cell) {
  SceneObject o;
  o.shape = pick(kAllShapes, rng);
  o.color = pick(kAllColors, rng);
  o.size = pick(kAllSizes, rng);
  o.cell = cell;
  return o;
}

}  // namespace

void validate(const SceneSpec& spec) {
  const auto& obj = spec.objects;
  if (obj.empty() || obj.size() > 2) throw PreconditionError("scene must have 1 or 2 objects");
  for (const auto& o : obj)
    if (!in_grid(o.cell)) throw PreconditionError("object cell outside the grid");
  if (obj.size() == 2 && obj[0].cell == obj[1].cell) throw PreconditionError("objects share a cell");
  if (spec.relation) {
    if (obj.size() != 2) throw PreconditionError("relation needs two objects");
    if (!relation_holds(*spec.relation, obj[0].cell, obj[1].cell))
      throw PreconditionError("relation '" + std::string(name_of(*spec.relation)) + "' does not hold");
    if (obj[0].color == obj[1].color && obj[0].shape == obj[1].shape)
      throw PreconditionError("related objects must differ in color or shape");
  }
}

bool is_valid(const SceneSpec& spec) {
  try {
    validate(spec);
    return true;
  } catch (const PreconditionError&) {
    return false;
  }
}

std::string canonical_key(const SceneSpec& spec) {
  std::ostringstream os;
  for (const auto& o : spec.objects)
    os << name_of(o.size) << ' ' << name_of(o.color) << ' ' << name_of(o.shape) << " @" << o.cell.row << ','
       << o.cell.col << ';';
  if (spec.relation) os << "rel=" << name_of(*spec.relation);
  return os.str();
}

int edit_distance(const SceneSpec& a, const SceneSpec& b) {
  const auto& x = a.objects.size() >= b.objects.size() ? a.objects : b.objects;
  const auto& y = a.objects.size() >= b.objects.size() ? b.objects : a.objects;
  int best = 0;
  if (y.empty()) {
    best = 4 * static_cast<int>(x.size());
  } else if (x.size() == 1) {
    best = object_distance(x[0], y[0]);
  } else if (y.size() == 1) {
    best = 4 + std::min(object_distance(x[0], y[0]), object_distance(x[1], y[0]));
  } else {
    best = std::min(object_distance(x[0], y[0]) + object_distance(x[1], y[1]),
                    object_distance(x[0], y[1]) + object_distance(x[1], y[0]));
  }
  return best + (a.relation.has_value() != b.relation.has_value());
}

SceneFamily family_of(const SceneSpec& spec) {
  if (spec.relation) return SceneFamily::kRelational;
  return spec.objects.size() == 1 ? SceneFamily::kSingle : SceneFamily::kPair;
}

SceneSpec sample_scene(std::uint64_t seed) {
  Rng rng = make_rng(derive_seed(seed, "family"));
  const int family = std::uniform_int_distribution<int>(0, 2)(rng);
  return sample_scene(seed, static_cast<SceneFamily>(family));
}

SceneSpec sample_scene(std::uint64_t seed, SceneFamily family) {
  Rng rng = make_rng(derive_seed(seed, "scene"));
  SceneSpec s;
  if (family == SceneFamily::kSingle) {
    s.objects.push_back(random_object(rng, random_cell(rng)));
    return s;
  }
  if (family == SceneFamily::kPair) {
    Cell a = random_cell(rng), b = random_cell(rng);
    while (b == a) b = random_cell(rng);
    s.objects.push_back(random_object(rng, a));
    s.objects.push_back(random_object(rng, b));
    return s;
  }
  const Relation r = pick(kAllRelations, rng);
  Cell a, b;
  do {
    a = random_cell(rng);
    b = random_cell(rng);
  } while (!relation_holds(r, a, b));
  SceneObject oa, ob;
  do {
    oa = random_object(rng, a);
    ob = random_object(rng, b);
  } while (oa.color == ob.color && oa.shape == ob.shape);
  s.objects = {oa, ob};
  s.relation = r;
  return s;
}

std::vector<SceneSpec> single_edits(const SceneSpec& spec) {
  validate(spec);
  std::vector<SceneSpec> out;
  auto keep = [&](SceneSpec s) {
    if (is_valid(s) && !(s == spec)) out.push_back(std::move(s));
  };
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    for (ShapeKind v : kAllShapes)
      if (v != spec.objects[i].shape) {
        SceneSpec s = spec;
        s.objects[i].shape = v;
        keep(s);
      }
    for (Color v : kAllColors)
      if (v != spec.objects[i].color) {
        SceneSpec s = spec;
        s.objects[i].color = v;
        keep(s);
      }
    {
      SceneSpec s = spec;
      s.objects[i].size = spec.objects[i].size == Size::kSmall ? Size::kLarge : Size::kSmall;
      keep(s);
    }
    for (int r = 0; r < kGridCells; ++r)
      for (int c = 0; c < kGridCells; ++c) {
        Cell cell{r, c};
        if (cell == spec.objects[i].cell) continue;
        SceneSpec s = spec;
        s.objects[i].cell = cell;
        // A move in a related pair carries the relation word along with it.
        if (s.relation) {
          auto rel = relation_between(s.objects[0].cell, s.objects[1].cell);
          if (!rel) continue;
          s.relation = rel;
        }
        keep(s);
      }
  }
  return out;
}

SceneSpec image_hard_negative(const SceneSpec& spec, std::uint64_t seed) {
  auto edits = single_edits(spec);
  if (edits.empty()) throw PreconditionError("scene has no legal single edit: " + canonical_key(spec));
  Rng rng = make_rng(derive_seed(seed, "image-hard-negative"));
  return edits[std::uniform_int_distribution<std::size_t>(0, edits.size() - 1)(rng)];
}

}  // namespace ditm::scenegen
