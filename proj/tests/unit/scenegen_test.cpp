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

#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <set>

#include "ditm/common/error.hpp"
#include "ditm/common/hash.hpp"
#include "ditm/scenegen/caption.hpp"
#include "ditm/scenegen/dataset.hpp"
#include "ditm/scenegen/render.hpp"
#include "ditm/scenegen/scene.hpp"
#include "ditm/scenegen/tasks.hpp"

namespace ditm::scenegen {
namespace {

SceneSpec one(ShapeKind sh, Color c, Size sz, Cell cell = {1, 1}) {
  SceneSpec s;
  s.objects.push_back({sh, c, sz, cell});
  return s;
}

SceneSpec related(SceneObject a, SceneObject b, Relation r) {
  SceneSpec s;
  s.objects = {a, b};
  s.relation = r;
  return s;
}

const SceneObject kRedSquareLeft{ShapeKind::kSquare, Color::kRed, Size::kSmall, {1, 0}};
const SceneObject kBlueCircleRight{ShapeKind::kCircle, Color::kBlue, Size::kLarge, {1, 2}};

TEST(Scene, SamplingIsDeterministic) {
  for (std::uint64_t s = 0; s < 50; ++s) EXPECT_EQ(sample_scene(s), sample_scene(s));
}

TEST(Scene, SamplesCoverEveryShapeColorAndStayLegal) {
  std::set<std::pair<int, int>> seen;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const SceneSpec spec = sample_scene(s);
    ASSERT_TRUE(is_valid(spec)) << canonical_key(spec);
    if (spec.objects.size() == 2) {
      ASSERT_FALSE(spec.objects[0].cell == spec.objects[1].cell);
    }
    for (const auto& o : spec.objects) seen.insert({static_cast<int>(o.shape), static_cast<int>(o.color)});
  }
  EXPECT_EQ(seen.size(), kAllShapes.size() * kAllColors.size());
}

TEST(Scene, ValidationRejectsBrokenRelations) {
  EXPECT_NO_THROW(validate(related(kRedSquareLeft, kBlueCircleRight, Relation::kLeftOf)));
  EXPECT_THROW(validate(related(kRedSquareLeft, kBlueCircleRight, Relation::kAbove)), PreconditionError);
  SceneObject twin = kBlueCircleRight;
  twin.shape = ShapeKind::kSquare;
  twin.color = Color::kRed;
  EXPECT_THROW(validate(related(kRedSquareLeft, twin, Relation::kLeftOf)), PreconditionError);
}

TEST(Scene, ImageHardNegativeIsOneEditAway) {
  EXPECT_NE(image_hard_negative(one(ShapeKind::kSquare, Color::kRed, Size::kSmall), 3),
            one(ShapeKind::kSquare, Color::kRed, Size::kSmall));
  for (std::uint64_t s = 0; s < 2000; ++s) {
    const SceneSpec spec = sample_scene(s);
    const SceneSpec neg = image_hard_negative(spec, s);
    ASSERT_TRUE(is_valid(neg));
    ASSERT_EQ(edit_distance(spec, neg), 1) << canonical_key(spec) << " -> " << canonical_key(neg);
  }
}

TEST(Scene, ColorEditOfRedSquareIsAnotherColoredSquare) {
  const auto red = one(ShapeKind::kSquare, Color::kRed, Size::kSmall);
  auto blue = red;
  blue.objects[0].color = Color::kBlue;
  EXPECT_EQ(edit_distance(red, blue), 1);
  auto edits = single_edits(red);
  EXPECT_NE(std::find(edits.begin(), edits.end(), blue), edits.end());
}

TEST(Caption, TemplatesAreForced) {
  EXPECT_EQ(caption_of(one(ShapeKind::kSquare, Color::kRed, Size::kSmall)).text(), "a small red square");
  EXPECT_EQ(caption_of(related(kRedSquareLeft, kBlueCircleRight, Relation::kLeftOf)).text(),
            "a red square left of a blue circle");
}

TEST(Caption, ParseRoundTripsOnRandomScenes) {
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const SceneSpec spec = sample_scene(s);
    const Caption c = caption_of(spec);
    const Caption back = parse(c.text());
    ASSERT_EQ(back.structure, c.structure);
    ASSERT_TRUE(matches(back.structure, spec));
    ASSERT_EQ(back.text(), c.text());
  }
}

TEST(Caption, ParserRejectsOffGrammarText) {
  EXPECT_THROW(parse("a red square"), PreconditionError);
  EXPECT_THROW(parse("a small red square left of a blue circle"), PreconditionError);
  EXPECT_THROW(parse("a small purple square"), PreconditionError);
  EXPECT_THROW(parse("a small red square and"), PreconditionError);
  EXPECT_THROW(parse(""), PreconditionError);
}

TEST(Caption, VocabularyIsClosedAndSmall) {
  EXPECT_LE(vocabulary().size(), 25u);
  for (std::uint64_t s = 0; s < 300; ++s) {
    auto ids = token_ids(caption_of(sample_scene(s)));
    EXPECT_LE(ids.size(), kMaxCaptionTokens);
    for (auto id : ids) EXPECT_NE(id, kPadToken);
  }
}

TEST(Caption, SwapExamples) {
  const Caption c = parse("a red square left of a blue circle");
  EXPECT_EQ(swap_negative(c, SwapKind::kColorSwap).text(), "a blue square left of a red circle");
  EXPECT_EQ(swap_negative(c, SwapKind::kRelationFlip).text(), "a red square right of a blue circle");
  EXPECT_EQ(swap_negative(c, SwapKind::kShuffleOrder).text(), "a blue circle left of a red square");
  EXPECT_EQ(swap_negative(c, SwapKind::kRelationFlip).kind, "relation-flip");
  EXPECT_THROW(swap_negative(parse("a small red square"), SwapKind::kRelationFlip), InapplicableError);
  EXPECT_THROW(swap_negative(parse("a small red square and a small red circle"), SwapKind::kColorSwap),
               InapplicableError);
  EXPECT_THROW(swap_negative(parse("a small red square and a large blue circle"), SwapKind::kShuffleOrder),
               InapplicableError);
  EXPECT_EQ(swap_negative(parse("a small red square and a large blue circle"), SwapKind::kAttributeRebind).text(),
            "a large red square and a small blue circle");
}

TEST(Caption, SwapNegativesNeverMatchAndShuffleKeepsTokens) {
  std::size_t shuffles = 0;
  for (std::uint64_t s = 0; s < 3000 || shuffles < 1000; ++s) {
    const SceneSpec spec = sample_scene(s);
    const Caption c = caption_of(spec);
    ASSERT_TRUE(matches(c.structure, spec));
    for (SwapKind k : kAllSwaps) {
      Caption neg;
      try {
        neg = swap_negative(c, k);
      } catch (const InapplicableError&) {
        continue;
      }
      ASSERT_NE(neg.text(), c.text());
      ASSERT_FALSE(matches(neg.structure, spec)) << c.text() << " / " << neg.text();
      if (k != SwapKind::kRelationFlip) {
        auto a = c.tokens, b = neg.tokens;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        ASSERT_EQ(a, b);
      }
      if (k == SwapKind::kShuffleOrder) ++shuffles;
    }
  }
}

TEST(Caption, RelationalMatchingIsGeometric) {
  const auto scene = related(kRedSquareLeft, kBlueCircleRight, Relation::kLeftOf);
  EXPECT_TRUE(matches(parse("a blue circle right of a red square").structure, scene));
  EXPECT_FALSE(matches(parse("a red square above a blue circle").structure, scene));
  EXPECT_TRUE(equivalent(parse("a blue circle right of a red square").structure,
                         parse("a red square left of a blue circle").structure));
}

TEST(Render, DeterministicAndInRange) {
  const auto spec = sample_scene(7);
  const Image a = render(spec, 11), b = render(spec, 11);
  EXPECT_EQ(a, b);
  const auto t = to_hwc(a);
  for (double v : t.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(t.shape(), (numerics::Shape{32, 32, 3}));
}

TEST(Render, RedSquareIsRedInsideAndGrayOutside) {
  const Image img = render(one(ShapeKind::kSquare, Color::kRed, Size::kLarge), 0);
  const std::size_t centre = (16 * 32 + 16) * 3;
  EXPECT_GT(img.bytes[centre], img.bytes[centre + 1]);
  EXPECT_GT(img.bytes[centre], img.bytes[centre + 2]);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(img.bytes[c], kGrayByte);
  EXPECT_NEAR(to_hwc(img)[0], 128.0 / 127.5 - 1.0, 1e-15);
  const auto chw = to_chw(img);
  EXPECT_DOUBLE_EQ(chw[0 * 1024 + 16 * 32 + 16], byte_to_unit(img.bytes[centre]));
  EXPECT_DOUBLE_EQ(chw[2 * 1024 + 16 * 32 + 16], byte_to_unit(img.bytes[centre + 2]));
}

TEST(Dataset, SplitsAreDisjointAndCaptionsMatch) {
  DatasetConfig cfg;
  cfg.n_train = 300;
  cfg.n_val = 60;
  cfg.seed = 4;
  const Dataset d = build_dataset(cfg);
  EXPECT_EQ(d.indices("train").size(), 300u);
  EXPECT_EQ(d.indices("val").size(), 60u);
  std::set<std::string> train_keys, val_keys;
  for (const auto& r : d.records) {
    ASSERT_EQ(r.split, split_of(r.scene));
    const Caption c = parse(r.caption);
    ASSERT_TRUE(matches(c.structure, r.scene));
    for (const auto& [kind, text] : r.text_negatives) ASSERT_FALSE(matches(parse(text).structure, r.scene)) << kind;
    ASSERT_EQ(edit_distance(r.scene, r.image_negative), 1);
    ASSERT_EQ(d.positive(r.id), render(r.scene, r.render_seed));
    (r.split == "val" ? val_keys : train_keys).insert(split_of(r.scene) + canonical_key(r.scene));
  }
  for (const auto& k : val_keys) EXPECT_EQ(train_keys.count(k), 0u);
}

TEST(Dataset, RoundTripsThroughDisk) {
  DatasetConfig cfg;
  cfg.n_train = 40;
  cfg.n_val = 10;
  const Dataset d = build_dataset(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "ditm_dataset_rt";
  write_dataset(d, dir);
  const Dataset back = read_dataset(dir);
  ASSERT_EQ(back.records.size(), d.records.size());
  EXPECT_EQ(back.images, d.images);
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    EXPECT_EQ(back.records[i].scene, d.records[i].scene);
    EXPECT_EQ(back.records[i].text_negatives, d.records[i].text_negatives);
  }
  const auto h1 = hash_file(dir / "images.bin");
  write_dataset(build_dataset(cfg), dir);
  EXPECT_EQ(hash_file(dir / "images.bin"), h1);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(read_dataset(dir), IoError);
  cfg.n_train = 0;
  EXPECT_THROW(build_dataset(cfg), PreconditionError);
}

TEST(Tasks, SuiteInvariantsHold) {
  TaskConfig cfg;
  cfg.seed = 9;
  cfg.n_per_subtask = 200;
  const auto t0 = std::chrono::steady_clock::now();
  const TaskSuite suite = build_tasks(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 60.0);
  ASSERT_EQ(suite.tasks.size(), 2u * 7u * 200u);
  std::map<std::string, std::size_t> per_subtask;
  std::vector<std::size_t> gold_pos(cfg.k, 0);
  for (const auto& t : suite.tasks) {
    ++per_subtask[t.subtask + std::string(name_of(t.direction))];
    ASSERT_EQ(t.k(), cfg.k);
    ASSERT_LT(t.gold, t.k());
    ++gold_pos[t.gold];
    if (t.direction == Direction::kTextRetrieval) {
      const SceneSpec& scene = suite.scenes[t.query_scene].scene;
      EXPECT_EQ(split_of(scene), "val");
      std::set<std::string> distinct(t.candidate_captions.begin(), t.candidate_captions.end());
      ASSERT_EQ(distinct.size(), t.k());
      std::size_t matching = 0;
      for (std::size_t i = 0; i < t.k(); ++i) {
        const bool m = matches(parse(t.candidate_captions[i]).structure, scene);
        matching += m;
        ASSERT_EQ(m, i == t.gold);
      }
      ASSERT_EQ(matching, 1u);
      if (t.subtask == "spatial") {
        const auto gold = parse(t.candidate_captions[t.gold]).structure;
        for (const auto& c : t.candidate_captions) {
          const auto s = parse(c).structure;
          EXPECT_EQ(s.objects, gold.objects) << c;
        }
      }
    } else {
      const Caption q = parse(t.query_caption);
      std::set<std::size_t> ids(t.candidate_scenes.begin(), t.candidate_scenes.end());
      ASSERT_EQ(ids.size(), t.k());
      EXPECT_EQ(split_of(suite.scenes[t.candidate_scenes[t.gold]].scene), "val");
      for (std::size_t i = 0; i < t.k(); ++i) {
        const SceneSpec& s = suite.scenes[t.candidate_scenes[i]].scene;
        ASSERT_EQ(matches(q.structure, s), i == t.gold) << t.query_caption;
        if (i != t.gold) {
          const int d = edit_distance(s, suite.scenes[t.candidate_scenes[t.gold]].scene);
          ASSERT_GE(d, 1);
          ASSERT_LE(d, 2);
        }
      }
    }
  }
  for (const auto& [key, n] : per_subtask) EXPECT_EQ(n, 200u) << key;
  for (auto n : gold_pos) EXPECT_GT(n, suite.tasks.size() / cfg.k / 2);
}

TEST(Tasks, DeterministicAndRoundTrips) {
  TaskConfig cfg;
  cfg.seed = 2;
  cfg.n_per_subtask = 5;
  const TaskSuite a = build_tasks(cfg);
  cfg.threads = 3;
  const TaskSuite b = build_tasks(cfg);
  EXPECT_EQ(a.images, b.images);
  const auto dir = std::filesystem::temp_directory_path() / "ditm_suite_rt";
  write_suite(a, dir);
  const TaskSuite c = read_suite(dir);
  ASSERT_EQ(c.tasks.size(), a.tasks.size());
  for (std::size_t i = 0; i < a.tasks.size(); ++i) {
    EXPECT_EQ(c.tasks[i].candidate_captions, a.tasks[i].candidate_captions);
    EXPECT_EQ(c.tasks[i].candidate_scenes, a.tasks[i].candidate_scenes);
    EXPECT_EQ(c.tasks[i].gold, a.tasks[i].gold);
  }
  EXPECT_EQ(c.images, a.images);
  std::filesystem::remove_all(dir);
  cfg.k = 1;
  EXPECT_THROW(build_tasks(cfg), PreconditionError);
}

}  // namespace
}  // namespace ditm::scenegen
