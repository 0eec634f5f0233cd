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

#include "ditm/scenegen/tasks.hpp"

#include <algorithm>
#include <functional>
#include <random>

#include "ditm/common/error.hpp"
#include "ditm/common/parallel.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/scenegen/caption.hpp"
#include "ditm/scenegen/dataset.hpp"
#include "ditm/scenegen/io.hpp"

namespace ditm::scenegen {

std::string_view name_of(Direction d) {
  return d == Direction::kImageRetrieval ? "image-retrieval" : "text-retrieval";
}

Direction direction_from(std::string_view name) {
  if (name == "image-retrieval") return Direction::kImageRetrieval;
  if (name == "text-retrieval") return Direction::kTextRetrieval;
  throw PreconditionError("unknown direction '" + std::string(name) + "'");
}

const std::vector<std::string>& all_subtasks() {
  static const std::vector<std::string> s = {"recognition-color", "recognition-shape", "pair-binding-color",
                                             "pair-binding-size", "binding-shape",     "spatial",
                                             "swap-object"};
  return s;
}

namespace {

constexpr int kMaxAttempts = 1000;

SceneFamily family_for(const std::string& subtask) {
  if (subtask.rfind("recognition", 0) == 0) return SceneFamily::kSingle;
  if (subtask == "spatial" || subtask == "swap-object") return SceneFamily::kRelational;
  return SceneFamily::kPair;
}

std::vector<Caption> swaps(const Caption& c, SwapKind k) {
  try {
    return {swap_negative(c, k)};
  } catch (const InapplicableError&) {
    return {};
  }
}

// Candidate negative captions for a subtask: its own family first, then fill.
std::pair<std::vector<Caption>, std::vector<Caption>> text_pools(const std::string& subtask, const Caption& gold) {
  using R = ReplaceKind;
  auto cat = [](std::vector<Caption> a, const std::vector<Caption>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  if (subtask == "recognition-color")
    return {replace_negatives(gold, R::kRecolor),
            cat(replace_negatives(gold, R::kResize), replace_negatives(gold, R::kReshape))};
  if (subtask == "recognition-shape")
    return {replace_negatives(gold, R::kReshape),
            cat(replace_negatives(gold, R::kResize), replace_negatives(gold, R::kRecolor))};
  if (subtask == "pair-binding-color") return {swaps(gold, SwapKind::kColorSwap), replace_negatives(gold, R::kRecolor)};
  if (subtask == "pair-binding-size")
    return {swaps(gold, SwapKind::kAttributeRebind), replace_negatives(gold, R::kResize)};
  if (subtask == "binding-shape") return {swaps(gold, SwapKind::kShapeSwap), replace_negatives(gold, R::kReshape)};
  if (subtask == "spatial") return {swaps(gold, SwapKind::kRelationFlip), replace_negatives(gold, R::kRerelate)};
  if (subtask == "swap-object")
    return {swaps(gold, SwapKind::kShuffleOrder),
            cat(swaps(gold, SwapKind::kColorSwap), swaps(gold, SwapKind::kShapeSwap))};
  throw PreconditionError("unknown subtask '" + subtask + "'");
}

std::vector<SceneSpec> keep_valid(std::vector<SceneSpec> in) {
  std::vector<SceneSpec> out;
  for (auto& s : in)
    if (is_valid(s)) out.push_back(std::move(s));
  return out;
}

// Scenes around `base` that vary the subtask's attribute: own family first,
// then fill variants that also carry a nuisance edit.
std::pair<std::vector<SceneSpec>, std::vector<SceneSpec>> image_pools(const std::string& subtask,
                                                                      const SceneSpec& base) {
  std::vector<SceneSpec> primary, fill;
  auto flip_size = [](SceneSpec s, std::size_t i) {
    s.objects[i].size = s.objects[i].size == Size::kSmall ? Size::kLarge : Size::kSmall;
    return s;
  };
  if (subtask == "recognition-color" || subtask == "recognition-shape") {
    const bool color = subtask == "recognition-color";
    for (std::size_t v = 0; v < (color ? kAllColors.size() : kAllShapes.size()); ++v) {
      SceneSpec s = base;
      if (color)
        s.objects[0].color = kAllColors[v];
      else
        s.objects[0].shape = kAllShapes[v];
      primary.push_back(s);
      fill.push_back(flip_size(s, 0));
    }
  } else if (subtask == "pair-binding-color") {
    for (Color a : kAllColors)
      for (Color b : kAllColors) {
        SceneSpec s = base;
        s.objects[0].color = a;
        s.objects[1].color = b;
        (a == base.objects[1].color && b == base.objects[0].color ? primary : fill).push_back(s);
      }
  } else if (subtask == "pair-binding-size") {
    for (Size a : kAllSizes)
      for (Size b : kAllSizes) {
        SceneSpec s = base;
        s.objects[0].size = a;
        s.objects[1].size = b;
        primary.push_back(s);
      }
  } else if (subtask == "binding-shape") {
    for (ShapeKind a : kAllShapes)
      for (ShapeKind b : kAllShapes) {
        SceneSpec s = base;
        s.objects[0].shape = a;
        s.objects[1].shape = b;
        (a == base.objects[1].shape && b == base.objects[0].shape ? primary : fill).push_back(s);
      }
  } else if (subtask == "spatial") {
    for (int r0 = 0; r0 < kGridCells; ++r0)
      for (int c0 = 0; c0 < kGridCells; ++c0)
        for (int r1 = 0; r1 < kGridCells; ++r1)
          for (int c1 = 0; c1 < kGridCells; ++c1)
            for (Relation rel : kAllRelations) {
              SceneSpec s = base;
              s.objects[0].cell = {r0, c0};
              s.objects[1].cell = {r1, c1};
              s.relation = rel;
              if (is_valid(s)) primary.push_back(s);
            }
  } else if (subtask == "swap-object") {
    SceneSpec moved = base;
    std::swap(moved.objects[0].cell, moved.objects[1].cell);
    SceneSpec colors = base;
    std::swap(colors.objects[0].color, colors.objects[1].color);
    SceneSpec shapes = base;
    std::swap(shapes.objects[0].shape, shapes.objects[1].shape);
    primary = {moved, colors, shapes};
    for (std::size_t i = 0; i < 2; ++i)
      for (Color c : kAllColors) {
        SceneSpec s = base;
        s.objects[i].color = c;
        fill.push_back(s);
      }
  } else {
    throw PreconditionError("unknown subtask '" + subtask + "'");
  }
  return {keep_valid(std::move(primary)), keep_valid(std::move(fill))};
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  std::shuffle(v.begin(), v.end(), rng);
}

struct Built {
  TaskInstance task;
  std::vector<SuiteScene> scenes;  // ids are local indices, fixed up later
};

bool pairwise_ok(const SceneSpec& a, const SceneSpec& b) {
  const int d = edit_distance(a, b);
  if (d < 1 || d > 2) return false;
  return !matches(caption_of(a).structure, b) && !matches(caption_of(b).structure, a);
}

std::optional<Built> try_text(const std::string& subtask, std::size_t k, Rng& rng) {
  const SceneSpec gold = sample_scene(rng(), family_for(subtask));
  if (split_of(gold) != "val") return std::nullopt;
  const Caption gc = caption_of(gold);
  auto [primary, fill] = text_pools(subtask, gc);
  shuffle(primary, rng);
  shuffle(fill, rng);
  std::vector<Caption> chosen = {gc};
  std::size_t from_primary = 0;
  auto consider = [&](const Caption& c, bool is_primary) {
    if (chosen.size() >= k || matches(c.structure, gold)) return;
    for (const auto& o : chosen)
      if (equivalent(o.structure, c.structure) || o.text() == c.text()) return;
    chosen.push_back(c);
    from_primary += is_primary;
  };
  for (const auto& c : primary) consider(c, true);
  for (const auto& c : fill) consider(c, false);
  if (chosen.size() < k || from_primary == 0) return std::nullopt;

  Built b;
  b.scenes.push_back({0, gold, rng(), gc.text()});
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) order[i] = i;
  shuffle(order, rng);
  b.task.direction = Direction::kTextRetrieval;
  b.task.subtask = subtask;
  b.task.query_scene = 0;
  for (std::size_t pos = 0; pos < k; ++pos) {
    b.task.candidate_captions.push_back(chosen[order[pos]].text());
    if (order[pos] == 0) b.task.gold = pos;
  }
  return b;
}

// Single edits that change how hard a scene is to render without touching the
// probed attribute's identity: resize one object or move it to another cell.
std::vector<SceneSpec> nuisance_variants(const SceneSpec& s) {
  std::vector<SceneSpec> out;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    SceneSpec r = s;
    r.objects[i].size = r.objects[i].size == Size::kSmall ? Size::kLarge : Size::kSmall;
    out.push_back(r);
    for (int row = 0; row < kGridCells; ++row)
      for (int col = 0; col < kGridCells; ++col) {
        SceneSpec m = s;
        m.objects[i].cell = {row, col};
        if (!(m == s)) out.push_back(m);
      }
  }
  return keep_valid(std::move(out));
}

std::optional<Built> try_image(const std::string& subtask, std::size_t k, double nuisance_rate, Rng& rng) {
  const SceneSpec base = sample_scene(rng(), family_for(subtask));
  auto [primary, fill] = image_pools(subtask, base);
  shuffle(primary, rng);
  shuffle(fill, rng);
  std::vector<SceneSpec> cluster = {base};
  auto consider = [&](const SceneSpec& s) {
    if (cluster.size() >= k) return;
    for (const auto& m : cluster)
      if (m == s || !pairwise_ok(m, s)) return;
    cluster.push_back(s);
  };
  for (const auto& s : primary) consider(s);
  for (const auto& s : fill) consider(s);
  if (cluster.size() < k) return std::nullopt;

  std::bernoulli_distribution take(nuisance_rate);
  for (std::size_t i = 0; i < cluster.size(); ++i) {
    if (!take(rng)) continue;
    auto variants = nuisance_variants(cluster[i]);
    if (variants.empty()) continue;
    const SceneSpec v = variants[std::uniform_int_distribution<std::size_t>(0, variants.size() - 1)(rng)];
    bool ok = true;
    for (std::size_t j = 0; j < cluster.size() && ok; ++j)
      if (j != i) ok = v != cluster[j] && pairwise_ok(cluster[j], v);
    if (ok) cluster[i] = v;
  }

  shuffle(cluster, rng);
  const std::size_t gold = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
  if (split_of(cluster[gold]) != "val") return std::nullopt;
  const Caption query = caption_of(cluster[gold]);
  Built b;
  b.task.direction = Direction::kImageRetrieval;
  b.task.subtask = subtask;
  b.task.query_caption = query.text();
  b.task.gold = gold;
  for (std::size_t i = 0; i < k; ++i) {
    if (matches(query.structure, cluster[i]) != (i == gold))
      throw Error("image candidate set violates the single-gold invariant");
    b.scenes.push_back({i, cluster[i], rng(), caption_of(cluster[i]).text()});
    b.task.candidate_scenes.push_back(i);
  }
  return b;
}

}  // namespace

TaskSuite build_tasks(const TaskConfig& config) {
  if (config.k < 2) throw PreconditionError("k_candidates must be at least 2");
  if (!(config.nuisance_rate >= 0.0 && config.nuisance_rate <= 1.0))
    throw PreconditionError("nuisance_rate must be in [0,1]");
  if (config.n_per_subtask == 0) throw PreconditionError("n_per_subtask must be positive");
  if (!config.image_retrieval && !config.text_retrieval) throw PreconditionError("no task direction selected");
  for (const auto& s : config.subtasks)
    if (std::find(all_subtasks().begin(), all_subtasks().end(), s) == all_subtasks().end())
      throw PreconditionError("unknown subtask '" + s + "'");

  struct Job {
    std::string subtask;
    Direction direction;
    std::size_t index;
  };
  std::vector<Job> jobs;
  for (Direction d : {Direction::kImageRetrieval, Direction::kTextRetrieval}) {
    if ((d == Direction::kImageRetrieval && !config.image_retrieval) ||
        (d == Direction::kTextRetrieval && !config.text_retrieval))
      continue;
    for (const auto& s : config.subtasks)
      for (std::size_t i = 0; i < config.n_per_subtask; ++i) jobs.push_back({s, d, i});
  }

  std::vector<Built> built(jobs.size());
  parallel_for(jobs.size(), config.threads, [&](std::size_t j) {
    const Job& job = jobs[j];
    const std::uint64_t seed = derive_seed(derive_seed(derive_seed(config.seed, job.subtask),
                                                       std::string(name_of(job.direction))),
                                           job.index);
    Rng rng = make_rng(seed);
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      auto b = job.direction == Direction::kTextRetrieval ? try_text(job.subtask, config.k, rng)
                                                          : try_image(job.subtask, config.k, config.nuisance_rate, rng);
      if (b) {
        built[j] = std::move(*b);
        return;
      }
    }
    throw Error("could not build a " + job.subtask + " instance with k=" + std::to_string(config.k));
  });

  TaskSuite suite;
  suite.config = config;
  for (std::size_t j = 0; j < built.size(); ++j) {
    Built& b = built[j];
    const std::size_t offset = suite.scenes.size();
    for (auto& s : b.scenes) {
      s.id += offset;
      suite.scenes.push_back(s);
    }
    b.task.id = j;
    b.task.query_scene += b.task.direction == Direction::kTextRetrieval ? offset : 0;
    for (auto& c : b.task.candidate_scenes) c += offset;
    suite.tasks.push_back(std::move(b.task));
  }
  suite.images.resize(suite.scenes.size());
  parallel_for(suite.scenes.size(), config.threads,
               [&](std::size_t i) { suite.images[i] = render(suite.scenes[i].scene, suite.scenes[i].render_seed); });
  return suite;
}

void write_suite(const TaskSuite& suite, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& c = suite.config;
  write_jsonl({nlohmann::json{{"seed", c.seed},
                              {"k", c.k},
                              {"n_per_subtask", c.n_per_subtask},
                              {"image_retrieval", c.image_retrieval},
                              {"text_retrieval", c.text_retrieval},
                              {"nuisance_rate", c.nuisance_rate},
                              {"subtasks", c.subtasks}}},
              dir / "suite.json");
  std::vector<nlohmann::json> scenes;
  for (const auto& s : suite.scenes)
    scenes.push_back({{"id", s.id}, {"scene", scene_to_json(s.scene)}, {"render_seed", s.render_seed},
                      {"caption", s.caption}});
  write_jsonl(scenes, dir / "scenes.jsonl");
  write_images(suite.images, dir / "images.bin");
  std::vector<nlohmann::json> tasks;
  for (const auto& t : suite.tasks) {
    nlohmann::json j = {{"id", t.id}, {"direction", name_of(t.direction)}, {"subtask", t.subtask}, {"gold", t.gold}};
    if (t.direction == Direction::kTextRetrieval) {
      j["query_scene"] = t.query_scene;
      j["candidate_captions"] = t.candidate_captions;
    } else {
      j["query_caption"] = t.query_caption;
      j["candidate_scenes"] = t.candidate_scenes;
    }
    tasks.push_back(std::move(j));
  }
  write_jsonl(tasks, dir / "tasks.jsonl");
}

TaskSuite read_suite(const std::filesystem::path& dir) {
  TaskSuite suite;
  try {
    const auto meta = read_jsonl(dir / "suite.json");
    if (meta.size() != 1) throw IoError("malformed " + (dir / "suite.json").string());
    auto& c = suite.config;
    c.seed = meta[0].at("seed").get<std::uint64_t>();
    c.k = meta[0].at("k").get<std::size_t>();
    c.n_per_subtask = meta[0].at("n_per_subtask").get<std::size_t>();
    c.image_retrieval = meta[0].at("image_retrieval").get<bool>();
    c.text_retrieval = meta[0].at("text_retrieval").get<bool>();
    c.nuisance_rate = meta[0].at("nuisance_rate").get<double>();
    c.subtasks = meta[0].at("subtasks").get<std::vector<std::string>>();
    for (const auto& j : read_jsonl(dir / "scenes.jsonl"))
      suite.scenes.push_back({j.at("id").get<std::size_t>(), scene_from_json(j.at("scene")),
                              j.at("render_seed").get<std::uint64_t>(), j.at("caption").get<std::string>()});
    for (const auto& j : read_jsonl(dir / "tasks.jsonl")) {
      TaskInstance t;
      t.id = j.at("id").get<std::size_t>();
      t.direction = direction_from(j.at("direction").get<std::string>());
      t.subtask = j.at("subtask").get<std::string>();
      t.gold = j.at("gold").get<std::size_t>();
      if (t.direction == Direction::kTextRetrieval) {
        t.query_scene = j.at("query_scene").get<std::size_t>();
        t.candidate_captions = j.at("candidate_captions").get<std::vector<std::string>>();
      } else {
        t.query_caption = j.at("query_caption").get<std::string>();
        t.candidate_scenes = j.at("candidate_scenes").get<std::vector<std::size_t>>();
      }
      if (t.gold >= t.k()) throw IoError("gold index out of range in task " + std::to_string(t.id));
      suite.tasks.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(dir.string() + ": " + e.what());
  }
  suite.images = read_images(dir / "images.bin");
  if (suite.images.size() != suite.scenes.size()) throw IoError("image blob does not match scenes in " + dir.string());
  for (std::size_t i = 0; i < suite.scenes.size(); ++i)
    if (suite.scenes[i].id != i) throw IoError("scene ids out of order in " + dir.string());
  return suite;
}

}  // namespace ditm::scenegen
