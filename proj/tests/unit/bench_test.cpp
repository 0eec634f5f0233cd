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

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ditm/bench/bench.hpp"
#include "../support/stats.hpp"
#include "ditm/common/error.hpp"
#include "ditm/common/fileio.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/diffusion/schedule.hpp"

namespace ditm::bench {
namespace {

using diffusion::TextInput;
using numerics::ParameterStore;
using numerics::Tensor;
using scenegen::Direction;

// Index-only suite: enough for scorer-level runs, no images.
TaskSuite synthetic_suite(std::size_t n, Direction dir, std::size_t k = 4, std::uint64_t seed = 1) {
  TaskSuite s;
  s.config.k = k;
  Rng rng = make_rng(seed);
  const auto& subtasks = scenegen::all_subtasks();
  for (std::size_t i = 0; i < n; ++i) {
    TaskInstance t;
    t.id = i;
    t.direction = dir;
    t.subtask = subtasks[i % subtasks.size()];
    for (std::size_t c = 0; c < k; ++c) {
      t.candidate_captions.push_back("a small red square");
      t.candidate_scenes.push_back(c);
    }
    if (dir == Direction::kTextRetrieval) t.candidate_scenes.clear();
    else t.candidate_captions.clear();
    t.gold = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
    s.tasks.push_back(std::move(t));
  }
  return s;
}

const TaskSuite& real_suite() {
  static const TaskSuite s = [] {
    scenegen::TaskConfig cfg;
    cfg.seed = 4;
    cfg.n_per_subtask = 2;
    return scenegen::build_tasks(cfg);
  }();
  return s;
}

const ParameterStore& model_params() {
  static const ParameterStore p = [] {
    diffusion::DenoiserConfig c;
    c.width = 4;
    ParameterStore s = diffusion::init_denoiser(c, 1);
    Rng rng = make_rng(2);
    std::normal_distribution<double> n(0.0, 0.2);
    auto lock = s.lock_exclusive();
    for (const auto& name : s.names())
      for (double& v : s.mutable_at(name).data()) v += n(rng);
    return s;
  }();
  return p;
}

class CountingPredictor : public itm::NoisePredictor {
 public:
  Tensor predict(const Tensor& x_t, std::span<const std::size_t>, std::span<const TextInput>) const override {
    ++calls;
    return Tensor(x_t.shape(), 0.0);
  }
  mutable std::atomic<int> calls{0};
};

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("ditm_bench_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

TEST(Mode, NamesRoundTripAndDirections) {
  for (Mode m : {Mode::kText, Mode::kImageNaive, Mode::kImageNormalized, Mode::kTextGraynorm})
    EXPECT_EQ(mode_from(name_of(m)), m);
  EXPECT_THROW(mode_from("image"), PreconditionError);
  EXPECT_EQ(direction_of(Mode::kTextGraynorm), Direction::kTextRetrieval);
  EXPECT_EQ(direction_of(Mode::kImageNaive), Direction::kImageRetrieval);
}

TEST(Wilson, MatchesPublishedIntervals) {
  // 95% Wilson score intervals as tabulated in Newcombe (1998).
  auto a = make_accuracy(81, 263);
  EXPECT_NEAR(a.ci_low, 0.2553, 5e-4);
  EXPECT_NEAR(a.ci_high, 0.3662, 5e-4);
  a = make_accuracy(15, 148);
  EXPECT_NEAR(a.ci_low, 0.0624, 5e-4);
  EXPECT_NEAR(a.ci_high, 0.1605, 5e-4);
  a = make_accuracy(0, 20);
  EXPECT_EQ(a.ci_low, 0.0);
  EXPECT_NEAR(a.ci_high, 0.1611, 5e-4);
  a = make_accuracy(1, 29);
  EXPECT_NEAR(a.ci_low, 0.0061, 5e-4);
  EXPECT_NEAR(a.ci_high, 0.1718, 5e-4);
  EXPECT_THROW(make_accuracy(3, 2), PreconditionError);
}

TEST(RunSuite, OracleScorerIsPerfect) {
  for (Direction d : {Direction::kTextRetrieval, Direction::kImageRetrieval}) {
    const TaskSuite s = synthetic_suite(70, d);
    const Mode m = d == Direction::kTextRetrieval ? Mode::kText : Mode::kImageNormalized;
    const SuiteResult r = run_suite(s, m, [](const TaskInstance& t) {
      std::vector<double> v(t.k(), 1.0);
      v[t.gold] = 0.0;
      return v;
    });
    EXPECT_EQ(r.overall.accuracy, 1.0);
    EXPECT_EQ(r.overall.total, 70u);
    EXPECT_EQ(r.per_subtask.size(), 7u);
    for (const auto& [name, a] : r.per_subtask) EXPECT_EQ(a.accuracy, 1.0) << name;
    EXPECT_DOUBLE_EQ(r.chance, 0.25);
  }
}

TEST(RunSuite, RandomScorerSitsAtChance) {
  const std::size_t n = 2000, k = 4;
  const TaskSuite s = synthetic_suite(n, Direction::kImageRetrieval, k);
  const auto run = [&](std::uint64_t seed) {
    Rng rng = make_rng(seed);
    return run_suite(s, Mode::kImageNaive, [&](const TaskInstance& t) {
      std::vector<double> v(t.k());
      for (double& x : v) x = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      return v;
    });
  };
  const SuiteResult r = run(11);
  const std::size_t lo = ditm::testing::binomial_quantile(n, 1.0 / k, 0.005);
  const std::size_t hi = ditm::testing::binomial_quantile(n, 1.0 / k, 0.995);
  EXPECT_GE(r.overall.correct, lo);
  EXPECT_LE(r.overall.correct, hi);
  const SuiteResult again = run(11);
  EXPECT_EQ(again.overall.correct, r.overall.correct);
  for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(again.instances[i].ranking, r.instances[i].ranking);
}

TEST(RunSuite, TiesGoToLowestIndexAndAreFlagged) {
  TaskSuite s = synthetic_suite(4, Direction::kTextRetrieval);
  for (std::size_t i = 0; i < 4; ++i) s.tasks[i].gold = i;
  const SuiteResult r = run_suite(s, Mode::kText, [](const TaskInstance& t) { return std::vector<double>(t.k(), 0.5); });
  EXPECT_EQ(r.degenerate, 4u);
  EXPECT_EQ(r.overall.correct, 1u);
  EXPECT_TRUE(r.instances[0].correct);
  EXPECT_EQ(r.instances[3].gold_rank, 4u);
}

TEST(RunSuite, ModeDirectionMismatchFailsBeforeScoring) {
  const TaskSuite s = synthetic_suite(10, Direction::kTextRetrieval);
  int calls = 0;
  EXPECT_THROW(run_suite(s, Mode::kImageNaive,
                         [&](const TaskInstance& t) {
                           ++calls;
                           return std::vector<double>(t.k(), 0.0);
                         }),
               PreconditionError);
  EXPECT_EQ(calls, 0);
  CountingPredictor model;
  EvalConfig cfg;
  cfg.mode = Mode::kImageNormalized;
  EXPECT_THROW(evaluate(model, s, cfg), PreconditionError);
  EXPECT_EQ(model.calls.load(), 0);
}

TEST(RunSuite, ScorerMustCoverEveryCandidate) {
  const TaskSuite s = synthetic_suite(3, Direction::kTextRetrieval);
  EXPECT_THROW(run_suite(s, Mode::kText, [](const TaskInstance&) { return std::vector<double>{0.0}; }),
               PreconditionError);
  EXPECT_THROW(run_suite(s, Mode::kText,
                         [](const TaskInstance& t) { return std::vector<double>(t.k(), std::nan("")); }),
               NumericError);
}

TEST(Evaluate, TextRecordsMatchDirectScoring) {
  const TaskSuite& s = real_suite();
  itm::DenoiserPredictor model(model_params());
  EvalConfig cfg;
  cfg.bank_size = 5;
  cfg.bank_seed = 8;
  const SuiteResult r = evaluate(model, s, cfg);
  const auto bank = itm::make_bank(5, 8, diffusion::make_schedule());
  ASSERT_EQ(r.instances.size(), 14u);
  EXPECT_EQ(r.bank_id, bank.id());
  for (std::size_t n : {0u, 9u}) {
    const InstanceResult& ir = r.instances[n];
    const TaskInstance& t = s.tasks[applicable_tasks(s, Mode::kText)[n]];
    const Tensor img = scenegen::to_chw(s.images[t.query_scene]);
    const double uncond = itm::unconditional_error(model, img, bank);
    for (std::size_t c = 0; c < t.k(); ++c) {
      EXPECT_EQ(ir.records[c].conditional, itm::conditional_error(model, img, TextInput::of(t.candidate_captions[c]), bank));
      EXPECT_EQ(ir.records[c].unconditional, uncond);
      EXPECT_EQ(ir.records[c].bank_id, bank.id());
    }
    std::vector<double> cond;
    for (const auto& rec : ir.records) cond.push_back(rec.conditional);
    EXPECT_EQ(ir.ranking, itm::rank_ascending(cond));
  }
}

TEST(Evaluate, ImageModesShareErrorsAndRankDifferently) {
  const TaskSuite& s = real_suite();
  itm::DenoiserPredictor model(model_params());
  const auto bank = itm::make_bank(4, 2, diffusion::make_schedule());
  const auto errors = score_suite(model, s, Mode::kImageNaive, bank);
  const SuiteResult naive = rank_suite(s, Mode::kImageNaive, errors, 2);
  const SuiteResult norm = rank_suite(s, Mode::kImageNormalized, errors, 2);
  EXPECT_THROW(rank_suite(s, Mode::kText, errors, 2), PreconditionError);
  ASSERT_EQ(naive.instances.size(), norm.instances.size());
  const TaskInstance& t = s.tasks[errors[3].task];
  const TextInput caption = TextInput::of(t.query_caption);
  std::vector<double> cond, diff;
  for (std::size_t c = 0; c < t.k(); ++c) {
    const Tensor img = scenegen::to_chw(s.images[t.candidate_scenes[c]]);
    const auto rec = itm::score(model, img, caption, bank);
    EXPECT_EQ(norm.instances[3].records[c].normalized, rec.normalized);
    cond.push_back(rec.conditional);
    diff.push_back(rec.normalized);
  }
  EXPECT_EQ(naive.instances[3].ranking, itm::rank_ascending(cond));
  EXPECT_EQ(norm.instances[3].ranking, itm::rank_ascending(diff));
}

TEST(Evaluate, GraynormSubtractsGrayError) {
  const TaskSuite& s = real_suite();
  itm::DenoiserPredictor model(model_params());
  EvalConfig cfg;
  cfg.mode = Mode::kTextGraynorm;
  cfg.bank_size = 3;
  const SuiteResult r = evaluate(model, s, cfg);
  itm::GrayCache gray(model, itm::make_bank(3, 0, diffusion::make_schedule()));
  const TaskInstance& t = s.tasks[applicable_tasks(s, Mode::kTextGraynorm)[5]];
  for (std::size_t c = 0; c < t.k(); ++c) {
    const auto& rec = r.instances[5].records[c];
    EXPECT_EQ(rec.unconditional, gray.error(TextInput::of(t.candidate_captions[c])));
    EXPECT_EQ(rec.normalized, rec.conditional - rec.unconditional);
  }
}

TEST(Evaluate, BitIdenticalAcrossRunsAndThreads) {
  const TaskSuite& s = real_suite();
  itm::DenoiserPredictor model(model_params());
  const auto dir = temp_dir("repro");
  EvalConfig cfg;
  cfg.mode = Mode::kImageNormalized;
  cfg.bank_size = 3;
  cfg.bank_seed = 5;
  write_result(evaluate(model, s, cfg), dir / "a.json");
  write_result(evaluate(model, s, cfg), dir / "b.json");
  cfg.threads = 3;
  write_result(evaluate(model, s, cfg), dir / "c.json");
  EXPECT_EQ(read_text(dir / "a.json"), read_text(dir / "b.json"));
  EXPECT_EQ(read_text(dir / "a.json"), read_text(dir / "c.json"));
  std::filesystem::remove_all(dir);
}

TEST(Sweep, PrefixesMatchSeparateBanks) {
  const TaskSuite& s = real_suite();
  itm::DenoiserPredictor model(model_params());
  std::vector<InstanceErrors> errors;
  EvalConfig cfg;
  cfg.bank_size = 6;
  cfg.bank_seed = 3;
  evaluate(model, s, cfg, &errors);
  const auto curve = sweep_bank_size(s, Mode::kText, errors, {2, 2, 6}, 3);
  ASSERT_EQ(curve.size(), 3u);
  EXPECT_EQ(curve[0].accuracy.correct, curve[1].accuracy.correct);
  cfg.bank_size = 2;
  const SuiteResult small = evaluate(model, s, cfg);
  EXPECT_EQ(small.overall.correct, curve[0].accuracy.correct);
  const SuiteResult from_prefix = rank_suite(s, Mode::kText, errors, 3, 2);
  EXPECT_EQ(from_prefix.bank_id, small.bank_id);
  for (std::size_t i = 0; i < small.instances.size(); ++i)
    for (std::size_t c = 0; c < small.instances[i].records.size(); ++c)
      EXPECT_EQ(small.instances[i].records[c].conditional, from_prefix.instances[i].records[c].conditional);
  EXPECT_THROW(sweep_bank_size(s, Mode::kText, errors, {6, 2}, 3), PreconditionError);
  EXPECT_THROW(sweep_bank_size(s, Mode::kText, errors, {7}, 3), PreconditionError);

  const auto dir = temp_dir("sweep");
  write_sweep_csv(curve, dir / "sweep.csv");
  std::istringstream in(read_text(dir / "sweep.csv"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4u);
  std::filesystem::remove_all(dir);
}

TEST(Results, JsonAndDumpRoundTrip) {
  const TaskSuite s = synthetic_suite(21, Direction::kTextRetrieval);
  const SuiteResult r = run_suite(s, Mode::kText, [](const TaskInstance& t) {
    std::vector<double> v;
    for (std::size_t c = 0; c < t.k(); ++c) v.push_back(0.1 * static_cast<double>((c + t.id) % t.k()) + 1.0 / 3.0);
    return v;
  });
  const auto dir = temp_dir("json");
  write_result(r, dir / "r.json");
  const SuiteResult back = read_result(dir / "r.json");
  EXPECT_EQ(back.overall.correct, r.overall.correct);
  EXPECT_EQ(back.per_subtask.size(), r.per_subtask.size());
  EXPECT_EQ(back.suite_id, r.suite_id);
  ASSERT_EQ(back.instances.size(), r.instances.size());
  EXPECT_EQ(back.instances[4].records[2].conditional, r.instances[4].records[2].conditional);
  EXPECT_EQ(back.instances[4].ranking, r.instances[4].ranking);
  write_score_dump(r, dir / "scores.csv");
  std::istringstream in(read_text(dir / "scores.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "instance_id,subtask,candidate_id,is_gold,conditional,unconditional,normalized,rank,bank_id");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 21u * 4u);
  std::ofstream(dir / "bad.json") << "{";
  EXPECT_THROW(read_result(dir / "bad.json"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Compare, DeltasChanceRowAndSeparation) {
  const TaskSuite s = synthetic_suite(140, Direction::kImageRetrieval);
  const auto perfect = run_suite(s, Mode::kImageNormalized, [](const TaskInstance& t) {
    std::vector<double> v(t.k(), 1.0);
    v[t.gold] = 0.0;
    return v;
  });
  const auto worst = run_suite(s, Mode::kImageNaive, [](const TaskInstance& t) {
    std::vector<double> v(t.k(), 0.0);
    v[t.gold] = 1.0;
    return v;
  });
  const Comparison c = compare({worst, perfect}, {"naive", "normalized"}, 5);
  ASSERT_EQ(c.rows.size(), 7u + 2u);
  EXPECT_EQ(c.rows.front().subtask, scenegen::all_subtasks().front());
  const auto& overall = c.rows[7];
  EXPECT_EQ(overall.subtask, "overall");
  EXPECT_DOUBLE_EQ(overall.delta[1], 1.0);
  EXPECT_DOUBLE_EQ(overall.delta_low[1], 1.0);
  EXPECT_TRUE(overall.separated[1]);
  EXPECT_FALSE(overall.separated[0]);
  EXPECT_EQ(c.rows.back().subtask, "chance");
  EXPECT_DOUBLE_EQ(c.rows.back().accuracy[1], 0.25);
  EXPECT_NE(to_markdown(c).find("| overall | 0.0 | 100.0 | +100.0"), std::string::npos);
  EXPECT_NE(to_csv(c).find("overall,normalized,1,1,1,1,1"), std::string::npos);

  const TaskSuite other = synthetic_suite(140, Direction::kImageRetrieval, 4, 2);
  const auto elsewhere = run_suite(other, Mode::kImageNaive, [](const TaskInstance& t) {
    return std::vector<double>(t.k(), 0.0);
  });
  EXPECT_THROW(compare({worst, elsewhere}, {"a", "b"}), PreconditionError);
  EXPECT_THROW(compare({worst, perfect}, {"a"}), PreconditionError);
}

TEST(Compare, PairedBootstrapIsSeededAndCoversDelta) {
  const TaskSuite s = synthetic_suite(700, Direction::kTextRetrieval);
  Rng rng = make_rng(3);
  std::vector<int> flip(700);
  for (int& f : flip) f = std::bernoulli_distribution(0.3)(rng);
  const auto a = run_suite(s, Mode::kText, [](const TaskInstance& t) {
    std::vector<double> v(t.k(), 1.0);
    v[(t.gold + (t.id % 2)) % t.k()] = 0.0;
    return v;
  });
  const auto b = run_suite(s, Mode::kText, [&](const TaskInstance& t) {
    std::vector<double> v(t.k(), 1.0);
    v[(t.gold + (flip[t.id] ? 1 : 0)) % t.k()] = 0.0;
    return v;
  });
  const Comparison c1 = compare({a, b}, {"a", "b"}, 9), c2 = compare({a, b}, {"a", "b"}, 9);
  const auto& row = c1.rows[7];
  EXPECT_EQ(row.delta_low[1], c2.rows[7].delta_low[1]);
  EXPECT_EQ(row.delta_high[1], c2.rows[7].delta_high[1]);
  EXPECT_NEAR(row.delta[1], b.overall.accuracy - a.overall.accuracy, 1e-15);
  EXPECT_LT(row.delta_low[1], row.delta[1]);
  EXPECT_GT(row.delta_high[1], row.delta[1]);
  // Paired resampling: spread close to the normal approximation of a paired difference.
  double m = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < 700; ++i) {
    const double d = static_cast<double>(b.instances[i].correct) - static_cast<double>(a.instances[i].correct);
    m += d;
    m2 += d * d;
  }
  m /= 700.0;
  const double se = std::sqrt((m2 / 700.0 - m * m) / 700.0);
  EXPECT_NEAR(row.delta_high[1] - row.delta_low[1], 2 * 1.96 * se, 0.25 * 2 * 1.96 * se);
}

}  // namespace
}  // namespace ditm::bench
