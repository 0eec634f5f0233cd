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
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ditm/itm/scorer.hpp"
#include "ditm/scenegen/tasks.hpp"

namespace ditm::bench {

using itm::ScoreRecord;
using scenegen::TaskInstance;
using scenegen::TaskSuite;

/// How candidates are ranked (ascending):
///   text              conditional error of each caption on the query image
///   image-naive       conditional error of each image under the query caption
///   image-normalized  conditional minus unconditional error of each image
///   text-graynorm     conditional error minus the caption's error on a gray image
enum class Mode { kText, kImageNaive, kImageNormalized, kTextGraynorm };

std::string_view name_of(Mode m);
Mode mode_from(std::string_view name);
scenegen::Direction direction_of(Mode m);

/// Indices of the suite's tasks that `mode` applies to. Throws
/// PreconditionError when there are none (mode/direction mismatch).
std::vector<std::size_t> applicable_tasks(const TaskSuite& suite, Mode mode);

/// Stable identity of a suite's task content (hex FNV-1a).
std::string suite_fingerprint(const TaskSuite& suite);

/// Per-sample errors of one instance, kept so any bank prefix can be ranked.
/// `reference` is the unconditional error (text, image modes) or the gray
/// image's error (text-graynorm), per candidate.
struct InstanceErrors {
  std::size_t task = 0;  // index into suite.tasks
  Mode mode = Mode::kText;
  std::vector<std::vector<double>> conditional;  // [candidate][sample]
  std::vector<std::vector<double>> reference;    // [candidate][sample]
};

/// Scores every applicable instance against one shared bank. Instances run in
/// parallel; the output is identical for any thread count.
std::vector<InstanceErrors> score_suite(const itm::NoisePredictor& model, const TaskSuite& suite, Mode mode,
                                        const itm::NoiseBank& bank, int threads = 1);

struct InstanceResult {
  std::size_t id = 0;
  std::string subtask;
  std::size_t gold = 0;
  std::vector<std::size_t> ranking;
  std::size_t gold_rank = 0;  // 1-based position of the gold candidate
  bool correct = false;
  bool degenerate = false;  // all candidates tied
  std::vector<ScoreRecord> records;
};

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
  double ci_low = 0.0, ci_high = 0.0;  // Wilson 95%
};

Accuracy make_accuracy(std::size_t correct, std::size_t total);

struct SuiteResult {
  std::string mode;
  std::string suite_id;
  std::string bank_id;
  double chance = 0.0;  // 1/k from the suite config
  Accuracy overall;
  std::map<std::string, Accuracy> per_subtask;
  std::size_t degenerate = 0;
  std::vector<InstanceResult> instances;
};

/// Ranks using the first `bank_size` samples of each instance (0: all) of a
/// bank drawn with `bank_seed`. Image modes may share one scoring: naive and
/// normalized read the same errors.
SuiteResult rank_suite(const TaskSuite& suite, Mode mode, const std::vector<InstanceErrors>& errors,
                       std::uint64_t bank_seed, std::size_t bank_size = 0);

/// Lower-is-better score per candidate for one instance.
using CandidateScorer = std::function<std::vector<double>(const TaskInstance&)>;

/// Runs an arbitrary scorer over the applicable instances; the records carry
/// the score as `conditional` with zero `unconditional`.
SuiteResult run_suite(const TaskSuite& suite, Mode mode, const CandidateScorer& scorer);

struct EvalConfig {
  Mode mode = Mode::kText;
  std::size_t bank_size = 10;
  std::uint64_t bank_seed = 0;
  int threads = 1;
};

/// score_suite + rank_suite with a fresh bank from the config.
SuiteResult evaluate(const itm::NoisePredictor& model, const TaskSuite& suite, const EvalConfig& config,
                     std::vector<InstanceErrors>* errors_out = nullptr);

struct SweepPoint {
  std::size_t bank_size = 0;
  Accuracy accuracy;
};

/// Accuracy at each bank size using nested prefixes of one scored bank.
/// Sizes must be ascending and no larger than the scored bank.
std::vector<SweepPoint> sweep_bank_size(const TaskSuite& suite, Mode mode, const std::vector<InstanceErrors>& errors,
                                        const std::vector<std::size_t>& sizes, std::uint64_t bank_seed);

struct ComparisonRow {
  std::string subtask;  // "overall" and "chance" rows included
  std::vector<double> accuracy;
  std::vector<double> delta;        // vs. the first result
  std::vector<double> delta_low;    // bootstrap 95% interval of the delta
  std::vector<double> delta_high;
  std::vector<bool> separated;      // Wilson CIs of this result and the first do not overlap
};

struct Comparison {
  std::vector<std::string> labels;
  std::vector<ComparisonRow> rows;
};

/// Side-by-side comparison against results[0]. Paired bootstrap over
/// instances (1000 resamples by default). Throws if the results do not cover
/// the same suite instances.
Comparison compare(const std::vector<SuiteResult>& results, const std::vector<std::string>& labels,
                   std::uint64_t seed = 0, std::size_t resamples = 1000);

std::string to_markdown(const Comparison& c);
std::string to_csv(const Comparison& c);

void write_result(const SuiteResult& r, const std::filesystem::path& path);
SuiteResult read_result(const std::filesystem::path& path);
/// One row per (instance, candidate).
void write_score_dump(const SuiteResult& r, const std::filesystem::path& path);
void write_sweep_csv(const std::vector<SweepPoint>& curve, const std::filesystem::path& path);

}  // namespace ditm::bench
