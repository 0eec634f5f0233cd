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
#include <span>
#include <string>
#include <vector>

#include "ditm/itm/scorer.hpp"
#include "ditm/scenegen/render.hpp"
#include "ditm/scenegen/scene.hpp"

namespace ditm::bias {

using scenegen::Image;

/// Association score sigma(image, caption); higher means a better match.
/// Must be safe to call concurrently.
using PairScorer = std::function<double(const Image&, const std::string&)>;

/// sigma = -(conditional - unconditional error) over a shared bank, so the
/// orientation matches a similarity. Holds references to model and bank.
PairScorer diffusion_scorer(const itm::NoisePredictor& model, const itm::NoiseBank& bank);

/// Target image groups X, Y and attribute caption sets A, B.
struct BiasSpec {
  std::vector<Image> X, Y;
  std::vector<std::string> A, B;
};

/// Mean of sigma over A minus mean over B for one image.
double psi(const Image& item, std::span<const std::string> A, std::span<const std::string> B,
           const PairScorer& sigma);

/// psi for X then Y. Each (image, caption) pair is scored once, in parallel.
/// A scorer failure is rethrown naming the group and item.
std::vector<double> psi_values(const BiasSpec& spec, const PairScorer& sigma, int threads = 1);

/// (mean psi_x - mean psi_y) / sample std (n-1) of the pooled values.
/// Throws DegenerateError when the pooled std is zero.
double effect_size(std::span<const double> psi_x, std::span<const double> psi_y);
double effect_size(const BiasSpec& spec, const PairScorer& sigma, int threads = 1);

struct PermutationOptions {
  /// Enumerate every relabeling when there are at most this many.
  std::uint64_t max_exact = 2'000'000;
  /// Monte Carlo relabelings, the identity included.
  std::size_t n_mc = 10'000;
  std::uint64_t seed = 0;
};

struct PermutationResult {
  double p_value = 1.0;
  std::uint64_t n_permutations = 0;
  bool exact = false;
};

/// One-sided test of s = mean psi_x - mean psi_y over equal-size relabelings
/// of the pooled items: p = fraction with s >= observed. Statistics within a
/// relative 1e-12 of the observed value count as ties (>=), so relabelings
/// that only swap equal values are not lost to rounding.
PermutationResult permutation_test(std::span<const double> psi_x, std::span<const double> psi_y,
                                   const PermutationOptions& options = {});

/// C(n, k), saturating at UINT64_MAX.
std::uint64_t binomial(std::uint64_t n, std::uint64_t k);

struct EffectSizeResult {
  double d = 0.0;
  double p_value = 1.0;
  std::uint64_t n_permutations = 0;
  bool exact = false;
  std::vector<double> psi;  // X then Y
};

EffectSizeResult evaluate(const BiasSpec& spec, const PairScorer& sigma, const PermutationOptions& options = {},
                          int threads = 1);

/// A group image: a scene rendered with a seed.
struct GroupItem {
  scenegen::SceneSpec scene;
  std::uint64_t render_seed = 0;
};

struct BiasTest {
  std::string x, y, a, b;
};

/// On disk (JSON):
///   {"groups": {"<name>": [{"scene": {...}, "render_seed": n} | {"caption": "...", "seed": n}, ...]},
///    "attributes": {"<name>": ["caption", ...]},
///    "tests": [{"x": "...", "y": "...", "a": "...", "b": "..."}],
///    "noise_samples": 20, "bank_seed": 0, "alpha": 0.01,
///    "permutation": {"max_exact": 2000000, "n_mc": 10000, "seed": 0}}
/// A caption item is expanded to a scene satisfying it (cells and unnamed
/// sizes drawn from the seed).
struct BiasSuiteConfig {
  std::map<std::string, std::vector<GroupItem>> groups;
  std::map<std::string, std::vector<std::string>> attributes;
  std::vector<BiasTest> tests;
  std::size_t noise_samples = 20;
  std::uint64_t bank_seed = 0;
  double alpha = 0.01;
  PermutationOptions permutation;
};

/// A scene satisfying `caption`, drawn from `seed`.
scenegen::SceneSpec scene_for(std::string_view caption, std::uint64_t seed);

/// Synthetic groups (scene color families) and color-word attribute sets,
/// including a red-vs-blue positive control and unrelated-group rows.
BiasSuiteConfig default_bias_config();
BiasSuiteConfig read_bias_config(const std::filesystem::path& path);
void write_bias_config(const BiasSuiteConfig& config, const std::filesystem::path& path);

struct BiasRow {
  BiasTest test;
  bool degenerate = false;
  bool significant = false;  // p < alpha
  EffectSizeResult result;   // d and p are 0 / 1 when degenerate
};

struct BiasTable {
  std::vector<BiasRow> rows;
  /// Mean |d| over non-degenerate rows (0 when there are none).
  double average_abs_effect = 0.0;
  double alpha = 0.01;
};

/// One row per configured test. Throws PreconditionError naming a missing
/// group or attribute set.
BiasTable bias_suite(const BiasSuiteConfig& config, const PairScorer& sigma, int threads = 1);

std::string to_csv(const BiasTable& t);
/// Significant rows are starred.
std::string to_markdown(const BiasTable& t);

}  // namespace ditm::bias
