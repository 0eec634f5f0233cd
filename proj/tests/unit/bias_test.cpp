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

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "ditm/bias/bias.hpp"
#include "ditm/common/error.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/diffusion/schedule.hpp"
#include "ditm/scenegen/caption.hpp"
#include "../support/bias_oracles.hpp"

namespace ditm::bias {
namespace {

using namespace ditm::testing;

TEST(Psi, LookupArithmetic) {
  const std::vector<std::vector<double>> table = {{2.0, 4.0, 1.0}};
  const auto sigma = table_scorer(table);
  const std::vector<std::string> A = {"c0", "c1"}, B = {"c2"};
  EXPECT_DOUBLE_EQ(psi(item(0), A, B, sigma), 2.0);
  EXPECT_EQ(psi(item(0), A, A, sigma), 0.0);
  const PairScorer constant = [](const Image&, const std::string&) { return 0.7; };
  EXPECT_EQ(psi(item(0), A, B, constant), 0.0);
  EXPECT_THROW(psi(item(0), {}, B, sigma), PreconditionError);
}

TEST(EffectSize, TwoItemExample) {
  const std::vector<double> x = {1.0}, y = {-1.0};
  EXPECT_NEAR(effect_size(x, y), std::sqrt(2.0), 1e-15);
  const std::vector<double> same = {0.3, 0.3};
  EXPECT_THROW(effect_size(same, same), DegenerateError);
}

TEST(EffectSize, MatchesOracleOnRandomInstances) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Instance in = random_instance(s, 40);
    const double d = effect_size(in.spec, table_scorer(in.table), 2);
    EXPECT_NEAR(d, oracle_d(in), 1e-10) << "instance " << s;
  }
}

TEST(EffectSize, AntisymmetricAndScaleInvariant) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    Instance in = random_instance(100 + s, 30);
    const double d = effect_size(in.spec, table_scorer(in.table));
    BiasSpec swapped = in.spec;
    std::swap(swapped.X, swapped.Y);
    EXPECT_EQ(effect_size(swapped, table_scorer(in.table)), -d);
    // Power-of-two scaling and small integer shifts are exact in floating point.
    auto scaled = in.table;
    for (auto& row : scaled)
      for (double& v : row) v *= 4.0;
    EXPECT_EQ(effect_size(in.spec, table_scorer(scaled)), d);
    // Shifts are exact when every mean is: integer sigma, power-of-two set sizes.
    BiasSpec pow2 = in.spec;
    pow2.A.resize(std::bit_floor(pow2.A.size()));
    pow2.B.resize(std::bit_floor(pow2.B.size()));
    auto ints = in.table;
    for (auto& row : ints)
      for (double& v : row) v = std::round(8 * v);
    auto shifted = ints;
    for (auto& row : shifted)
      for (double& v : row) v += 3.0;
    try {
      EXPECT_EQ(effect_size(pow2, table_scorer(shifted)), effect_size(pow2, table_scorer(ints)));
    } catch (const DegenerateError&) {
      EXPECT_THROW(effect_size(pow2, table_scorer(shifted)), DegenerateError);
    }
  }
}

TEST(EffectSize, ScorerFailureNamesItem) {
  const Instance in = random_instance(5, 10);
  const PairScorer failing = [](const Image& img, const std::string&) -> double {
    if (item_index(img) == 0) throw NumericError("boom");
    return 1.0;
  };
  try {
    psi_values(in.spec, failing);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("X[0]"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
  }
  BiasSpec overlap = in.spec;
  overlap.Y.push_back(overlap.X.front());
  EXPECT_THROW(psi_values(overlap, table_scorer(in.table)), PreconditionError);
}

TEST(Permutation, SeparatedGroupsGiveOneOverChoose) {
  const std::vector<double> x = {5, 6, 7, 8, 9}, y = {0, 1, 2, 3, 4};
  const auto r = permutation_test(x, y);
  EXPECT_TRUE(r.exact);
  EXPECT_EQ(r.n_permutations, 252u);
  EXPECT_DOUBLE_EQ(r.p_value, 1.0 / 252.0);
  EXPECT_EQ(binomial(10, 5), 252u);
  EXPECT_EQ(binomial(200, 100), UINT64_MAX);
  EXPECT_EQ(binomial(3, 5), 0u);
}

TEST(Permutation, InterleavedMultisetsMatchEnumeration) {
  const std::vector<double> x = {1, 2}, y = {1, 2};
  const auto r = permutation_test(x, y);
  EXPECT_DOUBLE_EQ(r.p_value, oracle_p(x, y));
  EXPECT_GE(r.p_value, 0.5);
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng = make_rng(s);
    std::vector<double> a(1 + s % 7), b(1 + (s / 2) % 6);
    for (double& v : a) v = std::round(std::normal_distribution<double>(0.5, 1.0)(rng) * 2) / 2;
    for (double& v : b) v = std::round(std::normal_distribution<double>(0.0, 1.0)(rng) * 2) / 2;
    EXPECT_DOUBLE_EQ(permutation_test(a, b).p_value, oracle_p(a, b)) << "case " << s;
  }
}

TEST(Permutation, MonteCarloWithinThreeStandardErrors) {
  for (std::uint64_t s = 0; s < 8; ++s) {
    Rng rng = make_rng(40 + s);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> x(6), y(6);
    for (double& v : x) v = n(rng) + 0.4;
    for (double& v : y) v = n(rng);
    const auto exact = permutation_test(x, y);
    ASSERT_TRUE(exact.exact);
    PermutationOptions mc;
    mc.max_exact = 0;
    mc.seed = s;
    const auto approx = permutation_test(x, y, mc);
    EXPECT_FALSE(approx.exact);
    EXPECT_EQ(approx.n_permutations, 10000u);
    const double se = std::sqrt(exact.p_value * (1 - exact.p_value) / 10000.0);
    EXPECT_LE(std::abs(approx.p_value - exact.p_value), 3 * se + 1e-4) << "case " << s;
    EXPECT_EQ(permutation_test(x, y, mc).p_value, approx.p_value);
  }
  PermutationOptions one;
  one.max_exact = 0;
  one.n_mc = 1;
  const std::vector<double> x = {9}, y = {0, 1};
  EXPECT_EQ(permutation_test(x, y, one).p_value, 1.0);  // only the identity
}

TEST(SceneFor, SatisfiesCaption) {
  for (const char* c : {"a small red square", "a large blue circle and a small green triangle",
                        "a red square left of a blue circle", "a yellow triangle below a green square"}) {
    const auto scene = scene_for(c, 3);
    EXPECT_TRUE(scenegen::matches(scenegen::parse(c).structure, scene)) << c;
    EXPECT_EQ(scene, scene_for(c, 3));
  }
}

TEST(BiasSuite, PositiveControlAndDegenerateRows) {
  const BiasSuiteConfig cfg = default_bias_config();
  std::map<Image, std::string, decltype([](const Image& a, const Image& b) { return a.bytes < b.bytes; })> color;
  for (const auto& [name, items] : cfg.groups)
    for (const auto& it : items) color[scenegen::render(it.scene, it.render_seed)] = name;
  // Matches on color, plus a small per-pair jitter so no row is degenerate.
  const PairScorer sigma = [&](const Image& img, const std::string& caption) {
    const double jitter = static_cast<double>((img.bytes[500] + caption.size()) % 7) * 0.01;
    return (color.at(img) == color_of_caption(caption) ? 1.0 : 0.0) + jitter;
  };
  const BiasTable t = bias_suite(cfg, sigma, 2);
  ASSERT_EQ(t.rows.size(), cfg.tests.size());
  EXPECT_GT(t.rows[0].result.d, 0.0);
  EXPECT_LT(t.rows[0].result.p_value, 0.01);
  EXPECT_TRUE(t.rows[0].significant);
  EXPECT_TRUE(t.rows[0].result.exact);
  EXPECT_EQ(t.rows[0].result.psi.size(), 16u);
  double sum = 0;
  std::size_t n = 0;
  for (const auto& r : t.rows)
    if (!r.degenerate) {
      sum += std::abs(r.result.d);
      ++n;
    }
  EXPECT_EQ(t.average_abs_effect, sum / n);
  EXPECT_NE(to_markdown(t).find("*"), std::string::npos);

  const PairScorer constant = [](const Image&, const std::string&) { return 2.0; };
  const BiasTable flat = bias_suite(cfg, constant);
  for (const auto& r : flat.rows) {
    EXPECT_TRUE(r.degenerate);
    EXPECT_FALSE(r.significant);
    EXPECT_TRUE(std::isfinite(r.result.d));
  }
  EXPECT_EQ(flat.average_abs_effect, 0.0);
  EXPECT_EQ(to_csv(flat).find("inf"), std::string::npos);
  EXPECT_NE(to_markdown(flat).find("degenerate"), std::string::npos);
}

TEST(BiasSuite, MissingNamesAreReported) {
  BiasSuiteConfig cfg = default_bias_config();
  cfg.tests = {{"red", "purple", "red-words", "blue-words"}};
  const PairScorer constant = [](const Image&, const std::string&) { return 2.0; };
  try {
    bias_suite(cfg, constant);
    FAIL();
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("purple"), std::string::npos);
  }
  cfg.tests = {{"red", "blue", "red-words", "nice-words"}};
  EXPECT_THROW(bias_suite(cfg, constant), PreconditionError);
}

TEST(BiasSuite, ConfigRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "ditm_bias_cfg";
  std::filesystem::create_directories(dir);
  const BiasSuiteConfig cfg = default_bias_config();
  write_bias_config(cfg, dir / "bias.json");
  const BiasSuiteConfig back = read_bias_config(dir / "bias.json");
  EXPECT_EQ(back.groups.size(), cfg.groups.size());
  EXPECT_EQ(back.groups.at("red")[3].scene, cfg.groups.at("red")[3].scene);
  EXPECT_EQ(back.attributes, cfg.attributes);
  EXPECT_EQ(back.tests.size(), cfg.tests.size());
  EXPECT_EQ(back.noise_samples, 20u);
  std::ofstream(dir / "short.json")
      << R"({"groups": {"g": [{"caption": "a small red square", "seed": 4}]}, "attributes": {}, "tests": []})";
  const auto s = read_bias_config(dir / "short.json");
  EXPECT_EQ(s.groups.at("g")[0].scene, scene_for("a small red square", 4));
  std::filesystem::remove_all(dir);
}

TEST(DiffusionScorer, IsNegatedNormalizedScore) {
  diffusion::DenoiserConfig c;
  c.width = 4;
  const auto params = diffusion::init_denoiser(c, 3);
  itm::DenoiserPredictor model(params);
  const auto bank = itm::make_bank(3, 1, diffusion::make_schedule());
  const auto sigma = diffusion_scorer(model, bank);
  const Image img = scenegen::render(scene_for("a small red square", 1), 1);
  const auto rec = itm::score(model, scenegen::to_chw(img), itm::TextInput::of("a small red square"), bank);
  EXPECT_EQ(sigma(img, "a small red square"), -rec.normalized);
}

}  // namespace
}  // namespace ditm::bias
