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

#include <cmath>
#include <filesystem>
#include <random>

#include "ditm/common/error.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/diffusion/train.hpp"
#include "ditm/hardneg/finetune.hpp"
#include "ditm/scenegen/render.hpp"

namespace ditm::hardneg {
namespace {

diffusion::DenoiserConfig tiny() {
  diffusion::DenoiserConfig c;
  c.width = 4;
  c.token_dim = 4;
  c.text_hidden = 8;
  c.text_dim = 8;
  c.time_dim = 8;
  c.time_hidden = 8;
  c.film_hidden = 8;
  return c;
}

ParameterStore perturbed(std::uint64_t seed) {
  ParameterStore p = diffusion::init_denoiser(tiny(), seed);
  Rng rng = make_rng(derive_seed(seed, "perturb"));
  std::normal_distribution<double> n(0.0, 0.2);
  auto lock = p.lock_exclusive();
  for (const auto& name : p.names())
    for (double& v : p.mutable_at(name).data()) v += n(rng);
  return p;
}

const scenegen::Dataset& small_data() {
  static const scenegen::Dataset d = [] {
    scenegen::DatasetConfig c;
    c.n_train = 24;
    c.n_val = 12;
    c.seed = 5;
    return scenegen::build_dataset(c);
  }();
  return d;
}

LossOptions with_lambda(double l) {
  LossOptions o;
  o.lambda = l;
  return o;
}

TEST(ExampleLoss, PiecewiseIdentityHoldsExactly) {
  Rng rng = make_rng(1);
  std::uniform_real_distribution<double> u(0.0, 3.0), lam(-2.0, 2.0);
  for (int i = 0; i < 10000; ++i) {
    const double pos = u(rng), neg = u(rng), l = lam(rng);
    const double total = example_loss(pos, neg, with_lambda(l));
    EXPECT_EQ(total, std::max(pos - neg, pos - std::abs(l) * pos));
  }
}

TEST(ExampleLoss, ClipArithmetic) {
  const auto o = with_lambda(-1.0);
  EXPECT_EQ(example_loss(0.4, 0.9, o), 0.0);          // neg >= pos: clip binds
  EXPECT_DOUBLE_EQ(example_loss(0.4, 0.3, o), 0.4 - 0.3);  // neg below the floor: unclipped branch
  EXPECT_EQ(example_loss(0.4, 0.4, o), 0.0);
  for (double neg : {0.0, 0.1, 0.5, 2.0, 50.0}) EXPECT_GE(example_loss(0.3, neg, o), 0.0);
  LossOptions unclipped = o;
  unclipped.clip = false;
  EXPECT_DOUBLE_EQ(example_loss(0.4, 5.0, unclipped), -4.6);
  LossOptions noneg;
  noneg.use_negatives = false;
  EXPECT_EQ(example_loss(0.4, 5.0, noneg), 0.4);
  EXPECT_THROW(example_loss(0.4, 0.5, LossOptions{}), PreconditionError);
}

std::vector<HardNegExample> examples(std::size_t n) {
  HardNegConfig c;
  c.loss.lambda = -1.0;
  auto all = epoch_examples(c, small_data(), 1);
  all.resize(std::min(n, all.size()));
  return all;
}

TEST(HardNegLoss, MatchesPerExampleErrors) {
  const auto s = diffusion::make_schedule();
  const ParameterStore p = perturbed(2);
  const auto ex = examples(6);
  const auto opts = with_lambda(-0.5);
  const auto loss = hardneg_loss(p, ex, s, opts, 1, 4);
  double total = 0.0;
  for (const auto& e : ex) {
    auto err = [&](const Tensor& x0, const TextInput& w, std::uint64_t seed) {
      diffusion::TrainExample te{x0, w, seed};
      return diffusion::evaluate_loss(p, std::span(&te, 1), s);
    };
    total += example_loss(err(e.x_pos, e.w_pos, e.pos_seed), err(e.x_neg, e.w_neg, e.neg_seed), opts);
  }
  EXPECT_NEAR(loss.total, total / static_cast<double>(ex.size()), 1e-12);
  EXPECT_THROW(hardneg_loss(p, ex, s, LossOptions{}), PreconditionError);
}

TEST(HardNegLoss, BindingClipPassesNoNegativeGradient) {
  // |lambda| = 0 puts the floor at 0 > -e_neg, so the clip binds for every
  // example and the loss is the positive term alone.
  const auto s = diffusion::make_schedule();
  const ParameterStore p = perturbed(3);
  const auto ex = examples(4);
  const auto clipped = hardneg_loss(p, ex, s, with_lambda(0.0));
  LossOptions noneg;
  noneg.use_negatives = false;
  const auto pos_only = hardneg_loss(p, ex, s, noneg);
  EXPECT_NEAR(clipped.total, pos_only.total, 1e-15);
  for (const auto& [name, g] : pos_only.grads)
    for (std::size_t i = 0; i < g.size(); ++i) ASSERT_NEAR(clipped.grads.at(name)[i], g[i], 1e-14) << name;
}

TEST(HardNegLoss, GradientMatchesFiniteDifferences) {
  const auto s = diffusion::make_schedule();
  ParameterStore p = perturbed(4);
  const auto ex = examples(3);
  for (bool clip : {true, false}) {
    LossOptions o = with_lambda(-1.0);
    o.clip = clip;
    const auto analytic = hardneg_loss(p, ex, s, o);
    Rng rng = make_rng(5);
    const auto names = p.names();
    double num = 0.0, den = 0.0;
    for (int probe = 0; probe < 60; ++probe) {
      const std::string& name = names[std::uniform_int_distribution<std::size_t>(0, names.size() - 1)(rng)];
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, p.at(name).size() - 1)(rng);
      const double orig = p.at(name)[i], h = 1e-5;
      auto at = [&](double v) {
        {
          auto lock = p.lock_exclusive();
          p.mutable_at(name)[i] = v;
        }
        return hardneg_loss(p, ex, s, o).total;
      };
      const double fd = (at(orig + h) - at(orig - h)) / (2 * h);
      at(orig);
      const auto it = analytic.grads.find(name);
      const double a = it == analytic.grads.end() ? 0.0 : it->second[i];
      num += (a - fd) * (a - fd);
      den += a * a + fd * fd;
    }
    EXPECT_LT(std::sqrt(num / den), 1e-4) << "clip=" << clip;
  }
}

TEST(HardNegLoss, AdapterScopeLimitsGradients) {
  const auto s = diffusion::make_schedule();
  const auto loss = hardneg_loss(perturbed(6), examples(2), s, with_lambda(-1.0), 1, 8,
                                 [](const std::string& n) { return diffusion::in_adapter_scope(n); });
  ASSERT_FALSE(loss.grads.empty());
  for (const auto& [name, _] : loss.grads) EXPECT_TRUE(diffusion::in_adapter_scope(name)) << name;
}

TEST(EpochExamples, NegativeMixAndNoisePairing) {
  HardNegConfig c;
  c.loss.lambda = -1.0;
  const auto ex = epoch_examples(c, small_data(), 1);
  std::size_t text = 0, image = 0;
  for (const auto& e : ex) {
    EXPECT_EQ(e.pos_seed, e.neg_seed);
    if (e.x_pos == e.x_neg) {
      ++text;
      EXPECT_FALSE(e.w_pos == e.w_neg);
    } else {
      ++image;
      EXPECT_TRUE(e.w_pos == e.w_neg);
    }
  }
  EXPECT_EQ(text, small_data().indices("train").size());
  EXPECT_EQ(image, small_data().indices("train").size());
  c.shared_noise = false;
  c.image_negatives = false;
  c.text_subtypes = {"color-swap"};
  for (const auto& e : epoch_examples(c, small_data(), 1)) {
    EXPECT_NE(e.pos_seed, e.neg_seed);
    EXPECT_FALSE(e.w_pos == e.w_neg);
  }
}

TEST(SelectEpoch, FirstBestWins) {
  std::vector<EpochReport> e(4);
  for (std::size_t i = 0; i < 4; ++i) e[i].epoch = i + 1;
  e[0].val_accuracy = 0.5;
  e[1].val_accuracy = 0.7;
  e[2].val_accuracy = 0.7;
  e[3].val_accuracy = 0.6;
  EXPECT_EQ(select_epoch(e), 2u);
  EXPECT_THROW(select_epoch({}), PreconditionError);
}

TEST(Finetune, FreezesEverythingOutsideTheAdapter) {
  const ParameterStore base = perturbed(7);
  HardNegConfig c;
  c.loss.lambda = -1.0;
  c.epochs = 2;
  c.batch_size = 8;
  c.lr = 1e-3;
  c.val_records = 6;
  c.val_bank_size = 2;
  const auto dir = std::filesystem::temp_directory_path() / "ditm_hardneg_test";
  std::filesystem::remove_all(dir);
  c.out_dir = dir;
  const auto r = finetune(c, base, small_data());
  bool adapter_moved = false;
  for (const auto& name : base.names()) {
    if (diffusion::in_adapter_scope(name))
      adapter_moved |= !(r.params.at(name) == base.at(name));
    else
      EXPECT_TRUE(r.params.at(name) == base.at(name)) << name;
  }
  EXPECT_TRUE(adapter_moved);
  ASSERT_EQ(r.report.epochs.size(), 2u);
  const auto back = read_report(dir / "report.json");
  EXPECT_EQ(back.selected_epoch, select_epoch(back.epochs));
  EXPECT_EQ(back.selected_epoch, r.report.selected_epoch);
  ASSERT_TRUE(back.config.loss.lambda.has_value());
  EXPECT_EQ(*back.config.loss.lambda, -1.0);
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "epoch_002.ckpt"));
  std::filesystem::remove_all(dir);

  c.out_dir.clear();
  c.loss.lambda.reset();
  EXPECT_THROW(finetune(c, base, small_data()), PreconditionError);
}

TEST(Finetune, NoNegAblationRuns) {
  HardNegConfig c;
  c.loss.use_negatives = false;
  c.epochs = 1;
  c.val_records = 4;
  c.val_bank_size = 2;
  const auto r = finetune(c, perturbed(8), small_data());
  EXPECT_EQ(r.report.epochs.size(), 1u);
  EXPECT_EQ(r.report.epochs[0].loss_neg, 0.0);
}

TEST(GenerativeSanity, IdenticalParamsGiveRatioOne) {
  const ParameterStore p = perturbed(9);
  const auto s = generative_sanity(p, p, small_data());
  EXPECT_EQ(s.ratio, 1.0);
  EXPECT_FALSE(s.flagged);
}

}  // namespace
}  // namespace ditm::hardneg
