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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ditm/diffusion/denoiser.hpp"
#include "ditm/diffusion/schedule.hpp"
#include "ditm/scenegen/dataset.hpp"

namespace ditm::hardneg {

using diffusion::TextInput;
using numerics::ParameterStore;
using numerics::Tensor;

/// One positive pair and one hard negative. A text negative keeps the image
/// and swaps the caption; an image negative keeps the caption and swaps the
/// image.
struct HardNegExample {
  Tensor x_pos, x_neg;  // [3,32,32]
  TextInput w_pos, w_neg;
  std::uint64_t pos_seed = 0;
  /// Noise seed of the negative term; equal to pos_seed when noise is shared.
  std::uint64_t neg_seed = 0;
};

struct LossOptions {
  /// Relative clip factor; required. Only |lambda| is used.
  std::optional<double> lambda;
  bool clip = true;
  /// false drops the negative term entirely (the NoNeg ablation).
  bool use_negatives = true;
};

/// Per-example total for errors e_pos, e_neg:
///   clipped:    e_pos + max(-e_neg, -|lambda| e_pos)
///   unclipped:  e_pos - e_neg
///   no negatives: e_pos
double example_loss(double pos_error, double neg_error, const LossOptions& options);

struct HardNegLoss {
  double total = 0.0;
  double pos = 0.0;  // mean positive error
  double neg = 0.0;  // mean negative error (reported as an error, not negated)
  numerics::Gradients grads;
};

/// Mean of example_loss over the batch with gradients for the parameters
/// `trainable` accepts (all when empty). Each example draws (t, eps) from its
/// seeds; the clip is applied per example.
HardNegLoss hardneg_loss(const ParameterStore& params, std::span<const HardNegExample> batch,
                         const diffusion::NoiseSchedule& schedule, const LossOptions& options, int threads = 1,
                         std::size_t chunk = 8, const std::function<bool(const std::string&)>& trainable = {});

struct HardNegConfig {
  LossOptions loss;
  /// Text negative subtypes drawn from (empty: every subtype a record has).
  std::vector<std::string> text_subtypes;
  std::size_t text_negatives_per_positive = 1;
  bool image_negatives = true;
  bool shared_noise = true;
  double lr = 1e-4;
  std::size_t epochs = 8;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  int threads = 1;
  std::size_t chunk = 8;
  /// Validation: text retrieval of each val record's caption against its
  /// swap negatives, on at most `val_records` records.
  std::size_t val_records = 200;
  std::size_t val_bank_size = 10;
  std::uint64_t val_bank_seed = 0;
  /// When set: checkpoints/epoch_NNN.ckpt, model.ckpt (selected) and report.json.
  std::filesystem::path out_dir;
  std::function<void(std::size_t, double)> on_epoch;
};

struct EpochReport {
  std::size_t epoch = 0;
  double loss_pos = 0.0, loss_neg = 0.0, loss_total = 0.0;
  double val_accuracy = 0.0;
  double wall_seconds = 0.0;
};

struct FinetuneReport {
  HardNegConfig config;
  double base_val_accuracy = 0.0;
  std::vector<EpochReport> epochs;
  std::size_t selected_epoch = 0;
};

/// First epoch with the highest validation accuracy.
std::size_t select_epoch(const std::vector<EpochReport>& epochs);

struct FinetuneResult {
  ParameterStore params;  // the selected epoch's parameters
  FinetuneReport report;
};

/// Adam on the hard-negative loss over the adapter scope only; every other
/// parameter is bit-identical to `base`.
FinetuneResult finetune(const HardNegConfig& config, const ParameterStore& base, const scenegen::Dataset& data);

/// The examples of one epoch for the "train" split.
std::vector<HardNegExample> epoch_examples(const HardNegConfig& config, const scenegen::Dataset& data,
                                           std::uint64_t epoch);

/// Hard-negative validation accuracy on the "val" split.
double validation_accuracy(const ParameterStore& params, const scenegen::Dataset& data, std::size_t max_records,
                           std::size_t bank_size, std::uint64_t bank_seed, int threads = 1);

void write_report(const FinetuneReport& report, const std::filesystem::path& path);
FinetuneReport read_report(const std::filesystem::path& path);

struct SanityReport {
  double loss_before = 0.0;
  double loss_after = 0.0;
  double ratio = 1.0;
  bool flagged = false;  // ratio > threshold
};

/// Validation diffusion loss (positives, fixed noise) before and after.
SanityReport generative_sanity(const ParameterStore& before, const ParameterStore& after,
                               const scenegen::Dataset& data, std::uint64_t seed = 0, int threads = 1,
                               double threshold = 1.25);

}  // namespace ditm::hardneg
