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
#include <vector>

#include "ditm/diffusion/denoiser.hpp"
#include "ditm/diffusion/schedule.hpp"
#include "ditm/scenegen/dataset.hpp"

namespace ditm::diffusion {

/// One training example: a clean image, its text and the seed its (t, eps,
/// NULL-dropout) draw derives from.
struct TrainExample {
  Tensor x0;  // [3,32,32]
  TextInput text;
  std::uint64_t noise_seed = 0;
};

struct NoiseDraw {
  std::size_t t = 0;
  Tensor eps;  // [3,32,32]
  bool drop_text = false;
};

/// t uniform on [0,T), eps unit Gaussian, text replaced by NULL with
/// probability p_uncond. A pure function of the seed.
NoiseDraw draw_noise(std::uint64_t seed, const NoiseSchedule& schedule, double p_uncond);

struct LossResult {
  double loss = 0.0;
  numerics::Gradients grads;
};

/// Denoising loss: mean over examples of the mean-per-element squared error
/// between eps and eps_theta(x_t, t, w). With eps_theta = 0 this is the mean
/// of eps^2, i.e. 1 in expectation.
///
/// Examples are processed in fixed chunks of `chunk` (one graph each, run on
/// up to `threads` workers); chunk losses and gradients are combined in chunk
/// order, so the result does not depend on `threads`.
LossResult diffusion_loss(const ParameterStore& params, std::span<const TrainExample> batch,
                          const NoiseSchedule& schedule, double p_uncond, int threads = 1, std::size_t chunk = 8,
                          const std::function<bool(const std::string&)>& trainable = {});

/// Loss only, with every text kept (no dropout).
double evaluate_loss(const ParameterStore& params, std::span<const TrainExample> examples,
                     const NoiseSchedule& schedule, int threads = 1, std::size_t chunk = 16);

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double p_uncond = 0.1;
  std::uint64_t seed = 0;
  int threads = 1;
  std::size_t chunk = 8;
  DenoiserConfig model;
  /// When set: checkpoints/epoch_NNN.ckpt (+ .adam optimizer state),
  /// model.ckpt and train_log.csv.
  std::filesystem::path out_dir;
  /// Continue after the newest complete epoch in out_dir. Every epoch's data
  /// order and noise derive from (seed, epoch), so the resumed run ends
  /// bit-identical to an uninterrupted one.
  bool resume = false;
  /// Called after every epoch with (epoch, train loss, val loss).
  std::function<void(std::size_t, double, double)> on_epoch;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  ParameterStore params;
  double initial_val_loss = 0.0;
  std::vector<EpochLog> curve;
};

/// Positive (image, caption) pairs of one split as training examples, with
/// noise seeds derived from (seed, epoch, record id).
std::vector<TrainExample> examples_for(const scenegen::Dataset& data, const std::string& split, std::uint64_t seed,
                                       std::uint64_t epoch);

/// Adam on the denoising loss over the "train" split; validation loss on the
/// "val" split with fixed noise after every epoch. Throws NumericError on a
/// non-finite loss; the last completed epoch's checkpoint stays on disk.
TrainResult train(const TrainConfig& config, const scenegen::Dataset& data,
                  std::optional<ParameterStore> init = std::nullopt);

/// Newest epoch in out_dir with both parameters and optimizer state; 0 if none.
std::size_t last_complete_epoch(const std::filesystem::path& out_dir);

void write_train_log(const std::vector<EpochLog>& curve, const std::filesystem::path& path);

/// Ancestral DDPM sampling from pure noise; a debugging aid, not used in scoring.
Tensor sample_image(const ParameterStore& params, const NoiseSchedule& schedule, const TextInput& text,
                    std::uint64_t seed);

}  // namespace ditm::diffusion
