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
#include <optional>
#include <string>
#include <span>
#include <string_view>
#include <vector>

#include "ditm/numerics/graph.hpp"
#include "ditm/numerics/parameters.hpp"
#include "ditm/scenegen/caption.hpp"

namespace ditm::diffusion {

using numerics::Graph;
using numerics::NodeId;
using numerics::ParameterStore;
using numerics::Tensor;

/// Architecture of the noise predictor eps_theta(x_t, t, w).
///
/// A two-stage U-Net over [x_t, y-coord, x-coord] (5 channels, 32x32) with
/// widths w, 2w, 4w. Every conv block adds a projection of the timestep
/// embedding, then GroupNorm and SiLU. The two 8x8 bottleneck blocks are
/// FiLM-modulated, h * (1 + gamma) + beta, with gamma and beta computed from
/// the text embedding and the timestep features; that is the only place text
/// enters. Decoder stages upsample and add the matching encoder features.
///
/// Text encoder: token embeddings laid out by position (so order matters),
/// flattened, then a two-layer MLP to `text_dim`. The NULL condition is a
/// separate learned vector `text.null`.
struct DenoiserConfig {
  std::size_t width = 8;
  std::size_t token_dim = 8;
  std::size_t text_hidden = 64;
  std::size_t text_dim = 32;
  std::size_t time_dim = 16;
  std::size_t time_hidden = 32;
  std::size_t film_hidden = 64;
  std::size_t groups = 4;
  bool operator==(const DenoiserConfig&) const = default;
};

ParameterStore init_denoiser(const DenoiserConfig& config, std::uint64_t seed);
/// Recovers the architecture from parameter shapes.
DenoiserConfig config_of(const ParameterStore& params);

/// Parameters the hard-negative finetuning may change: the text pathway
/// ("text.*") and the bottleneck FiLM generator ("film.*").
bool in_adapter_scope(std::string_view name);

/// Caption tokens or the NULL (unconditional) condition.
struct TextInput {
  std::vector<std::size_t> tokens;
  bool null = true;

  static TextInput none() { return {}; }
  static TextInput of(const scenegen::Caption& c);
  static TextInput of(std::string_view caption_text);
  bool operator==(const TextInput&) const = default;
};

/// Sinusoidal embedding of integer timesteps, [t.size(), dim].
Tensor timestep_embedding(std::span<const std::size_t> t, std::size_t dim);

/// Handles of one denoiser instance inside a larger graph.
struct DenoiserNodes {
  std::string prefix;  // input names are prefix + "x_t", "eps", ...
  std::size_t batch = 0;
  NodeId prediction, errors;
};

/// Adds a denoiser over `batch` examples plus its per-example error against
/// an "eps" input to `g`. Several instances may share one graph (and so one
/// parameter set) under different prefixes.
DenoiserNodes add_denoiser(Graph& g, const DenoiserConfig& config, std::size_t batch, const std::string& prefix);
/// Fills the inputs of `nodes` into `inputs`.
void bind_denoiser(const DenoiserNodes& nodes, const DenoiserConfig& config, const Tensor& x_t, const Tensor& eps,
                   std::span<const std::size_t> t, std::span<const TextInput> text, numerics::TensorMap& inputs);

/// The denoiser wired for a fixed batch size together with its error terms:
///   prediction  eps_hat, [B,3,32,32]
///   errors      mean over elements of (eps - eps_hat)^2, per example, [B]
///   loss        mean of errors
/// Build once, then call run() for each batch.
class DenoiserGraph {
 public:
  DenoiserGraph(const ParameterStore& params, const DenoiserConfig& config, std::size_t batch);

  /// x_t, eps: [B,3,32,32]; t and text: B entries.
  void run(const Tensor& x_t, const Tensor& eps, std::span<const std::size_t> t, std::span<const TextInput> text);
  const Tensor& prediction() const { return graph_.value(prediction_); }
  const Tensor& errors() const { return graph_.value(errors_); }
  double loss() const { return graph_.value(loss_).item(); }
  numerics::Gradients backward() { return graph_.backward(loss_); }
  Graph& graph() { return graph_; }
  std::size_t batch() const { return batch_; }

 private:
  DenoiserConfig config_;
  std::size_t batch_;
  Graph graph_;
  DenoiserNodes nodes_;
  NodeId prediction_, errors_, loss_;
};

/// eps_theta for a batch, [B,3,32,32].
Tensor denoise(const ParameterStore& params, const Tensor& x_t, std::span<const std::size_t> t,
               std::span<const TextInput> text);

}  // namespace ditm::diffusion
