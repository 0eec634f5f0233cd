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
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ditm/diffusion/denoiser.hpp"
#include "ditm/diffusion/schedule.hpp"

namespace ditm::itm {

using diffusion::TextInput;
using numerics::ParameterStore;
using numerics::Tensor;

struct NoiseSample {
  std::size_t t = 0;
  Tensor eps;  // [3,32,32]
};

/// A fixed set of (eps, t) draws shared by every candidate of a comparison.
/// Sample i depends only on (seed, i), so the bank of size n is the prefix of
/// every larger bank with the same seed.
struct NoiseBank {
  std::uint64_t seed = 0;
  std::vector<NoiseSample> samples;

  std::size_t size() const { return samples.size(); }
  /// "n=<size>,seed=<seed>"; enough to rebuild the bank.
  std::string id() const;
  NoiseBank prefix(std::size_t n) const;
};

NoiseBank make_bank(std::size_t n, std::uint64_t seed, const diffusion::NoiseSchedule& schedule);

/// eps_theta over a batch. Implementations must be safe to call concurrently.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  /// x_t: [B,3,32,32]; t, text: B entries. Returns [B,3,32,32].
  virtual Tensor predict(const Tensor& x_t, std::span<const std::size_t> t,
                         std::span<const TextInput> text) const = 0;
};

/// The trained denoiser. Holds a reference; `params` must outlive it.
class DenoiserPredictor : public NoisePredictor {
 public:
  explicit DenoiserPredictor(const ParameterStore& params);
  Tensor predict(const Tensor& x_t, std::span<const std::size_t> t, std::span<const TextInput> text) const override;

 private:
  const ParameterStore& params_;
  diffusion::DenoiserConfig config_;
};

/// One (image, text) pair to score.
struct ErrorRequest {
  const Tensor* image = nullptr;  // [3,32,32]
  TextInput text;
};

/// Per-sample errors, result[r][i] = mean over elements of
/// (eps_i - eps_theta(x_t, t_i, w))^2 for request r and bank sample i.
///
/// The (request, sample) pairs are evaluated in fixed-size chunks on up to
/// `threads` workers; each entry is computed independently of the others so
/// the output is bit-identical for any thread count.
std::vector<std::vector<double>> sample_errors(const NoisePredictor& model, std::span<const ErrorRequest> requests,
                                               const NoiseBank& bank, int threads = 1);

/// Mean of per-sample errors, summed in bank order.
double bank_mean(std::span<const double> errors);

double conditional_error(const NoisePredictor& model, const Tensor& image, const TextInput& text,
                         const NoiseBank& bank, int threads = 1);
double unconditional_error(const NoisePredictor& model, const Tensor& image, const NoiseBank& bank,
                           int threads = 1);

struct ScoreRecord {
  double conditional = 0.0;
  double unconditional = 0.0;
  double normalized = 0.0;  // conditional - unconditional
  std::string bank_id;
};

ScoreRecord make_record(double conditional, double unconditional, std::string bank_id);
ScoreRecord score(const NoisePredictor& model, const Tensor& image, const TextInput& text, const NoiseBank& bank,
                  int threads = 1);

/// Indices sorted by ascending value; equal values keep the lower index first.
std::vector<std::size_t> rank_ascending(std::span<const double> values);

struct Retrieval {
  std::vector<std::size_t> ranking;  // best first
  std::vector<ScoreRecord> records;  // per candidate
  /// True when every ranking key is equal, so the order is only the tie rule.
  bool degenerate = false;
};

/// Rank captions for one image by conditional error. The unconditional term
/// is shared by all candidates, so the normalized ranking is the same.
Retrieval text_retrieve(const NoisePredictor& model, const Tensor& image, std::span<const TextInput> captions,
                        const NoiseBank& bank, int threads = 1);

/// Rank images for one caption by conditional error alone.
Retrieval image_retrieve_naive(const NoisePredictor& model, std::span<const Tensor> images, const TextInput& caption,
                               const NoiseBank& bank, int threads = 1);

/// Rank images for one caption by conditional minus unconditional error, both
/// over the same bank.
Retrieval image_retrieve_normalized(const NoisePredictor& model, std::span<const Tensor> images,
                                    const TextInput& caption, const NoiseBank& bank, int threads = 1);

/// Softmax of negated errors: the class posterior under a uniform prior.
std::vector<double> class_posterior(std::span<const double> conditional_errors);

/// Conditional error of the mid-gray image per caption, for one model and
/// bank. Not thread-safe.
class GrayCache {
 public:
  GrayCache(const NoisePredictor& model, NoiseBank bank, int threads = 1);
  double error(const TextInput& caption);
  const NoiseBank& bank() const { return bank_; }
  std::size_t size() const { return cache_.size(); }

 private:
  const NoisePredictor& model_;
  NoiseBank bank_;
  int threads_;
  Tensor gray_;
  std::map<std::vector<std::size_t>, double> cache_;
};

/// Rank captions by conditional error on the image minus conditional error on
/// the gray image. In the records, `unconditional` holds the gray term and
/// `normalized` the difference.
Retrieval text_retrieve_graynorm(const NoisePredictor& model, const Tensor& image,
                                 std::span<const TextInput> captions, GrayCache& gray, int threads = 1);

}  // namespace ditm::itm
