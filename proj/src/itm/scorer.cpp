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

#include "ditm/itm/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ditm/common/error.hpp"
#include "ditm/common/parallel.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/scenegen/render.hpp"

namespace ditm::itm {

namespace {

using numerics::Shape;

constexpr std::size_t kChunk = 32;
constexpr std::size_t kPixels = 3 * scenegen::kImageSize * scenegen::kImageSize;

}  // namespace

std::string NoiseBank::id() const { return "n=" + std::to_string(size()) + ",seed=" + std::to_string(seed); }

NoiseBank NoiseBank::prefix(std::size_t n) const {
  if (n == 0 || n > size()) throw PreconditionError("bank prefix size out of range");
  NoiseBank b;
  b.seed = seed;
  b.samples.assign(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(n));
  return b;
}

NoiseBank make_bank(std::size_t n, std::uint64_t seed, const diffusion::NoiseSchedule& schedule) {
  if (n == 0) throw PreconditionError("noise bank needs at least one sample");
  NoiseBank bank;
  bank.seed = seed;
  bank.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    NoiseSample s;
    s.t = std::uniform_int_distribution<std::size_t>(0, schedule.T - 1)(rng);
    s.eps = Tensor(Shape{3, scenegen::kImageSize, scenegen::kImageSize});
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : s.eps.data()) v = normal(rng);
    bank.samples.push_back(std::move(s));
  }
  return bank;
}

DenoiserPredictor::DenoiserPredictor(const ParameterStore& params)
    : params_(params), config_(diffusion::config_of(params)) {}

Tensor DenoiserPredictor::predict(const Tensor& x_t, std::span<const std::size_t> t,
                                  std::span<const TextInput> text) const {
  diffusion::DenoiserGraph g(params_, config_, t.size());
  g.run(x_t, Tensor(x_t.shape(), 0.0), t, text);
  return g.prediction();
}

std::vector<std::vector<double>> sample_errors(const NoisePredictor& model, std::span<const ErrorRequest> requests,
                                               const NoiseBank& bank, int threads) {
  if (bank.size() == 0) throw PreconditionError("empty noise bank");
  const diffusion::NoiseSchedule schedule = diffusion::make_schedule();
  for (const auto& r : requests)
    if (r.image == nullptr || r.image->size() != kPixels) throw ShapeError("scored image must be [3,32,32]");
  const std::size_t n = bank.size();
  const std::size_t total = requests.size() * n;
  std::vector<std::vector<double>> out(requests.size(), std::vector<double>(n));
  const std::size_t n_chunks = (total + kChunk - 1) / kChunk;
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * kChunk;
    const std::size_t rows = std::min(kChunk, total - begin);
    Tensor x_t(Shape{rows, 3, scenegen::kImageSize, scenegen::kImageSize});
    std::vector<std::size_t> ts(rows);
    std::vector<TextInput> texts(rows);
    for (std::size_t k = 0; k < rows; ++k) {
      const std::size_t r = (begin + k) / n, i = (begin + k) % n;
      const NoiseSample& s = bank.samples[i];
      const double a = std::sqrt(schedule.alpha_bar[s.t]), b = std::sqrt(1.0 - schedule.alpha_bar[s.t]);
      const double* x0 = requests[r].image->raw();
      double* dst = x_t.raw() + k * kPixels;
      for (std::size_t p = 0; p < kPixels; ++p) dst[p] = a * x0[p] + b * s.eps[p];
      ts[k] = s.t;
      texts[k] = requests[r].text;
    }
    const Tensor pred = model.predict(x_t, ts, texts);
    if (pred.size() != x_t.size()) throw ShapeError("noise predictor returned the wrong shape");
    for (std::size_t k = 0; k < rows; ++k) {
      const std::size_t r = (begin + k) / n, i = (begin + k) % n;
      const double* e = bank.samples[i].eps.raw();
      const double* p = pred.raw() + k * kPixels;
      double s = 0.0;
      for (std::size_t q = 0; q < kPixels; ++q) s += (e[q] - p[q]) * (e[q] - p[q]);
      const double err = s / static_cast<double>(kPixels);
      if (!std::isfinite(err)) throw NumericError("non-finite denoising error");
      out[r][i] = err;
    }
  });
  return out;
}

double bank_mean(std::span<const double> errors) {
  if (errors.empty()) throw PreconditionError("mean over an empty bank");
  double s = 0.0;
  for (double e : errors) s += e;
  return s / static_cast<double>(errors.size());
}

double conditional_error(const NoisePredictor& model, const Tensor& image, const TextInput& text,
                         const NoiseBank& bank, int threads) {
  const ErrorRequest req[1] = {{&image, text}};
  return bank_mean(sample_errors(model, req, bank, threads)[0]);
}

double unconditional_error(const NoisePredictor& model, const Tensor& image, const NoiseBank& bank, int threads) {
  return conditional_error(model, image, TextInput::none(), bank, threads);
}

ScoreRecord make_record(double conditional, double unconditional, std::string bank_id) {
  if (!std::isfinite(conditional) || !std::isfinite(unconditional)) throw NumericError("non-finite score");
  return {conditional, unconditional, conditional - unconditional, std::move(bank_id)};
}

ScoreRecord score(const NoisePredictor& model, const Tensor& image, const TextInput& text, const NoiseBank& bank,
                  int threads) {
  const ErrorRequest req[2] = {{&image, text}, {&image, TextInput::none()}};
  auto e = sample_errors(model, req, bank, threads);
  return make_record(bank_mean(e[0]), bank_mean(e[1]), bank.id());
}

std::vector<std::size_t> rank_ascending(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return idx;
}

namespace {

Retrieval finish(std::vector<ScoreRecord> records, bool by_normalized) {
  std::vector<double> keys;
  for (const auto& r : records) keys.push_back(by_normalized ? r.normalized : r.conditional);
  Retrieval out;
  out.ranking = rank_ascending(keys);
  out.degenerate = std::all_of(keys.begin(), keys.end(), [&](double k) { return k == keys.front(); });
  out.records = std::move(records);
  return out;
}

void require_candidates(std::size_t n) {
  if (n < 2) throw PreconditionError("retrieval needs at least two candidates");
}

std::vector<ScoreRecord> image_records(const NoisePredictor& model, std::span<const Tensor> images,
                                       const TextInput& caption, const NoiseBank& bank, int threads) {
  require_candidates(images.size());
  std::vector<ErrorRequest> reqs;
  for (const auto& im : images) {
    reqs.push_back({&im, caption});
    reqs.push_back({&im, TextInput::none()});
  }
  auto e = sample_errors(model, reqs, bank, threads);
  std::vector<ScoreRecord> records;
  for (std::size_t i = 0; i < images.size(); ++i)
    records.push_back(make_record(bank_mean(e[2 * i]), bank_mean(e[2 * i + 1]), bank.id()));
  return records;
}

}  // namespace

Retrieval text_retrieve(const NoisePredictor& model, const Tensor& image, std::span<const TextInput> captions,
                        const NoiseBank& bank, int threads) {
  require_candidates(captions.size());
  std::vector<ErrorRequest> reqs;
  for (const auto& c : captions) reqs.push_back({&image, c});
  reqs.push_back({&image, TextInput::none()});
  auto e = sample_errors(model, reqs, bank, threads);
  const double uncond = bank_mean(e.back());
  std::vector<ScoreRecord> records;
  for (std::size_t i = 0; i < captions.size(); ++i) records.push_back(make_record(bank_mean(e[i]), uncond, bank.id()));
  return finish(std::move(records), false);
}

Retrieval image_retrieve_naive(const NoisePredictor& model, std::span<const Tensor> images, const TextInput& caption,
                               const NoiseBank& bank, int threads) {
  return finish(image_records(model, images, caption, bank, threads), false);
}

Retrieval image_retrieve_normalized(const NoisePredictor& model, std::span<const Tensor> images,
                                    const TextInput& caption, const NoiseBank& bank, int threads) {
  return finish(image_records(model, images, caption, bank, threads), true);
}

std::vector<double> class_posterior(std::span<const double> conditional_errors) {
  if (conditional_errors.empty()) throw PreconditionError("posterior over no candidates");
  double lo = conditional_errors[0];
  for (double e : conditional_errors) {
    if (!std::isfinite(e)) throw NumericError("non-finite error in posterior");
    lo = std::min(lo, e);
  }
  std::vector<double> p;
  double z = 0.0;
  for (double e : conditional_errors) {
    p.push_back(std::exp(-(e - lo)));
    z += p.back();
  }
  for (double& v : p) v /= z;
  return p;
}

GrayCache::GrayCache(const NoisePredictor& model, NoiseBank bank, int threads)
    : model_(model), bank_(std::move(bank)), threads_(threads),
      gray_(Shape{3, scenegen::kImageSize, scenegen::kImageSize}, scenegen::kGrayValue) {}

double GrayCache::error(const TextInput& caption) {
  const std::vector<std::size_t> key = caption.null ? std::vector<std::size_t>{} : caption.tokens;
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  const double e = conditional_error(model_, gray_, caption, bank_, threads_);
  cache_.emplace(key, e);
  return e;
}

Retrieval text_retrieve_graynorm(const NoisePredictor& model, const Tensor& image,
                                 std::span<const TextInput> captions, GrayCache& gray, int threads) {
  require_candidates(captions.size());
  std::vector<ErrorRequest> reqs;
  for (const auto& c : captions) reqs.push_back({&image, c});
  auto e = sample_errors(model, reqs, gray.bank(), threads);
  std::vector<ScoreRecord> records;
  for (std::size_t i = 0; i < captions.size(); ++i)
    records.push_back(make_record(bank_mean(e[i]), gray.error(captions[i]), gray.bank().id()));
  return finish(std::move(records), true);
}

}  // namespace ditm::itm
