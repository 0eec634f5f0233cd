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

#include "ditm/diffusion/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "ditm/common/error.hpp"
#include "ditm/common/parallel.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/numerics/adam.hpp"
#include "ditm/numerics/checkpoint.hpp"
#include "ditm/scenegen/render.hpp"

namespace ditm::diffusion {

namespace {

using numerics::Shape;

struct ChunkResult {
  double loss_sum = 0.0;
  numerics::Gradients grads;
};

// Runs `examples` in chunks; each chunk's per-example errors are summed. With
// `want_grads` the chunk gradient of sum(errors) is kept.
std::vector<ChunkResult> run_chunks(const ParameterStore& params, std::span<const TrainExample> examples,
                                    const NoiseSchedule& schedule, double p_uncond, int threads, std::size_t chunk,
                                    bool want_grads, const std::function<bool(const std::string&)>& trainable) {
  if (examples.empty()) throw PreconditionError("loss over an empty batch");
  if (chunk == 0) throw PreconditionError("chunk size must be positive");
  const DenoiserConfig cfg = config_of(params);
  const std::size_t n_chunks = (examples.size() + chunk - 1) / chunk;
  std::vector<ChunkResult> out(n_chunks);
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t n = std::min(chunk, examples.size() - begin);
    Tensor x_t(Shape{n, 3, scenegen::kImageSize, scenegen::kImageSize});
    Tensor eps(x_t.shape());
    std::vector<std::size_t> ts(n);
    std::vector<TextInput> texts(n);
    const std::size_t per = 3 * scenegen::kImageSize * scenegen::kImageSize;
    for (std::size_t i = 0; i < n; ++i) {
      const TrainExample& ex = examples[begin + i];
      if (ex.x0.size() != per) throw ShapeError("training image must be [3,32,32]");
      NoiseDraw d = draw_noise(ex.noise_seed, schedule, p_uncond);
      Tensor xt = add_noise(ex.x0, d.eps, d.t, schedule);
      std::copy(xt.raw(), xt.raw() + per, x_t.raw() + i * per);
      std::copy(d.eps.raw(), d.eps.raw() + per, eps.raw() + i * per);
      ts[i] = d.t;
      texts[i] = d.drop_text ? TextInput::none() : ex.text;
    }
    DenoiserGraph g(params, cfg, n);
    if (trainable) g.graph().set_trainable(trainable);
    g.run(x_t, eps, ts, texts);
    out[c].loss_sum = g.loss() * static_cast<double>(n);
    if (want_grads) {
      out[c].grads = g.backward();
      for (auto& [_, t] : out[c].grads)
        for (double& v : t.data()) v *= static_cast<double>(n);
    }
  });
  return out;
}

}  // namespace

NoiseDraw draw_noise(std::uint64_t seed, const NoiseSchedule& schedule, double p_uncond) {
  if (!(p_uncond >= 0.0 && p_uncond < 1.0)) throw PreconditionError("p_uncond must be in [0,1)");
  Rng rng = make_rng(seed);
  NoiseDraw d;
  d.t = std::uniform_int_distribution<std::size_t>(0, schedule.T - 1)(rng);
  d.drop_text = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p_uncond;
  d.eps = Tensor(Shape{3, scenegen::kImageSize, scenegen::kImageSize});
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : d.eps.data()) v = n(rng);
  return d;
}

LossResult diffusion_loss(const ParameterStore& params, std::span<const TrainExample> batch,
                          const NoiseSchedule& schedule, double p_uncond, int threads, std::size_t chunk,
                          const std::function<bool(const std::string&)>& trainable) {
  auto chunks = run_chunks(params, batch, schedule, p_uncond, threads, chunk, true, trainable);
  LossResult r;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& c : chunks) {
    r.loss += c.loss_sum;
    for (auto& [name, g] : c.grads) {
      auto it = r.grads.find(name);
      if (it == r.grads.end()) {
        r.grads.emplace(name, std::move(g));
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
      }
    }
  }
  r.loss *= inv;
  for (auto& [_, g] : r.grads)
    for (double& v : g.data()) v *= inv;
  if (!std::isfinite(r.loss)) throw NumericError("non-finite diffusion loss");
  return r;
}

double evaluate_loss(const ParameterStore& params, std::span<const TrainExample> examples,
                     const NoiseSchedule& schedule, int threads, std::size_t chunk) {
  auto chunks = run_chunks(params, examples, schedule, 0.0, threads, chunk, false, {});
  double s = 0.0;
  for (const auto& c : chunks) s += c.loss_sum;
  return s / static_cast<double>(examples.size());
}

std::vector<TrainExample> examples_for(const scenegen::Dataset& data, const std::string& split, std::uint64_t seed,
                                       std::uint64_t epoch) {
  std::vector<TrainExample> out;
  const std::uint64_t base = derive_seed(derive_seed(seed, "noise"), epoch);
  for (std::size_t i : data.indices(split)) {
    const auto& r = data.records[i];
    out.push_back({scenegen::to_chw(data.positive(i)), TextInput::of(r.caption), derive_seed(base, r.id)});
  }
  return out;
}

void write_train_log(const std::vector<EpochLog>& curve, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out << "epoch,train_loss,val_loss,wall_time\n";
    out.precision(17);
    for (const auto& e : curve)
      out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.wall_seconds << '\n';
  }
  std::filesystem::rename(tmp, path);
}

namespace {

std::filesystem::path epoch_path(const std::filesystem::path& dir, std::size_t epoch, const char* ext) {
  char name[32];
  std::snprintf(name, sizeof(name), "epoch_%03zu.%s", epoch, ext);
  return dir / "checkpoints" / name;
}

// Adam moments go into a checkpoint file as "m/<name>", "v/<name>" and "step".
void save_adam(const numerics::AdamState& s, const std::filesystem::path& path) {
  ParameterStore p;
  for (const auto& [name, t] : s.m) p.add("m/" + name, t);
  for (const auto& [name, t] : s.v) p.add("v/" + name, t);
  p.add("step", Tensor(Shape{1}, static_cast<double>(s.step)));
  numerics::save_checkpoint(p, path);
}

numerics::AdamState load_adam(const std::filesystem::path& path, double lr) {
  const ParameterStore p = numerics::load_checkpoint(path);
  numerics::AdamState s;
  s.config.lr = lr;
  for (const auto& name : p.names()) {
    if (name.rfind("m/", 0) == 0) s.m[name.substr(2)] = p.at(name);
    if (name.rfind("v/", 0) == 0) s.v[name.substr(2)] = p.at(name);
  }
  s.step = static_cast<std::uint64_t>(p.at("step")[0]);
  return s;
}

std::vector<EpochLog> read_train_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<EpochLog> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    EpochLog e;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf", &e.epoch, &e.train_loss, &e.val_loss, &e.wall_seconds) != 4)
      throw IoError("malformed line in " + path.string() + ": " + line);
    out.push_back(e);
  }
  return out;
}

}  // namespace

std::size_t last_complete_epoch(const std::filesystem::path& out_dir) {
  std::size_t last = 0;
  for (std::size_t e = 1; std::filesystem::exists(epoch_path(out_dir, e, "ckpt")) &&
                          std::filesystem::exists(epoch_path(out_dir, e, "adam"));
       ++e)
    last = e;
  return last;
}

TrainResult train(const TrainConfig& config, const scenegen::Dataset& data, std::optional<ParameterStore> init) {
  if (!(config.lr > 0.0)) throw PreconditionError("lr must be positive");
  if (!(config.p_uncond >= 0.0 && config.p_uncond < 1.0)) throw PreconditionError("p_uncond must be in [0,1)");
  if (config.batch_size == 0 || config.epochs == 0) throw PreconditionError("batch size and epochs must be positive");
  const NoiseSchedule schedule = make_schedule();
  TrainResult result;
  result.params = init ? std::move(*init) : init_denoiser(config.model, derive_seed(config.seed, "init"));
  const auto val = examples_for(data, "val", derive_seed(config.seed, "val"), 0);
  if (val.empty()) throw PreconditionError("dataset has no validation records");
  const auto train_idx = data.indices("train");
  if (train_idx.empty()) throw PreconditionError("dataset has no training records");
  if (!config.out_dir.empty()) std::filesystem::create_directories(config.out_dir / "checkpoints");

  result.initial_val_loss = evaluate_loss(result.params, val, schedule, config.threads);
  numerics::AdamState adam;
  adam.config.lr = config.lr;
  std::size_t first = 1;
  if (config.resume) {
    if (config.out_dir.empty()) throw PreconditionError("resume needs an output directory");
    if (const std::size_t done = last_complete_epoch(config.out_dir); done > 0) {
      result.params = numerics::load_checkpoint(epoch_path(config.out_dir, done, "ckpt"));
      adam = load_adam(epoch_path(config.out_dir, done, "adam"), config.lr);
      result.curve = read_train_log(config.out_dir / "train_log.csv");
      result.curve.resize(std::min(result.curve.size(), done));
      first = done + 1;
    }
  }
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = first; epoch <= config.epochs; ++epoch) {
    auto examples = examples_for(data, "train", config.seed, epoch);
    Rng order_rng = make_rng(derive_seed(derive_seed(config.seed, "order"), epoch));
    std::shuffle(examples.begin(), examples.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < examples.size(); b += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, examples.size() - b);
      std::span<const TrainExample> batch(examples.data() + b, n);
      LossResult lr = diffusion_loss(result.params, batch, schedule, config.p_uncond, config.threads, config.chunk);
      numerics::adam_step(result.params, lr.grads, adam);
      loss_sum += lr.loss * static_cast<double>(n);
      seen += n;
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(seen);
    log.val_loss = evaluate_loss(result.params, val, schedule, config.threads);
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!std::isfinite(log.train_loss) || !std::isfinite(log.val_loss))
      throw NumericError("training diverged in epoch " + std::to_string(epoch));
    result.curve.push_back(log);
    if (!config.out_dir.empty()) {
      // Parameters first: an epoch counts as complete once its optimizer state exists.
      numerics::save_checkpoint(result.params, epoch_path(config.out_dir, epoch, "ckpt"));
      save_adam(adam, epoch_path(config.out_dir, epoch, "adam"));
      numerics::save_checkpoint(result.params, config.out_dir / "model.ckpt");
      write_train_log(result.curve, config.out_dir / "train_log.csv");
    }
    if (config.on_epoch) config.on_epoch(epoch, log.train_loss, log.val_loss);
  }
  return result;
}

Tensor sample_image(const ParameterStore& params, const NoiseSchedule& schedule, const TextInput& text,
                    std::uint64_t seed) {
  Rng rng = make_rng(derive_seed(seed, "sample"));
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor x(Shape{1, 3, scenegen::kImageSize, scenegen::kImageSize});
  for (double& v : x.data()) v = n(rng);
  DenoiserGraph g(params, config_of(params), 1);
  const TextInput texts[1] = {text};
  for (std::size_t t = schedule.T; t-- > 0;) {
    const std::size_t ts[1] = {t};
    g.run(x, Tensor(x.shape(), 0.0), ts, texts);
    const Tensor& eps = g.prediction();
    const double a = schedule.alphas[t], ab = schedule.alpha_bar[t];
    const double sigma = t > 0 ? std::sqrt(schedule.betas[t]) : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = (x[i] - (1.0 - a) / std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(a);
      if (sigma > 0.0) x[i] += sigma * n(rng);
    }
  }
  return x.reshaped(Shape{3, scenegen::kImageSize, scenegen::kImageSize});
}

}  // namespace ditm::diffusion
