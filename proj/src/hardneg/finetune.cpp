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

#include "ditm/hardneg/finetune.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "ditm/common/error.hpp"
#include "ditm/common/parallel.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/diffusion/train.hpp"
#include "ditm/itm/scorer.hpp"
#include "ditm/numerics/adam.hpp"
#include "ditm/numerics/checkpoint.hpp"
#include "ditm/scenegen/caption.hpp"
#include "ditm/scenegen/render.hpp"

namespace ditm::hardneg {

namespace {

using numerics::Shape;
constexpr std::size_t kPixels = 3 * scenegen::kImageSize * scenegen::kImageSize;

double clip_factor(const LossOptions& o) {
  if (!o.use_negatives) return 0.0;
  if (!o.lambda) throw PreconditionError("hard-negative loss needs an explicit lambda");
  if (!std::isfinite(*o.lambda)) throw PreconditionError("lambda must be finite");
  return std::abs(*o.lambda);
}

struct Chunk {
  double total = 0.0, pos = 0.0, neg = 0.0;
  numerics::Gradients grads;
};

// Noised inputs for one side (positive or negative) of a chunk.
struct Side {
  Tensor x_t, eps;
  std::vector<std::size_t> t;
  std::vector<TextInput> text;
};

Side make_side(std::span<const HardNegExample> ex, const diffusion::NoiseSchedule& schedule, bool negative) {
  const std::size_t n = ex.size();
  Side s{Tensor(Shape{n, 3, scenegen::kImageSize, scenegen::kImageSize}),
         Tensor(Shape{n, 3, scenegen::kImageSize, scenegen::kImageSize}), std::vector<std::size_t>(n),
         std::vector<TextInput>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const HardNegExample& e = ex[i];
    const Tensor& x0 = negative ? e.x_neg : e.x_pos;
    if (x0.size() != kPixels) throw ShapeError("hard-negative image must be [3,32,32]");
    const auto d = diffusion::draw_noise(negative ? e.neg_seed : e.pos_seed, schedule, 0.0);
    const Tensor xt = diffusion::add_noise(x0, d.eps, d.t, schedule);
    std::copy(xt.raw(), xt.raw() + kPixels, s.x_t.raw() + i * kPixels);
    std::copy(d.eps.raw(), d.eps.raw() + kPixels, s.eps.raw() + i * kPixels);
    s.t[i] = d.t;
    s.text[i] = negative ? e.w_neg : e.w_pos;
  }
  return s;
}

}  // namespace

double example_loss(double pos_error, double neg_error, const LossOptions& options) {
  const double k = clip_factor(options);
  if (!options.use_negatives) return pos_error;
  if (!options.clip) return pos_error - neg_error;
  return pos_error + std::max(-neg_error, -k * pos_error);
}

HardNegLoss hardneg_loss(const ParameterStore& params, std::span<const HardNegExample> batch,
                         const diffusion::NoiseSchedule& schedule, const LossOptions& options, int threads,
                         std::size_t chunk, const std::function<bool(const std::string&)>& trainable) {
  const double k = clip_factor(options);
  if (batch.empty()) throw PreconditionError("hard-negative loss over an empty batch");
  if (chunk == 0) throw PreconditionError("chunk size must be positive");
  for (const auto& e : batch)
    if (options.use_negatives && e.w_pos == e.w_neg && e.x_pos == e.x_neg)
      throw PreconditionError("hard negative equals its positive");
  const auto cfg = diffusion::config_of(params);
  const std::size_t n_chunks = (batch.size() + chunk - 1) / chunk;
  std::vector<Chunk> out(n_chunks);
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * chunk, n = std::min(chunk, batch.size() - begin);
    const auto ex = batch.subspan(begin, n);
    numerics::Graph g(params);
    if (trainable) g.set_trainable(trainable);
    numerics::TensorMap inputs;
    const auto pos_nodes = diffusion::add_denoiser(g, cfg, n, "pos.");
    const Side pos = make_side(ex, schedule, false);
    diffusion::bind_denoiser(pos_nodes, cfg, pos.x_t, pos.eps, pos.t, pos.text, inputs);
    numerics::NodeId per_example = pos_nodes.errors;
    numerics::NodeId neg_errors{};
    if (options.use_negatives) {
      const auto neg_nodes = diffusion::add_denoiser(g, cfg, n, "neg.");
      const Side neg = make_side(ex, schedule, true);
      diffusion::bind_denoiser(neg_nodes, cfg, neg.x_t, neg.eps, neg.t, neg.text, inputs);
      neg_errors = neg_nodes.errors;
      numerics::NodeId neg_term = g.scale(neg_errors, -1.0);
      if (options.clip) neg_term = g.maximum(neg_term, g.scale(pos_nodes.errors, -k));
      per_example = g.add(pos_nodes.errors, neg_term);
    }
    const numerics::NodeId total = g.mean(per_example);
    g.forward(std::move(inputs));
    const double w = static_cast<double>(n);
    out[c].total = g.value(total).item() * w;
    for (double v : g.value(pos_nodes.errors).data()) out[c].pos += v;
    if (options.use_negatives)
      for (double v : g.value(neg_errors).data()) out[c].neg += v;
    out[c].grads = g.backward(total);
    for (auto& [_, t] : out[c].grads)
      for (double& v : t.data()) v *= w;
  });

  HardNegLoss r;
  for (auto& c : out) {
    r.total += c.total;
    r.pos += c.pos;
    r.neg += c.neg;
    for (auto& [name, g] : c.grads) {
      auto it = r.grads.find(name);
      if (it == r.grads.end()) {
        r.grads.emplace(name, std::move(g));
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  r.total *= inv;
  r.pos *= inv;
  r.neg *= inv;
  for (auto& [_, g] : r.grads)
    for (double& v : g.data()) v *= inv;
  if (!std::isfinite(r.total)) throw NumericError("non-finite hard-negative loss");
  return r;
}

std::size_t select_epoch(const std::vector<EpochReport>& epochs) {
  if (epochs.empty()) throw PreconditionError("no epochs to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < epochs.size(); ++i)
    if (epochs[i].val_accuracy > epochs[best].val_accuracy) best = i;
  return epochs[best].epoch;
}

std::vector<HardNegExample> epoch_examples(const HardNegConfig& config, const scenegen::Dataset& data,
                                           std::uint64_t epoch) {
  std::vector<HardNegExample> out;
  const std::uint64_t base = derive_seed(derive_seed(config.seed, "hardneg-epoch"), epoch);
  for (std::size_t i : data.indices("train")) {
    const auto& r = data.records[i];
    const std::uint64_t rs = derive_seed(base, r.id);
    Rng rng = make_rng(derive_seed(rs, "pick"));
    const Tensor x = scenegen::to_chw(data.positive(i));
    const TextInput w = TextInput::of(r.caption);
    std::vector<std::string> options;
    for (const auto& [kind, _] : r.text_negatives)
      if (config.text_subtypes.empty() ||
          std::find(config.text_subtypes.begin(), config.text_subtypes.end(), kind) != config.text_subtypes.end())
        options.push_back(kind);
    std::shuffle(options.begin(), options.end(), rng);
    std::size_t slot = 0;
    auto seeds = [&](HardNegExample& e) {
      e.pos_seed = derive_seed(rs, slot++);
      e.neg_seed = config.shared_noise ? e.pos_seed : derive_seed(derive_seed(rs, "neg"), slot);
    };
    for (std::size_t k = 0; k < std::min(config.text_negatives_per_positive, options.size()); ++k) {
      HardNegExample e{x, x, w, TextInput::of(r.text_negatives.at(options[k])), 0, 0};
      seeds(e);
      out.push_back(std::move(e));
    }
    if (config.image_negatives) {
      HardNegExample e{x, scenegen::to_chw(data.negative(i)), w, w, 0, 0};
      seeds(e);
      out.push_back(std::move(e));
    }
  }
  return out;
}

double validation_accuracy(const ParameterStore& params, const scenegen::Dataset& data, std::size_t max_records,
                           std::size_t bank_size, std::uint64_t bank_seed, int threads) {
  const itm::DenoiserPredictor model(params);
  const auto bank = itm::make_bank(bank_size, bank_seed, diffusion::make_schedule());
  std::size_t correct = 0, total = 0;
  for (std::size_t i : data.indices("val")) {
    if (total >= max_records) break;
    const auto& r = data.records[i];
    std::vector<TextInput> caps = {TextInput::of(r.caption)};
    for (auto k : scenegen::kAllSwaps) {
      auto it = r.text_negatives.find(std::string(scenegen::name_of(k)));
      if (it != r.text_negatives.end()) caps.push_back(TextInput::of(it->second));
    }
    if (caps.size() < 2) continue;
    const auto res = itm::text_retrieve(model, scenegen::to_chw(data.positive(i)), caps, bank, threads);
    correct += res.ranking[0] == 0;
    ++total;
  }
  if (total == 0) throw PreconditionError("no validation records with swap negatives");
  return static_cast<double>(correct) / static_cast<double>(total);
}

FinetuneResult finetune(const HardNegConfig& config, const ParameterStore& base, const scenegen::Dataset& data) {
  clip_factor(config.loss);
  if (!(config.lr > 0.0)) throw PreconditionError("lr must be positive");
  if (config.epochs == 0 || config.batch_size == 0) throw PreconditionError("epochs and batch size must be positive");
  const auto schedule = diffusion::make_schedule();
  if (!config.out_dir.empty()) std::filesystem::create_directories(config.out_dir / "checkpoints");

  FinetuneResult result;
  result.report.config = config;
  result.report.base_val_accuracy =
      validation_accuracy(base, data, config.val_records, config.val_bank_size, config.val_bank_seed, config.threads);
  ParameterStore params = base;
  std::vector<ParameterStore> snapshots;
  numerics::AdamState adam;
  adam.config.lr = config.lr;
  const auto start = std::chrono::steady_clock::now();
  const auto trainable = [](const std::string& name) { return diffusion::in_adapter_scope(name); };
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto examples = epoch_examples(config, data, epoch);
    if (examples.empty()) throw PreconditionError("no hard-negative training examples");
    Rng order = make_rng(derive_seed(derive_seed(config.seed, "hardneg-order"), epoch));
    std::shuffle(examples.begin(), examples.end(), order);
    EpochReport rep;
    rep.epoch = epoch;
    for (std::size_t b = 0; b < examples.size(); b += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, examples.size() - b);
      const auto loss = hardneg_loss(params, std::span<const HardNegExample>(examples.data() + b, n), schedule,
                                     config.loss, config.threads, config.chunk, trainable);
      numerics::adam_step(params, loss.grads, adam);
      rep.loss_total += loss.total * static_cast<double>(n);
      rep.loss_pos += loss.pos * static_cast<double>(n);
      rep.loss_neg += loss.neg * static_cast<double>(n);
    }
    const double inv = 1.0 / static_cast<double>(examples.size());
    rep.loss_total *= inv;
    rep.loss_pos *= inv;
    rep.loss_neg *= inv;
    if (!std::isfinite(rep.loss_total) || !params.all_finite())
      throw NumericError("hard-negative finetuning diverged in epoch " + std::to_string(epoch));
    rep.val_accuracy = validation_accuracy(params, data, config.val_records, config.val_bank_size,
                                           config.val_bank_seed, config.threads);
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.report.epochs.push_back(rep);
    snapshots.push_back(params);
    if (!config.out_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%03zu.ckpt", epoch);
      numerics::save_checkpoint(params, config.out_dir / "checkpoints" / name);
      write_report(result.report, config.out_dir / "report.json");
    }
    if (config.on_epoch) config.on_epoch(epoch, rep.val_accuracy);
  }
  result.report.selected_epoch = select_epoch(result.report.epochs);
  result.params = std::move(snapshots[result.report.selected_epoch - 1]);
  if (!config.out_dir.empty()) {
    numerics::save_checkpoint(result.params, config.out_dir / "model.ckpt");
    write_report(result.report, config.out_dir / "report.json");
  }
  return result;
}

void write_report(const FinetuneReport& report, const std::filesystem::path& path) {
  const auto& c = report.config;
  nlohmann::json j;
  j["config"] = {{"lambda", c.loss.lambda ? nlohmann::json(*c.loss.lambda) : nlohmann::json(nullptr)},
                 {"clip", c.loss.clip},
                 {"use_negatives", c.loss.use_negatives},
                 {"text_subtypes", c.text_subtypes},
                 {"text_negatives_per_positive", c.text_negatives_per_positive},
                 {"image_negatives", c.image_negatives},
                 {"shared_noise", c.shared_noise},
                 {"lr", c.lr},
                 {"epochs", c.epochs},
                 {"batch_size", c.batch_size},
                 {"seed", c.seed},
                 {"threads", c.threads},
                 {"chunk", c.chunk},
                 {"val_records", c.val_records},
                 {"val_bank_size", c.val_bank_size},
                 {"val_bank_seed", c.val_bank_seed},
                 {"adapter_scope", {"text.", "film."}}};
  j["base_val_accuracy"] = report.base_val_accuracy;
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : report.epochs)
    j["epochs"].push_back({{"epoch", e.epoch},
                           {"loss_pos", e.loss_pos},
                           {"loss_neg", e.loss_neg},
                           {"loss_total", e.loss_total},
                           {"val_accuracy", e.val_accuracy},
                           {"wall_seconds", e.wall_seconds}});
  j["selected_epoch"] = report.selected_epoch;
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

FinetuneReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  FinetuneReport r;
  try {
    const auto j = nlohmann::json::parse(in);
    const auto& c = j.at("config");
    if (!c.at("lambda").is_null()) r.config.loss.lambda = c.at("lambda").get<double>();
    r.config.loss.clip = c.at("clip").get<bool>();
    r.config.loss.use_negatives = c.at("use_negatives").get<bool>();
    r.config.text_subtypes = c.at("text_subtypes").get<std::vector<std::string>>();
    r.config.text_negatives_per_positive = c.at("text_negatives_per_positive").get<std::size_t>();
    r.config.image_negatives = c.at("image_negatives").get<bool>();
    r.config.shared_noise = c.at("shared_noise").get<bool>();
    r.config.lr = c.at("lr").get<double>();
    r.config.epochs = c.at("epochs").get<std::size_t>();
    r.config.batch_size = c.at("batch_size").get<std::size_t>();
    r.config.seed = c.at("seed").get<std::uint64_t>();
    r.config.threads = c.at("threads").get<int>();
    r.config.chunk = c.at("chunk").get<std::size_t>();
    r.config.val_records = c.at("val_records").get<std::size_t>();
    r.config.val_bank_size = c.at("val_bank_size").get<std::size_t>();
    r.config.val_bank_seed = c.at("val_bank_seed").get<std::uint64_t>();
    r.base_val_accuracy = j.at("base_val_accuracy").get<double>();
    for (const auto& e : j.at("epochs"))
      r.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("loss_pos").get<double>(),
                          e.at("loss_neg").get<double>(), e.at("loss_total").get<double>(),
                          e.at("val_accuracy").get<double>(), e.at("wall_seconds").get<double>()});
    r.selected_epoch = j.at("selected_epoch").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return r;
}

SanityReport generative_sanity(const ParameterStore& before, const ParameterStore& after,
                               const scenegen::Dataset& data, std::uint64_t seed, int threads, double threshold) {
  const auto schedule = diffusion::make_schedule();
  const auto val = diffusion::examples_for(data, "val", derive_seed(seed, "sanity"), 0);
  if (val.empty()) throw PreconditionError("no held-out scenes for the generative sanity check");
  SanityReport r;
  r.loss_before = diffusion::evaluate_loss(before, val, schedule, threads);
  r.loss_after = diffusion::evaluate_loss(after, val, schedule, threads);
  r.ratio = r.loss_after / r.loss_before;
  r.flagged = r.ratio > threshold;
  return r;
}

}  // namespace ditm::hardneg
