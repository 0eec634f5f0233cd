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

#include "ditm/scenegen/dataset.hpp"

#include <algorithm>
#include <random>

#include "ditm/common/error.hpp"
#include "ditm/common/hash.hpp"
#include "ditm/common/parallel.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/scenegen/io.hpp"

namespace ditm::scenegen {

std::string split_of(const SceneSpec& spec) {
  std::vector<std::string> parts;
  for (const auto& o : spec.objects)
    parts.push_back(std::string(name_of(o.size)) + " " + std::string(name_of(o.color)) + " " +
                    std::string(name_of(o.shape)) + " @" + std::to_string(o.cell.row) + "," +
                    std::to_string(o.cell.col));
  std::sort(parts.begin(), parts.end());
  Fnv1a h;
  for (const auto& p : parts) h.update(p).update("|");
  h.update(spec.relation ? "related" : "free");
  return mix_seed(h.digest()) % 5 == 0 ? "val" : "train";
}

std::vector<std::size_t> Dataset::indices(const std::string& split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

namespace {

std::map<std::string, std::string> text_negatives_for(const SceneSpec& scene, const Caption& positive,
                                                      std::uint64_t seed) {
  std::map<std::string, std::string> out;
  for (SwapKind k : kAllSwaps) {
    try {
      Caption neg = swap_negative(positive, k);
      if (!matches(neg.structure, scene)) out.emplace(std::string(name_of(k)), neg.text());
    } catch (const InapplicableError&) {
    }
  }
  Rng rng = make_rng(derive_seed(seed, "replace"));
  for (ReplaceKind k : {ReplaceKind::kRecolor, ReplaceKind::kReshape, ReplaceKind::kResize, ReplaceKind::kRerelate}) {
    std::vector<Caption> options;
    for (auto& c : replace_negatives(positive, k))
      if (!matches(c.structure, scene)) options.push_back(std::move(c));
    if (options.empty()) continue;
    const auto pick = std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng);
    out.emplace(std::string(name_of(k)), options[pick].text());
  }
  return out;
}

}  // namespace

Dataset build_dataset(const DatasetConfig& config) {
  if (config.n_train == 0 || config.n_val == 0) throw PreconditionError("n_train and n_val must be positive");
  Dataset data;
  data.config = config;
  // Scene draws are sequential and cheap; rendering below is parallel.
  std::vector<Record> train, val;
  for (std::uint64_t i = 0; train.size() < config.n_train || val.size() < config.n_val; ++i) {
    Record r;
    const std::uint64_t s = derive_seed(derive_seed(config.seed, "dataset"), i);
    r.scene = sample_scene(s);
    r.split = split_of(r.scene);
    auto& bucket = r.split == "val" ? val : train;
    const std::size_t want = r.split == "val" ? config.n_val : config.n_train;
    if (bucket.size() >= want) continue;
    r.render_seed = derive_seed(s, "render");
    r.negative_render_seed = derive_seed(s, "negative-render");
    r.image_negative = image_hard_negative(r.scene, derive_seed(s, "image-negative"));
    const Caption pos = caption_of(r.scene);
    r.caption = pos.text();
    r.text_negatives = text_negatives_for(r.scene, pos, derive_seed(s, "text-negatives"));
    bucket.push_back(std::move(r));
  }
  data.records = std::move(train);
  data.records.insert(data.records.end(), val.begin(), val.end());
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    auto& r = data.records[i];
    r.id = i;
    r.image_offset = 2 * i * kImageBytes;
    r.negative_offset = (2 * i + 1) * kImageBytes;
  }
  data.images.resize(2 * data.records.size());
  parallel_for(data.records.size(), config.threads, [&](std::size_t i) {
    const auto& r = data.records[i];
    data.images[2 * i] = render(r.scene, r.render_seed);
    data.images[2 * i + 1] = render(r.image_negative, r.negative_render_seed);
  });
  return data;
}

void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<nlohmann::json> rows;
  for (const auto& r : data.records) {
    rows.push_back({{"id", r.id},
                    {"split", r.split},
                    {"scene", scene_to_json(r.scene)},
                    {"render_seed", r.render_seed},
                    {"caption", r.caption},
                    {"text_negatives", r.text_negatives},
                    {"image_negative", scene_to_json(r.image_negative)},
                    {"negative_render_seed", r.negative_render_seed},
                    {"image_offset", r.image_offset},
                    {"negative_offset", r.negative_offset}});
  }
  write_jsonl(rows, dir / "manifest.jsonl");
  write_images(data.images, dir / "images.bin");
  nlohmann::json meta = {{"n_train", data.config.n_train},
                         {"n_val", data.config.n_val},
                         {"seed", data.config.seed},
                         {"image_bytes", kImageBytes},
                         {"layout", "uint8 RGB, 32x32, row-major HWC; value = byte/127.5 - 1"}};
  write_jsonl({meta}, dir / "dataset.json");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset data;
  const auto meta = read_jsonl(dir / "dataset.json");
  if (meta.size() != 1) throw IoError("malformed " + (dir / "dataset.json").string());
  data.config.n_train = meta[0].at("n_train").get<std::size_t>();
  data.config.n_val = meta[0].at("n_val").get<std::size_t>();
  data.config.seed = meta[0].at("seed").get<std::uint64_t>();
  for (const auto& j : read_jsonl(dir / "manifest.jsonl")) {
    Record r;
    try {
      r.id = j.at("id").get<std::size_t>();
      r.split = j.at("split").get<std::string>();
      r.scene = scene_from_json(j.at("scene"));
      r.render_seed = j.at("render_seed").get<std::uint64_t>();
      r.caption = j.at("caption").get<std::string>();
      r.text_negatives = j.at("text_negatives").get<std::map<std::string, std::string>>();
      r.image_negative = scene_from_json(j.at("image_negative"));
      r.negative_render_seed = j.at("negative_render_seed").get<std::uint64_t>();
      r.image_offset = j.at("image_offset").get<std::uint64_t>();
      r.negative_offset = j.at("negative_offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError((dir / "manifest.jsonl").string() + ": " + e.what());
    }
    if (r.id != data.records.size()) throw IoError("manifest ids out of order in " + dir.string());
    data.records.push_back(std::move(r));
  }
  data.images = read_images(dir / "images.bin");
  if (data.images.size() != 2 * data.records.size())
    throw IoError("image blob does not match manifest in " + dir.string());
  return data;
}

}  // namespace ditm::scenegen
