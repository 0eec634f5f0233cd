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

#include "ditm/scenegen/io.hpp"

#include <fstream>

#include "ditm/common/error.hpp"

namespace ditm::scenegen {

namespace {

template <typename E, std::size_t N>
E enum_from(const std::array<E, N>& values, const std::string& word, const char* what) {
  for (E v : values)
    if (name_of(v) == word) return v;
  throw IoError(std::string("unknown ") + what + " '" + word + "'");
}

}  // namespace

nlohmann::json scene_to_json(const SceneSpec& spec) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : spec.objects)
    objs.push_back({{"shape", name_of(o.shape)},
                    {"color", name_of(o.color)},
                    {"size", name_of(o.size)},
                    {"row", o.cell.row},
                    {"col", o.cell.col}});
  return {{"objects", objs},
          {"relation", spec.relation ? nlohmann::json(name_of(*spec.relation)) : nlohmann::json(nullptr)}};
}

SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  for (const auto& o : j.at("objects")) {
    SceneObject obj;
    obj.shape = enum_from(kAllShapes, o.at("shape").get<std::string>(), "shape");
    obj.color = enum_from(kAllColors, o.at("color").get<std::string>(), "color");
    obj.size = enum_from(kAllSizes, o.at("size").get<std::string>(), "size");
    obj.cell.row = o.at("row").get<int>();
    obj.cell.col = o.at("col").get<int>();
    s.objects.push_back(obj);
  }
  if (!j.at("relation").is_null())
    s.relation = enum_from(kAllRelations, j.at("relation").get<std::string>(), "relation");
  validate(s);
  return s;
}

void write_images(const std::vector<Image>& images, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const auto& img : images)
    out.write(reinterpret_cast<const char*>(img.bytes.data()), static_cast<std::streamsize>(kImageBytes));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<Image> read_images(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  const auto bytes = std::filesystem::file_size(path);
  if (bytes % kImageBytes != 0) throw IoError("image blob size is not a multiple of 3072: " + path.string());
  std::vector<Image> images(bytes / kImageBytes);
  for (auto& img : images) in.read(reinterpret_cast<char*>(img.bytes.data()), kImageBytes);
  if (!in) throw IoError("read failed: " + path.string());
  return images;
}

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

void write_jsonl(const std::vector<nlohmann::json>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const auto& r : rows) out << r.dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace ditm::scenegen
