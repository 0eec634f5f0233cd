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

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cli.hpp"
#include "ditm/bench/bench.hpp"
#include "ditm/bias/bias.hpp"
#include "ditm/common/error.hpp"
#include "ditm/diffusion/denoiser.hpp"
#include "ditm/diffusion/schedule.hpp"
#include "ditm/itm/scorer.hpp"
#include "ditm/numerics/checkpoint.hpp"
#include "ditm/scenegen/render.hpp"

namespace py = pybind11;
using namespace ditm;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

/// A denoiser with its parameters; the predictor references them.
struct Model {
  explicit Model(numerics::ParameterStore p) : params(std::move(p)), predictor(params) {}
  numerics::ParameterStore params;
  itm::DenoiserPredictor predictor;
};

numerics::Tensor image_tensor(const Array& a) {
  if (a.ndim() != 3 || a.shape(0) != 3 || a.shape(1) != 32 || a.shape(2) != 32)
    throw ShapeError("images are [3, 32, 32] arrays in [-1, 1]");
  return numerics::Tensor(numerics::Shape{3, 32, 32}, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const numerics::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

itm::NoiseBank bank_of(std::size_t n, std::uint64_t seed) { return itm::make_bank(n, seed, diffusion::make_schedule()); }

py::dict record_dict(const itm::ScoreRecord& r) {
  py::dict d;
  d["conditional"] = r.conditional;
  d["unconditional"] = r.unconditional;
  d["normalized"] = r.normalized;
  d["bank_id"] = r.bank_id;
  return d;
}

py::dict retrieval_dict(const itm::Retrieval& r) {
  py::dict d;
  d["ranking"] = r.ranking;
  py::list recs;
  for (const auto& rec : r.records) recs.append(record_dict(rec));
  d["records"] = recs;
  d["degenerate"] = r.degenerate;
  return d;
}

std::vector<diffusion::TextInput> texts(const std::vector<std::string>& captions) {
  std::vector<diffusion::TextInput> out;
  for (const auto& c : captions) out.push_back(diffusion::TextInput::of(c));
  return out;
}

std::vector<numerics::Tensor> tensors(const std::vector<Array>& images) {
  std::vector<numerics::Tensor> out;
  for (const auto& a : images) out.push_back(image_tensor(a));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Diffusion image-text matching: rendering, scoring, retrieval and bias statistics.";

  py::register_exception<Error>(m, "DitmError", PyExc_RuntimeError);

  m.def(
      "render",
      [](const std::string& caption, std::uint64_t seed) {
        return to_array(scenegen::to_chw(scenegen::render(bias::scene_for(caption, seed), seed)));
      },
      py::arg("caption"), py::arg("seed") = 0,
      "Render a scene matching the caption as a [3, 32, 32] array in [-1, 1].");
  m.def("gray_image", [] { return to_array(scenegen::to_chw(scenegen::gray_image())); });

  py::class_<Model>(m, "Model")
      .def_static(
          "init",
          [](std::size_t width, std::uint64_t seed) {
            diffusion::DenoiserConfig c;
            c.width = width;
            return std::make_unique<Model>(diffusion::init_denoiser(c, seed));
          },
          py::arg("width") = 8, py::arg("seed") = 0, "A freshly initialised denoiser (predicts zero noise).")
      .def_static(
          "load", [](const std::filesystem::path& p) { return std::make_unique<Model>(numerics::load_checkpoint(p)); },
          py::arg("path"))
      .def("save", [](const Model& m, const std::filesystem::path& p) { numerics::save_checkpoint(m.params, p); })
      .def_property_readonly("width", [](const Model& m) { return diffusion::config_of(m.params).width; })
      .def(
          "score",
          [](const Model& m, const Array& image, const std::string& caption, std::size_t bank_size,
             std::uint64_t bank_seed) {
            const auto bank = bank_of(bank_size, bank_seed);
            return record_dict(itm::score(m.predictor, image_tensor(image), diffusion::TextInput::of(caption), bank));
          },
          py::arg("image"), py::arg("caption"), py::arg("bank_size") = 10, py::arg("bank_seed") = 0,
          "Conditional, unconditional and normalized error over a shared noise bank.")
      .def(
          "text_retrieve",
          [](const Model& m, const Array& image, const std::vector<std::string>& captions, std::size_t bank_size,
             std::uint64_t bank_seed) {
            return retrieval_dict(
                itm::text_retrieve(m.predictor, image_tensor(image), texts(captions), bank_of(bank_size, bank_seed)));
          },
          py::arg("image"), py::arg("captions"), py::arg("bank_size") = 10, py::arg("bank_seed") = 0)
      .def(
          "image_retrieve",
          [](const Model& m, const std::vector<Array>& images, const std::string& caption, bool normalized,
             std::size_t bank_size, std::uint64_t bank_seed) {
            const auto bank = bank_of(bank_size, bank_seed);
            const auto imgs = tensors(images);
            const auto text = diffusion::TextInput::of(caption);
            return retrieval_dict(normalized ? itm::image_retrieve_normalized(m.predictor, imgs, text, bank)
                                             : itm::image_retrieve_naive(m.predictor, imgs, text, bank));
          },
          py::arg("images"), py::arg("caption"), py::arg("normalized") = true, py::arg("bank_size") = 10,
          py::arg("bank_seed") = 0);

  m.def(
      "class_posterior", [](const std::vector<double>& e) { return itm::class_posterior(e); },
      py::arg("conditional_errors"));
  m.def(
      "rank_ascending", [](const std::vector<double>& v) { return itm::rank_ascending(v); }, py::arg("values"));

  m.def(
      "wilson_interval",
      [](std::size_t correct, std::size_t total) {
        const auto a = bench::make_accuracy(correct, total);
        return py::make_tuple(a.accuracy, a.ci_low, a.ci_high);
      },
      py::arg("correct"), py::arg("total"), "(accuracy, low, high) with a 95% Wilson interval.");

  m.def(
      "effect_size",
      [](const std::vector<double>& x, const std::vector<double>& y) { return bias::effect_size(x, y); },
      py::arg("psi_x"), py::arg("psi_y"));
  m.def(
      "permutation_test",
      [](const std::vector<double>& x, const std::vector<double>& y, std::uint64_t seed, std::size_t n_mc,
         std::uint64_t max_exact) {
        bias::PermutationOptions o;
        o.seed = seed;
        o.n_mc = n_mc;
        o.max_exact = max_exact;
        const auto r = bias::permutation_test(x, y, o);
        py::dict d;
        d["p_value"] = r.p_value;
        d["n_permutations"] = r.n_permutations;
        d["exact"] = r.exact;
        return d;
      },
      py::arg("psi_x"), py::arg("psi_y"), py::arg("seed") = 0, py::arg("n_mc") = 10000,
      py::arg("max_exact") = 2000000);

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a ditm command in-process; returns (exit code, stdout, stderr).");
}
