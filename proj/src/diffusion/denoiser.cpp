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

#include "ditm/diffusion/denoiser.hpp"

#include <cmath>
#include <random>

#include "ditm/common/error.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/scenegen/render.hpp"

namespace ditm::diffusion {

namespace {

using numerics::Shape;
constexpr std::size_t kSide = scenegen::kImageSize;

std::size_t vocab_size() { return scenegen::vocabulary().size(); }

class Init {
 public:
  Init(ParameterStore& store, std::uint64_t seed) : store_(store), rng_(make_rng(seed)) {}

  void normal(const std::string& name, Shape shape, double fan_in) {
    std::normal_distribution<double> d(0.0, 1.0 / std::sqrt(fan_in));
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = d(rng_);
    store_.add(name, std::move(t));
  }
  void fill(const std::string& name, Shape shape, double v) { store_.add(name, Tensor(std::move(shape), v)); }

  void linear(const std::string& name, std::size_t in, std::size_t out, bool zero = false) {
    if (zero)
      fill(name + ".w", {in, out}, 0.0);
    else
      normal(name + ".w", {in, out}, static_cast<double>(in));
    fill(name + ".b", {1, out}, 0.0);
  }

  void conv(const std::string& name, std::size_t in, std::size_t out, bool zero = false) {
    if (zero)
      fill(name + ".w", {out, in, 3, 3}, 0.0);
    else
      normal(name + ".w", {out, in, 3, 3}, static_cast<double>(in * 9));
    fill(name + ".b", {out}, 0.0);
  }

  void block(const std::string& name, std::size_t in, std::size_t out, std::size_t time_hidden) {
    conv(name + ".conv", in, out);
    linear(name + ".time", time_hidden, out);
    fill(name + ".gn.g", {out}, 1.0);
    fill(name + ".gn.b", {out}, 0.0);
  }

 private:
  ParameterStore& store_;
  Rng rng_;
};

struct Builder {
  Graph& g;
  const DenoiserConfig& c;
  std::size_t batch;

  NodeId p(const std::string& name) { return g.parameter(name); }
  NodeId linear(const std::string& name, NodeId x) { return g.add(g.matmul(x, p(name + ".w")), p(name + ".b")); }
  NodeId block(const std::string& name, NodeId x, NodeId time_features, std::size_t out) {
    NodeId h = g.conv2d(x, p(name + ".conv.w"), p(name + ".conv.b"));
    NodeId tb = g.reshape(linear(name + ".time", time_features), Shape{batch, out, 1, 1});
    h = g.add(h, tb);
    h = g.group_norm(h, p(name + ".gn.g"), p(name + ".gn.b"), c.groups);
    return g.silu(h);
  }
  NodeId film(const std::string& site, NodeId h, NodeId film_hidden, std::size_t channels) {
    NodeId gamma = g.reshape(linear("film." + site + ".gamma", film_hidden), Shape{batch, channels, 1, 1});
    NodeId beta = g.reshape(linear("film." + site + ".beta", film_hidden), Shape{batch, channels, 1, 1});
    NodeId one = g.constant(Tensor(Shape{1, 1, 1, 1}, 1.0));
    return g.add(g.mul(h, g.add(gamma, one)), beta);
  }
};

}  // namespace

ParameterStore init_denoiser(const DenoiserConfig& c, std::uint64_t seed) {
  if (c.width == 0 || c.width % c.groups != 0) throw PreconditionError("denoiser width must be a multiple of groups");
  ParameterStore s;
  Init init(s, derive_seed(seed, "denoiser-init"));
  const std::size_t w1 = c.width, w2 = 2 * c.width, w3 = 4 * c.width;
  init.linear("time.mlp", c.time_dim, c.time_hidden);
  init.normal("text.embed", {vocab_size(), c.token_dim}, 1.0);
  init.linear("text.mlp1", scenegen::kMaxCaptionTokens * c.token_dim, c.text_hidden);
  init.linear("text.mlp2", c.text_hidden, c.text_dim);
  init.normal("text.null", {1, c.text_dim}, 1.0);
  init.linear("film.hidden", c.text_dim + c.time_hidden, c.film_hidden);
  for (const char* site : {"a", "b"}) {
    init.linear(std::string("film.") + site + ".gamma", c.film_hidden, w3, true);
    init.linear(std::string("film.") + site + ".beta", c.film_hidden, w3, true);
  }
  init.block("enc1", 5, w1, c.time_hidden);
  init.block("enc2", w1, w2, c.time_hidden);
  init.block("enc3", w2, w3, c.time_hidden);
  init.block("mid", w3, w3, c.time_hidden);
  init.block("dec2", w3, w2, c.time_hidden);
  init.block("dec1", w2, w1, c.time_hidden);
  init.conv("out", w1, 3, true);  // a fresh model predicts eps = 0
  return s;
}

DenoiserConfig config_of(const ParameterStore& params) {
  DenoiserConfig c;
  try {
    c.width = params.at("enc1.conv.w").dim(0);
    c.token_dim = params.at("text.embed").dim(1);
    c.text_hidden = params.at("text.mlp1.w").dim(1);
    c.text_dim = params.at("text.mlp2.w").dim(1);
    c.time_dim = params.at("time.mlp.w").dim(0);
    c.time_hidden = params.at("time.mlp.w").dim(1);
    c.film_hidden = params.at("film.hidden.w").dim(1);
  } catch (const PreconditionError& e) {
    throw PreconditionError(std::string("parameters do not describe a denoiser: ") + e.what());
  }
  return c;
}

bool in_adapter_scope(std::string_view name) { return name.rfind("text.", 0) == 0 || name.rfind("film.", 0) == 0; }

TextInput TextInput::of(const scenegen::Caption& c) {
  TextInput t;
  t.tokens = scenegen::token_ids(c);
  t.null = false;
  return t;
}

TextInput TextInput::of(std::string_view caption_text) { return of(scenegen::parse(caption_text)); }

Tensor timestep_embedding(std::span<const std::size_t> t, std::size_t dim) {
  Tensor e(Shape{t.size(), dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      e[i * dim + k] = std::sin(static_cast<double>(t[i]) * freq);
      e[i * dim + half + k] = std::cos(static_cast<double>(t[i]) * freq);
    }
  return e;
}

DenoiserNodes add_denoiser(Graph& g, const DenoiserConfig& c, std::size_t batch, const std::string& prefix) {
  Builder b{g, c, batch};
  const std::size_t w1 = c.width, w2 = 2 * c.width, w3 = 4 * c.width;
  const std::size_t L = scenegen::kMaxCaptionTokens;
  NodeId x = g.input(prefix + "x_t", Shape{batch, 3, kSide, kSide});
  NodeId eps = g.input(prefix + "eps", Shape{batch, 3, kSide, kSide});
  NodeId temb = g.input(prefix + "t_emb", Shape{batch, c.time_dim});
  NodeId tokens = g.input(prefix + "tokens", Shape{batch * L, vocab_size()});
  NodeId mask = g.input(prefix + "text_mask", Shape{batch, 1});
  NodeId coords = g.input(prefix + "coords", Shape{batch, 2, kSide, kSide});

  NodeId tf = g.silu(b.linear("time.mlp", temb));
  NodeId emb = g.reshape(g.matmul(tokens, b.p("text.embed")), Shape{batch, L * c.token_dim});
  NodeId text = b.linear("text.mlp2", g.silu(b.linear("text.mlp1", emb)));
  NodeId one = g.constant(Tensor(Shape{1, 1}, 1.0));
  NodeId cond = g.add(g.mul(text, mask), g.mul(b.p("text.null"), g.sub(one, mask)));
  NodeId fh = g.silu(b.linear("film.hidden", g.concat({cond, tf}, 1)));

  NodeId e1 = b.block("enc1", g.concat({x, coords}, 1), tf, w1);
  NodeId e2 = b.block("enc2", g.avg_pool2(e1), tf, w2);
  NodeId e3 = b.film("a", b.block("enc3", g.avg_pool2(e2), tf, w3), fh, w3);
  NodeId m = b.film("b", b.block("mid", e3, tf, w3), fh, w3);
  NodeId d2 = g.add(g.upsample2(b.block("dec2", m, tf, w2)), e2);
  NodeId d1 = g.add(g.upsample2(b.block("dec1", d2, tf, w1)), e1);
  NodeId out = g.conv2d(d1, b.p("out.w"), b.p("out.b"));
  g.set_label(out, prefix + "eps_hat");
  NodeId err = g.row_mean_squares(g.sub(eps, out));
  g.set_label(err, prefix + "errors");
  return {prefix, batch, out, err};
}

void bind_denoiser(const DenoiserNodes& n, const DenoiserConfig& c, const Tensor& x_t, const Tensor& eps,
                   std::span<const std::size_t> t, std::span<const TextInput> text, numerics::TensorMap& inputs) {
  const std::size_t B = n.batch;
  const std::size_t L = scenegen::kMaxCaptionTokens;
  if (t.size() != B || text.size() != B) throw ShapeError("denoiser batch of " + std::to_string(B) + " got " +
                                                          std::to_string(t.size()) + " timesteps and " +
                                                          std::to_string(text.size()) + " texts");
  Tensor tokens(Shape{B * L, vocab_size()}, 0.0);
  Tensor mask(Shape{B, 1}, 0.0);
  for (std::size_t i = 0; i < B; ++i) {
    const TextInput& ti = text[i];
    if (ti.null) continue;
    if (ti.tokens.size() > L) throw PreconditionError("caption longer than the text encoder accepts");
    mask[i] = 1.0;
    for (std::size_t j = 0; j < L; ++j) {
      const std::size_t id = j < ti.tokens.size() ? ti.tokens[j] : scenegen::kPadToken;
      if (id >= vocab_size()) throw PreconditionError("token id out of vocabulary");
      tokens[(i * L + j) * vocab_size() + id] = 1.0;
    }
  }
  Tensor coords(Shape{B, 2, kSide, kSide});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t y = 0; y < kSide; ++y)
      for (std::size_t x = 0; x < kSide; ++x) {
        const double fy = 2.0 * (static_cast<double>(y) + 0.5) / kSide - 1.0;
        const double fx = 2.0 * (static_cast<double>(x) + 0.5) / kSide - 1.0;
        coords[((i * 2 + 0) * kSide + y) * kSide + x] = fy;
        coords[((i * 2 + 1) * kSide + y) * kSide + x] = fx;
      }
  inputs[n.prefix + "x_t"] = x_t;
  inputs[n.prefix + "eps"] = eps;
  inputs[n.prefix + "t_emb"] = timestep_embedding(t, c.time_dim);
  inputs[n.prefix + "tokens"] = std::move(tokens);
  inputs[n.prefix + "text_mask"] = std::move(mask);
  inputs[n.prefix + "coords"] = std::move(coords);
}

DenoiserGraph::DenoiserGraph(const ParameterStore& params, const DenoiserConfig& config, std::size_t batch)
    : config_(config), batch_(batch), graph_(params) {
  if (batch == 0) throw PreconditionError("denoiser batch must be positive");
  nodes_ = add_denoiser(graph_, config_, batch, "");
  prediction_ = nodes_.prediction;
  errors_ = nodes_.errors;
  loss_ = graph_.mean(errors_);
}

void DenoiserGraph::run(const Tensor& x_t, const Tensor& eps, std::span<const std::size_t> t,
                        std::span<const TextInput> text) {
  numerics::TensorMap inputs;
  bind_denoiser(nodes_, config_, x_t, eps, t, text, inputs);
  graph_.forward(std::move(inputs));
}

Tensor denoise(const ParameterStore& params, const Tensor& x_t, std::span<const std::size_t> t,
               std::span<const TextInput> text) {
  DenoiserGraph g(params, config_of(params), t.size());
  g.run(x_t, Tensor(x_t.shape(), 0.0), t, text);
  return g.prediction();
}

}  // namespace ditm::diffusion
