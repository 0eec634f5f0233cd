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

// Central finite-difference checks for every differentiable graph op. Shared
// by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ditm/common/rng.hpp"
#include "ditm/numerics/graph.hpp"

namespace ditm::testing {

using numerics::Graph;
using numerics::NodeId;
using numerics::ParameterStore;
using numerics::Shape;
using numerics::Tensor;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

// Keeps values at least `gap` away from zero so kinked ops are differentiable
// at every probed point.
inline void push_from_zero(Tensor& t, double gap) {
  for (double& v : t.data())
    if (std::abs(v) < gap) v = v < 0 ? v - gap : v + gap;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// The op under test reads parameters p0, p1, ...; `build` wires it and returns
// its output node. The scalar objective is mean(out * R) for a fixed random R.
inline GradCheckResult finite_difference_check(ParameterStore store,
                                               const std::function<NodeId(Graph&)>& build,
                                               std::uint64_t seed, double h = 1e-5) {
  Rng rng = make_rng(derive_seed(seed, "projection"));
  Graph g(store);
  NodeId out = build(g);
  NodeId proj = g.constant(random_tensor(g.shape(out), rng));
  NodeId loss = g.mean(g.mul(out, proj));
  g.forward(numerics::TensorMap{});
  auto grads = g.backward(loss);

  GradCheckResult res;
  for (const auto& name : store.names()) {
    auto it = grads.find(name);
    const Tensor zero(store.at(name).shape(), 0.0);
    const Tensor& analytic = it == grads.end() ? zero : it->second;
    Tensor& p = store.mutable_at(name);
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + h;
      g.forward(numerics::TensorMap{});
      const double up = g.value(loss).item();
      p[i] = orig - h;
      g.forward(numerics::TensorMap{});
      const double down = g.value(loss).item();
      p[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
      ++res.checked;
    }
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    const double rel = denom < 1e-12 ? std::sqrt(diff2) : std::sqrt(diff2) / denom;
    res.max_rel_error = std::max(res.max_rel_error, rel);
  }
  return res;
}

inline const std::vector<std::string>& differentiable_ops() {
  static const std::vector<std::string> ops = {
      "add",  "add_broadcast", "sub", "sub_broadcast", "mul",      "mul_broadcast", "scale",
      "matmul", "conv2d",      "relu", "silu",         "group_norm", "avg_pool2",    "upsample2",
      "reshape", "concat",     "mean", "sum_squares",  "row_mean_squares", "maximum"};
  return ops;
}

// One seeded case for `op`: random small shapes and values, full check.
inline GradCheckResult check_op(const std::string& op, std::uint64_t seed) {
  Rng rng = make_rng(derive_seed(seed, op));
  auto dim = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  ParameterStore s;
  std::function<NodeId(Graph&)> build;
  auto p = [](Graph& g, int i) { return g.parameter("p" + std::to_string(i)); };

  if (op == "add" || op == "sub" || op == "mul" || op == "maximum") {
    Shape sh{dim(1, 3), dim(1, 4), dim(1, 4)};
    Tensor a = random_tensor(sh, rng), b = random_tensor(sh, rng);
    if (op == "maximum") {
      // Keep |a-b| away from zero so the max is differentiable.
      for (std::size_t i = 0; i < a.size(); ++i)
        if (std::abs(a[i] - b[i]) < 0.05) b[i] = a[i] + (b[i] < a[i] ? -0.1 : 0.1);
    }
    s.add("p0", a);
    s.add("p1", b);
    build = [op, p](Graph& g) {
      if (op == "add") return g.add(p(g, 0), p(g, 1));
      if (op == "sub") return g.sub(p(g, 0), p(g, 1));
      if (op == "mul") return g.mul(p(g, 0), p(g, 1));
      return g.maximum(p(g, 0), p(g, 1));
    };
  } else if (op == "add_broadcast" || op == "sub_broadcast" || op == "mul_broadcast") {
    Shape sa{dim(2, 3), dim(2, 4), dim(2, 4)};
    Shape sb = sa;
    for (auto& d : sb)
      if (dim(0, 1)) d = 1;
    if (dim(0, 1)) std::swap(sa, sb);
    s.add("p0", random_tensor(sa, rng));
    s.add("p1", random_tensor(sb, rng));
    const std::string base = op.substr(0, 3);
    build = [base, p](Graph& g) {
      if (base == "add") return g.add(p(g, 0), p(g, 1));
      if (base == "sub") return g.sub(p(g, 0), p(g, 1));
      return g.mul(p(g, 0), p(g, 1));
    };
  } else if (op == "scale") {
    s.add("p0", random_tensor({dim(1, 4), dim(1, 5)}, rng));
    const double f = std::uniform_real_distribution<double>(-2.0, 2.0)(rng);
    build = [f, p](Graph& g) { return g.scale(p(g, 0), f); };
  } else if (op == "matmul") {
    const std::size_t m = dim(1, 4), k = dim(1, 5), n = dim(1, 4);
    s.add("p0", random_tensor({m, k}, rng));
    s.add("p1", random_tensor({k, n}, rng));
    build = [p](Graph& g) { return g.matmul(p(g, 0), p(g, 1)); };
  } else if (op == "conv2d") {
    const std::size_t b = dim(1, 2), ci = dim(1, 3), co = dim(1, 3), h = dim(2, 5), w = dim(2, 5);
    const std::size_t k = dim(0, 1) ? 3 : 1;
    s.add("p0", random_tensor({b, ci, h, w}, rng));
    s.add("p1", random_tensor({co, ci, k, k}, rng));
    s.add("p2", random_tensor({co}, rng));
    build = [p](Graph& g) { return g.conv2d(p(g, 0), p(g, 1), p(g, 2)); };
  } else if (op == "relu" || op == "silu") {
    Tensor x = random_tensor({dim(1, 3), dim(1, 6)}, rng, -3.0, 3.0);
    push_from_zero(x, 0.01);
    s.add("p0", x);
    build = [op, p](Graph& g) { return op == "relu" ? g.relu(p(g, 0)) : g.silu(p(g, 0)); };
  } else if (op == "group_norm") {
    const std::size_t groups = dim(1, 2), c = groups * dim(1, 2);
    s.add("p0", random_tensor({dim(1, 2), c, dim(1, 3), dim(2, 3)}, rng, -2.0, 2.0));
    s.add("p1", random_tensor({c}, rng, 0.5, 1.5));
    s.add("p2", random_tensor({c}, rng));
    build = [groups, p](Graph& g) { return g.group_norm(p(g, 0), p(g, 1), p(g, 2), groups); };
  } else if (op == "avg_pool2") {
    s.add("p0", random_tensor({dim(1, 2), dim(1, 3), 2 * dim(1, 3), 2 * dim(1, 3)}, rng));
    build = [p](Graph& g) { return g.avg_pool2(p(g, 0)); };
  } else if (op == "upsample2") {
    s.add("p0", random_tensor({dim(1, 2), dim(1, 3), dim(1, 3), dim(1, 3)}, rng));
    build = [p](Graph& g) { return g.upsample2(p(g, 0)); };
  } else if (op == "reshape") {
    const std::size_t a = dim(1, 4), b = dim(1, 4), c = dim(1, 3);
    s.add("p0", random_tensor({a, b, c}, rng));
    build = [a, b, c, p](Graph& g) { return g.reshape(p(g, 0), Shape{a * c, b}); };
  } else if (op == "concat") {
    const std::size_t axis = dim(0, 2), parts = dim(2, 3);
    Shape base{dim(1, 3), dim(1, 3), dim(1, 3)};
    for (std::size_t i = 0; i < parts; ++i) {
      Shape sh = base;
      sh[axis] = dim(1, 3);
      s.add("p" + std::to_string(i), random_tensor(sh, rng));
    }
    build = [axis, parts, p](Graph& g) {
      std::vector<NodeId> ids;
      for (std::size_t i = 0; i < parts; ++i) ids.push_back(p(g, static_cast<int>(i)));
      return g.concat(ids, axis);
    };
  } else if (op == "mean" || op == "sum_squares") {
    s.add("p0", random_tensor({dim(1, 4), dim(1, 5)}, rng));
    build = [op, p](Graph& g) { return op == "mean" ? g.mean(p(g, 0)) : g.sum_squares(p(g, 0)); };
  } else if (op == "row_mean_squares") {
    s.add("p0", random_tensor({dim(1, 4), dim(1, 3), dim(1, 4)}, rng));
    build = [p](Graph& g) { return g.row_mean_squares(p(g, 0)); };
  } else {
    throw std::invalid_argument("unknown op " + op);
  }
  return finite_difference_check(std::move(s), build, seed);
}

}  // namespace ditm::testing
