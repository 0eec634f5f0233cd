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

#include "ditm/numerics/adam.hpp"

#include <cmath>

#include "ditm/common/error.hpp"

namespace ditm::numerics {

void adam_step(ParameterStore& params, const Gradients& grads, AdamState& state) {
  const AdamConfig& c = state.config;
  if (!(c.lr > 0.0)) throw PreconditionError("adam: lr must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0 && c.eps > 0.0))
    throw PreconditionError("adam: invalid beta/eps");
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw PreconditionError("adam: gradient for unknown parameter '" + name + "'");
    if (params.at(name).shape() != g.shape())
      throw ShapeError("adam: gradient shape " + shape_str(g.shape()) + " for '" + name + "' of shape " +
                       shape_str(params.at(name).shape()));
    if (!g.all_finite()) throw NumericError("adam: non-finite gradient for '" + name + "'");
  }
  auto lock = params.lock_exclusive();
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.mutable_at(name);
    auto [mit, m_new] = state.m.try_emplace(name, g.shape(), 0.0);
    auto [vit, v_new] = state.v.try_emplace(name, g.shape(), 0.0);
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

}  // namespace ditm::numerics
