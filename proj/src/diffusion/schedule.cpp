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

#include "ditm/diffusion/schedule.hpp"

#include <cmath>

#include "ditm/common/error.hpp"

namespace ditm::diffusion {

NoiseSchedule make_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T == 0) throw PreconditionError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw PreconditionError("schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  s.alphas.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
    s.betas[t] = beta_start + (beta_end - beta_start) * frac;
    s.alphas[t] = 1.0 - s.betas[t];
    prod *= s.alphas[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

numerics::Tensor add_noise(const numerics::Tensor& x0, const numerics::Tensor& eps, std::size_t t,
                           const NoiseSchedule& schedule) {
  if (x0.shape() != eps.shape())
    throw ShapeError("add_noise: x0 " + numerics::shape_str(x0.shape()) + " vs eps " +
                     numerics::shape_str(eps.shape()));
  if (t >= schedule.T) throw PreconditionError("add_noise: t out of range");
  const double a = std::sqrt(schedule.alpha_bar[t]);
  const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
  numerics::Tensor out(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

}  // namespace ditm::diffusion
