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

#include <cstddef>
#include <vector>

#include "ditm/numerics/tensor.hpp"

namespace ditm::diffusion {

/// DDPM forward-process constants for t = 0..T-1.
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bar;
};

/// Linear betas from beta_start to beta_end; alpha_bar is the cumulative product.
NoiseSchedule make_schedule(std::size_t T = 1000, double beta_start = 1e-4, double beta_end = 0.02);

/// x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps.
numerics::Tensor add_noise(const numerics::Tensor& x0, const numerics::Tensor& eps, std::size_t t,
                           const NoiseSchedule& schedule);

}  // namespace ditm::diffusion
