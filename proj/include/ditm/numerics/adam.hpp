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

#include <cstdint>
#include <map>
#include <string>

#include "ditm/numerics/graph.hpp"
#include "ditm/numerics/parameters.hpp"

namespace ditm::numerics {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of every parameter named in `grads`.
/// Parameters without a gradient are left untouched and keep their moments.
/// Takes the store's exclusive lock, so it throws ConcurrencyError while any
/// Graph over `params` is still alive.
void adam_step(ParameterStore& params, const Gradients& grads, AdamState& state);

}  // namespace ditm::numerics
