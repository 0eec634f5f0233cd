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

#include <map>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include "ditm/common/error.hpp"
#include "ditm/numerics/tensor.hpp"

namespace ditm::numerics {

class ConcurrencyError : public Error {
 public:
  using Error::Error;
};

/// Named trainable tensors, kept in insertion order.
///
/// Concurrency contract: any number of graphs may read a store at once (each
/// graph holds a shared lock from its first forward() until it is destroyed).
/// Mutation goes through lock_exclusive(), which fails with ConcurrencyError
/// instead of waiting while any graph is alive, so a training loop that forgets
/// to drop its graphs before an optimizer step is caught rather than deadlocked.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);

  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& mutable_at(const std::string& name);

  const std::vector<std::string>& names() const { return order_; }
  std::size_t count() const { return order_.size(); }
  std::size_t total_elements() const;
  bool all_finite() const;

  std::shared_lock<std::shared_mutex> lock_shared() const { return std::shared_lock(mutex_); }
  std::unique_lock<std::shared_mutex> lock_exclusive();

  /// Same names in the same order with bit-identical values.
  bool operator==(const ParameterStore& other) const;

 private:
  std::vector<std::string> order_;
  std::map<std::string, Tensor> values_;
  mutable std::shared_mutex mutex_;
};

}  // namespace ditm::numerics
