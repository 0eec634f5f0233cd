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

#include "ditm/numerics/parameters.hpp"

#include "ditm/common/error.hpp"

namespace ditm::numerics {

ParameterStore::ParameterStore(const ParameterStore& other) {
  auto lock = other.lock_shared();
  order_ = other.order_;
  values_ = other.values_;
}

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this == &other) return *this;
  auto theirs = other.lock_shared();
  auto mine = lock_exclusive();
  order_ = other.order_;
  values_ = other.values_;
  return *this;
}

void ParameterStore::add(const std::string& name, Tensor value) {
  if (values_.count(name)) throw PreconditionError("duplicate parameter '" + name + "'");
  if (!value.all_finite()) throw NumericError("parameter '" + name + "' has non-finite entries");
  order_.push_back(name);
  values_.emplace(name, std::move(value));
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw PreconditionError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterStore::mutable_at(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw PreconditionError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : values_) n += t.size();
  return n;
}

bool ParameterStore::all_finite() const {
  for (const auto& [_, t] : values_)
    if (!t.all_finite()) return false;
  return true;
}

std::unique_lock<std::shared_mutex> ParameterStore::lock_exclusive() {
  std::unique_lock lock(mutex_, std::try_to_lock);
  if (!lock.owns_lock())
    throw ConcurrencyError("parameter store is being read by live graphs; destroy them before mutating");
  return lock;
}

bool ParameterStore::operator==(const ParameterStore& other) const {
  return order_ == other.order_ && values_ == other.values_;
}

}  // namespace ditm::numerics
