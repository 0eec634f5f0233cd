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

#include "ditm/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ditm/common/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ditm::numerics {

namespace {

#if defined(__GLIBC__)
// Activation buffers of a few MB are created and dropped on every forward
// pass. Past glibc's default mmap threshold each one is a fresh mapping with
// page faults on first touch, which roughly doubled scoring time.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  return true;
}();
#endif

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor shape " + shape_str(shape) + " has a zero dimension");
}
}  // namespace

Tensor::Tensor() : shape_{1}, data_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_size(shape_) != data_.size())
    throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                     " elements");
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  Shape shape{items.size()};
  const Shape& inner = items.front().shape();
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<double> data;
  data.reserve(shape_size(shape));
  for (const auto& t : items) {
    if (t.shape() != inner)
      throw ShapeError("stack: shape " + shape_str(t.shape()) + " differs from " + shape_str(inner));
    data.insert(data.end(), t.vec().begin(), t.vec().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

Tensor take(const Tensor& batch, std::size_t i) {
  if (batch.rank() < 2 || i >= batch.dim(0)) throw ShapeError("take: index out of range");
  Shape inner(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_size(inner);
  std::vector<double> data(batch.vec().begin() + static_cast<std::ptrdiff_t>(i * n),
                           batch.vec().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  return Tensor(std::move(inner), std::move(data));
}

}  // namespace ditm::numerics
