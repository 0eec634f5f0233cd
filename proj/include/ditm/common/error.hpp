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

#include <stdexcept>
#include <string>

namespace ditm {

/// Base of every exception the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation; the message names the node.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by an operation or a loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Caller broke a documented precondition.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// A negative subtype that cannot be applied to the given caption.
class InapplicableError : public Error {
 public:
  using Error::Error;
};

/// Statistic is undefined for the input (e.g. zero pooled deviation).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// File system or format failure; the message carries the path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ditm
