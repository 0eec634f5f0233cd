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
#include <functional>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "ditm/numerics/parameters.hpp"
#include "ditm/numerics/tensor.hpp"

namespace ditm::numerics {

enum class OpKind {
  kInput,
  kParameter,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatMul,
  kConv2d,
  kRelu,
  kSilu,
  kGroupNorm,
  kAvgPool2,
  kUpsample2,
  kReshape,
  kConcat,
  kMean,
  kSumSquares,
  kRowMeanSquares,
  kMaximum,
};

std::string_view op_name(OpKind kind);

struct NodeId {
  std::size_t index = 0;
  bool operator==(const NodeId&) const = default;
};

using TensorMap = std::map<std::string, Tensor>;
using Gradients = std::map<std::string, Tensor>;

/// A static computation graph over a ParameterStore with reverse-mode
/// differentiation.
///
/// Nodes are appended in construction order, which is also the topological
/// order: every node only references earlier nodes. Shapes are inferred and
/// checked while the graph is built. `forward` binds named inputs and fills
/// every node's cached value; `backward` then propagates from a scalar node.
///
/// Elementwise binary ops (add, sub, mul) broadcast inputs of equal rank where
/// each dimension is either equal or 1. Normalisation is GroupNorm.
///
/// A graph is single-threaded. Several graphs may share one store; see
/// ParameterStore for the locking contract.
class Graph {
 public:
  explicit Graph(const ParameterStore& params);
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;
  ~Graph() = default;

  NodeId input(const std::string& name, Shape shape);
  NodeId parameter(const std::string& name);
  NodeId constant(Tensor value);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  /// [M,K] x [K,N] -> [M,N].
  NodeId matmul(NodeId a, NodeId b);
  /// x [B,Ci,H,W], weight [Co,Ci,k,k] (k odd), bias [Co]; stride 1, zero padding k/2.
  NodeId conv2d(NodeId x, NodeId weight, NodeId bias);
  NodeId relu(NodeId x);
  NodeId silu(NodeId x);
  /// x [B,C,H,W], gamma/beta [C]; C divisible by groups.
  NodeId group_norm(NodeId x, NodeId gamma, NodeId beta, std::size_t groups, double eps = 1e-5);
  /// 2x2 average pooling over the last two axes of [B,C,H,W].
  NodeId avg_pool2(NodeId x);
  /// Nearest-neighbour 2x upsampling over the last two axes of [B,C,H,W].
  NodeId upsample2(NodeId x);
  NodeId reshape(NodeId x, Shape shape);
  NodeId concat(const std::vector<NodeId>& parts, std::size_t axis);
  /// Mean of all elements, shape [1].
  NodeId mean(NodeId x);
  /// Sum of squared elements, shape [1].
  NodeId sum_squares(NodeId x);
  /// Mean of squares over every axis but the first: [B,...] -> [B].
  NodeId row_mean_squares(NodeId x);
  /// Elementwise max of equal-shaped tensors; ties route gradient to `a`.
  NodeId maximum(NodeId a, NodeId b);

  void set_label(NodeId id, std::string label);
  std::string describe(NodeId id) const;
  const Shape& shape(NodeId id) const;
  OpKind kind(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  /// Parameters for which `trainable(name)` is false get no gradient, and
  /// subgraphs that only feed such parameters are skipped in backward.
  void set_trainable(std::function<bool(const std::string&)> trainable);

  void forward(const TensorMap& inputs);
  void forward(TensorMap&& inputs);
  bool has_run() const { return ran_; }
  const Tensor& value(NodeId id) const;

  /// Gradients of a scalar node with respect to every trainable parameter the
  /// node depends on. d(output)/d(output) = 1.
  Gradients backward(NodeId output);
  /// Gradient cached by the last backward(), or nullptr if none reached the node.
  const Tensor* gradient(NodeId id) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Shape shape;
    std::string name;  // input/parameter name or user label
    Tensor value;
    const Tensor* external = nullptr;  // parameters alias the store
    std::vector<double> aux;           // per-op forward cache
    double factor = 0.0;
    std::size_t extra = 0;  // groups / axis
  };

  NodeId push(Node node);
  const Tensor& val(std::size_t i) const;
  void run_forward();
  void eval(std::size_t i);
  void propagate(std::size_t i, std::vector<std::optional<Tensor>>& grads,
                 const std::vector<bool>& needed);
  [[noreturn]] void fail_shape(const std::string& what, const std::string& detail) const;

  const ParameterStore* params_;
  std::vector<Node> nodes_;
  std::function<bool(const std::string&)> trainable_;
  std::vector<std::optional<Tensor>> grads_;
  std::shared_lock<std::shared_mutex> read_lock_;
  bool ran_ = false;
};

}  // namespace ditm::numerics
