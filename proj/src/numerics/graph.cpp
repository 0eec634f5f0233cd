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

#include "ditm/numerics/graph.hpp"

// Always take the blocked GEMM path. The small-size coefficient-based product
// vectorizes by destination alignment, so results would depend on where a
// buffer happens to be allocated.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "ditm/common/error.hpp"

namespace ditm::numerics {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using Index = Eigen::Index;

// Row-by-row product with a fixed accumulation order. Each output row depends
// only on its own input row, so a sample's result does not depend on its
// position in the batch (blocked GEMM handles edge rows differently).
void matmul_rows(const double* a, const double* b, double* c, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i) {
    double* row = c + i * n;
    std::fill(row, row + n, 0.0);
    for (Index p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (Index j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

Shape broadcast_shape(const Shape& a, const Shape& b, bool& ok) {
  ok = a.size() == b.size();
  if (!ok) return {};
  Shape out(a.size());
  for (std::size_t d = 0; d < a.size(); ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else {
      ok = false;
      return {};
    }
  }
  return out;
}

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(in.size(), 0);
  std::size_t s = 1;
  for (std::size_t d = in.size(); d-- > 0;) {
    strides[d] = (in[d] == out[d]) ? s : 0;
    s *= in[d];
  }
  return strides;
}

// Visits every output element with the matching offsets into a and b.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const std::size_t rank = out.size();
  const std::size_t n = shape_size(out);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

void im2col(const double* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            double* col) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto hh = static_cast<std::ptrdiff_t>(h);
  const auto ww = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = x + c * h * w;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* row = col + ((c * k + ki) * k + kj) * h * w;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kj) - pad;
        for (std::ptrdiff_t y = 0; y < hh; ++y) {
          const std::ptrdiff_t sy = y + dy;
          double* dst = row + y * ww;
          if (sy < 0 || sy >= hh) {
            std::fill(dst, dst + ww, 0.0);
            continue;
          }
          const double* src = plane + sy * ww;
          for (std::ptrdiff_t xx = 0; xx < ww; ++xx) {
            const std::ptrdiff_t sx = xx + dx;
            dst[xx] = (sx >= 0 && sx < ww) ? src[sx] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            double* x) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto hh = static_cast<std::ptrdiff_t>(h);
  const auto ww = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = x + c * h * w;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* row = col + ((c * k + ki) * k + kj) * h * w;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kj) - pad;
        for (std::ptrdiff_t y = 0; y < hh; ++y) {
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= hh) continue;
          const double* src = row + y * ww;
          double* dst = plane + sy * ww;
          for (std::ptrdiff_t xx = 0; xx < ww; ++xx) {
            const std::ptrdiff_t sx = xx + dx;
            if (sx >= 0 && sx < ww) dst[sx] += src[xx];
          }
        }
      }
    }
  }
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Tensor& accumulate_slot(std::vector<std::optional<Tensor>>& grads, std::size_t j, const Shape& shape) {
  if (!grads[j]) grads[j].emplace(shape, 0.0);
  return *grads[j];
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kParameter: return "parameter";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kSilu: return "silu";
    case OpKind::kGroupNorm: return "group_norm";
    case OpKind::kAvgPool2: return "avg_pool2";
    case OpKind::kUpsample2: return "upsample2";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConcat: return "concat";
    case OpKind::kMean: return "mean";
    case OpKind::kSumSquares: return "sum_squares";
    case OpKind::kRowMeanSquares: return "row_mean_squares";
    case OpKind::kMaximum: return "maximum";
  }
  return "unknown";
}

Graph::Graph(const ParameterStore& params) : params_(&params) {}

NodeId Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  ran_ = false;
  return NodeId{nodes_.size() - 1};
}

std::string Graph::describe(NodeId id) const {
  const Node& n = nodes_.at(id.index);
  std::string s = std::string(op_name(n.kind)) + "#" + std::to_string(id.index);
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s;
}

void Graph::fail_shape(const std::string& what, const std::string& detail) const {
  throw ShapeError(what + " #" + std::to_string(nodes_.size()) + ": " + detail);
}

const Shape& Graph::shape(NodeId id) const { return nodes_.at(id.index).shape; }
OpKind Graph::kind(NodeId id) const { return nodes_.at(id.index).kind; }
void Graph::set_label(NodeId id, std::string label) { nodes_.at(id.index).name = std::move(label); }
void Graph::set_trainable(std::function<bool(const std::string&)> trainable) {
  trainable_ = std::move(trainable);
}

NodeId Graph::input(const std::string& name, Shape shape) {
  for (const auto& n : nodes_)
    if (n.kind == OpKind::kInput && n.name == name) fail_shape("input", "duplicate input '" + name + "'");
  Node n{OpKind::kInput, {}, shape, name, Tensor(shape), nullptr, {}, 0.0, 0};
  return push(std::move(n));
}

NodeId Graph::parameter(const std::string& name) {
  const Tensor& t = params_->at(name);
  Node n{OpKind::kParameter, {}, t.shape(), name, Tensor(), &t, {}, 0.0, 0};
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value) {
  Shape s = value.shape();
  Node n{OpKind::kConstant, {}, s, {}, std::move(value), nullptr, {}, 0.0, 0};
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  bool ok = false;
  Shape s = broadcast_shape(shape(a), shape(b), ok);
  if (!ok) fail_shape("add", "cannot broadcast " + shape_str(shape(a)) + " with " + shape_str(shape(b)));
  return push(Node{OpKind::kAdd, {a.index, b.index}, s, {}, {}, nullptr, {}, 0.0, 0});
}

NodeId Graph::sub(NodeId a, NodeId b) {
  bool ok = false;
  Shape s = broadcast_shape(shape(a), shape(b), ok);
  if (!ok) fail_shape("sub", "cannot broadcast " + shape_str(shape(a)) + " with " + shape_str(shape(b)));
  return push(Node{OpKind::kSub, {a.index, b.index}, s, {}, {}, nullptr, {}, 0.0, 0});
}

NodeId Graph::mul(NodeId a, NodeId b) {
  bool ok = false;
  Shape s = broadcast_shape(shape(a), shape(b), ok);
  if (!ok) fail_shape("mul", "cannot broadcast " + shape_str(shape(a)) + " with " + shape_str(shape(b)));
  return push(Node{OpKind::kMul, {a.index, b.index}, s, {}, {}, nullptr, {}, 0.0, 0});
}

NodeId Graph::scale(NodeId a, double factor) {
  return push(Node{OpKind::kScale, {a.index}, shape(a), {}, {}, nullptr, {}, factor, 0});
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    fail_shape("matmul", "incompatible " + shape_str(sa) + " x " + shape_str(sb));
  return push(Node{OpKind::kMatMul, {a.index, b.index}, Shape{sa[0], sb[1]}, {}, {}, nullptr, {}, 0.0, 0});
}

NodeId Graph::conv2d(NodeId x, NodeId weight, NodeId bias) {
  const Shape& sx = shape(x);
  const Shape& sw = shape(weight);
  const Shape& sb = shape(bias);
  if (sx.size() != 4 || sw.size() != 4 || sw[2] != sw[3] || sw[2] % 2 == 0 || sw[1] != sx[1] ||
      sb != Shape{sw[0]})
    fail_shape("conv2d", "input " + shape_str(sx) + ", weight " + shape_str(sw) + ", bias " + shape_str(sb));
  return push(Node{OpKind::kConv2d, {x.index, weight.index, bias.index}, Shape{sx[0], sw[0], sx[2], sx[3]}, {},
                   {}, nullptr, {}, 0.0, 0});
}

NodeId Graph::relu(NodeId x) { return push(Node{OpKind::kRelu, {x.index}, shape(x), {}, {}, nullptr, {}, 0.0, 0}); }
NodeId Graph::silu(NodeId x) { return push(Node{OpKind::kSilu, {x.index}, shape(x), {}, {}, nullptr, {}, 0.0, 0}); }

NodeId Graph::group_norm(NodeId x, NodeId gamma, NodeId beta, std::size_t groups, double eps) {
  const Shape& sx = shape(x);
  if (sx.size() != 4 || groups == 0 || sx[1] % groups != 0 || shape(gamma) != Shape{sx[1]} ||
      shape(beta) != Shape{sx[1]})
    fail_shape("group_norm", "input " + shape_str(sx) + " with " + std::to_string(groups) + " groups, gamma " +
                                 shape_str(shape(gamma)) + ", beta " + shape_str(shape(beta)));
  return push(Node{OpKind::kGroupNorm, {x.index, gamma.index, beta.index}, sx, {}, {}, nullptr, {}, eps, groups});
}

NodeId Graph::avg_pool2(NodeId x) {
  const Shape& sx = shape(x);
  if (sx.size() != 4 || sx[2] % 2 != 0 || sx[3] % 2 != 0)
    fail_shape("avg_pool2", "input " + shape_str(sx) + " needs even spatial dims");
  return push(Node{OpKind::kAvgPool2, {x.index}, Shape{sx[0], sx[1], sx[2] / 2, sx[3] / 2}, {}, {}, nullptr, {},
                   0.0, 0});
}

NodeId Graph::upsample2(NodeId x) {
  const Shape& sx = shape(x);
  if (sx.size() != 4) fail_shape("upsample2", "input " + shape_str(sx) + " is not [B,C,H,W]");
  return push(Node{OpKind::kUpsample2, {x.index}, Shape{sx[0], sx[1], sx[2] * 2, sx[3] * 2}, {}, {}, nullptr, {},
                   0.0, 0});
}

NodeId Graph::reshape(NodeId x, Shape s) {
  if (s.empty() || std::count(s.begin(), s.end(), 0u) || shape_size(s) != shape_size(shape(x)))
    fail_shape("reshape", shape_str(shape(x)) + " -> " + shape_str(s));
  return push(Node{OpKind::kReshape, {x.index}, std::move(s), {}, {}, nullptr, {}, 0.0, 0});
}

NodeId Graph::concat(const std::vector<NodeId>& parts, std::size_t axis) {
  if (parts.empty()) fail_shape("concat", "no inputs");
  Shape out = shape(parts.front());
  if (axis >= out.size()) fail_shape("concat", "axis out of range for " + shape_str(out));
  out[axis] = 0;
  std::vector<std::size_t> ins;
  for (NodeId p : parts) {
    const Shape& s = shape(p);
    if (s.size() != out.size()) fail_shape("concat", "rank mismatch " + shape_str(s));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != out[d]) fail_shape("concat", "shape mismatch " + shape_str(s));
    out[axis] += s[axis];
    ins.push_back(p.index);
  }
  return push(Node{OpKind::kConcat, std::move(ins), out, {}, {}, nullptr, {}, 0.0, axis});
}

NodeId Graph::mean(NodeId x) { return push(Node{OpKind::kMean, {x.index}, Shape{1}, {}, {}, nullptr, {}, 0.0, 0}); }

NodeId Graph::sum_squares(NodeId x) {
  return push(Node{OpKind::kSumSquares, {x.index}, Shape{1}, {}, {}, nullptr, {}, 0.0, 0});
}

NodeId Graph::row_mean_squares(NodeId x) {
  const Shape& s = shape(x);
  if (s.size() < 2) fail_shape("row_mean_squares", "input " + shape_str(s) + " needs rank >= 2");
  return push(Node{OpKind::kRowMeanSquares, {x.index}, Shape{s[0]}, {}, {}, nullptr, {}, 0.0, 0});
}

NodeId Graph::maximum(NodeId a, NodeId b) {
  if (shape(a) != shape(b))
    fail_shape("maximum", "shapes differ " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  return push(Node{OpKind::kMaximum, {a.index, b.index}, shape(a), {}, {}, nullptr, {}, 0.0, 0});
}

const Tensor& Graph::val(std::size_t i) const {
  const Node& n = nodes_[i];
  return n.external ? *n.external : n.value;
}

const Tensor& Graph::value(NodeId id) const {
  if (!ran_) throw PreconditionError("value() before forward()");
  return val(id.index);
}

void Graph::forward(const TensorMap& inputs) {
  TensorMap copy = inputs;
  forward(std::move(copy));
}

void Graph::forward(TensorMap&& inputs) {
  if (!read_lock_.owns_lock()) read_lock_ = params_->lock_shared();
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.kind != OpKind::kInput) continue;
    auto it = inputs.find(n.name);
    if (it == inputs.end()) throw PreconditionError("input '" + n.name + "' is not bound (" + describe({i}) + ")");
    if (it->second.shape() != n.shape)
      throw ShapeError(describe({i}) + ": bound shape " + shape_str(it->second.shape()) + " != declared " +
                       shape_str(n.shape));
    n.value = std::move(it->second);
  }
  grads_.clear();
  run_forward();
  ran_ = true;
}

void Graph::run_forward() {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    eval(i);
    if (!val(i).all_finite()) throw NumericError("non-finite output at " + describe({i}));
  }
}

void Graph::eval(std::size_t i) {
  Node& n = nodes_[i];
  auto in = [&](std::size_t k) -> const Tensor& { return val(n.inputs[k]); };
  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kParameter:
    case OpKind::kConstant:
      return;
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      n.value = Tensor(n.shape);
      double* out = n.value.raw();
      const double* pa = a.raw();
      const double* pb = b.raw();
      const OpKind k = n.kind;
      if (a.shape() == b.shape()) {
        const std::size_t sz = a.size();
        if (k == OpKind::kAdd)
          for (std::size_t o = 0; o < sz; ++o) out[o] = pa[o] + pb[o];
        else if (k == OpKind::kSub)
          for (std::size_t o = 0; o < sz; ++o) out[o] = pa[o] - pb[o];
        else
          for (std::size_t o = 0; o < sz; ++o) out[o] = pa[o] * pb[o];
      } else {
        for_each_broadcast(n.shape, a.shape(), b.shape(), [&](std::size_t o, std::size_t ia, std::size_t ib) {
          out[o] = k == OpKind::kAdd ? pa[ia] + pb[ib] : k == OpKind::kSub ? pa[ia] - pb[ib] : pa[ia] * pb[ib];
        });
      }
      return;
    }
    case OpKind::kScale: {
      const Tensor& a = in(0);
      n.value = Tensor(n.shape);
      for (std::size_t o = 0; o < a.size(); ++o) n.value[o] = n.factor * a[o];
      return;
    }
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const auto m = static_cast<Index>(a.dim(0)), k = static_cast<Index>(a.dim(1)),
                 nn = static_cast<Index>(b.dim(1));
      n.value = Tensor(n.shape);
      matmul_rows(a.raw(), b.raw(), n.value.raw(), m, k, nn);
      return;
    }
    case OpKind::kConv2d: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const Tensor& bias = in(2);
      const std::size_t batch = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
      const std::size_t co = w.dim(0), k = w.dim(2);
      const std::size_t kk = ci * k * k, hw = h * wd;
      n.value = Tensor(n.shape);
      std::vector<double> col(kk * hw);
      ConstMapMat wm(w.raw(), static_cast<Index>(co), static_cast<Index>(kk));
      for (std::size_t b = 0; b < batch; ++b) {
        im2col(x.raw() + b * ci * hw, ci, h, wd, k, col.data());
        MapMat out(n.value.raw() + b * co * hw, static_cast<Index>(co), static_cast<Index>(hw));
        out.noalias() = wm * ConstMapMat(col.data(), static_cast<Index>(kk), static_cast<Index>(hw));
        for (std::size_t c = 0; c < co; ++c) out.row(static_cast<Index>(c)).array() += bias[c];
      }
      return;
    }
    case OpKind::kRelu: {
      const Tensor& a = in(0);
      n.value = Tensor(n.shape);
      for (std::size_t o = 0; o < a.size(); ++o) n.value[o] = a[o] > 0.0 ? a[o] : 0.0;
      return;
    }
    case OpKind::kSilu: {
      const Tensor& a = in(0);
      n.value = Tensor(n.shape);
      for (std::size_t o = 0; o < a.size(); ++o) n.value[o] = a[o] * sigmoid(a[o]);
      return;
    }
    case OpKind::kGroupNorm: {
      const Tensor& x = in(0);
      const Tensor& gamma = in(1);
      const Tensor& beta = in(2);
      const std::size_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
      const std::size_t groups = n.extra, cg = c / groups, gsize = cg * hw;
      n.value = Tensor(n.shape);
      // aux: normalised values followed by one inverse std per (batch, group).
      n.aux.assign(x.size() + batch * groups, 0.0);
      double* xhat = n.aux.data();
      double* inv_std = n.aux.data() + x.size();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t g = 0; g < groups; ++g) {
          const std::size_t off = (b * c + g * cg) * hw;
          double mu = 0.0;
          for (std::size_t j = 0; j < gsize; ++j) mu += x[off + j];
          mu /= static_cast<double>(gsize);
          double var = 0.0;
          for (std::size_t j = 0; j < gsize; ++j) var += (x[off + j] - mu) * (x[off + j] - mu);
          var /= static_cast<double>(gsize);
          const double is = 1.0 / std::sqrt(var + n.factor);
          inv_std[b * groups + g] = is;
          for (std::size_t j = 0; j < gsize; ++j) {
            const double xh = (x[off + j] - mu) * is;
            const std::size_t ch = g * cg + j / hw;
            xhat[off + j] = xh;
            n.value[off + j] = xh * gamma[ch] + beta[ch];
          }
        }
      }
      return;
    }
    case OpKind::kAvgPool2: {
      const Tensor& x = in(0);
      const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      n.value = Tensor(n.shape);
      for (std::size_t p = 0; p < planes; ++p) {
        const double* src = x.raw() + p * h * w;
        double* dst = n.value.raw() + p * (h / 2) * (w / 2);
        for (std::size_t y = 0; y < h / 2; ++y)
          for (std::size_t xx = 0; xx < w / 2; ++xx)
            dst[y * (w / 2) + xx] = 0.25 * (src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1] +
                                            src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1]);
      }
      return;
    }
    case OpKind::kUpsample2: {
      const Tensor& x = in(0);
      const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      n.value = Tensor(n.shape);
      for (std::size_t p = 0; p < planes; ++p) {
        const double* src = x.raw() + p * h * w;
        double* dst = n.value.raw() + p * 4 * h * w;
        for (std::size_t y = 0; y < 2 * h; ++y)
          for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
      }
      return;
    }
    case OpKind::kReshape:
      n.value = in(0).reshaped(n.shape);
      return;
    case OpKind::kConcat: {
      const std::size_t axis = n.extra;
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < axis; ++d) outer *= n.shape[d];
      for (std::size_t d = axis + 1; d < n.shape.size(); ++d) inner *= n.shape[d];
      n.value = Tensor(n.shape);
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& p = in(k);
        const std::size_t span = p.dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o)
          std::copy_n(p.raw() + o * span, span, n.value.raw() + o * n.shape[axis] * inner + offset);
        offset += span;
      }
      return;
    }
    case OpKind::kMean: {
      const Tensor& a = in(0);
      double s = 0.0;
      for (double v : a.data()) s += v;
      n.value = Tensor::scalar(s / static_cast<double>(a.size()));
      return;
    }
    case OpKind::kSumSquares: {
      const Tensor& a = in(0);
      double s = 0.0;
      for (double v : a.data()) s += v * v;
      n.value = Tensor::scalar(s);
      return;
    }
    case OpKind::kRowMeanSquares: {
      const Tensor& a = in(0);
      const std::size_t rows = a.dim(0), cols = a.size() / rows;
      n.value = Tensor(n.shape);
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += a[r * cols + j] * a[r * cols + j];
        n.value[r] = s / static_cast<double>(cols);
      }
      return;
    }
    case OpKind::kMaximum: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      n.value = Tensor(n.shape);
      for (std::size_t o = 0; o < a.size(); ++o) n.value[o] = a[o] >= b[o] ? a[o] : b[o];
      return;
    }
  }
}

Gradients Graph::backward(NodeId output) {
  if (!ran_) throw PreconditionError("backward() before forward()");
  const std::size_t out = output.index;
  if (out >= nodes_.size()) throw PreconditionError("backward(): unknown node");
  if (shape_size(nodes_[out].shape) != 1)
    throw ShapeError("backward(): " + describe(output) + " is not scalar, shape " + shape_str(nodes_[out].shape));

  std::vector<bool> needed(nodes_.size(), false);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::kParameter) {
      needed[i] = !trainable_ || trainable_(n.name);
    } else {
      for (std::size_t j : n.inputs) needed[i] = needed[i] || needed[j];
    }
  }
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[out].emplace(nodes_[out].shape, 1.0);
  for (std::size_t i = out + 1; i-- > 0;) {
    if (!grads_[i] || !needed[i]) continue;
    propagate(i, grads_, needed);
  }

  Gradients result;
  for (std::size_t i = 0; i <= out; ++i) {
    const Node& n = nodes_[i];
    if (n.kind != OpKind::kParameter || !needed[i]) continue;
    Tensor g = grads_[i] ? *grads_[i] : Tensor(n.shape, 0.0);
    auto it = result.find(n.name);
    if (it == result.end()) {
      result.emplace(n.name, std::move(g));
    } else {
      for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
    }
  }
  return result;
}

const Tensor* Graph::gradient(NodeId id) const {
  if (id.index >= grads_.size() || !grads_[id.index]) return nullptr;
  return &*grads_[id.index];
}

void Graph::propagate(std::size_t i, std::vector<std::optional<Tensor>>& grads, const std::vector<bool>& needed) {
  const Node& n = nodes_[i];
  const Tensor& g = *grads[i];
  auto in = [&](std::size_t k) -> const Tensor& { return val(n.inputs[k]); };
  auto want = [&](std::size_t k) { return needed[n.inputs[k]]; };
  auto slot = [&](std::size_t k) -> Tensor& { return accumulate_slot(grads, n.inputs[k], nodes_[n.inputs[k]].shape); };

  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kParameter:
    case OpKind::kConstant:
      return;
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const OpKind k = n.kind;
      const bool wa = want(0), wb = want(1);
      Tensor* ga = wa ? &slot(0) : nullptr;
      Tensor* gb = wb ? &slot(1) : nullptr;
      if (a.shape() == b.shape()) {
        for (std::size_t o = 0; o < g.size(); ++o) {
          if (k == OpKind::kMul) {
            if (ga) (*ga)[o] += g[o] * b[o];
            if (gb) (*gb)[o] += g[o] * a[o];
          } else {
            if (ga) (*ga)[o] += g[o];
            if (gb) (*gb)[o] += k == OpKind::kAdd ? g[o] : -g[o];
          }
        }
      } else {
        for_each_broadcast(n.shape, a.shape(), b.shape(), [&](std::size_t o, std::size_t ia, std::size_t ib) {
          if (k == OpKind::kMul) {
            if (ga) (*ga)[ia] += g[o] * b[ib];
            if (gb) (*gb)[ib] += g[o] * a[ia];
          } else {
            if (ga) (*ga)[ia] += g[o];
            if (gb) (*gb)[ib] += k == OpKind::kAdd ? g[o] : -g[o];
          }
        });
      }
      return;
    }
    case OpKind::kScale: {
      if (!want(0)) return;
      Tensor& ga = slot(0);
      for (std::size_t o = 0; o < g.size(); ++o) ga[o] += n.factor * g[o];
      return;
    }
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const auto m = static_cast<Index>(a.dim(0)), k = static_cast<Index>(a.dim(1)),
                 nn = static_cast<Index>(b.dim(1));
      if (want(0)) {
        double* ga = slot(0).raw();
        for (Index i = 0; i < m; ++i)
          for (Index p = 0; p < k; ++p) {
            double s = 0.0;
            for (Index j = 0; j < nn; ++j) s += g[i * nn + j] * b[p * nn + j];
            ga[i * k + p] += s;
          }
      }
      if (want(1)) {
        double* gb = slot(1).raw();
        for (Index i = 0; i < m; ++i)
          for (Index p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            for (Index j = 0; j < nn; ++j) gb[p * nn + j] += av * g[i * nn + j];
          }
      }
      return;
    }
    case OpKind::kConv2d: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const std::size_t batch = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
      const std::size_t co = w.dim(0), k = w.dim(2);
      const std::size_t kk = ci * k * k, hw = h * wd;
      const auto eco = static_cast<Index>(co), ekk = static_cast<Index>(kk), ehw = static_cast<Index>(hw);
      const bool wx = want(0), ww = want(1), wbias = want(2);
      std::vector<double> col(kk * hw);
      std::vector<double> gcol(wx ? kk * hw : 0);
      ConstMapMat wm(w.raw(), eco, ekk);
      for (std::size_t b = 0; b < batch; ++b) {
        ConstMapMat gy(g.raw() + b * co * hw, eco, ehw);
        if (ww) {
          im2col(x.raw() + b * ci * hw, ci, h, wd, k, col.data());
          MapMat(slot(1).raw(), eco, ekk).noalias() += gy * ConstMapMat(col.data(), ekk, ehw).transpose();
        }
        if (wbias) {
          Tensor& gb = slot(2);
          // Plain loop: Eigen's vectorized sum peels by address alignment,
          // which would make the rounding depend on where the buffer lives.
          for (std::size_t c = 0; c < co; ++c) {
            const double* row = g.raw() + (b * co + c) * hw;
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += row[i];
            gb[c] += s;
          }
        }
        if (wx) {
          MapMat(gcol.data(), ekk, ehw).noalias() = wm.transpose() * gy;
          col2im(gcol.data(), ci, h, wd, k, slot(0).raw() + b * ci * hw);
        }
      }
      return;
    }
    case OpKind::kRelu: {
      if (!want(0)) return;
      const Tensor& a = in(0);
      Tensor& ga = slot(0);
      for (std::size_t o = 0; o < g.size(); ++o)
        if (a[o] > 0.0) ga[o] += g[o];
      return;
    }
    case OpKind::kSilu: {
      if (!want(0)) return;
      const Tensor& a = in(0);
      Tensor& ga = slot(0);
      for (std::size_t o = 0; o < g.size(); ++o) {
        const double s = sigmoid(a[o]);
        ga[o] += g[o] * s * (1.0 + a[o] * (1.0 - s));
      }
      return;
    }
    case OpKind::kGroupNorm: {
      const Tensor& x = in(0);
      const Tensor& gamma = in(1);
      const std::size_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
      const std::size_t groups = n.extra, cg = c / groups, gsize = cg * hw;
      const double* xhat = n.aux.data();
      const double* inv_std = n.aux.data() + x.size();
      const bool wx = want(0), wg = want(1), wb = want(2);
      Tensor* gx = wx ? &slot(0) : nullptr;
      Tensor* gg = wg ? &slot(1) : nullptr;
      Tensor* gbeta = wb ? &slot(2) : nullptr;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const std::size_t off = (b * c + gi * cg) * hw;
          double mean_gxh = 0.0, mean_gxh_xh = 0.0;
          for (std::size_t j = 0; j < gsize; ++j) {
            const std::size_t ch = gi * cg + j / hw;
            const double gy = g[off + j];
            if (gg) (*gg)[ch] += gy * xhat[off + j];
            if (gbeta) (*gbeta)[ch] += gy;
            const double gxh = gy * gamma[ch];
            mean_gxh += gxh;
            mean_gxh_xh += gxh * xhat[off + j];
          }
          if (!gx) continue;
          mean_gxh /= static_cast<double>(gsize);
          mean_gxh_xh /= static_cast<double>(gsize);
          const double is = inv_std[b * groups + gi];
          for (std::size_t j = 0; j < gsize; ++j) {
            const std::size_t ch = gi * cg + j / hw;
            const double gxh = g[off + j] * gamma[ch];
            (*gx)[off + j] += is * (gxh - mean_gxh - xhat[off + j] * mean_gxh_xh);
          }
        }
      }
      return;
    }
    case OpKind::kAvgPool2: {
      if (!want(0)) return;
      const Tensor& x = in(0);
      const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      Tensor& gx = slot(0);
      for (std::size_t p = 0; p < planes; ++p) {
        const double* src = g.raw() + p * (h / 2) * (w / 2);
        double* dst = gx.raw() + p * h * w;
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx) dst[y * w + xx] += 0.25 * src[(y / 2) * (w / 2) + xx / 2];
      }
      return;
    }
    case OpKind::kUpsample2: {
      if (!want(0)) return;
      const Tensor& x = in(0);
      const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      Tensor& gx = slot(0);
      for (std::size_t p = 0; p < planes; ++p) {
        const double* src = g.raw() + p * 4 * h * w;
        double* dst = gx.raw() + p * h * w;
        for (std::size_t y = 0; y < 2 * h; ++y)
          for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
      }
      return;
    }
    case OpKind::kReshape: {
      if (!want(0)) return;
      Tensor& ga = slot(0);
      for (std::size_t o = 0; o < g.size(); ++o) ga[o] += g[o];
      return;
    }
    case OpKind::kConcat: {
      const std::size_t axis = n.extra;
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < axis; ++d) outer *= n.shape[d];
      for (std::size_t d = axis + 1; d < n.shape.size(); ++d) inner *= n.shape[d];
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t span = nodes_[n.inputs[k]].shape[axis] * inner;
        if (want(k)) {
          Tensor& gp = slot(k);
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.raw() + o * n.shape[axis] * inner + offset;
            double* dst = gp.raw() + o * span;
            for (std::size_t j = 0; j < span; ++j) dst[j] += src[j];
          }
        }
        offset += span;
      }
      return;
    }
    case OpKind::kMean: {
      if (!want(0)) return;
      Tensor& ga = slot(0);
      const double s = g[0] / static_cast<double>(ga.size());
      for (std::size_t o = 0; o < ga.size(); ++o) ga[o] += s;
      return;
    }
    case OpKind::kSumSquares: {
      if (!want(0)) return;
      const Tensor& a = in(0);
      Tensor& ga = slot(0);
      for (std::size_t o = 0; o < a.size(); ++o) ga[o] += 2.0 * a[o] * g[0];
      return;
    }
    case OpKind::kRowMeanSquares: {
      if (!want(0)) return;
      const Tensor& a = in(0);
      Tensor& ga = slot(0);
      const std::size_t rows = a.dim(0), cols = a.size() / rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const double s = 2.0 * g[r] / static_cast<double>(cols);
        for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += s * a[r * cols + j];
      }
      return;
    }
    case OpKind::kMaximum: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      Tensor* ga = want(0) ? &slot(0) : nullptr;
      Tensor* gb = want(1) ? &slot(1) : nullptr;
      for (std::size_t o = 0; o < g.size(); ++o) {
        if (a[o] >= b[o]) {
          if (ga) (*ga)[o] += g[o];
        } else if (gb) {
          (*gb)[o] += g[o];
        }
      }
      return;
    }
  }
}

}  // namespace ditm::numerics
