// SPDX-License-Identifier: Apache-2.0
//
// Primitive kernels with recorded adjoints. Every function accepts tracked or
// untracked tensors; the result is recorded on the inputs' tape when at least
// one input is tracked.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "transunet/tensor.hpp"

namespace transunet::ops {

template <class T>
using Backward = typename Tape<T>::Backward;

// Records `data` as the output of an operation over `inputs`, or returns a
// plain tensor when nothing upstream is tracked.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::span<const Tensor<T>> inputs, Backward<T> backward) {
  Tape<T>* tape = nullptr;
  std::vector<int> ids;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) continue;
    if (tape != nullptr && in.tape() != tape) throw ContractError("operation mixes tensors from different tapes");
    tape = in.tape();
    ids.push_back(in.node_id());
  }
  if (tape == nullptr) {
    Tensor<T> out(std::move(shape), std::move(data));
    return out;
  }
  return tape->record(std::move(shape), std::move(data), std::move(ids), std::move(backward));
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs, Backward<T> backward) {
  return make_result<T>(std::move(shape), std::move(data), std::span<const Tensor<T>>(inputs.begin(), inputs.size()),
                        std::move(backward));
}

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;

// View of a tensor as [outer x n x inner] around `axis`.
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.size());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xs[i]);
  auto y = std::make_shared<std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), {x}, [x, y, df](std::span<const T> g, Tape<T>& tp) {
    std::vector<T> gx(g.size());
    auto xs = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * df(xs[i], (*y)[i]);
    tp.accumulate(x, std::move(gx));
  });
}

}  // namespace detail

// ---- elementwise ---------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> g, Tape<T>& tp) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> g, Tape<T>& tp) {
    tp.accumulate(a, g);
    if (b.requires_grad()) {
      std::vector<T> gb(g.begin(), g.end());
      for (auto& v : gb) v = -v;
      tp.accumulate(b, std::move(gb));
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> g, Tape<T>& tp) {
    if (a.requires_grad()) {
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b[i];
      tp.accumulate(a, std::move(ga));
    }
    if (b.requires_grad()) {
      std::vector<T> gb(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a[i];
      tp.accumulate(b, std::move(gb));
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return detail::unary(
      x, [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v); });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return T(1) / v; }, [](T, T y) { return -y * y; });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// Gradient passes where lo < x < hi, zero on the clamped region.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, [=](T v) { return std::clamp(v, lo, hi); }, [=](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

// Non-differentiable hard threshold: 1 where x >= tau, else 0. Always untracked.
template <class T>
Tensor<T> threshold(const Tensor<T>& x, T tau) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] >= tau ? T(1) : T(0);
  return Tensor<T>(x.shape(), std::move(out));
}

// ---- reductions ----------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0;
  for (auto v : x.data()) s += static_cast<double>(v);
  return make_result<T>(Shape{1}, {static_cast<T>(s)}, {x}, [x](std::span<const T> g, Tape<T>& tp) {
    std::vector<T> gx(x.size(), g[0]);
    tp.accumulate(x, std::move(gx));
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// ---- shape ---------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  return make_result<T>(std::move(shape), x.vec(), {x}, [x](std::span<const T> g, Tape<T>& tp) { tp.accumulate(x, g); });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(x.size());
  detail::Map<T>(out.data(), c, r) = detail::MapC<T>(x.data().data(), r, c).transpose();
  return make_result<T>(Shape{c, r}, std::move(out), {x}, [x, r, c](std::span<const T> g, Tape<T>& tp) {
    std::vector<T> gx(g.size());
    detail::Map<T>(gx.data(), r, c) = detail::MapC<T>(g.data(), c, r).transpose();
    tp.accumulate(x, std::move(gx));
  });
}

// out[i] = x[index[i]]; `index` is a fixed gather map.
template <class T>
Tensor<T> gather(const Tensor<T>& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
  if (numel(shape) != index->size()) throw DimensionError("gather: index length does not match output shape");
  std::vector<T> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if ((*index)[i] >= x.size()) throw DimensionError("gather: index out of range");
    out[i] = x[(*index)[i]];
  }
  return make_result<T>(std::move(shape), std::move(out), {x}, [x, index](std::span<const T> g, Tape<T>& tp) {
    std::vector<T> gx(x.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*index)[i]] += g[i];
    tp.accumulate(x, std::move(gx));
  });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  auto v = detail::axis_view(x.shape(), axis);
  if (len == 0 || start + len > v.n)
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") exceeds axis extent " + std::to_string(v.n));
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<T> out(v.outer * len * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(x.data().data() + (o * v.n + start) * v.inner, len * v.inner, out.data() + o * len * v.inner);
  return make_result<T>(std::move(shape), std::move(out), {x}, [x, v, start, len](std::span<const T> g, Tape<T>& tp) {
    std::vector<T> gx(x.size(), T(0));
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy_n(g.data() + o * len * v.inner, len * v.inner, gx.data() + (o * v.n + start) * v.inner);
    tp.accumulate(x, std::move(gx));
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  Shape shape = xs[0].shape();
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& x : xs) {
    if (x.rank() != shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (i != axis && x.dim(i) != shape[i])
        throw DimensionError("concat: shape mismatch " + shape_str(xs[0].shape()) + " vs " + shape_str(x.shape()));
    extents.push_back(x.dim(axis));
    total += x.dim(axis);
  }
  shape[axis] = total;
  auto v = detail::axis_view(shape, axis);
  std::vector<T> out(numel(shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::size_t len = extents[k];
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy_n(xs[k].data().data() + o * len * v.inner, len * v.inner, out.data() + (o * total + offset) * v.inner);
    offset += len;
  }
  return make_result<T>(std::move(shape), std::move(out), std::span<const Tensor<T>>(xs),
                        [xs, extents, v, total](std::span<const T> g, Tape<T>& tp) {
                          std::size_t offset = 0;
                          for (std::size_t k = 0; k < xs.size(); ++k) {
                            const std::size_t len = extents[k];
                            if (xs[k].requires_grad()) {
                              std::vector<T> gx(xs[k].size());
                              for (std::size_t o = 0; o < v.outer; ++o)
                                std::copy_n(g.data() + (o * total + offset) * v.inner, len * v.inner,
                                            gx.data() + o * len * v.inner);
                              tp.accumulate(xs[k], std::move(gx));
                            }
                            offset += len;
                          }
                        });
}

// ---- broadcasts ----------------------------------------------------------
// "row vector": v spans the last axis. "col vector": v spans the first axis.

template <class T>
Tensor<T> add_row_vector(const Tensor<T>& x, const Tensor<T>& v) {
  const std::size_t c = v.size();
  if (x.shape().back() != c)
    throw DimensionError("add_row_vector: " + shape_str(x.shape()) + " vs vector of " + std::to_string(c));
  const std::size_t r = x.size() / c;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + v[j];
  return make_result<T>(x.shape(), std::move(out), {x, v}, [x, v, r, c](std::span<const T> g, Tape<T>& tp) {
    tp.accumulate(x, g);
    if (v.requires_grad()) {
      std::vector<T> gv(c, T(0));
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
      tp.accumulate(v, std::move(gv));
    }
  });
}

template <class T>
Tensor<T> mul_row_vector(const Tensor<T>& x, const Tensor<T>& v) {
  const std::size_t c = v.size();
  if (x.shape().back() != c)
    throw DimensionError("mul_row_vector: " + shape_str(x.shape()) + " vs vector of " + std::to_string(c));
  const std::size_t r = x.size() / c;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * v[j];
  return make_result<T>(x.shape(), std::move(out), {x, v}, [x, v, r, c](std::span<const T> g, Tape<T>& tp) {
    if (x.requires_grad()) {
      std::vector<T> gx(g.size());
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = g[i * c + j] * v[j];
      tp.accumulate(x, std::move(gx));
    }
    if (v.requires_grad()) {
      std::vector<T> gv(c, T(0));
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j] * x[i * c + j];
      tp.accumulate(v, std::move(gv));
    }
  });
}

template <class T>
Tensor<T> add_col_vector(const Tensor<T>& x, const Tensor<T>& v) {
  const std::size_t r = v.size();
  if (x.dim(0) != r)
    throw DimensionError("add_col_vector: " + shape_str(x.shape()) + " vs vector of " + std::to_string(r));
  const std::size_t c = x.size() / r;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + v[i];
  return make_result<T>(x.shape(), std::move(out), {x, v}, [x, v, r, c](std::span<const T> g, Tape<T>& tp) {
    tp.accumulate(x, g);
    if (v.requires_grad()) {
      std::vector<T> gv(r, T(0));
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gv[i] += g[i * c + j];
      tp.accumulate(v, std::move(gv));
    }
  });
}

template <class T>
Tensor<T> mul_col_vector(const Tensor<T>& x, const Tensor<T>& v) {
  const std::size_t r = v.size();
  if (x.dim(0) != r)
    throw DimensionError("mul_col_vector: " + shape_str(x.shape()) + " vs vector of " + std::to_string(r));
  const std::size_t c = x.size() / r;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * v[i];
  return make_result<T>(x.shape(), std::move(out), {x, v}, [x, v, r, c](std::span<const T> g, Tape<T>& tp) {
    if (x.requires_grad()) {
      std::vector<T> gx(g.size());
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = g[i * c + j] * v[i];
      tp.accumulate(x, std::move(gx));
    }
    if (v.requires_grad()) {
      std::vector<T> gv(r, T(0));
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gv[i] += g[i * c + j] * x[i * c + j];
      tp.accumulate(v, std::move(gv));
    }
  });
}

// ---- linear algebra ------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::Map<T>(out.data(), m, n).noalias() =
      detail::MapC<T>(a.data().data(), m, k) * detail::MapC<T>(b.data().data(), k, n);
  return make_result<T>(Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const T> g, Tape<T>& tp) {
    detail::MapC<T> G(g.data(), m, n);
    if (a.requires_grad()) {
      std::vector<T> ga(m * k);
      detail::Map<T>(ga.data(), m, k).noalias() = G * detail::MapC<T>(b.data().data(), k, n).transpose();
      tp.accumulate(a, std::move(ga));
    }
    if (b.requires_grad()) {
      std::vector<T> gb(k * n);
      detail::Map<T>(gb.data(), k, n).noalias() = detail::MapC<T>(a.data().data(), m, k).transpose() * G;
      tp.accumulate(b, std::move(gb));
    }
  });
}

// ---- row-wise normalizations --------------------------------------------

// Numerically stable softmax over the last axis of an [r x c] view.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t c = x.shape().back();
  const std::size_t r = x.size() / c;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.data().data() + i * c;
    T* o = out.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    double s = 0.0;  // double normalizer keeps float rows stochastic to rounding
    for (std::size_t j = 0; j < c; ++j) s += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] = static_cast<T>(o[j] / s);
  }
  auto y = std::make_shared<const std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), {x}, [x, y, r, c](std::span<const T> g, Tape<T>& tp) {
    std::vector<T> gx(g.size());
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += double(g[i * c + j]) * (*y)[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = static_cast<T>((*y)[i * c + j] * (g[i * c + j] - dot));
    }
    tp.accumulate(x, std::move(gx));
  });
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  const std::size_t c = x.shape().back();
  const std::size_t r = x.size() / c;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.data().data() + i * c;
    const T mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const T lse = static_cast<T>(mx + std::log(s));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  auto y = std::make_shared<const std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), {x}, [x, y, r, c](std::span<const T> g, Tape<T>& tp) {
    std::vector<T> gx(g.size());
    for (std::size_t i = 0; i < r; ++i) {
      T gs = 0;
      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = g[i * c + j] - std::exp((*y)[i * c + j]) * gs;
    }
    tp.accumulate(x, std::move(gx));
  });
}

// Standardizes each row of an [r x c] view: (x - mean) / sqrt(var + eps).
template <class T>
Tensor<T> normalize_rows(const Tensor<T>& x, std::size_t row_len, T eps) {
  if (row_len == 0 || x.size() % row_len != 0)
    throw DimensionError("normalize_rows: row length " + std::to_string(row_len) + " does not divide " +
                         shape_str(x.shape()));
  const std::size_t c = row_len, r = x.size() / c;
  std::vector<T> out(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.data().data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mu) * is;
  }
  auto y = std::make_shared<const std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), {x}, [x, y, inv_std, r, c](std::span<const T> g, Tape<T>& tp) {
    std::vector<T> gx(g.size());
    for (std::size_t i = 0; i < r; ++i) {
      T gm = 0, gy = 0;
      for (std::size_t j = 0; j < c; ++j) {
        gm += g[i * c + j];
        gy += g[i * c + j] * (*y)[i * c + j];
      }
      gm /= static_cast<T>(c);
      gy /= static_cast<T>(c);
      for (std::size_t j = 0; j < c; ++j)
        gx[i * c + j] = (*inv_std)[i] * (g[i * c + j] - gm - (*y)[i * c + j] * gy);
    }
    tp.accumulate(x, std::move(gx));
  });
}

// LayerNorm over the last axis with affine gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d)
    throw DimensionError("layer_norm: affine parameters of size " + std::to_string(gamma.size()) + "/" +
                         std::to_string(beta.size()) + " for feature width " + std::to_string(d));
  return add_row_vector(mul_row_vector(normalize_rows(x, d, eps), gamma), beta);
}

// InstanceNorm for a [C x D x H x W] map: per-channel statistics, affine.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t c = x.dim(0);
  if (gamma.size() != c || beta.size() != c)
    throw DimensionError("instance_norm: affine parameters do not match " + std::to_string(c) + " channels");
  return add_col_vector(mul_col_vector(normalize_rows(x, x.size() / c, eps), gamma), beta);
}

// ---- volumetric ----------------------------------------------------------

struct ConvGeometry {
  std::size_t channels, d, h, w;
  std::size_t k, stride, pad;
  std::size_t od, oh, ow;

  static ConvGeometry make(const Shape& s, std::size_t k, std::size_t stride, std::size_t pad) {
    if (s.size() != 4) throw DimensionError("conv3d: expected [C x D x H x W] input, got " + shape_str(s));
    if (k == 0 || k % 2 == 0) throw DimensionError("conv3d: kernel size must be odd, got " + std::to_string(k));
    if (stride == 0) throw DimensionError("conv3d: stride must be positive");
    ConvGeometry g{s[0], s[1], s[2], s[3], k, stride, pad, 0, 0, 0};
    auto out_extent = [&](std::size_t n) -> std::size_t {
      if (n + 2 * pad < k)
        throw DimensionError("conv3d: extent " + std::to_string(n) + " with pad " + std::to_string(pad) +
                             " underflows kernel " + std::to_string(k));
      return (n + 2 * pad - k) / stride + 1;
    };
    g.od = out_extent(g.d);
    g.oh = out_extent(g.h);
    g.ow = out_extent(g.w);
    return g;
  }
  std::size_t rows() const { return channels * k * k * k; }
  std::size_t cols() const { return od * oh * ow; }
};

namespace detail {

// Visits every output line of the unfold map: row `row` of the [C*k^3 x
// D'*H'*W'] matrix, columns [col, col + ow). Source voxels of the line sit at
// base + ix0 + x * stride for x in [x_lo, x_hi); base < 0 marks a line that
// lies entirely in the padding.
template <class F>
void for_each_unfold_line(const ConvGeometry& g, F&& f) {
  const long pad = static_cast<long>(g.pad), stride = static_cast<long>(g.stride);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t kd = 0; kd < g.k; ++kd)
      for (std::size_t kh = 0; kh < g.k; ++kh)
        for (std::size_t kw = 0; kw < g.k; ++kw) {
          const std::size_t row = ((c * g.k + kd) * g.k + kh) * g.k + kw;
          const long ix0 = static_cast<long>(kw) - pad;
          long x_lo = ix0 >= 0 ? 0 : (-ix0 + stride - 1) / stride;
          long x_hi = static_cast<long>(g.w) - 1 - ix0 < 0 ? 0 : (static_cast<long>(g.w) - 1 - ix0) / stride + 1;
          x_lo = std::min<long>(x_lo, static_cast<long>(g.ow));
          x_hi = std::clamp<long>(x_hi, x_lo, static_cast<long>(g.ow));
          std::size_t col = 0;
          for (std::size_t z = 0; z < g.od; ++z) {
            const long iz = static_cast<long>(z * g.stride + kd) - pad;
            for (std::size_t y = 0; y < g.oh; ++y, col += g.ow) {
              const long iy = static_cast<long>(y * g.stride + kh) - pad;
              const bool in = iz >= 0 && iz < static_cast<long>(g.d) && iy >= 0 && iy < static_cast<long>(g.h);
              const long base = in ? static_cast<long>(((c * g.d + iz) * g.h + iy) * g.w) : -1L;
              f(row, col, base, ix0, static_cast<std::size_t>(x_lo), static_cast<std::size_t>(x_hi));
            }
          }
        }
}

}  // namespace detail

// Patch unfolding (im2col): [C x D x H x W] -> [C*k^3 x D'*H'*W'].
template <class T>
Tensor<T> unfold3d(const Tensor<T>& x, std::size_t k, std::size_t stride, std::size_t pad) {
  const auto g = ConvGeometry::make(x.shape(), k, stride, pad);
  const std::size_t ncols = g.cols();
  std::vector<T> out(g.rows() * ncols);
  auto xs = x.data();
  const long st = static_cast<long>(g.stride);
  const std::size_t ow = g.ow;
  detail::for_each_unfold_line(g, [&](std::size_t row, std::size_t col, long base, long ix0, std::size_t lo,
                                      std::size_t hi) {
    T* o = out.data() + row * ncols + col;
    if (base < 0) {
      std::fill(o, o + ow, T(0));
      return;
    }
    const T* src = xs.data() + base;
    std::fill(o, o + lo, T(0));
    if (st == 1) {
      if (hi > lo) std::copy(src + (ix0 + long(lo)), src + (ix0 + long(hi)), o + lo);
    } else {
      for (std::size_t xx = lo; xx < hi; ++xx) o[xx] = src[ix0 + long(xx) * st];
    }
    std::fill(o + hi, o + ow, T(0));
  });
  return make_result<T>(Shape{g.rows(), ncols}, std::move(out), {x}, [x, g, ncols](std::span<const T> gr, Tape<T>& tp) {
    std::vector<T> gx(x.size(), T(0));
    const long st = static_cast<long>(g.stride);
    detail::for_each_unfold_line(g, [&](std::size_t row, std::size_t col, long base, long ix0, std::size_t lo,
                                        std::size_t hi) {
      if (base < 0) return;
      const T* gi = gr.data() + row * ncols + col;
      T* dst = gx.data() + base;
      for (std::size_t xx = lo; xx < hi; ++xx) dst[ix0 + long(xx) * st] += gi[xx];
    });
    tp.accumulate(x, std::move(gx));
  });
}

// Zero-padded 3D cross-correlation. kernel: [C_out x C_in x k x k x k].
// The kernel gradient comes from the matmul adjoint over the unfolded input.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
  if (kernel.rank() != 5 || kernel.dim(2) != kernel.dim(3) || kernel.dim(3) != kernel.dim(4))
    throw DimensionError("conv3d: kernel must be [C_out x C_in x k x k x k], got " + shape_str(kernel.shape()));
  if (x.rank() != 4 || x.dim(0) != kernel.dim(1))
    throw DimensionError("conv3d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                         shape_str(kernel.shape()));
  const std::size_t k = kernel.dim(2), cout = kernel.dim(0);
  const auto g = ConvGeometry::make(x.shape(), k, stride, pad);
  Tensor<T> cols = (k == 1 && stride == 1 && pad == 0) ? reshape(x, Shape{g.channels, g.cols()})
                                                       : unfold3d(x, k, stride, pad);
  auto w = reshape(kernel, Shape{cout, g.rows()});
  return reshape(matmul(w, cols), Shape{cout, g.od, g.oh, g.ow});
}

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  return add_col_vector(conv3d(x, kernel, stride, pad), bias);
}

enum class ResizeMode { kLinear, kNearest };

namespace detail {

// Per-output-sample source taps along one axis (half-pixel centers).
struct AxisTaps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w1;
};

inline AxisTaps axis_taps(std::size_t n_in, std::size_t n_out, ResizeMode mode) {
  AxisTaps t;
  t.i0.resize(n_out);
  t.i1.resize(n_out);
  t.w1.assign(n_out, 0.0);
  const double ratio = static_cast<double>(n_in) / static_cast<double>(n_out);
  for (std::size_t o = 0; o < n_out; ++o) {
    if (mode == ResizeMode::kNearest) {
      t.i0[o] = t.i1[o] = std::min(static_cast<std::size_t>(std::floor(o * ratio)), n_in - 1);
      continue;
    }
    double src = std::max(0.0, (o + 0.5) * ratio - 0.5);
    std::size_t lo = std::min(static_cast<std::size_t>(std::floor(src)), n_in - 1);
    t.i0[o] = lo;
    t.i1[o] = std::min(lo + 1, n_in - 1);
    t.w1[o] = t.i1[o] == lo ? 0.0 : src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

// Resamples one axis to `n_out` samples. Linear mode is a fixed linear map, so
// its adjoint is the transposed map.
template <class T>
Tensor<T> resize_axis(const Tensor<T>& x, std::size_t axis, std::size_t n_out, ResizeMode mode) {
  auto v = detail::axis_view(x.shape(), axis);
  if (n_out == 0) throw DimensionError("resize: target extent must be positive");
  if (n_out == v.n) return x;
  auto taps = std::make_shared<const detail::AxisTaps>(detail::axis_taps(v.n, n_out, mode));
  Shape shape = x.shape();
  shape[axis] = n_out;
  std::vector<T> out(v.outer * n_out * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < n_out; ++j) {
      const T w1 = static_cast<T>(taps->w1[j]), w0 = T(1) - w1;
      const T* a = x.data().data() + (o * v.n + taps->i0[j]) * v.inner;
      const T* b = x.data().data() + (o * v.n + taps->i1[j]) * v.inner;
      T* dst = out.data() + (o * n_out + j) * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) dst[i] = w0 * a[i] + w1 * b[i];
    }
  return make_result<T>(std::move(shape), std::move(out), {x}, [x, v, taps, n_out](std::span<const T> g, Tape<T>& tp) {
    std::vector<T> gx(x.size(), T(0));
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t j = 0; j < n_out; ++j) {
        const T w1 = static_cast<T>(taps->w1[j]), w0 = T(1) - w1;
        T* a = gx.data() + (o * v.n + taps->i0[j]) * v.inner;
        T* b = gx.data() + (o * v.n + taps->i1[j]) * v.inner;
        const T* src = g.data() + (o * n_out + j) * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) {
          a[i] += w0 * src[i];
          b[i] += w1 * src[i];
        }
      }
    tp.accumulate(x, std::move(gx));
  });
}

// Trilinear / nearest resize of a [C x D x H x W] map.
template <class T>
Tensor<T> resize3d(const Tensor<T>& x, std::size_t d, std::size_t h, std::size_t w,
                   ResizeMode mode = ResizeMode::kLinear) {
  if (x.rank() != 4) throw DimensionError("resize3d: expected [C x D x H x W], got " + shape_str(x.shape()));
  return resize_axis(resize_axis(resize_axis(x, 1, d, mode), 2, h, mode), 3, w, mode);
}

// Block-average pooling along one axis by an integer factor.
template <class T>
Tensor<T> pool_axis_mean(const Tensor<T>& x, std::size_t axis, std::size_t n_out) {
  auto v = detail::axis_view(x.shape(), axis);
  if (n_out == 0 || v.n % n_out != 0)
    throw DimensionError("block pooling: target extent " + std::to_string(n_out) + " does not divide " +
                         std::to_string(v.n));
  if (n_out == v.n) return x;
  const std::size_t f = v.n / n_out;
  Shape shape = x.shape();
  shape[axis] = n_out;
  std::vector<T> out(v.outer * n_out * v.inner, T(0));
  const T inv = T(1) / static_cast<T>(f);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.n; ++j) {
      const T* src = x.data().data() + (o * v.n + j) * v.inner;
      T* dst = out.data() + (o * n_out + j / f) * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i] * inv;
    }
  return make_result<T>(std::move(shape), std::move(out), {x}, [x, v, f, n_out, inv](std::span<const T> g, Tape<T>& tp) {
    std::vector<T> gx(x.size());
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t j = 0; j < v.n; ++j) {
        const T* src = g.data() + (o * n_out + j / f) * v.inner;
        T* dst = gx.data() + (o * v.n + j) * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) dst[i] = src[i] * inv;
      }
    tp.accumulate(x, std::move(gx));
  });
}

// Block-average pooling of a [C x D x H x W] map to (d, h, w).
template <class T>
Tensor<T> avg_pool3d(const Tensor<T>& x, std::size_t d, std::size_t h, std::size_t w) {
  if (x.rank() != 4) throw DimensionError("avg_pool3d: expected [C x D x H x W], got " + shape_str(x.shape()));
  return pool_axis_mean(pool_axis_mean(pool_axis_mean(x, 1, d), 2, h), 3, w);
}

}  // namespace transunet::ops
