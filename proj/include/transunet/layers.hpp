// SPDX-License-Identifier: Apache-2.0
//
// Small building blocks shared by the backbone and the Transformer parts.
#pragma once

#include <random>
#include <string>

#include "transunet/ops.hpp"
#include "transunet/params.hpp"

namespace transunet {

enum class Activation { kGelu, kRelu };
enum class Norm { kInstance, kNone };

template <class T>
Tensor<T> activate(const Tensor<T>& x, Activation a) {
  return a == Activation::kGelu ? ops::gelu(x) : ops::relu(x);
}

// Registers "<name>.w" [C_out x C_in x k^3] and "<name>.b" [C_out].
template <class T>
void init_conv(Parameters<T>& p, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
               std::mt19937_64& rng) {
  p.add(name + ".w", init::kaiming<T>(Shape{cout, cin, k, k, k}, cin * k * k * k, rng));
  p.add(name + ".b", Tensor<T>::zeros(Shape{cout}));
}

inline std::size_t conv_param_count(std::size_t cin, std::size_t cout, std::size_t k) {
  return cout * cin * k * k * k + cout;
}

template <class T>
Tensor<T> conv(const Parameters<T>& p, const std::string& name, const Tensor<T>& x, std::size_t stride = 1) {
  const auto& w = p[name + ".w"];
  return ops::conv3d(x, w, p[name + ".b"], stride, w.dim(2) / 2);
}

template <class T>
void init_norm(Parameters<T>& p, const std::string& name, std::size_t channels) {
  p.add(name + ".g", Tensor<T>::full(Shape{channels}, T(1)));
  p.add(name + ".b", Tensor<T>::zeros(Shape{channels}));
}

// conv -> norm -> activation
template <class T>
void init_conv_block(Parameters<T>& p, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                     Norm norm, std::mt19937_64& rng) {
  init_conv(p, name + ".conv", cin, cout, k, rng);
  if (norm == Norm::kInstance) init_norm(p, name + ".norm", cout);
}

inline std::size_t conv_block_param_count(std::size_t cin, std::size_t cout, std::size_t k, Norm norm) {
  return conv_param_count(cin, cout, k) + (norm == Norm::kInstance ? 2 * cout : 0);
}

template <class T>
Tensor<T> conv_block(const Parameters<T>& p, const std::string& name, const Tensor<T>& x, Norm norm, Activation act,
                     std::size_t stride = 1) {
  auto y = conv(p, name + ".conv", x, stride);
  if (norm == Norm::kInstance) y = ops::instance_norm(y, p[name + ".norm.g"], p[name + ".norm.b"]);
  return activate(y, act);
}

// x [r x in] -> [r x out] with "<name>.w" [in x out] and optional "<name>.b".
template <class T>
void init_linear(Parameters<T>& p, const std::string& name, std::size_t in, std::size_t out, bool bias,
                 std::mt19937_64& rng, double stddev = -1.0) {
  if (stddev < 0.0) stddev = std::sqrt(1.0 / static_cast<double>(in));
  p.add(name + ".w", init::normal<T>(Shape{in, out}, stddev, rng));
  if (bias) p.add(name + ".b", Tensor<T>::zeros(Shape{out}));
}

template <class T>
Tensor<T> linear(const Parameters<T>& p, const std::string& name, const Tensor<T>& x) {
  auto y = ops::matmul(x, p[name + ".w"]);
  if (p.contains(name + ".b")) y = ops::add_row_vector(y, p[name + ".b"]);
  return y;
}

// [C x D x H x W] -> [DHW x C] token rows.
template <class T>
Tensor<T> flatten_spatial(const Tensor<T>& x) {
  return ops::transpose(ops::reshape(x, Shape{x.dim(0), x.size() / x.dim(0)}));
}

}  // namespace transunet
