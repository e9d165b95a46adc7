// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "transunet/errors.hpp"
#include "transunet/tensor.hpp"

namespace transunet {

// Named parameter set, ordered by name so serialization is deterministic.
template <class T>
class Parameters {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void add(const std::string& name, Tensor<T> value) {
    if (!tensors_.emplace(name, std::move(value)).second)
      throw ConfigError("duplicate parameter '" + name + "'");
  }
  void set(const std::string& name, Tensor<T> value) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown parameter '" + name + "'");
    if (it->second.shape() != value.shape())
      throw DimensionError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", got " +
                           shape_str(value.shape()));
    it->second = std::move(value);
  }
  const Tensor<T>& operator[](const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const Map& map() const { return tensors_; }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  // Copy whose tensors are leaves on `tape`.
  Parameters watch(Tape<T>& tape) const {
    Parameters out;
    for (const auto& [name, t] : tensors_) out.tensors_.emplace(name, tape.watch(t));
    return out;
  }

  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out;
    for (const auto& [name, t] : tensors_) {
      std::vector<U> buf(t.data().begin(), t.data().end());
      out.add(name, Tensor<U>(t.shape(), std::move(buf)));
    }
    return out;
  }

 private:
  Map tensors_;
};

// Parameter initializers.
namespace init {

template <class T>
Tensor<T> normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<T> buf(numel(shape));
  for (auto& v : buf) v = static_cast<T>(n(rng));
  return Tensor<T>(std::move(shape), std::move(buf));
}

// Normal truncated to +-2 standard deviations (resampled).
template <class T>
Tensor<T> truncated_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<T> buf(numel(shape));
  for (auto& v : buf) {
    double s;
    do s = n(rng);
    while (std::abs(s) > 2.0);
    v = static_cast<T>(s * stddev);
  }
  return Tensor<T>(std::move(shape), std::move(buf));
}

// He-normal with the given fan-in.
template <class T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  return normal<T>(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

}  // namespace init

}  // namespace transunet
