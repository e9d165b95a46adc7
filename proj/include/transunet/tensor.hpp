// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and the reverse-mode tape that records operations
// on them. A Tensor is immutable once built; tracked tensors carry a pointer
// to the Tape that produced them plus their node id on it.
#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "transunet/errors.hpp"

namespace transunet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Global finite-value checking at kernel boundaries. Off by default; the
// trainer and the verification tools switch it on.
inline std::atomic<bool>& finite_checks() {
  static std::atomic<bool> enabled{false};
  return enabled;
}

template <class T>
class Tape;

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{1}, std::vector<T>(1, T(0))) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<T>>(std::move(data))) {
    for (auto e : shape_)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    if (numel(shape_) != data_->size())
      throw DimensionError("tensor buffer of " + std::to_string(data_->size()) +
                           " elements does not match shape " + shape_str(shape_));
    if (finite_checks().load(std::memory_order_relaxed)) check_finite("tensor construction");
  }

  static Tensor zeros(Shape shape) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor full(Shape shape, T value) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_->size(); }
  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  const std::vector<T>& vec() const { return *data_; }
  const T& operator[](std::size_t i) const { return (*data_)[i]; }
  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  bool requires_grad() const { return tape_ != nullptr; }
  int node_id() const { return node_; }
  Tape<T>* tape() const { return tape_; }

  // Same buffer, new shape. Untracked; use ops::reshape to stay on a tape.
  Tensor with_shape(Shape s) const {
    if (numel(s) != size())
      throw DimensionError("cannot view " + shape_str(shape_) + " as " + shape_str(s));
    Tensor out = *this;
    out.shape_ = std::move(s);
    out.tape_ = nullptr;
    out.node_ = -1;
    return out;
  }

  // Drops tape membership; the data buffer is shared.
  Tensor detach() const { return with_shape(shape_); }

  void check_finite(const char* where) const {
    for (std::size_t i = 0; i < data_->size(); ++i)
      if (!std::isfinite(static_cast<double>((*data_)[i])))
        throw NumericError(std::string("non-finite value at index ") + std::to_string(i) + " in " + where);
  }

 private:
  friend class Tape<T>;
  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
};

// Ordered record of executed primitives. Single owner: recording and
// backward must not run concurrently on the same tape.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(std::span<const T> grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf; the returned tensor shares data with `value`.
  Tensor<T> watch(const Tensor<T>& value) {
    ensure_recordable();
    Tensor<T> out = value;
    out.tape_ = this;
    out.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{{}, nullptr, out.size(), true});
    return out;
  }

  Tensor<T> record(Shape shape, std::vector<T> data, std::vector<int> inputs, Backward backward) {
    ensure_recordable();
    Tensor<T> out(std::move(shape), std::move(data));
    for (int id : inputs)
      if (id < 0 || id >= static_cast<int>(nodes_.size()))
        throw ContractError("operation input is not recorded on this tape");
    out.tape_ = this;
    out.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(inputs), std::move(backward), out.size(), false});
    return out;
  }

  // Adds `g` into the gradient slot of `t`; no-op for untracked tensors.
  void accumulate(const Tensor<T>& t, std::span<const T> g) {
    if (t.tape_ == nullptr) return;
    if (t.tape_ != this) throw ContractError("gradient routed to a tensor from another tape");
    auto& slot = grads_.at(static_cast<std::size_t>(t.node_));
    if (g.size() != nodes_[t.node_].size)
      throw ContractError("adjoint produced " + std::to_string(g.size()) + " values for a node of size " +
                          std::to_string(nodes_[t.node_].size));
    if (slot.empty()) {
      slot.assign(g.begin(), g.end());
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
    }
  }

  // Takes ownership of `g` when the slot is still empty.
  void accumulate(const Tensor<T>& t, std::vector<T>&& g) {
    if (t.tape_ == nullptr) return;
    if (t.tape_ != this) throw ContractError("gradient routed to a tensor from another tape");
    auto& slot = grads_.at(static_cast<std::size_t>(t.node_));
    if (slot.empty() && g.size() == nodes_[t.node_].size) {
      slot = std::move(g);
      return;
    }
    accumulate(t, std::span<const T>(g));
  }

  // Reverse sweep from a scalar loss. Afterwards every watched leaf has a
  // gradient of its own size (zeros where the loss does not depend on it).
  void backward(const Tensor<T>& loss) {
    if (loss.tape_ != this) throw ContractError("backward() on a tensor not recorded on this tape");
    if (loss.size() != 1) throw ContractError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
    if (swept_) throw ContractError("tape already swept; call reset() before reuse");
    grads_.assign(nodes_.size(), {});
    grads_[loss.node_] = {T(1)};
    for (int i = loss.node_; i >= 0; --i) {
      auto& node = nodes_[i];
      if (node.leaf) {
        if (grads_[i].empty()) grads_[i].assign(node.size, T(0));
        continue;
      }
      if (grads_[i].empty() || !node.backward) continue;
      std::vector<T> g = std::move(grads_[i]);
      grads_[i] = {};
      if (finite_checks().load(std::memory_order_relaxed))
        for (auto v : g)
          if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite gradient during backward");
      node.backward(std::span<const T>(g), *this);
    }
    for (std::size_t i = static_cast<std::size_t>(loss.node_) + 1; i < nodes_.size(); ++i)
      if (nodes_[i].leaf && grads_[i].empty()) grads_[i].assign(nodes_[i].size, T(0));
    swept_ = true;
  }

  // Gradients are retained for watched leaves only.
  Tensor<T> grad(const Tensor<T>& t) const {
    if (t.tape_ != this) throw ContractError("grad() of a tensor not recorded on this tape");
    if (!swept_) throw ContractError("grad() before backward()");
    const auto& g = grads_.at(static_cast<std::size_t>(t.node_));
    if (g.empty()) return Tensor<T>::zeros(t.shape());
    return Tensor<T>(t.shape(), g);
  }

  void reset() {
    nodes_.clear();
    grads_.clear();
    swept_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool swept() const { return swept_; }

 private:
  struct Node {
    std::vector<int> inputs;
    Backward backward;
    std::size_t size;
    bool leaf;
  };

  void ensure_recordable() const {
    if (swept_) throw ContractError("tape already swept; call reset() before recording");
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  bool swept_ = false;
};

}  // namespace transunet
