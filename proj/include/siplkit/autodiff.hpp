// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation applied to Vars in creation order; backward()
// walks the tape in reverse and accumulates gradients into the nodes that need
// them. Parameters enter the tape as leaves and receive their gradient in
// Parameter::grad when backward() runs. A Tape constructed with
// grad_enabled=false records values only, which is how inference runs.

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "siplkit/error.hpp"
#include "siplkit/tensor.hpp"

namespace siplkit {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = true;

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = Tensor<T>(value.shape());
    } else {
      grad.fill(T(0));
    }
  }
};

/// Name-ordered parameter registry. std::map keeps element addresses stable,
/// so layers may hold raw pointers into it.
template <typename T>
using ParamStore = std::map<std::string, Parameter<T>>;

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(int axis) const { return value().dim(axis); }
};

template <typename T>
class Tape {
 public:
  using Backward =
      std::function<void(Tape& tape, const Tensor<T>& out_value, const Tensor<T>& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> param(Parameter<T>& p) {
    const bool rg = grad_enabled_ && p.requires_grad;
    nodes_.push_back(Node{p.value, {}, rg, {}, rg ? &p : nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  /// Records the result of an op. `fn` is kept only when some input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward fn) {
    bool rg = false;
    if (grad_enabled_) {
      for (const auto& v : inputs) rg = rg || nodes_.at(v.id).requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : Backward{}, nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient accumulator for `v`, zero-allocated on first use.
  Tensor<T>& grad_acc(Var<T> v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Gradient of `v` after backward(); empty if nothing flowed into it.
  const Tensor<T>& grad(Var<T> v) const { return nodes_.at(v.id).grad; }

  void backward(Var<T> root) {
    if (!grad_enabled_) throw Error("backward() on a tape recorded without gradients");
    Node& r = nodes_.at(root.id);
    if (r.value.size() != 1) {
      throw ShapeError("backward() root must be a scalar, got " + to_string(r.value.shape()));
    }
    if (!r.requires_grad) return;
    r.grad = Tensor<T>(r.value.shape(), T(1));
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.value, n.grad);
      if (n.param != nullptr) {
        Parameter<T>& p = *n.param;
        if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
        for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

}  // namespace siplkit
