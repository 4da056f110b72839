// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "omniscan/autodiff.hpp"
#include "omniscan/errors.hpp"
#include "omniscan/tensor.hpp"

namespace omniscan {

using Rng = std::mt19937_64;

// Ordered collection of named parameter tensors. Names are dotted paths
// ("blocks.0.oa_front.mamba_tf.in_proj"); insertion order is the canonical
// order for optimizers and checkpoints.
template <std::floating_point T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  Tensor<T>& add(std::string name, Tensor<T> init) {
    if (index_.count(name))
      throw ContractError("param store: duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(init)});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name); }

  Tensor<T>& at(const std::string& name) { return entries_[position(name)].value; }
  const Tensor<T>& at(const std::string& name) const {
    return entries_[position(name)].value;
  }

  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ContractError("param store: unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  // Number of scalars whose name starts with `prefix`.
  std::size_t count(const std::string& prefix = "") const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.name.compare(0, prefix.size(), prefix) == 0) n += e.value.size();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// A ParamStore's tensors bound for one forward pass: tape leaves when a tape
// is given, constants otherwise.
template <std::floating_point T>
class BoundParams {
 public:
  BoundParams(const ParamStore<T>& store, Tape<T>* tape) : store_(&store) {
    vars_.reserve(store.size());
    for (const auto& e : store.entries())
      vars_.push_back(tape ? tape->leaf(e.value) : constant(e.value));
  }

  const Var<T>& operator[](const std::string& name) const {
    return vars_[store_->position(name)];
  }

  const std::vector<Var<T>>& vars() const { return vars_; }
  const ParamStore<T>& store() const { return *store_; }

  // Gradients in store order; zeros for parameters the loss did not reach.
  std::vector<Tensor<T>> grads(const Tape<T>& tape) const {
    std::vector<Tensor<T>> out;
    out.reserve(vars_.size());
    for (const auto& v : vars_) out.push_back(tape.grad_or_zero(v));
    return out;
  }

 private:
  const ParamStore<T>* store_;
  std::vector<Var<T>> vars_;
};

// Name prefix into a BoundParams.
template <std::floating_point T>
class Scope {
 public:
  Scope(const BoundParams<T>& params, std::string prefix = "")
      : params_(&params), prefix_(std::move(prefix)) {}

  Scope sub(const std::string& name) const {
    return Scope(*params_, join(name) + ".");
  }
  const Var<T>& operator[](const std::string& name) const {
    return (*params_)[join(name)];
  }
  const std::string& prefix() const { return prefix_; }

 private:
  std::string join(const std::string& name) const { return prefix_ + name; }

  const BoundParams<T>* params_;
  std::string prefix_;
};

namespace init {

template <std::floating_point T>
Tensor<T> uniform(Shape shape, T bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound),
                                              static_cast<double>(bound));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for dense layers.
template <std::floating_point T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  return uniform<T>(std::move(shape),
                    T(1) / std::sqrt(static_cast<T>(fan_in)), rng);
}

}  // namespace init

}  // namespace omniscan
