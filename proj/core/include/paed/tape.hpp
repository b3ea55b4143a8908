#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "paed/ndbuffer.hpp"
#include "paed/rng.hpp"

namespace paed {

/// Forward-pass behaviour of dropout and batch normalization.
enum class Mode { train, infer };

template <typename T>
struct Parameter {
  NdBuffer<T> value;
  NdBuffer<T> grad;
  /// Non-trainable entries hold state such as batch-norm running statistics.
  bool trainable = true;
};

/// Named parameters in insertion order. References stay valid as entries are added.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Parameter<T> param;
  };

  Parameter<T>& add(std::string name, NdBuffer<T> value, bool trainable = true) {
    if (index_.contains(name)) throw Error("ParamStore: duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    NdBuffer<T> grad(value.shape());
    entries_.push_back(Entry{std::move(name), Parameter<T>{std::move(value), std::move(grad), trainable}});
    return entries_.back().param;
  }

  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }

  Parameter<T>& get(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParamStore: no parameter named '" + std::string(name) + "'");
    return entries_[it->second].param;
  }
  const Parameter<T>& get(std::string_view name) const {
    return const_cast<ParamStore*>(this)->get(name);
  }

  std::deque<Entry>& entries() noexcept { return entries_; }
  const std::deque<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_) e.param.grad.fill(T{0});
  }

  /// Number of scalars across trainable entries.
  std::size_t trainable_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.param.trainable) n += e.param.value.size();
    }
    return n;
  }

 private:
  std::deque<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const NdBuffer<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Record of executed differentiable operations. backward() walks the record
/// in exact reverse order. One tape belongs to one thread at a time.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(Mode mode = Mode::infer, std::uint64_t dropout_seed = 0)
      : mode_(mode), rng_(dropout_seed) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Mode mode() const noexcept { return mode_; }
  Rng& rng() noexcept { return rng_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(NdBuffer<T> value) { return push(std::move(value), {}, nullptr); }

  /// Leaf bound to a parameter; each parameter maps to exactly one node.
  Var<T> parameter(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>(this, it->second);
    Node node;
    node.value = p.value;
    node.requires_grad = p.trainable;
    node.param = &p;
    nodes_.push_back(std::move(node));
    const std::size_t id = nodes_.size() - 1;
    param_nodes_.emplace(&p, id);
    return Var<T>(this, id);
  }

  /// Appends an operation result. The backward closure is kept only when some
  /// input needs a gradient.
  Var<T> push(NdBuffer<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    Node node;
    node.value = std::move(value);
    for (std::size_t in : inputs) node.requires_grad = node.requires_grad || nodes_.at(in).requires_grad;
    if (node.requires_grad) {
      node.inputs = std::move(inputs);
      node.backward = std::move(fn);
    }
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  const NdBuffer<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient accumulator of node `id`, allocated as zeros on first use.
  NdBuffer<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = NdBuffer<T>(n.value.shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Reverse sweep from a scalar loss. Gradients are recomputed from scratch on
  /// every call and then copied into the bound parameters.
  void backward(Var<T> loss) {
    if (&loss.tape() != this) throw Error("backward: loss belongs to a different tape");
    if (value(loss.id()).size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " +
                       shape_to_string(value(loss.id()).shape()));
    }
    for (auto& n : nodes_) n.grad = NdBuffer<T>();
    grad(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
    for (const auto& entry : param_nodes_) {
      Node& n = nodes_[entry.second];
      Parameter<T>& p = *n.param;
      if (!p.trainable) continue;
      p.grad = n.grad.empty() ? NdBuffer<T>(p.value.shape()) : n.grad;
    }
  }

 private:
  struct Node {
    NdBuffer<T> value;
    NdBuffer<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
  };

  Mode mode_;
  Rng rng_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
};

}  // namespace paed
