#pragma once

#include <cassert>
#include <cstddef>
#include <functional>
#include <deque>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "clca/errors.hpp"
#include "clca/tensor.hpp"

namespace clca {

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

// Define-by-run reverse-mode tape. Entries are appended in execution order,
// so a reverse sweep over ids is a valid topological order.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Entry {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    std::optional<Tensor<T>> grad;
    Tensor<T>* grad_sink = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t id) const { return entries_.at(id); }

  // Drops every entry recorded after the first n. Vars with id >= n dangle.
  void truncate(std::size_t n) {
    while (entries_.size() > n) entries_.pop_back();
  }

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    check_finite(value, "leaf");
    Entry e;
    e.op = "leaf";
    e.owned = std::move(value);
    e.requires_grad = requires_grad && grad_enabled_;
    entries_.push_back(std::move(e));
    return {this, entries_.size() - 1};
  }

  // Leaf that aliases an externally owned tensor (a model parameter). After
  // backward() its gradient is added into *grad_sink when non-null.
  Var<T> bind(const Tensor<T>& external, Tensor<T>* grad_sink) {
    Entry e;
    e.op = "param";
    e.external = &external;
    e.grad_sink = grad_sink;
    e.requires_grad = grad_enabled_ && grad_sink != nullptr;
    entries_.push_back(std::move(e));
    return {this, entries_.size() - 1};
  }

  Var<T> record(std::string op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(op), std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
  }

  Var<T> record(std::string op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    check_finite(value, op);
    Entry e;
    e.op = std::move(op);
    e.owned = std::move(value);
    const std::size_t self = entries_.size();
    for (const auto& in : inputs) {
      if (in.tape != this) throw std::logic_error("op '" + e.op + "' mixes variables from different tapes");
      assert(in.id < self);
      if (entries_[in.id].requires_grad) e.requires_grad = true;
    }
    e.requires_grad = e.requires_grad && grad_enabled_;
    if (e.requires_grad) {
      e.inputs.reserve(inputs.size());
      for (const auto& in : inputs) e.inputs.push_back(in.id);
      e.backward = std::move(fn);
    }
    entries_.push_back(std::move(e));
    return {this, self};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Entry& e = entries_[id];
    return e.external ? *e.external : e.owned;
  }

  bool requires_grad(std::size_t id) const { return entries_[id].requires_grad; }

  // Mutable gradient buffer, allocated on first use.
  Tensor<T>& grad(std::size_t id) {
    Entry& e = entries_[id];
    if (!e.grad) e.grad.emplace(value(id).shape(), T(0));
    return *e.grad;
  }

  // Gradient after backward(); zeros when the value was unreachable from the loss.
  Tensor<T> grad_of(Var<T> v) const {
    const Entry& e = entries_[v.id];
    if (e.grad) return *e.grad;
    return Tensor<T>(value(v.id).shape(), T(0));
  }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw std::logic_error("backward: loss belongs to another tape");
    if (value(loss.id).numel() != 1) {
      throw DimensionError("backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape()));
    }
    if (!entries_[loss.id].requires_grad) return;
    grad(loss.id).fill(T(1));
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Entry& e = entries_[id];
      if (!e.grad || !e.backward) continue;
      for (std::size_t in : e.inputs) {
        if (in >= id) throw std::logic_error("tape is not topologically ordered");
      }
      e.backward(*this, id);
    }
    for (Entry& e : entries_) {
      if (e.grad_sink && e.grad) {
        auto& sink = e.grad_sink->storage();
        const auto& g = e.grad->storage();
        for (std::size_t i = 0; i < g.size(); ++i) sink[i] += g[i];
      }
    }
  }

 private:
  static void check_finite(const Tensor<T>& t, const std::string& op) {
    if (!t.all_finite()) throw NumericError("non-finite value produced by op '" + op + "'");
  }

  bool grad_enabled_;
  std::deque<Entry> entries_;  // stable references across record()
};

}  // namespace clca
