#pragma once

#include <cstddef>
#include <deque>
#include <map>
#include <stdexcept>
#include <string>

#include "clca/tensor.hpp"

namespace clca {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = true;  // AdamW weight decay applies
};

// Named parameters in registration order. Element addresses are stable.
template <typename T>
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor<T> value, bool decay) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name '" + name + "'");
    const std::size_t id = params_.size();
    index_.emplace(name, id);
    Tensor<T> grad(value.shape(), T(0));
    params_.push_back({std::move(name), std::move(value), std::move(grad), decay});
    return id;
  }

  Parameter<T>& operator[](std::size_t id) { return params_[id]; }
  const Parameter<T>& operator[](std::size_t id) const { return params_[id]; }

  Parameter<T>& get(const std::string& name) { return params_.at(id_of(name)); }
  const Parameter<T>& get(const std::string& name) const { return params_.at(id_of(name)); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t id_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T(0));
  }

 private:
  std::deque<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace clca
