#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "clca/parameters.hpp"
#include "clca/tensor.hpp"

namespace clca {

struct AdamWHyper {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// First and second moments per parameter, in registration order.
template <typename T>
struct AdamWState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;  // completed optimizer steps

  static AdamWState init(const ParameterStore<T>& ps) {
    AdamWState s;
    for (const auto& p : ps) {
      s.m.emplace_back(p.value.shape(), T(0));
      s.v.emplace_back(p.value.shape(), T(0));
    }
    return s;
  }
};

template <typename T>
bool grads_finite(const ParameterStore<T>& ps) {
  for (const auto& p : ps)
    if (!p.grad.all_finite()) return false;
  return true;
}

// One AdamW update with decoupled weight decay (theta <- theta - lr*wd*theta,
// only for parameters flagged for decay). Returns false and leaves
// everything untouched when any gradient is non-finite.
template <typename T>
bool adamw_step(ParameterStore<T>& ps, AdamWState<T>& state, const AdamWHyper& h) {
  if (!grads_finite(ps)) return false;
  const std::uint64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  std::size_t i = 0;
  for (auto& p : ps) {
    auto& m = state.m.at(i).storage();
    auto& v = state.v.at(i).storage();
    auto& w = p.value.storage();
    const auto& g = p.grad.storage();
    const double shrink = p.decay ? 1.0 - h.lr * h.weight_decay : 1.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = h.beta1 * static_cast<double>(m[j]) + (1.0 - h.beta1) * gj;
      const double vj = h.beta2 * static_cast<double>(v[j]) + (1.0 - h.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + h.eps);
      w[j] = static_cast<T>(static_cast<double>(w[j]) * shrink - h.lr * update);
    }
    ++i;
  }
  state.step = t;
  return true;
}

// Linear warmup to base_lr, then cosine decay to min_lr, evaluated per step.
struct CosineSchedule {
  double base_lr = 5e-4;
  double min_lr = 1e-6;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 1;

  double operator()(std::uint64_t step) const {
    if (step < warmup_steps) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return min_lr;
    const double progress =
        std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps));
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

}  // namespace clca
