#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace clca {

// Indices of the k largest scores, in ascending index order. Equal scores
// prefer the smaller index.
template <typename T>
std::vector<std::size_t> topk_stable(std::span<const T> scores, std::size_t k) {
  const std::size_t n = scores.size();
  if (k < 1 || k > n) {
    throw std::out_of_range("topk_stable: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

template <typename T>
std::vector<std::size_t> topk_stable(const std::vector<T>& scores, std::size_t k) {
  return topk_stable(std::span<const T>(scores), k);
}

// Number of tokens kept out of n at keep rate r: max(1, ceil(r*n)). The small
// slack absorbs binary rounding of r (0.7*10 must give 7, not 8).
inline std::size_t keep_count(double keep_rate, std::size_t n) {
  if (!(keep_rate > 0.0) || keep_rate > 1.0) {
    throw std::invalid_argument("keep rate must lie in (0, 1], got " + std::to_string(keep_rate));
  }
  if (n == 0) return 0;
  const double raw = std::ceil(keep_rate * static_cast<double>(n) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(raw), 1, n);
}

}  // namespace clca
