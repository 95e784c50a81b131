#pragma once

// Differentiable tensor operations recorded on a Tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "clca/errors.hpp"
#include "clca/tape.hpp"
#include "clca/tensor.hpp"

namespace clca::ops {

namespace detail {

// Gradient buffer of input `slot` of entry `self`, or nullptr when that input
// does not need a gradient.
template <typename T>
Tensor<T>* grad_slot(Tape<T>& tape, std::size_t self, std::size_t slot) {
  const std::size_t in = tape.entry(self).inputs[slot];
  return tape.requires_grad(in) ? &tape.grad(in) : nullptr;
}

template <typename T>
const Tensor<T>& input_value(const Tape<T>& tape, std::size_t self, std::size_t slot) {
  return tape.value(tape.entry(self).inputs[slot]);
}

template <typename T>
const Tensor<T>& out_grad(Tape<T>& tape, std::size_t self) {
  return tape.grad(self);
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* __restrict brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* __restrict crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transpose(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

// C[m,k] += A[m,n] * B[k,n]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  const std::vector<T> bt = transpose(b, k, n);
  gemm_nn(a, bt.data(), c, m, n, k);
}

inline Shape strip_last2(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

}  // namespace detail

// Batched matrix product with broadcasting over leading batch dimensions.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  const Shape ba = detail::strip_last2(sa), bb = detail::strip_last2(sb);
  const std::size_t rank = std::max(ba.size(), bb.size());
  Shape batch(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i + ba.size() >= rank ? ba[i + ba.size() - rank] : 1;
    const std::size_t db = i + bb.size() >= rank ? bb[i + bb.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("matmul: batch dimensions not broadcastable " + shape_str(sa) + " and " + shape_str(sb));
    }
    batch[i] = std::max(da, db);
  }
  const std::size_t nbatch = shape_numel(batch);
  std::vector<std::size_t> a_off(nbatch), b_off(nbatch);
  for (std::size_t idx = 0; idx < nbatch; ++idx) {
    std::size_t rem = idx, oa = 0, ob = 0, stride_a = 1, stride_b = 1;
    for (std::size_t i = rank; i-- > 0;) {
      const std::size_t coord = rem % batch[i];
      rem /= batch[i];
      const std::size_t da = i + ba.size() >= rank ? ba[i + ba.size() - rank] : 1;
      const std::size_t db = i + bb.size() >= rank ? bb[i + bb.size() - rank] : 1;
      if (da != 1) oa += coord * stride_a;
      if (db != 1) ob += coord * stride_b;
      stride_a *= da;
      stride_b *= db;
    }
    a_off[idx] = oa * m * k;
    b_off[idx] = ob * k * n;
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  for (std::size_t idx = 0; idx < nbatch; ++idx) {
    detail::gemm_nn(pa + a_off[idx], pb + b_off[idx], out.ptr() + idx * m * n, m, k, n);
  }
  return a.tape->record("matmul", std::move(out), {a, b}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    const T* av = detail::input_value(tape, self, 0).ptr();
    const T* bv = detail::input_value(tape, self, 1).ptr();
    if (Tensor<T>* ga = detail::grad_slot(tape, self, 0)) {
      for (std::size_t idx = 0; idx < nbatch; ++idx)
        detail::gemm_nt(g.ptr() + idx * m * n, bv + b_off[idx], ga->ptr() + a_off[idx], m, n, k);
    }
    if (Tensor<T>* gb = detail::grad_slot(tape, self, 1)) {
      for (std::size_t idx = 0; idx < nbatch; ++idx)
        detail::gemm_tn(av + a_off[idx], g.ptr() + idx * m * n, gb->ptr() + b_off[idx], m, k, n);
    }
  });
}

// y = x W + b over the last axis; W is [in, out], b is [out].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sw.size() != 2 || sx.back() != sw[0] || b.shape() != Shape{sw[1]}) {
    throw DimensionError("linear: x " + shape_str(sx) + ", weight " + shape_str(sw) + ", bias " +
                         shape_str(b.shape()));
  }
  const std::size_t in = sw[0], outd = sw[1], rows = x.value().numel() / in;
  Shape out_shape = sx;
  out_shape.back() = outd;
  Tensor<T> out(out_shape);
  const T* bias = b.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) std::copy(bias, bias + outd, out.ptr() + r * outd);
  detail::gemm_nn(x.value().ptr(), w.value().ptr(), out.ptr(), rows, in, outd);
  return x.tape->record("linear", std::move(out), {x, w, b}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    if (Tensor<T>* gx = detail::grad_slot(tape, self, 0)) {
      detail::gemm_nt(g.ptr(), detail::input_value(tape, self, 1).ptr(), gx->ptr(), rows, outd, in);
    }
    if (Tensor<T>* gw = detail::grad_slot(tape, self, 1)) {
      detail::gemm_tn(detail::input_value(tape, self, 0).ptr(), g.ptr(), gw->ptr(), rows, in, outd);
    }
    if (Tensor<T>* gb = detail::grad_slot(tape, self, 2)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < outd; ++j) (*gb)[j] += g[r * outd + j];
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return a.tape->record("add", std::move(out), {a, b}, [](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    for (std::size_t slot = 0; slot < 2; ++slot) {
      if (Tensor<T>* gi = detail::grad_slot(tape, self, slot))
        for (std::size_t i = 0; i < g.numel(); ++i) (*gi)[i] += g[i];
    }
  });
}

// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.tape->record("mul", std::move(out), {a, b}, [](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    const auto& av = detail::input_value(tape, self, 0);
    const auto& bv = detail::input_value(tape, self, 1);
    if (Tensor<T>* ga = detail::grad_slot(tape, self, 0))
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv[i];
    if (Tensor<T>* gb = detail::grad_slot(tape, self, 1))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * av[i];
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  return a.tape->record("scale", std::move(out), {a}, [s](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    if (Tensor<T>* ga = detail::grad_slot(tape, self, 0))
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * s;
  });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  T s = T(0);
  for (T v : a.value().data()) s += v;
  return a.tape->record("sum", Tensor<T>({1}, s), {a}, [](Tape<T>& tape, std::size_t self) {
    const T g = tape.grad(self)[0];
    if (Tensor<T>* ga = detail::grad_slot(tape, self, 0))
      for (auto& v : ga->storage()) v += g;
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape->record("reshape", std::move(out), {a}, [](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    if (Tensor<T>* ga = detail::grad_slot(tape, self, 0))
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
  });
}

// [1, ...] -> [batch, ...] by repetition.
template <typename T>
Var<T> broadcast_batch(Var<T> a, std::size_t batch) {
  const Shape& s = a.shape();
  if (s.empty() || s[0] != 1) throw DimensionError("broadcast_batch: leading dim must be 1, got " + shape_str(s));
  Shape os = s;
  os[0] = batch;
  const std::size_t inner = a.value().numel();
  Tensor<T> out(os);
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(a.value().ptr(), inner, out.ptr() + b * inner);
  return a.tape->record("broadcast_batch", std::move(out), {a}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    if (Tensor<T>* ga = detail::grad_slot(tape, self, 0))
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < inner; ++i) (*ga)[i] += g[b * inner + i];
  });
}

// out.shape[i] = in.shape[perm[i]]
template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> perm) {
  const Shape& s = a.shape();
  if (perm.size() != s.size()) throw DimensionError("permute: rank mismatch for shape " + shape_str(s));
  {
    std::vector<std::size_t> check = perm;
    std::sort(check.begin(), check.end());
    for (std::size_t i = 0; i < check.size(); ++i)
      if (check[i] != i) throw DimensionError("permute: invalid permutation");
  }
  const std::size_t rank = s.size();
  Shape os(rank);
  for (std::size_t i = 0; i < rank; ++i) os[i] = s[perm[i]];
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  // Walks destination rows (last output axis) and hands each row's source
  // offset and stride to `row`.
  auto walk = [os, in_strides, perm, rank](auto&& row) {
    const std::size_t n = os[rank - 1], step = in_strides[perm[rank - 1]];
    const std::size_t rows = shape_numel(os) / n;
    std::vector<std::size_t> coord(rank, 0);
    std::size_t off = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      row(r * n, off, n, step);
      for (std::size_t i = rank - 1; i-- > 0;) {
        off += in_strides[perm[i]];
        if (++coord[i] < os[i]) break;
        off -= coord[i] * in_strides[perm[i]];
        coord[i] = 0;
      }
    }
  };
  Tensor<T> out(os);
  const T* in = a.value().ptr();
  T* po = out.ptr();
  walk([&](std::size_t dst, std::size_t src, std::size_t n, std::size_t step) {
    for (std::size_t j = 0; j < n; ++j) po[dst + j] = in[src + j * step];
  });
  return a.tape->record("permute", std::move(out), {a}, [walk](Tape<T>& tape, std::size_t self) {
    const T* g = tape.grad(self).ptr();
    if (Tensor<T>* ga = detail::grad_slot(tape, self, 0)) {
      T* pg = ga->ptr();
      walk([&](std::size_t dst, std::size_t src, std::size_t n, std::size_t step) {
        for (std::size_t j = 0; j < n; ++j) pg[src + j * step] += g[dst + j];
      });
    }
  });
}

// Contiguous sub-range [start, start+len) along `axis`.
template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& s = a.shape();
  if (axis >= s.size() || len == 0 || start + len > s[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + axis));
  const std::size_t inner = shape_numel(Shape(s.begin() + axis + 1, s.end()));
  const std::size_t full = s[axis];
  Shape os = s;
  os[axis] = len;
  Tensor<T> out(os);
  const auto& in = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(in.ptr() + (o * full + start) * inner, len * inner, out.ptr() + o * len * inner);
  return a.tape->record("slice", std::move(out), {a}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    if (Tensor<T>* ga = detail::grad_slot(tape, self, 0)) {
      for (std::size_t o = 0; o < outer; ++o) {
        T* dst = ga->ptr() + (o * full + start) * inner;
        const T* srcp = g.ptr() + o * len * inner;
        for (std::size_t i = 0; i < len * inner; ++i) dst[i] += srcp[i];
      }
    }
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(s0));
    lens.push_back(s[axis]);
    total += s[axis];
  }
  const std::size_t outer = shape_numel(Shape(s0.begin(), s0.begin() + axis));
  const std::size_t inner = shape_numel(Shape(s0.begin() + axis + 1, s0.end()));
  Shape os = s0;
  os[axis] = total;
  Tensor<T> out(os);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& v = parts[pi].value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.ptr() + o * lens[pi] * inner, lens[pi] * inner, out.ptr() + (o * total + offset) * inner);
    offset += lens[pi];
  }
  return parts[0].tape->record("concat", std::move(out), parts, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < lens.size(); ++pi) {
      if (Tensor<T>* gp = detail::grad_slot(tape, self, pi)) {
        for (std::size_t o = 0; o < outer; ++o) {
          const T* srcp = g.ptr() + (o * total + off) * inner;
          T* dst = gp->ptr() + o * lens[pi] * inner;
          for (std::size_t i = 0; i < lens[pi] * inner; ++i) dst[i] += srcp[i];
        }
      }
      off += lens[pi];
    }
  });
}

// x [B, T, ...] -> [B, k, ...] selecting rows index[b][0..k) of axis 1 for each batch entry.
template <typename T>
Var<T> gather_rows(Var<T> x, const std::vector<std::vector<std::size_t>>& index) {
  const Shape& s = x.shape();
  if (s.size() < 2 || index.size() != s[0]) {
    throw DimensionError("gather_rows: index batch " + std::to_string(index.size()) + " vs shape " + shape_str(s));
  }
  const std::size_t batch = s[0], rows = s[1], k = index.empty() ? 0 : index[0].size();
  const std::size_t inner = shape_numel(Shape(s.begin() + 2, s.end()));
  for (const auto& row : index) {
    if (row.size() != k || k == 0) throw DimensionError("gather_rows: ragged or empty index lists");
    for (std::size_t r : row)
      if (r >= rows) throw DimensionError("gather_rows: index " + std::to_string(r) + " out of range " + shape_str(s));
  }
  Shape os = s;
  os[1] = k;
  Tensor<T> out(os);
  const auto& in = x.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(in.ptr() + (b * rows + index[b][j]) * inner, inner, out.ptr() + (b * k + j) * inner);
  return x.tape->record("gather_rows", std::move(out), {x}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    if (Tensor<T>* gx = detail::grad_slot(tape, self, 0)) {
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < k; ++j) {
          T* dst = gx->ptr() + (b * rows + index[b][j]) * inner;
          const T* srcp = g.ptr() + (b * k + j) * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += srcp[i];
        }
    }
  });
}

// Mean over `axis`, which is removed from the shape.
template <typename T>
Var<T> mean_axis(Var<T> a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw DimensionError("mean_axis: axis out of range for " + shape_str(s));
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + axis));
  const std::size_t inner = shape_numel(Shape(s.begin() + axis + 1, s.end()));
  const std::size_t n = s[axis];
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  if (os.empty()) os = {1};
  Tensor<T> out(os);
  const auto& in = a.value();
  const T inv = T(1) / static_cast<T>(n);
  for (std::size_t o = 0; o < outer; ++o) {
    T* dst = out.ptr() + o * inner;
    for (std::size_t j = 0; j < n; ++j) {
      const T* srcp = in.ptr() + (o * n + j) * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += srcp[i];
    }
    for (std::size_t i = 0; i < inner; ++i) dst[i] *= inv;
  }
  return a.tape->record("mean_axis", std::move(out), {a}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    if (Tensor<T>* ga = detail::grad_slot(tape, self, 0)) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n; ++j) {
          T* dst = ga->ptr() + (o * n + j) * inner;
          const T* srcp = g.ptr() + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += srcp[i] * inv;
        }
    }
  });
}

// Numerically stable softmax over the last axis.
template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0) throw DimensionError("softmax_lastdim: empty last dimension");
  const std::size_t n = s.back(), rows = x.value().numel() / n;
  Tensor<T> out(s);
  const auto& in = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = in.ptr() + r * n;
    T* dst = out.ptr() + r * n;
    const T mx = *std::max_element(src, src + n);
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      dst[j] = std::exp(src[j] - mx);
      sum += dst[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) dst[j] *= inv;
  }
  return x.tape->record("softmax", std::move(out), {x}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    const Tensor<T>& y = tape.value(self);
    if (Tensor<T>* gx = detail::grad_slot(tape, self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y.ptr() + r * n;
        const T* gr = g.ptr() + r * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
        T* dst = gx->ptr() + r * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] += yr[j] * (gr[j] - dot);
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6)) {
  const Shape& s = x.shape();
  const std::size_t d = s.back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: x " + shape_str(s) + " with gamma " + shape_str(gamma.shape()) + ", beta " +
                         shape_str(beta.shape()));
  }
  if (!(eps > T(0))) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t rows = x.value().numel() / d;
  Tensor<T> out(s);
  std::vector<T> xhat(rows * d), rstd(rows);
  const auto& in = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = in.ptr() + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += src[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (src[j] - mean) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape->record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad(self);
        const auto& gv = detail::input_value(tape, self, 1);
        if (Tensor<T>* gx = detail::grad_slot(tape, self, 0)) {
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = T(0), mean_dh_h = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[r * d + j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh /= static_cast<T>(d);
            mean_dh_h /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[r * d + j] * gv[j];
              (*gx)[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
            }
          }
        }
        if (Tensor<T>* gg = detail::grad_slot(tape, self, 1))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g[r * d + j] * xhat[r * d + j];
        if (Tensor<T>* gb = detail::grad_slot(tape, self, 2))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g[r * d + j];
      });
}

// Running statistics of a batch-norm layer.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  static BatchNormStats init(std::size_t channels) {
    return {Tensor<T>({channels}, T(0)), Tensor<T>({channels}, T(1))};
  }
};

enum class NormMode { train, eval };

// x [B, C, S]. Train mode normalizes with batch statistics over (B, S) and
// updates `stats` (unbiased variance, PyTorch convention). Eval mode is the
// affine map defined by the running statistics.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, NormMode mode,
                  T momentum = T(0.1), T eps = T(1e-5)) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("batch_norm: expected [B, C, S], got " + shape_str(s));
  const std::size_t batch = s[0], ch = s[1], sp = s[2];
  if (gamma.shape() != Shape{ch} || beta.shape() != Shape{ch} || stats.running_mean.shape() != Shape{ch}) {
    throw DimensionError("batch_norm: channel count " + std::to_string(ch) + " vs parameters " +
                         shape_str(gamma.shape()));
  }
  const std::size_t count = batch * sp;
  const auto& in = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(s);
  auto at = [=](std::size_t b, std::size_t c, std::size_t i) { return (b * ch + c) * sp + i; };

  if (mode == NormMode::eval) {
    std::vector<T> mul(ch), add(ch);
    for (std::size_t c = 0; c < ch; ++c) {
      mul[c] = gv[c] / std::sqrt(stats.running_var[c] + eps);
      add[c] = bv[c] - stats.running_mean[c] * mul[c];
    }
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t i = 0; i < sp; ++i) out[at(b, c, i)] = in[at(b, c, i)] * mul[c] + add[c];
    std::vector<T> rs(ch);
    for (std::size_t c = 0; c < ch; ++c) rs[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
    const std::vector<T> rmean(stats.running_mean.data().begin(), stats.running_mean.data().end());
    return x.tape->record("batch_norm_eval", std::move(out), {x, gamma, beta},
                          [=](Tape<T>& tape, std::size_t self) {
                            const Tensor<T>& g = tape.grad(self);
                            const auto& xv = detail::input_value(tape, self, 0);
                            Tensor<T>* gx = detail::grad_slot(tape, self, 0);
                            Tensor<T>* gg = detail::grad_slot(tape, self, 1);
                            Tensor<T>* gb = detail::grad_slot(tape, self, 2);
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t c = 0; c < ch; ++c)
                                for (std::size_t i = 0; i < sp; ++i) {
                                  const T gi = g[at(b, c, i)];
                                  if (gx) (*gx)[at(b, c, i)] += gi * mul[c];
                                  if (gg) (*gg)[c] += gi * (xv[at(b, c, i)] - rmean[c]) * rs[c];
                                  if (gb) (*gb)[c] += gi;
                                }
                          });
  }

  if (count < 2) throw DimensionError("batch_norm: train mode needs at least 2 values per channel");
  std::vector<T> xhat(in.numel()), rstd(ch);
  for (std::size_t c = 0; c < ch; ++c) {
    T mean = T(0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < sp; ++i) mean += in[at(b, c, i)];
    mean /= static_cast<T>(count);
    T var = T(0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < sp; ++i) var += (in[at(b, c, i)] - mean) * (in[at(b, c, i)] - mean);
    var /= static_cast<T>(count);
    rstd[c] = T(1) / std::sqrt(var + eps);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < sp; ++i) {
        const T h = (in[at(b, c, i)] - mean) * rstd[c];
        xhat[at(b, c, i)] = h;
        out[at(b, c, i)] = h * gv[c] + bv[c];
      }
    const T unbiased = var * static_cast<T>(count) / static_cast<T>(count - 1);
    stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * mean;
    stats.running_var[c] = (T(1) - momentum) * stats.running_var[c] + momentum * unbiased;
  }
  return x.tape->record(
      "batch_norm_train", std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad(self);
        const auto& gv = detail::input_value(tape, self, 1);
        Tensor<T>* gx = detail::grad_slot(tape, self, 0);
        Tensor<T>* gg = detail::grad_slot(tape, self, 1);
        Tensor<T>* gb = detail::grad_slot(tape, self, 2);
        for (std::size_t c = 0; c < ch; ++c) {
          T sum_g = T(0), sum_gh = T(0);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < sp; ++i) {
              sum_g += g[at(b, c, i)];
              sum_gh += g[at(b, c, i)] * xhat[at(b, c, i)];
            }
          if (gg) (*gg)[c] += sum_gh;
          if (gb) (*gb)[c] += sum_g;
          if (gx) {
            const T n = static_cast<T>(count);
            const T k = gv[c] * rstd[c] / n;
            for (std::size_t b = 0; b < batch; ++b)
              for (std::size_t i = 0; i < sp; ++i) {
                const std::size_t o = at(b, c, i);
                (*gx)[o] += k * (n * g[o] - sum_g - xhat[o] * sum_gh);
              }
          }
        }
      });
}

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

// Exact erf-based GELU.
template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = gelu_scalar(v);
  return x.tape->record("gelu", std::move(out), {x}, [](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    const auto& xv = detail::input_value(tape, self, 0);
    if (Tensor<T>* gx = detail::grad_slot(tape, self, 0)) {
      const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        const T v = xv[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        (*gx)[i] += g[i] * (cdf + v * pdf);
      }
    }
  });
}

// Divides each row of x [R, m] by its sum. Rows must have positive sums.
template <typename T>
Var<T> normalize_rows(Var<T> x) {
  const Shape& s = x.shape();
  const std::size_t m = s.back(), rows = x.value().numel() / m;
  Tensor<T> out = x.value();
  std::vector<T> sums(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T sum = T(0);
    for (std::size_t j = 0; j < m; ++j) sum += out[r * m + j];
    if (!(sum > T(0))) throw NumericError("normalize_rows: non-positive row sum");
    sums[r] = sum;
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] /= sum;
  }
  return x.tape->record("normalize_rows", std::move(out), {x},
                        [=, sums = std::move(sums)](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad(self);
                          const Tensor<T>& y = tape.value(self);
                          if (Tensor<T>* gx = detail::grad_slot(tape, self, 0)) {
                            for (std::size_t r = 0; r < rows; ++r) {
                              T dot = T(0);
                              for (std::size_t j = 0; j < m; ++j) dot += g[r * m + j] * y[r * m + j];
                              for (std::size_t j = 0; j < m; ++j) (*gx)[r * m + j] += (g[r * m + j] - dot) / sums[r];
                            }
                          }
                        });
}

// Depthwise convolution whose kernel spans the whole spatial axis (no padding):
// x [B, C, S], w [C, M, S] -> [B, C*M], out[b, c*M + j] = sum_s w[c, j, s] * x[b, c, s].
template <typename T>
Var<T> depthwise_full(Var<T> x, Var<T> w) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 3 || sw.size() != 3 || sw[0] != sx[1] || sw[2] != sx[2]) {
    throw DimensionError("depthwise_full: x " + shape_str(sx) + " with kernel " + shape_str(sw));
  }
  const std::size_t batch = sx[0], ch = sx[1], sp = sx[2], mult = sw[1];
  Tensor<T> out({batch, ch * mult});
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t j = 0; j < mult; ++j) {
        T acc = T(0);
        for (std::size_t i = 0; i < sp; ++i) acc += wv[(c * mult + j) * sp + i] * xv[(b * ch + c) * sp + i];
        out[b * ch * mult + c * mult + j] = acc;
      }
  return x.tape->record("depthwise_full", std::move(out), {x, w}, [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    const auto& xv = detail::input_value(tape, self, 0);
    const auto& wv = detail::input_value(tape, self, 1);
    Tensor<T>* gx = detail::grad_slot(tape, self, 0);
    Tensor<T>* gw = detail::grad_slot(tape, self, 1);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t j = 0; j < mult; ++j) {
          const T go = g[b * ch * mult + c * mult + j];
          for (std::size_t i = 0; i < sp; ++i) {
            if (gx) (*gx)[(b * ch + c) * sp + i] += go * wv[(c * mult + j) * sp + i];
            if (gw) (*gw)[(c * mult + j) * sp + i] += go * xv[(b * ch + c) * sp + i];
          }
        }
  });
}

// Mean cross-entropy of logits [B, C] against integer labels, with optional
// label smoothing.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<std::uint32_t>& labels, T smoothing = T(0)) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || labels.size() != s[0]) {
    throw DimensionError("cross_entropy: logits " + shape_str(s) + " with " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t batch = s[0], classes = s[1];
  const auto& lv = logits.value();
  Tensor<T> probs({batch, classes});
  T loss = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) throw DimensionError("cross_entropy: label out of range");
    const T* row = lv.ptr() + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T sum = T(0);
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = std::exp(row[c] - lse);
      const T target = (c == labels[b] ? T(1) - smoothing : T(0)) + smoothing / static_cast<T>(classes);
      loss -= target * (row[c] - lse);
    }
  }
  loss /= static_cast<T>(batch);
  return logits.tape->record("cross_entropy", Tensor<T>({1}, loss), {logits},
                             [=, probs = std::move(probs)](Tape<T>& tape, std::size_t self) {
                               const T g = tape.grad(self)[0] / static_cast<T>(batch);
                               if (Tensor<T>* gl = detail::grad_slot(tape, self, 0)) {
                                 for (std::size_t b = 0; b < batch; ++b)
                                   for (std::size_t c = 0; c < classes; ++c) {
                                     const T target = (c == labels[b] ? T(1) - smoothing : T(0)) +
                                                      smoothing / static_cast<T>(classes);
                                     (*gl)[b * classes + c] += g * (probs[b * classes + c] - target);
                                   }
                               }
                             });
}

}  // namespace clca::ops
