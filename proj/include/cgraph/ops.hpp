#pragma once

// Differentiable primitives over Tensor/Tape. Every operation follows the
// same pattern: compute the forward value, and if any input sits on a tape,
// record a closure that accumulates input gradients from the output
// gradient. Top-k and argmax style selections are not differentiable and
// live elsewhere, operating on plain values.

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cgraph/tensor.hpp"

namespace cgraph {

namespace detail {

// Row-major strides of `in` right-aligned against `out`, with stride 0 on
// broadcast dimensions.
inline std::vector<int> bcast_strides(const Shape& in, const Shape& out) {
  const int ro = static_cast<int>(out.size());
  const int ri = static_cast<int>(in.size());
  std::vector<int> strides(static_cast<std::size_t>(ro), 0);
  int run = 1;
  for (int d = ri - 1; d >= 0; --d) {
    const int od = d + (ro - ri);
    if (in[static_cast<std::size_t>(d)] != 1) strides[static_cast<std::size_t>(od)] = run;
    run *= in[static_cast<std::size_t>(d)];
  }
  return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const int r = std::max(a.size(), b.size());
  Shape out(static_cast<std::size_t>(r), 1);
  for (int d = 0; d < r; ++d) {
    const int ea = d < r - static_cast<int>(a.size()) ? 1 : a[static_cast<std::size_t>(d - (r - static_cast<int>(a.size())))];
    const int eb = d < r - static_cast<int>(b.size()) ? 1 : b[static_cast<std::size_t>(d - (r - static_cast<int>(b.size())))];
    if (ea != eb && ea != 1 && eb != 1)
      throw DimError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[static_cast<std::size_t>(d)] = std::max(ea, eb);
  }
  return out;
}

// Walk every flat index of `out`, tracking the aligned flat offsets into two
// broadcast inputs without divisions.
template <class F>
void for_each_bcast(const Shape& out, const std::vector<int>& sa,
                    const std::vector<int>& sb, F&& f) {
  const int n = numel(out);
  const int r = static_cast<int>(out.size());
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int> digit(static_cast<std::size_t>(r), 0);
  int ia = 0, ib = 0;
  for (int o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      ++digit[static_cast<std::size_t>(d)];
      ia += sa[static_cast<std::size_t>(d)];
      ib += sb[static_cast<std::size_t>(d)];
      if (digit[static_cast<std::size_t>(d)] < out[static_cast<std::size_t>(d)]) break;
      ia -= sa[static_cast<std::size_t>(d)] * out[static_cast<std::size_t>(d)];
      ib -= sb[static_cast<std::size_t>(d)] * out[static_cast<std::size_t>(d)];
      digit[static_cast<std::size_t>(d)] = 0;
    }
  }
}

// C[m*n] += A[m*k] * B[k*n]
template <class T>
void gemm_nn(int m, int k, int n, const T* __restrict__ A, const T* __restrict__ B,
             T* __restrict__ C) {
  for (int i = 0; i < m; ++i) {
    const T* ai = A + static_cast<std::ptrdiff_t>(i) * k;
    T* ci = C + static_cast<std::ptrdiff_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T a = ai[p];
      const T* bp = B + static_cast<std::ptrdiff_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += a * bp[j];
    }
  }
}

// C[m*n] += A[m*k] * B[n*k]^T. B is transposed into scratch first so the
// inner loops stream without reduction dependencies (strict FP forbids
// vectorizing dot-product reductions).
template <class T>
void gemm_nt(int m, int k, int n, const T* __restrict__ A, const T* __restrict__ B,
             T* __restrict__ C) {
  std::vector<T> bt(static_cast<std::size_t>(k) * n);
  for (int j = 0; j < n; ++j)
    for (int p = 0; p < k; ++p) bt[static_cast<std::size_t>(p) * n + j] = B[static_cast<std::size_t>(j) * k + p];
  gemm_nn(m, k, n, A, bt.data(), C);
}

// C[m*n] += A[k*m]^T * B[k*n]
template <class T>
void gemm_tn(int m, int k, int n, const T* __restrict__ A, const T* __restrict__ B,
             T* __restrict__ C) {
  for (int p = 0; p < k; ++p) {
    const T* ap = A + static_cast<std::ptrdiff_t>(p) * m;
    const T* bp = B + static_cast<std::ptrdiff_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T a = ap[i];
      T* ci = C + static_cast<std::ptrdiff_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += a * bp[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (with right-aligned broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { Add, Sub, Mul };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = bcast_strides(a.shape(), out_shape);
  const auto sb = bcast_strides(b.shape(), out_shape);
  const int n = numel(out_shape);
  std::vector<T> out(static_cast<std::size_t>(n));
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  if (a.shape() == b.shape()) {
    switch (op) {
      case BinOp::Add: for (int i = 0; i < n; ++i) out[i] = pa[i] + pb[i]; break;
      case BinOp::Sub: for (int i = 0; i < n; ++i) out[i] = pa[i] - pb[i]; break;
      case BinOp::Mul: for (int i = 0; i < n; ++i) out[i] = pa[i] * pb[i]; break;
    }
  } else {
    for_each_bcast(out_shape, sa, sb, [&](int o, int ia, int ib) {
      switch (op) {
        case BinOp::Add: out[o] = pa[ia] + pb[ib]; break;
        case BinOp::Sub: out[o] = pa[ia] - pb[ib]; break;
        case BinOp::Mul: out[o] = pa[ia] * pb[ib]; break;
      }
    });
  }
  Tape<T>* tp = common_tape<T>({&a, &b});
  if (!tp) return Tensor<T>::from(out_shape, std::move(out));
  return tp->record(out_shape, std::move(out),
                    [a, b, out_shape, sa, sb, op](Tape<T>& t, const T* g) {
    auto ga = t.accum(a.node_id(), a.size());
    auto gb = t.accum(b.node_id(), b.size());
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    for_each_bcast(out_shape, sa, sb, [&](int o, int ia, int ib) {
      switch (op) {
        case BinOp::Add:
          if (!ga.empty()) ga[ia] += g[o];
          if (!gb.empty()) gb[ib] += g[o];
          break;
        case BinOp::Sub:
          if (!ga.empty()) ga[ia] += g[o];
          if (!gb.empty()) gb[ib] -= g[o];
          break;
        case BinOp::Mul:
          if (!ga.empty()) ga[ia] += g[o] * pb[ib];
          if (!gb.empty()) gb[ib] += g[o] * pa[ia];
          break;
      }
    });
  });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::Add);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::Sub);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::Mul);
}

// Multiply by a constant 0/1 mask; the mask never receives gradient.
template <class T>
Tensor<T> masked_zero(const Tensor<T>& x, const Tensor<T>& mask01) {
  return mul(x, mask01.detached());
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  const int n = x.size();
  std::vector<T> out(static_cast<std::size_t>(n));
  const T* p = x.ptr();
  for (int i = 0; i < n; ++i) out[i] = p[i] * s;
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from(x.shape(), std::move(out));
  return tp->record(x.shape(), std::move(out), [x, s, n](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), n);
    for (int i = 0; i < n; ++i) gx[i] += g[i] * s;
  });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  const int n = x.size();
  std::vector<T> out(static_cast<std::size_t>(n));
  const T* p = x.ptr();
  for (int i = 0; i < n; ++i) out[i] = p[i] + s;
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from(x.shape(), std::move(out));
  return tp->record(x.shape(), std::move(out), [x, n](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), n);
    for (int i = 0; i < n; ++i) gx[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimError("matmul shape mismatch: " + shape_str(a.shape()) + " * " +
                   shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
  detail::gemm_nn(m, k, n, a.ptr(), b.ptr(), out.data());
  Tape<T>* tp = common_tape<T>({&a, &b});
  if (!tp) return Tensor<T>::from({m, n}, std::move(out));
  return tp->record({m, n}, std::move(out), [a, b, m, k, n](Tape<T>& t, const T* g) {
    auto ga = t.accum(a.node_id(), a.size());
    auto gb = t.accum(b.node_id(), b.size());
    if (!ga.empty()) detail::gemm_nt(m, n, k, g, b.ptr(), ga.data());
    if (!gb.empty()) detail::gemm_tn(k, m, n, a.ptr(), g, gb.data());
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimError("transpose expects rank-2, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  const T* p = x.ptr();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = p[static_cast<std::size_t>(i) * n + j];
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from({n, m}, std::move(out));
  return tp->record({n, m}, std::move(out), [x, m, n](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), x.size());
    if (gx.empty()) return;
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i) gx[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ArgError("concat: empty input list");
  const int r = xs[0].rank();
  if (axis < 0 || axis >= r) throw ArgError("concat: axis " + std::to_string(axis) + " out of range");
  Shape out_shape = xs[0].shape();
  int total_axis = 0;
  for (const auto& x : xs) {
    if (x.rank() != r) throw DimError("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && x.dim(d) != out_shape[static_cast<std::size_t>(d)])
        throw DimError("concat: shape mismatch " + shape_str(x.shape()));
    total_axis += x.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total_axis;

  int outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  const int out_row = total_axis * inner;
  int off = 0;
  for (const auto& x : xs) {
    const int rows = x.dim(axis) * inner;
    const T* p = x.ptr();
    for (int o = 0; o < outer; ++o)
      std::copy(p + static_cast<std::ptrdiff_t>(o) * rows, p + static_cast<std::ptrdiff_t>(o + 1) * rows,
                out.begin() + static_cast<std::ptrdiff_t>(o) * out_row + off);
    off += rows;
  }

  Tape<T>* tp = nullptr;
  for (const auto& x : xs) {
    if (!x.tape()) continue;
    if (tp && tp != x.tape()) throw ContractError("concat: operands on different tapes");
    tp = x.tape();
  }
  if (!tp) return Tensor<T>::from(out_shape, std::move(out));
  return tp->record(out_shape, std::move(out),
                    [xs, outer, inner, out_row, axis](Tape<T>& t, const T* g) {
    int off = 0;
    for (const auto& x : xs) {
      const int rows = x.dim(axis) * inner;
      auto gx = t.accum(x.node_id(), x.size());
      if (!gx.empty()) {
        for (int o = 0; o < outer; ++o) {
          const T* src = g + static_cast<std::ptrdiff_t>(o) * out_row + off;
          T* dst = gx.data() + static_cast<std::ptrdiff_t>(o) * rows;
          for (int i = 0; i < rows; ++i) dst[i] += src[i];
        }
      }
      off += rows;
    }
  });
}

// Contiguous sub-range of the flat storage, reshaped. Used to carve
// parameter tensors out of one flattened vector during gradient checking.
template <class T>
Tensor<T> slice_flat(const Tensor<T>& x, int offset, Shape shape) {
  const int n = numel(shape);
  if (offset < 0 || offset + n > x.size())
    throw DimError("slice_flat: range [" + std::to_string(offset) + ", " +
                   std::to_string(offset + n) + ") exceeds size " + std::to_string(x.size()));
  std::vector<T> out(x.ptr() + offset, x.ptr() + offset + n);
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from(std::move(shape), std::move(out));
  return tp->record(std::move(shape), std::move(out), [x, offset, n](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), x.size());
    if (gx.empty()) return;
    for (int i = 0; i < n; ++i) gx[static_cast<std::size_t>(offset + i)] += g[i];
  });
}

// Arbitrary flat-index gather (a pure permutation/selection over the
// storage): out[i] = x[idx[i]], reshaped to `shape`.
template <class T>
Tensor<T> gather_flat(const Tensor<T>& x, const std::vector<int>& idx, Shape shape) {
  const int n = numel(shape);
  if (static_cast<int>(idx.size()) != n)
    throw DimError("gather_flat: index count does not match target shape");
  std::vector<T> out(static_cast<std::size_t>(n));
  const T* p = x.ptr();
  for (int i = 0; i < n; ++i) {
    const int j = idx[static_cast<std::size_t>(i)];
    if (j < 0 || j >= x.size()) throw ArgError("gather_flat: index out of range");
    out[static_cast<std::size_t>(i)] = p[j];
  }
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from(std::move(shape), std::move(out));
  return tp->record(std::move(shape), std::move(out), [x, idx, n](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), x.size());
    if (gx.empty()) return;
    for (int i = 0; i < n; ++i) gx[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] += g[i];
  });
}

// out[:, k] = x[:, idx[k]] for a rank-2 tensor.
template <class T>
Tensor<T> gather_columns(const Tensor<T>& x, const std::vector<int>& idx) {
  if (x.rank() != 2) throw DimError("gather_columns expects rank-2, got " + shape_str(x.shape()));
  const int c = x.dim(0), m = x.dim(1), k = static_cast<int>(idx.size());
  for (int j : idx)
    if (j < 0 || j >= m) throw ArgError("gather_columns: index " + std::to_string(j) + " out of range");
  std::vector<T> out(static_cast<std::size_t>(c) * k);
  const T* p = x.ptr();
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * k + j] = p[static_cast<std::size_t>(i) * m + idx[static_cast<std::size_t>(j)]];
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from({c, k}, std::move(out));
  return tp->record({c, k}, std::move(out), [x, idx, c, m, k](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), x.size());
    if (gx.empty()) return;
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < k; ++j)
        gx[static_cast<std::size_t>(i) * m + idx[static_cast<std::size_t>(j)]] += g[static_cast<std::size_t>(i) * k + j];
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

namespace detail {

template <class T, class FwdF, class BwdF>
Tensor<T> unary(const Tensor<T>& x, FwdF fwd, BwdF bwd) {
  const int n = x.size();
  std::vector<T> out(static_cast<std::size_t>(n));
  const T* p = x.ptr();
  for (int i = 0; i < n; ++i) out[i] = fwd(p[i]);
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from(x.shape(), std::move(out));
  auto saved = Tensor<T>::from(x.shape(), out);  // forward values, often reused by bwd
  return tp->record(x.shape(), std::move(out), [x, saved, bwd, n](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), n);
    if (gx.empty()) return;
    const T* px = x.ptr();
    const T* py = saved.ptr();
    for (int i = 0; i < n; ++i) gx[i] += g[i] * bwd(px[i], py[i]);
  });
}

}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); },
                       [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); },
                       [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                       [](T, T y) { return y * (T(1) - y); });
}

// log(max(x, lo)); the clamp region contributes zero gradient.
template <class T>
Tensor<T> log_clamped(const Tensor<T>& x, T lo = T(1e-7)) {
  return detail::unary(x, [lo](T v) { return std::log(std::max(v, lo)); },
                       [lo](T v, T) { return v > lo ? T(1) / v : T(0); });
}

// 1 / sqrt(x + eps), defined for x >= 0.
template <class T>
Tensor<T> rsqrt_eps(const Tensor<T>& x, T eps = T(1e-8)) {
  return detail::unary(x, [eps](T v) { return T(1) / std::sqrt(v + eps); },
                       [](T, T y) { return T(-0.5) * y * y * y; });
}

// ---------------------------------------------------------------------------
// Row softmax / log-softmax
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimError("softmax_rows expects rank-2, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  const T* p = x.ptr();
  for (int i = 0; i < m; ++i) {
    const T* xi = p + static_cast<std::ptrdiff_t>(i) * n;
    T* yi = out.data() + static_cast<std::ptrdiff_t>(i) * n;
    T mx = xi[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    T sum = T(0);
    for (int j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < n; ++j) yi[j] *= inv;
  }
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from({m, n}, std::move(out));
  auto y = Tensor<T>::from({m, n}, out);
  return tp->record({m, n}, std::move(out), [x, y, m, n](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), x.size());
    if (gx.empty()) return;
    const T* py = y.ptr();
    for (int i = 0; i < m; ++i) {
      const T* yi = py + static_cast<std::ptrdiff_t>(i) * n;
      const T* gi = g + static_cast<std::ptrdiff_t>(i) * n;
      T dot = T(0);
      for (int j = 0; j < n; ++j) dot += gi[j] * yi[j];
      T* gxi = gx.data() + static_cast<std::ptrdiff_t>(i) * n;
      for (int j = 0; j < n; ++j) gxi[j] += yi[j] * (gi[j] - dot);
    }
  });
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimError("log_softmax_rows expects rank-2, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  const T* p = x.ptr();
  for (int i = 0; i < m; ++i) {
    const T* xi = p + static_cast<std::ptrdiff_t>(i) * n;
    T* yi = out.data() + static_cast<std::ptrdiff_t>(i) * n;
    T mx = xi[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    T sum = T(0);
    for (int j = 0; j < n; ++j) sum += std::exp(xi[j] - mx);
    const T lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) yi[j] = xi[j] - lse;
  }
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from({m, n}, std::move(out));
  auto y = Tensor<T>::from({m, n}, out);
  return tp->record({m, n}, std::move(out), [x, y, m, n](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), x.size());
    if (gx.empty()) return;
    const T* py = y.ptr();
    for (int i = 0; i < m; ++i) {
      const T* yi = py + static_cast<std::ptrdiff_t>(i) * n;
      const T* gi = g + static_cast<std::ptrdiff_t>(i) * n;
      T gsum = T(0);
      for (int j = 0; j < n; ++j) gsum += gi[j];
      T* gxi = gx.data() + static_cast<std::ptrdiff_t>(i) * n;
      for (int j = 0; j < n; ++j) gxi[j] += gi[j] - std::exp(yi[j]) * gsum;
    }
  });
}

// ---------------------------------------------------------------------------
// Layer normalization over the last dimension
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  if (x.rank() < 1) throw DimError("layer_norm on scalar");
  const int c = x.dim(x.rank() - 1);
  if (gain.size() != c || bias.size() != c)
    throw DimError("layer_norm: affine size mismatch with last extent " + std::to_string(c));
  const int rows = x.size() / c;
  std::vector<T> out(static_cast<std::size_t>(x.size()));
  std::vector<T> xhat(static_cast<std::size_t>(x.size()));
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  const T* p = x.ptr();
  const T* pg = gain.ptr();
  const T* pb = bias.ptr();
  for (int r = 0; r < rows; ++r) {
    const T* xr = p + static_cast<std::ptrdiff_t>(r) * c;
    T mean = T(0);
    for (int j = 0; j < c; ++j) mean += xr[j];
    mean /= T(c);
    T var = T(0);
    for (int j = 0; j < c; ++j) {
      const T d = xr[j] - mean;
      var += d * d;
    }
    var /= T(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    T* hr = xhat.data() + static_cast<std::ptrdiff_t>(r) * c;
    T* yr = out.data() + static_cast<std::ptrdiff_t>(r) * c;
    for (int j = 0; j < c; ++j) {
      hr[j] = (xr[j] - mean) * is;
      yr[j] = hr[j] * pg[j] + pb[j];
    }
  }
  Tape<T>* tp = common_tape<T>({&x, &gain, &bias});
  if (!tp) return Tensor<T>::from(x.shape(), std::move(out));
  auto hat = Tensor<T>::from(x.shape(), std::move(xhat));
  return tp->record(x.shape(), std::move(out),
                    [x, gain, bias, hat, inv_std, rows, c](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), x.size());
    auto gg = t.accum(gain.node_id(), gain.size());
    auto gb = t.accum(bias.node_id(), bias.size());
    const T* ph = hat.ptr();
    const T* pg = gain.ptr();
    for (int r = 0; r < rows; ++r) {
      const T* hr = ph + static_cast<std::ptrdiff_t>(r) * c;
      const T* gr = g + static_cast<std::ptrdiff_t>(r) * c;
      if (!gg.empty())
        for (int j = 0; j < c; ++j) gg[j] += gr[j] * hr[j];
      if (!gb.empty())
        for (int j = 0; j < c; ++j) gb[j] += gr[j];
      if (!gx.empty()) {
        T m1 = T(0), m2 = T(0);  // mean(dxhat), mean(dxhat * xhat)
        for (int j = 0; j < c; ++j) {
          const T dh = gr[j] * pg[j];
          m1 += dh;
          m2 += dh * hr[j];
        }
        m1 /= T(c);
        m2 /= T(c);
        const T is = inv_std[static_cast<std::size_t>(r)];
        T* gxr = gx.data() + static_cast<std::ptrdiff_t>(r) * c;
        for (int j = 0; j < c; ++j) {
          const T dh = gr[j] * pg[j];
          gxr[j] += is * (dh - m1 - hr[j] * m2);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// 3x3 same-padded convolution (cross-correlation)
// ---------------------------------------------------------------------------

namespace detail {

// Patch matrix for a 3x3 same-padded window: row (ci*9 + kh*3 + kw) holds
// the input plane ci shifted by (kh-1, kw-1), zeros outside the frame.
template <class T>
std::vector<T> im2col3x3(const T* x, int ci, int h, int w) {
  std::vector<T> col(static_cast<std::size_t>(ci) * 9 * h * w, T(0));
  for (int ic = 0; ic < ci; ++ic) {
    const T* xin = x + static_cast<std::ptrdiff_t>(ic) * h * w;
    for (int kh = 0; kh < 3; ++kh) {
      for (int kw = 0; kw < 3; ++kw) {
        T* crow = col.data() + (static_cast<std::ptrdiff_t>(ic) * 9 + kh * 3 + kw) * h * w;
        const int dy = kh - 1, dx = kw - 1;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = y0; y < y1; ++y)
          std::copy(xin + static_cast<std::ptrdiff_t>(y + dy) * w + x0 + dx,
                    xin + static_cast<std::ptrdiff_t>(y + dy) * w + x1 + dx,
                    crow + static_cast<std::ptrdiff_t>(y) * w + x0);
      }
    }
  }
  return col;
}

// Scatter a patch-matrix gradient back onto the input plane.
template <class T>
void col2im3x3(const T* col, int ci, int h, int w, T* gx) {
  for (int ic = 0; ic < ci; ++ic) {
    T* gxin = gx + static_cast<std::ptrdiff_t>(ic) * h * w;
    for (int kh = 0; kh < 3; ++kh) {
      for (int kw = 0; kw < 3; ++kw) {
        const T* crow = col + (static_cast<std::ptrdiff_t>(ic) * 9 + kh * 3 + kw) * h * w;
        const int dy = kh - 1, dx = kw - 1;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = y0; y < y1; ++y) {
          T* __restrict__ grow = gxin + static_cast<std::ptrdiff_t>(y + dy) * w + dx;
          const T* __restrict__ srow = crow + static_cast<std::ptrdiff_t>(y) * w;
          for (int xx = x0; xx < x1; ++xx) grow[xx] += srow[xx];
        }
      }
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 3) throw DimError("conv3x3: input must be CxHxW, got " + shape_str(x.shape()));
  if (w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3)
    throw DimError("conv3x3: weight must be Cout x Cin x 3 x 3, got " + shape_str(w.shape()));
  if (w.dim(1) != x.dim(0))
    throw DimError("conv3x3: channel mismatch, input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2), co = w.dim(0);
  if (b.size() != co) throw DimError("conv3x3: bias size mismatch");
  const int hw = h * wd, krows = ci * 9;

  auto col = detail::im2col3x3(x.ptr(), ci, h, wd);
  std::vector<T> out(static_cast<std::size_t>(co) * hw);
  const T* pb = b.ptr();
  for (int oc = 0; oc < co; ++oc)
    std::fill(out.begin() + static_cast<std::ptrdiff_t>(oc) * hw,
              out.begin() + static_cast<std::ptrdiff_t>(oc + 1) * hw, pb[oc]);
  detail::gemm_nn(co, krows, hw, w.ptr(), col.data(), out.data());

  Tape<T>* tp = common_tape<T>({&x, &w, &b});
  if (!tp) return Tensor<T>::from({co, h, wd}, std::move(out));
  auto col_keep = std::make_shared<std::vector<T>>(std::move(col));
  return tp->record({co, h, wd}, std::move(out),
                    [x, w, b, col_keep, ci, h, wd, co, hw, krows](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), x.size());
    auto gw = t.accum(w.node_id(), w.size());
    auto gb = t.accum(b.node_id(), b.size());
    if (!gb.empty()) {
      for (int oc = 0; oc < co; ++oc) {
        T acc = T(0);
        const T* gp = g + static_cast<std::ptrdiff_t>(oc) * hw;
        for (int i = 0; i < hw; ++i) acc += gp[i];
        gb[oc] += acc;
      }
    }
    if (!gw.empty()) detail::gemm_nt(co, hw, krows, g, col_keep->data(), gw.data());
    if (!gx.empty()) {
      std::vector<T> gcol(static_cast<std::size_t>(krows) * hw, T(0));
      detail::gemm_tn(krows, co, hw, w.ptr(), g, gcol.data());
      detail::col2im3x3(gcol.data(), ci, h, wd, gx.data());
    }
  });
}

// ---------------------------------------------------------------------------
// Adaptive average pooling along the last dimension of a CxL tensor
// ---------------------------------------------------------------------------

// Output bin b averages input indices [floor(b*L/n), ceil((b+1)*L/n)).
template <class T>
Tensor<T> adaptive_avg_pool_1d(const Tensor<T>& x, int n) {
  if (x.rank() != 2) throw DimError("adaptive_avg_pool_1d expects CxL, got " + shape_str(x.shape()));
  const int c = x.dim(0), l = x.dim(1);
  if (n < 1 || n > l)
    throw ArgError("adaptive_avg_pool_1d: n=" + std::to_string(n) + " outside [1, " + std::to_string(l) + "]");
  std::vector<int> lo(static_cast<std::size_t>(n)), hi(static_cast<std::size_t>(n));
  for (int b = 0; b < n; ++b) {
    lo[static_cast<std::size_t>(b)] = (b * l) / n;
    hi[static_cast<std::size_t>(b)] = ((b + 1) * l + n - 1) / n;
  }
  std::vector<T> out(static_cast<std::size_t>(c) * n);
  const T* p = x.ptr();
  for (int i = 0; i < c; ++i) {
    const T* row = p + static_cast<std::ptrdiff_t>(i) * l;
    for (int b = 0; b < n; ++b) {
      T acc = T(0);
      for (int j = lo[static_cast<std::size_t>(b)]; j < hi[static_cast<std::size_t>(b)]; ++j) acc += row[j];
      out[static_cast<std::size_t>(i) * n + b] = acc / T(hi[static_cast<std::size_t>(b)] - lo[static_cast<std::size_t>(b)]);
    }
  }
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from({c, n}, std::move(out));
  return tp->record({c, n}, std::move(out), [x, lo, hi, c, l, n](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), x.size());
    if (gx.empty()) return;
    for (int i = 0; i < c; ++i) {
      T* grow = gx.data() + static_cast<std::ptrdiff_t>(i) * l;
      for (int b = 0; b < n; ++b) {
        const T share = g[static_cast<std::size_t>(i) * n + b] / T(hi[static_cast<std::size_t>(b)] - lo[static_cast<std::size_t>(b)]);
        for (int j = lo[static_cast<std::size_t>(b)]; j < hi[static_cast<std::size_t>(b)]; ++j) grow[j] += share;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  const int n = x.size();
  T acc = T(0);
  const T* p = x.ptr();
  for (int i = 0; i < n; ++i) acc += p[i];
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::scalar(acc);
  return tp->record({}, {acc}, [x, n](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), n);
    for (int i = 0; i < n; ++i) gx[i] += g[0];
  });
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
  return scale(reduce_sum(x), T(1) / T(x.size()));
}

template <class T>
Tensor<T> l2_norm(const Tensor<T>& x) {
  const int n = x.size();
  T acc = T(0);
  const T* p = x.ptr();
  for (int i = 0; i < n; ++i) acc += p[i] * p[i];
  const T y = std::sqrt(acc);
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::scalar(y);
  return tp->record({}, {y}, [x, y, n](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), n);
    const T* p = x.ptr();
    const T inv = T(1) / std::max(y, T(1e-12));
    for (int i = 0; i < n; ++i) gx[i] += g[0] * p[i] * inv;
  });
}

// Elementwise maximum over a set of same-shaped tensors; ties route the
// gradient to the earliest input in list order.
template <class T>
Tensor<T> max_elemwise(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ArgError("max_elemwise: empty input list");
  const int n = xs[0].size();
  for (const auto& x : xs)
    if (x.shape() != xs[0].shape()) throw DimError("max_elemwise: shape mismatch");
  std::vector<T> out(xs[0].ptr(), xs[0].ptr() + n);
  std::vector<int> argmax(static_cast<std::size_t>(n), 0);
  for (std::size_t s = 1; s < xs.size(); ++s) {
    const T* p = xs[s].ptr();
    for (int i = 0; i < n; ++i) {
      if (p[i] > out[static_cast<std::size_t>(i)]) {
        out[static_cast<std::size_t>(i)] = p[i];
        argmax[static_cast<std::size_t>(i)] = static_cast<int>(s);
      }
    }
  }
  Tape<T>* tp = nullptr;
  for (const auto& x : xs) {
    if (!x.tape()) continue;
    if (tp && tp != x.tape()) throw ContractError("max_elemwise: operands on different tapes");
    tp = x.tape();
  }
  if (!tp) return Tensor<T>::from(xs[0].shape(), std::move(out));
  return tp->record(xs[0].shape(), std::move(out), [xs, argmax, n](Tape<T>& t, const T* g) {
    for (int i = 0; i < n; ++i) {
      const auto& src = xs[static_cast<std::size_t>(argmax[static_cast<std::size_t>(i)])];
      auto gs = t.accum(src.node_id(), n);
      if (!gs.empty()) gs[i] += g[i];
    }
  });
}

// Max-relative neighborhood aggregation: out[:, i] = x[:, i] - min over
// j in neighbors[i] of x[:, j], computed per channel. The neighbor choice is
// a constant for differentiation; ties resolve to the lowest index.
template <class T>
Tensor<T> neighbor_max_diff(const Tensor<T>& x, const std::vector<std::vector<int>>& neighbors) {
  if (x.rank() != 2) throw DimError("neighbor_max_diff expects CxM, got " + shape_str(x.shape()));
  const int c = x.dim(0), m = x.dim(1);
  if (static_cast<int>(neighbors.size()) != m)
    throw DimError("neighbor_max_diff: neighbor list count != node count");
  std::vector<T> out(static_cast<std::size_t>(c) * m, T(0));
  std::vector<int> jmin(static_cast<std::size_t>(c) * m, -1);
  const T* p = x.ptr();
  for (int i = 0; i < m; ++i) {
    const auto& nb = neighbors[static_cast<std::size_t>(i)];
    if (nb.empty()) continue;
    for (int ch = 0; ch < c; ++ch) {
      const T* row = p + static_cast<std::ptrdiff_t>(ch) * m;
      T best = row[nb[0]];
      int bj = nb[0];
      for (std::size_t s = 1; s < nb.size(); ++s) {
        if (row[nb[s]] < best) {
          best = row[nb[s]];
          bj = nb[s];
        }
      }
      out[static_cast<std::size_t>(ch) * m + i] = row[i] - best;
      jmin[static_cast<std::size_t>(ch) * m + i] = bj;
    }
  }
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from({c, m}, std::move(out));
  return tp->record({c, m}, std::move(out), [x, jmin, c, m](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), x.size());
    if (gx.empty()) return;
    for (int ch = 0; ch < c; ++ch) {
      T* grow = gx.data() + static_cast<std::ptrdiff_t>(ch) * m;
      const T* grad = g + static_cast<std::ptrdiff_t>(ch) * m;
      const int* jrow = jmin.data() + static_cast<std::ptrdiff_t>(ch) * m;
      for (int i = 0; i < m; ++i) {
        if (jrow[i] < 0) continue;
        grow[i] += grad[i];
        grow[jrow[i]] -= grad[i];
      }
    }
  });
}

// Columns scaled to unit L2 length with a smooth epsilon guard:
// y = x / sqrt(|x|^2 + eps^2) per column.
template <class T>
Tensor<T> l2_normalize_columns(const Tensor<T>& x, T eps = T(1e-8)) {
  if (x.rank() != 2) throw DimError("l2_normalize_columns expects CxM, got " + shape_str(x.shape()));
  const int c = x.dim(0), m = x.dim(1);
  std::vector<T> norm(static_cast<std::size_t>(m), eps * eps);
  const T* p = x.ptr();
  for (int i = 0; i < c; ++i) {
    const T* row = p + static_cast<std::ptrdiff_t>(i) * m;
    for (int j = 0; j < m; ++j) norm[static_cast<std::size_t>(j)] += row[j] * row[j];
  }
  for (int j = 0; j < m; ++j) norm[static_cast<std::size_t>(j)] = std::sqrt(norm[static_cast<std::size_t>(j)]);
  std::vector<T> out(static_cast<std::size_t>(c) * m);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < m; ++j)
      out[static_cast<std::size_t>(i) * m + j] = p[static_cast<std::size_t>(i) * m + j] / norm[static_cast<std::size_t>(j)];
  Tape<T>* tp = x.tape();
  if (!tp) return Tensor<T>::from({c, m}, std::move(out));
  auto y = Tensor<T>::from({c, m}, out);
  return tp->record({c, m}, std::move(out), [x, y, norm, c, m](Tape<T>& t, const T* g) {
    auto gx = t.accum(x.node_id(), x.size());
    if (gx.empty()) return;
    const T* py = y.ptr();
    for (int j = 0; j < m; ++j) {
      T dot = T(0);
      for (int i = 0; i < c; ++i) dot += g[static_cast<std::size_t>(i) * m + j] * py[static_cast<std::size_t>(i) * m + j];
      const T inv = T(1) / norm[static_cast<std::size_t>(j)];
      for (int i = 0; i < c; ++i) {
        const std::size_t k = static_cast<std::size_t>(i) * m + j;
        gx[k] += (g[k] - py[k] * dot) * inv;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Small factories
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> eye(int n) {
  std::vector<T> d(static_cast<std::size_t>(n) * n, T(0));
  for (int i = 0; i < n; ++i) d[static_cast<std::size_t>(i) * n + i] = T(1);
  return Tensor<T>::from({n, n}, std::move(d));
}

template <class T>
bool all_finite(const Tensor<T>& x) {
  for (T v : x.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace cgraph
