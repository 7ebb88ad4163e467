#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pinmt/rng.hpp"
#include "pinmt/tensor.hpp"

namespace pinmt {

namespace kernel {

// C[m,n] += A[m,k] * B[k,n]. Four rows of C share each pass over B.
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* __restrict A, const T* __restrict B,
             T* __restrict C) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* __restrict c0 = C + i * n;
    T* __restrict c1 = c0 + n;
    T* __restrict c2 = c1 + n;
    T* __restrict c3 = c2 + n;
    const T* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T a0 = a[p], a1 = a[k + p], a2 = a[2 * k + p], a3 = a[3 * k + p];
      const T* __restrict b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bj = b[j];
        c0[j] += a0 * bj;
        c1[j] += a1 * bj;
        c2[j] += a2 * bj;
        c3[j] += a3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    T* c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = A[i * k + p];
      const T* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
    }
  }
}

// D[k,n] += A[m,k]^T * G[m,n]. Four rows of G are folded into each row of D.
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* __restrict A, const T* __restrict G,
             T* __restrict D) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* __restrict g0 = G + i * n;
    const T* __restrict g1 = g0 + n;
    const T* __restrict g2 = g1 + n;
    const T* __restrict g3 = g2 + n;
    const T* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T a0 = a[p], a1 = a[k + p], a2 = a[2 * k + p], a3 = a[3 * k + p];
      T* __restrict d = D + p * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += a0 * g0[j] + a1 * g1[j] + a2 * g2[j] + a3 * g3[j];
    }
  }
  for (; i < m; ++i) {
    const T* g = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = A[i * k + p];
      T* d = D + p * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += a * g[j];
    }
  }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* __restrict A, T* __restrict out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = A[r * cols + c];
}

}  // namespace kernel

namespace detail {

inline Shape leading(const Shape& s, std::size_t drop) { return Shape(s.begin(), s.end() - drop); }

inline bool is_suffix(const Shape& whole, const Shape& tail) {
  if (tail.size() > whole.size()) return false;
  return std::equal(tail.begin(), tail.end(), whole.end() - tail.size());
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

/// Elementwise binary op where `b` either matches `a` or matches a trailing
/// suffix of it (broadcast over leading batch dimensions only).
template <class T, class F, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f, DA da, DB db) {
  const bool same = a.shape() == b.shape();
  if (!same && !is_suffix(a.shape(), b.shape()))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.size(), nb = b.size();
  std::vector<T> out(n);
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i % nb]);
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, op, [n, nb, da, db](Node<T>& o) {
    const T* x = o.parents[0]->value.data();
    const T* y = o.parents[1]->value.data();
    const T* g = o.grad.data();
    if (T* gx = grad_of(o, 0))
      for (std::size_t i = 0; i < n; ++i) gx[i] += da(x[i], y[i % nb], g[i]);
    if (T* gy = grad_of(o, 1))
      for (std::size_t i = 0; i < n; ++i) gy[i % nb] += db(x[i], y[i % nb], g[i]);
  });
}

template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& a, const char* op, F f, D d) {
  const std::size_t n = a.size();
  std::vector<T> out(n);
  const T* pa = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i]);
  return make_result<T>(a.shape(), std::move(out), {&a}, op, [n, d](Node<T>& o) {
    T* gx = grad_of(o, 0);
    const T* x = o.parents[0]->value.data();
    const T* y = o.value.data();
    const T* g = o.grad.data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += d(x[i], y[i], g[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "elementwise_mul", [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <class T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "divide", [](T x, T y) { return x / y; }, [](T, T y, T g) { return g / y; },
      [](T x, T y, T g) { return -g * x / (y * y); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return detail::unary(
      a, "scale", [factor](T x) { return x * factor; }, [factor](T, T, T g) { return g * factor; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary(
      a, "add_scalar", [c](T x) { return x + c; }, [](T, T, T g) { return g; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); }, [](T x, T, T g) { return x > T(0) ? g : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid",
      [](T x) {
        // Branches keep exp() from overflowing for large |x|.
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary(
      a, "sqrt", [](T x) { return std::sqrt(x); }, [](T, T y, T g) { return g / (T(2) * y); });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary(
      a, "log", [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
}

/// Multiplies every entry by a one-element tensor (a learnable scalar).
template <class T>
Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.size() != 1) throw ShapeError("scale_by: factor must hold one value, got " + shape_str(s.shape()));
  const std::size_t n = a.size();
  const T k = s.item();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * k;
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &s}, "scale_by", [n](Node<T>& o) {
    const T* x = o.parents[0]->value.data();
    const T k = o.parents[1]->value[0];
    const T* g = o.grad.data();
    if (T* gx = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * k;
    if (T* gs = detail::grad_of(o, 1)) {
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += g[i] * x[i];
      gs[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  const std::size_t n = a.size();
  return detail::make_result<T>(std::move(shape), std::vector<T>(a.values().begin(), a.values().end()), {&a},
                                "reshape", [n](Node<T>& o) {
                                  T* gx = detail::grad_of(o, 0);
                                  for (std::size_t i = 0; i < n; ++i) gx[i] += o.grad[i];
                                });
}

template <class T>
Tensor<T> transpose_last_two(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last_two needs rank >= 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(a.rank() - 2), c = a.last_dim(), batch = a.size() / (r * c);
  Shape s = a.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  std::vector<T> out(a.size());
  for (std::size_t b = 0; b < batch; ++b) kernel::transpose(r, c, a.data() + b * r * c, out.data() + b * r * c);
  return detail::make_result<T>(std::move(s), std::move(out), {&a}, "transpose_last_two",
                                [r, c, batch](Node<T>& o) {
                                  T* gx = detail::grad_of(o, 0);
                                  const T* g = o.grad.data();
                                  for (std::size_t b = 0; b < batch; ++b)
                                    for (std::size_t i = 0; i < c; ++i)
                                      for (std::size_t j = 0; j < r; ++j)
                                        gx[b * r * c + j * c + i] += g[b * r * c + i * r + j];
                                });
}

/// [A, B, C, D] -> [A, C, B, D]; splits or merges attention heads.
template <class T>
Tensor<T> swap_axes_1_2(const Tensor<T>& a) {
  if (a.rank() != 4) throw ShapeError("swap_axes_1_2 needs rank 4, got " + shape_str(a.shape()));
  const std::size_t A = a.dim(0), B = a.dim(1), C = a.dim(2), D = a.dim(3);
  std::vector<T> out(a.size());
  const T* x = a.data();
  for (std::size_t i = 0; i < A; ++i)
    for (std::size_t j = 0; j < B; ++j)
      for (std::size_t k = 0; k < C; ++k)
        std::copy_n(x + ((i * B + j) * C + k) * D, D, out.data() + ((i * C + k) * B + j) * D);
  return detail::make_result<T>({A, C, B, D}, std::move(out), {&a}, "swap_axes_1_2", [A, B, C, D](Node<T>& o) {
    T* gx = detail::grad_of(o, 0);
    const T* g = o.grad.data();
    for (std::size_t i = 0; i < A; ++i)
      for (std::size_t j = 0; j < B; ++j)
        for (std::size_t k = 0; k < C; ++k) {
          T* dst = gx + ((i * B + j) * C + k) * D;
          const T* src = g + ((i * C + k) * B + j) * D;
          for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
        }
  });
}

template <class T>
Tensor<T> concat_last_axis(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_last_axis: no inputs");
  const Shape lead = detail::leading(parts[0].shape(), 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (detail::leading(p.shape(), 1) != lead)
      throw ShapeError("concat_last_axis: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    widths.push_back(p.last_dim());
    total += p.last_dim();
  }
  const std::size_t rows = numel(lead);
  std::vector<T> out(rows * total);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      std::copy_n(parts[k].data() + r * widths[k], widths[k], out.data() + r * total + off);
      off += widths[k];
    }
  }
  Shape s = lead;
  s.push_back(total);
  return detail::make_result<T>(std::move(s), std::move(out), parts, "concat_last_axis",
                                [rows, total, widths](Node<T>& o) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                    if (T* gx = detail::grad_of(o, k))
                                      for (std::size_t r = 0; r < rows; ++r)
                                        for (std::size_t j = 0; j < widths[k]; ++j)
                                          gx[r * widths[k] + j] += o.grad[r * total + off + j];
                                    off += widths[k];
                                  }
                                });
}

template <class T>
Tensor<T> slice_last_axis(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  const std::size_t width = a.last_dim();
  if (begin >= end || end > width)
    throw ShapeError("slice_last_axis: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside " + shape_str(a.shape()));
  const std::size_t rows = a.size() / width, w = end - begin;
  std::vector<T> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(a.data() + r * width + begin, w, out.data() + r * w);
  Shape s = a.shape();
  s.back() = w;
  return detail::make_result<T>(std::move(s), std::move(out), {&a}, "slice_last_axis",
                                [rows, width, begin, w](Node<T>& o) {
                                  T* gx = detail::grad_of(o, 0);
                                  for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t j = 0; j < w; ++j) gx[r * width + begin + j] += o.grad[r * w + j];
                                });
}

/// Gathers rows of the flattened [N, d] view of `a`.
template <class T>
Tensor<T> select_rows(const Tensor<T>& a, const std::vector<std::size_t>& rows) {
  const std::size_t d = a.last_dim(), n = a.size() / d;
  if (rows.empty()) throw ShapeError("select_rows: empty selection");
  std::vector<T> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("select_rows: row " + std::to_string(rows[i]) + " outside " + shape_str(a.shape()));
    std::copy_n(a.data() + rows[i] * d, d, out.data() + i * d);
  }
  return detail::make_result<T>({rows.size(), d}, std::move(out), {&a}, "select_rows", [rows, d](Node<T>& o) {
    T* gx = detail::grad_of(o, 0);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gx[rows[i] * d + j] += o.grad[i * d + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  const std::size_t n = a.size();
  return detail::make_result<T>({1}, {acc}, {&a}, "sum", [n](Node<T>& o) {
    T* gx = detail::grad_of(o, 0);
    for (std::size_t i = 0; i < n; ++i) gx[i] += o.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Mean over one axis; the axis is removed from the result shape (a rank-1
/// input reduces to shape [1]).
template <class T>
Tensor<T> mean_over_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("mean_over_axis: axis " + std::to_string(axis) + " outside " + shape_str(a.shape()));
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::vector<T> out(outer * inner, T(0));
  const T inv = T(1) / static_cast<T>(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += a.data()[(o * len + l) * inner + i];
  for (auto& v : out) v *= inv;
  Shape rs;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) rs.push_back(s[i]);
  return detail::make_result<T>(std::move(rs), std::move(out), {&a}, "mean_over_axis",
                                [outer, inner, len, inv](Node<T>& o) {
                                  T* gx = detail::grad_of(o, 0);
                                  for (std::size_t b = 0; b < outer; ++b)
                                    for (std::size_t l = 0; l < len; ++l)
                                      for (std::size_t i = 0; i < inner; ++i)
                                        gx[(b * len + l) * inner + i] += o.grad[b * inner + i] * inv;
                                });
}

template <class T>
Tensor<T> sum_last_axis(const Tensor<T>& a) {
  const std::size_t d = a.last_dim(), rows = a.size() / d;
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r] += a.data()[r * d + j];
  Shape s = detail::leading(a.shape(), 1);
  if (s.empty()) s = {1};
  return detail::make_result<T>(std::move(s), std::move(out), {&a}, "sum_last_axis", [rows, d](Node<T>& o) {
    T* gx = detail::grad_of(o, 0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += o.grad[r];
  });
}

/// Mean over axis 1 of [B, L, d] restricted to positions where keep[b*L+l]
/// is nonzero. Every batch row must keep at least one position.
template <class T>
Tensor<T> masked_mean_rows(const Tensor<T>& a, const std::vector<std::uint8_t>& keep) {
  if (a.rank() != 3) throw ShapeError("masked_mean_rows needs [B,L,d], got " + shape_str(a.shape()));
  const std::size_t B = a.dim(0), L = a.dim(1), d = a.dim(2);
  if (keep.size() != B * L) throw ShapeError("masked_mean_rows: mask size does not match " + shape_str(a.shape()));
  std::vector<T> inv(B);
  std::vector<T> out(B * d, T(0));
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t count = 0;
    for (std::size_t l = 0; l < L; ++l)
      if (keep[b * L + l]) {
        ++count;
        for (std::size_t j = 0; j < d; ++j) out[b * d + j] += a.data()[(b * L + l) * d + j];
      }
    if (count == 0) throw ShapeError("masked_mean_rows: batch row " + std::to_string(b) + " is fully masked");
    inv[b] = T(1) / static_cast<T>(count);
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] *= inv[b];
  }
  return detail::make_result<T>({B, d}, std::move(out), {&a}, "masked_mean_rows", [B, L, d, keep, inv](Node<T>& o) {
    T* gx = detail::grad_of(o, 0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l)
        if (keep[b * L + l])
          for (std::size_t j = 0; j < d; ++j) gx[(b * L + l) * d + j] += o.grad[b * d + j] * inv[b];
  });
}

// ---------------------------------------------------------------------------
// Contractions

/// `b` rank 2 ([k,n]): contracts the last axis of `a`, leading axes of `a`
/// act as a batch. Otherwise both operands must share identical leading axes.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 && b.rank() != 2)
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (b.rank() == 2) {
    const std::size_t k = b.dim(0), n = b.dim(1);
    if (a.last_dim() != k)
      throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.size() / k;
    std::vector<T> out(m * n, T(0));
    kernel::gemm_nn(m, k, n, a.data(), b.data(), out.data());
    Shape s = a.shape();
    s.back() = n;
    return detail::make_result<T>(std::move(s), std::move(out), {&a, &b}, "matmul", [m, k, n](Node<T>& o) {
      const T* A = o.parents[0]->value.data();
      const T* B = o.parents[1]->value.data();
      const T* G = o.grad.data();
      if (T* gA = detail::grad_of(o, 0)) {
        std::vector<T> bt(k * n);
        kernel::transpose(k, n, B, bt.data());
        kernel::gemm_nn(m, n, k, G, bt.data(), gA);
      }
      if (T* gB = detail::grad_of(o, 1)) kernel::gemm_tn(m, k, n, A, G, gB);
    });
  }
  if (a.rank() != b.rank() || detail::leading(a.shape(), 2) != detail::leading(b.shape(), 2) ||
      a.last_dim() != b.dim(b.rank() - 2))
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t m = a.dim(a.rank() - 2), k = a.last_dim(), n = b.last_dim();
  const std::size_t batch = a.size() / (m * k);
  std::vector<T> out(batch * m * n, T(0));
  for (std::size_t i = 0; i < batch; ++i)
    kernel::gemm_nn(m, k, n, a.data() + i * m * k, b.data() + i * k * n, out.data() + i * m * n);
  Shape s = a.shape();
  s.back() = n;
  return detail::make_result<T>(std::move(s), std::move(out), {&a, &b}, "matmul", [batch, m, k, n](Node<T>& o) {
    const T* A = o.parents[0]->value.data();
    const T* B = o.parents[1]->value.data();
    const T* G = o.grad.data();
    T* gA = detail::grad_of(o, 0);
    T* gB = detail::grad_of(o, 1);
    std::vector<T> bt(k * n);
    for (std::size_t i = 0; i < batch; ++i) {
      if (gA) {
        kernel::transpose(k, n, B + i * k * n, bt.data());
        kernel::gemm_nn(m, n, k, G + i * m * n, bt.data(), gA + i * m * k);
      }
      if (gB) kernel::gemm_tn(m, k, n, A + i * m * k, G + i * m * n, gB + i * k * n);
    }
  });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Normalizers

template <class T>
Tensor<T> softmax_last_axis(const Tensor<T>& a) {
  const std::size_t d = a.last_dim(), rows = a.size() / d;
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data() + r * d;
    T* y = out.data() + r * d;
    const T mx = *std::max_element(x, x + d);
    T total = 0;
    for (std::size_t j = 0; j < d; ++j) total += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= total;
  }
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, "softmax_last_axis", [rows, d](Node<T>& o) {
    T* gx = detail::grad_of(o, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * d;
      const T* g = o.grad.data() + r * d;
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[j] * (g[j] - dot);
    }
  });
}

template <class T>
Tensor<T> log_softmax_last_axis(const Tensor<T>& a) {
  const std::size_t d = a.last_dim(), rows = a.size() / d;
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data() + r * d;
    T* y = out.data() + r * d;
    const T mx = *std::max_element(x, x + d);
    T total = 0;
    for (std::size_t j = 0; j < d; ++j) total += std::exp(x[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < d; ++j) y[j] = x[j] - lse;
  }
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, "log_softmax_last_axis", [rows, d](Node<T>& o) {
    T* gx = detail::grad_of(o, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * d;
      const T* g = o.grad.data() + r * d;
      T gs = 0;
      for (std::size_t j = 0; j < d; ++j) gs += g[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[j] - std::exp(y[j]) * gs;
    }
  });
}

/// Normalizes the last axis, then applies per-feature gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  if (!(eps > T(0))) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t d = x.last_dim(), rows = x.size() / d;
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match " + shape_str(x.shape()));
  std::vector<T> out(x.size()), xhat(x.size()), inv(rows);
  const T* g = gain.data();
  const T* b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    inv[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mu) * inv[r];
      out[r * d + j] = g[j] * xhat[r * d + j] + b[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gain, &bias}, "layer_norm",
      [rows, d, xhat = std::move(xhat), inv = std::move(inv)](Node<T>& o) {
        const T* gn = o.parents[1]->value.data();
        const T* dy = o.grad.data();
        if (T* gx = detail::grad_of(o, 0)) {
          std::vector<T> dxh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dxh[j] = dy[r * d + j] * gn[j];
              m1 += dxh[j];
              m2 += dxh[j] * xhat[r * d + j];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv[r] * (dxh[j] - m1 - xhat[r * d + j] * m2);
          }
        }
        if (T* gg = detail::grad_of(o, 1))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[r * d + j] * xhat[r * d + j];
        if (T* gb = detail::grad_of(o, 2))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += dy[r * d + j];
      });
}

// ---------------------------------------------------------------------------
// Lookup, masking, regularization

/// Rows of `table` ([V, d]) for each id; result shape is ids_shape + [d].
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids, Shape ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be [V,d], got " + shape_str(table.shape()));
  if (numel(ids_shape) != ids.size()) throw ShapeError("embedding_lookup: ids do not fill " + shape_str(ids_shape));
  const std::size_t V = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(V));
    std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  ids_shape.push_back(d);
  return detail::make_result<T>(std::move(ids_shape), std::move(out), {&table}, "embedding_lookup",
                                [ids, d](Node<T>& o) {
                                  T* gt = detail::grad_of(o, 0);
                                  for (std::size_t i = 0; i < ids.size(); ++i)
                                    for (std::size_t j = 0; j < d; ++j)
                                      gt[static_cast<std::size_t>(ids[i]) * d + j] += o.grad[i * d + j];
                                });
}

/// Boolean (query x key) permission matrix per batch row; true = may attend.
struct AttentionMask {
  std::size_t batch = 0, queries = 0, keys = 0;
  std::vector<std::uint8_t> allowed;  // [batch, queries, keys]

  bool at(std::size_t b, std::size_t q, std::size_t k) const { return allowed[(b * queries + q) * keys + k]; }
};

/// Replaces disallowed attention logits ([B, H, Lq, Lk]) with a large
/// negative value so they vanish under softmax; no gradient flows there.
template <class T>
Tensor<T> apply_attention_mask(const Tensor<T>& scores, const AttentionMask& mask) {
  if (scores.rank() != 4 || scores.dim(0) != mask.batch || scores.dim(2) != mask.queries || scores.dim(3) != mask.keys)
    throw ShapeError("attention mask [" + std::to_string(mask.batch) + "," + std::to_string(mask.queries) + "," +
                     std::to_string(mask.keys) + "] does not match scores " + shape_str(scores.shape()));
  const std::size_t B = mask.batch, H = scores.dim(1), Q = mask.queries, K = mask.keys;
  std::vector<T> out(scores.values().begin(), scores.values().end());
  const T neg = T(-1e9);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t q = 0; q < Q; ++q)
        for (std::size_t k = 0; k < K; ++k)
          if (!mask.allowed[(b * Q + q) * K + k]) out[((b * H + h) * Q + q) * K + k] = neg;
  const auto allowed = mask.allowed;
  return detail::make_result<T>(scores.shape(), std::move(out), {&scores}, "attention_mask",
                                [B, H, Q, K, allowed](Node<T>& o) {
                                  T* gx = detail::grad_of(o, 0);
                                  for (std::size_t b = 0; b < B; ++b)
                                    for (std::size_t h = 0; h < H; ++h)
                                      for (std::size_t q = 0; q < Q; ++q)
                                        for (std::size_t k = 0; k < K; ++k)
                                          if (allowed[(b * Q + q) * K + k]) {
                                            const std::size_t i = ((b * H + h) * Q + q) * K + k;
                                            gx[i] += o.grad[i];
                                          }
                                });
}

/// Inverted dropout. Identity (same handle) when rate is zero.
template <class T>
Tensor<T> dropout(const Tensor<T>& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  const T keep_scale = T(1) / static_cast<T>(1.0 - rate);
  std::vector<T> mask(a.size());
  for (auto& m : mask) m = rng.uniform() < rate ? T(0) : keep_scale;
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * mask[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, "dropout", [mask = std::move(mask)](Node<T>& o) {
    T* gx = detail::grad_of(o, 0);
    for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += o.grad[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Losses

/// Label-smoothed cross-entropy from logits ([..., V]); rows whose label
/// equals `ignore_id` are skipped and the rest are averaged.
template <class T>
Tensor<T> smoothed_cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& labels, double smoothing,
                                        int ignore_id = 0) {
  const std::size_t V = logits.last_dim(), rows = logits.size() / V;
  if (labels.size() != rows)
    throw ShapeError("cross entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  if (smoothing < 0.0 || smoothing >= 1.0) throw std::invalid_argument("label smoothing must lie in [0,1)");
  std::size_t count = 0;
  for (int l : labels) count += (l != ignore_id);
  if (count == 0) throw std::invalid_argument("cross entropy: no non-pad positions");
  const T on = static_cast<T>(1.0 - smoothing), off = static_cast<T>(smoothing / static_cast<double>(V));
  std::vector<T> logp(logits.size());
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = logits.data() + r * V;
    T* lp = logp.data() + r * V;
    const T mx = *std::max_element(x, x + V);
    T total = 0;
    for (std::size_t j = 0; j < V; ++j) total += std::exp(x[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < V; ++j) lp[j] = x[j] - lse;
    if (labels[r] == ignore_id) continue;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= V)
      throw std::out_of_range("cross entropy: label " + std::to_string(labels[r]) + " outside vocabulary");
    T row = 0;
    if (off != T(0))
      for (std::size_t j = 0; j < V; ++j) row -= off * lp[j];
    row -= on * lp[labels[r]];
    loss += row;
  }
  const T inv = T(1) / static_cast<T>(count);
  return detail::make_result<T>({1}, {loss * inv}, {&logits}, "cross_entropy",
                                [rows, V, labels, ignore_id, on, off, inv, logp = std::move(logp)](Node<T>& o) {
                                  T* gx = detail::grad_of(o, 0);
                                  const T g = o.grad[0] * inv;
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    if (labels[r] == ignore_id) continue;
                                    // d/dx of -sum q log softmax(x) = softmax(x) - q (q sums to 1)
                                    for (std::size_t j = 0; j < V; ++j)
                                      gx[r * V + j] += g * (std::exp(logp[r * V + j]) - off);
                                    gx[r * V + static_cast<std::size_t>(labels[r])] -= g * on;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Named dispatch over the core primitive set

enum class Primitive {
  matmul,
  add,
  sub,
  elementwise_mul,
  concat_last_axis,
  mean_over_axis,
  softmax_last_axis,
  layer_norm,
  relu,
  sigmoid,
  scale,
  embedding_lookup,
  transpose_last_two,
};

inline Primitive primitive_from_name(std::string_view name) {
  static const std::pair<std::string_view, Primitive> table[] = {
      {"matmul", Primitive::matmul},
      {"add", Primitive::add},
      {"sub", Primitive::sub},
      {"elementwise_mul", Primitive::elementwise_mul},
      {"concat_last_axis", Primitive::concat_last_axis},
      {"mean_over_axis", Primitive::mean_over_axis},
      {"softmax_last_axis", Primitive::softmax_last_axis},
      {"layer_norm", Primitive::layer_norm},
      {"relu", Primitive::relu},
      {"sigmoid", Primitive::sigmoid},
      {"scale", Primitive::scale},
      {"embedding_lookup", Primitive::embedding_lookup},
      {"transpose_last_two", Primitive::transpose_last_two},
  };
  for (const auto& [n, p] : table)
    if (n == name) return p;
  throw std::invalid_argument("unknown primitive '" + std::string(name) + "'");
}

struct PrimitiveAttrs {
  std::size_t axis = 0;
  double eps = 1e-5;
  double factor = 1.0;
  std::vector<int> ids;
  Shape ids_shape;
};

template <class T>
Tensor<T> apply_primitive(Primitive kind, const std::vector<Tensor<T>>& in, const PrimitiveAttrs& attrs = {}) {
  auto need = [&](std::size_t n, const char* name) {
    if (in.size() != n)
      throw std::invalid_argument(std::string(name) + " expects " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
  };
  switch (kind) {
    case Primitive::matmul: need(2, "matmul"); return matmul(in[0], in[1]);
    case Primitive::add: need(2, "add"); return add(in[0], in[1]);
    case Primitive::sub: need(2, "sub"); return sub(in[0], in[1]);
    case Primitive::elementwise_mul: need(2, "elementwise_mul"); return mul(in[0], in[1]);
    case Primitive::concat_last_axis: return concat_last_axis(in);
    case Primitive::mean_over_axis: need(1, "mean_over_axis"); return mean_over_axis(in[0], attrs.axis);
    case Primitive::softmax_last_axis: need(1, "softmax_last_axis"); return softmax_last_axis(in[0]);
    case Primitive::layer_norm: need(3, "layer_norm"); return layer_norm(in[0], in[1], in[2], static_cast<T>(attrs.eps));
    case Primitive::relu: need(1, "relu"); return relu(in[0]);
    case Primitive::sigmoid: need(1, "sigmoid"); return sigmoid(in[0]);
    case Primitive::scale: need(1, "scale"); return scale(in[0], static_cast<T>(attrs.factor));
    case Primitive::embedding_lookup: {
      need(1, "embedding_lookup");
      Shape s = attrs.ids_shape.empty() ? Shape{attrs.ids.size()} : attrs.ids_shape;
      return embedding_lookup(in[0], attrs.ids, std::move(s));
    }
    case Primitive::transpose_last_two: need(1, "transpose_last_two"); return transpose_last_two(in[0]);
  }
  throw std::invalid_argument("unknown primitive kind");
}

template <class T>
Tensor<T> apply_primitive(std::string_view name, const std::vector<Tensor<T>>& in, const PrimitiveAttrs& attrs = {}) {
  return apply_primitive<T>(primitive_from_name(name), in, attrs);
}

}  // namespace pinmt
