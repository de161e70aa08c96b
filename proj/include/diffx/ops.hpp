#pragma once

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "diffx/autograd.hpp"

namespace diffx::ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

inline void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class T, class F, class G>
Var<T> unary(const Var<T>& x, F f, G dfdx) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(xv[i]);
  return make_result<T>(std::move(out), {x}, [dfdx](Node<T>& n) {
    if (auto* g = parent_grad(n, 0)) {
      const auto& xv = parent_value(n, 0);
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * dfdx(xv[i], n.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (size_t p = 0; p < 2; ++p)
      if (auto* g = parent_grad(n, p))
        for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    if (auto* g = parent_grad(n, 1))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] -= n.grad[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = parent_value(n, 0);
    const auto& bv = parent_value(n, 1);
    if (auto* g = parent_grad(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * bv[i];
    if (auto* g = parent_grad(n, 1))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * av[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * s;
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + s;
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
  });
}

/// x * s where s is a one-element Var (learnable gate factor).
template <class T>
Var<T> mul_scalar(const Var<T>& x, const Var<T>& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar expects a one-element factor, got " + shape_str(s.shape()));
  const T sv = s.value()[0];
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * sv;
  return make_result<T>(std::move(out), {x, s}, [](Node<T>& n) {
    const auto& xv = parent_value(n, 0);
    const T sv = parent_value(n, 1)[0];
    if (auto* g = parent_grad(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * sv;
    if (auto* g = parent_grad(n, 1)) {
      T acc = 0;
      for (int64_t i = 0; i < xv.numel(); ++i) acc += n.grad[i] * xv[i];
      (*g)[0] += acc;
    }
  });
}

/// Multiplies batch entry b (leading axis) by factors[b]. Used for caption drop.
template <class T>
Var<T> scale_batch(const Var<T>& x, std::vector<T> factors) {
  const int64_t B = x.dim(0);
  if (static_cast<int64_t>(factors.size()) != B) throw ShapeError("scale_batch: factor count != batch");
  const int64_t inner = x.numel() / std::max<int64_t>(B, 1);
  Tensor<T> out(x.shape());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < inner; ++i) out[b * inner + i] = x.value()[b * inner + i] * factors[b];
  return make_result<T>(std::move(out), {x}, [factors, inner](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (size_t b = 0; b < factors.size(); ++b)
        for (int64_t i = 0; i < inner; ++i)
          (*g)[static_cast<int64_t>(b) * inner + i] += n.grad[static_cast<int64_t>(b) * inner + i] * factors[b];
  });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Var<T> silu(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary<T>(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().vec()) acc += v;
  return make_result<T>(Tensor<T>::scalar(acc), {x}, [](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (auto& v : g->vec()) v += n.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  return mean(square(sub(a, b)));
}

// ---------------------------------------------------------------- structure

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> out = x.value().reshaped(std::move(s));
  return make_result<T>(std::move(out), {x}, [](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
  });
}

namespace detail {
// Views a tensor as (outer, axis, inner) around `axis`.
inline void split_axis(const Shape& s, size_t axis, int64_t& outer, int64_t& mid, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= s[i];
  mid = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, size_t axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  Shape out_shape = xs[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat axis out of range");
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != out_shape[i])
        throw ShapeError("concat shape mismatch " + shape_str(s) + " vs " + shape_str(xs[0].shape()));
    out_shape[axis] += s[axis];
  }
  int64_t outer, total, inner;
  detail::split_axis(out_shape, axis, outer, total, inner);
  Tensor<T> out(out_shape);
  std::vector<int64_t> mids;
  int64_t off = 0;
  for (const auto& x : xs) {
    const int64_t m = x.shape()[axis];
    mids.push_back(m);
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(x.value().data() + o * m * inner, m * inner, out.data() + (o * total + off) * inner);
    off += m;
  }
  return make_result<T>(std::move(out), xs, [mids, outer, total, inner](Node<T>& n) {
    int64_t off = 0;
    for (size_t p = 0; p < mids.size(); ++p) {
      const int64_t m = mids[p];
      if (auto* g = parent_grad(n, p))
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < m * inner; ++i) g->data()[o * m * inner + i] += n.grad.data()[(o * total + off) * inner + i];
      off += m;
    }
  });
}

/// Rows [begin, end) along `axis`.
template <class T>
Var<T> slice(const Var<T>& x, size_t axis, int64_t begin, int64_t end) {
  Shape s = x.shape();
  if (axis >= s.size() || begin < 0 || end > s[axis] || begin > end)
    throw ShapeError("slice out of range on " + shape_str(s));
  int64_t outer, mid, inner;
  detail::split_axis(s, axis, outer, mid, inner);
  Shape os = s;
  os[axis] = end - begin;
  Tensor<T> out(os);
  const int64_t m = end - begin;
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(x.value().data() + (o * mid + begin) * inner, m * inner, out.data() + o * m * inner);
  return make_result<T>(std::move(out), {x}, [outer, mid, inner, begin, m](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < m * inner; ++i) g->data()[(o * mid + begin) * inner + i] += n.grad.data()[o * m * inner + i];
  });
}

namespace detail {
// Generic permutation of a rank-k tensor (used for token/head layout changes).
template <class T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<size_t>& perm) {
  const Shape& s = x.shape();
  const size_t r = s.size();
  Shape os(r);
  for (size_t i = 0; i < r; ++i) os[i] = s[perm[i]];
  std::vector<int64_t> in_stride(r, 1);
  for (size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * s[i + 1];
  std::vector<int64_t> step(r);
  for (size_t i = 0; i < r; ++i) step[i] = in_stride[perm[i]];
  Tensor<T> out(os);
  std::vector<int64_t> idx(r, 0);
  int64_t src = 0;
  const int64_t total = out.numel();
  for (int64_t k = 0; k < total; ++k) {
    out[k] = x[src];
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      src += step[d];
      if (idx[d] < os[d]) break;
      src -= step[d] * os[d];
      idx[d] = 0;
    }
  }
  return out;
}
}  // namespace detail

template <class T>
Var<T> permute(const Var<T>& x, std::vector<size_t> perm) {
  if (perm.size() != x.shape().size()) throw ShapeError("permute rank mismatch");
  std::vector<size_t> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  Tensor<T> out = detail::permute_tensor(x.value(), perm);
  return make_result<T>(std::move(out), {x}, [inv](Node<T>& n) {
    if (auto* g = parent_grad(n, 0)) {
      Tensor<T> back = detail::permute_tensor(n.grad, inv);
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += back[i];
    }
  });
}

/// (N, C, H, W) -> (N, H*W, C)
template <class T>
Var<T> to_tokens(const Var<T>& x) {
  const Shape s = x.shape();
  if (s.size() != 4) throw ShapeError("to_tokens expects (N,C,H,W), got " + shape_str(s));
  return reshape(permute(x, {0, 2, 3, 1}), Shape{s[0], s[2] * s[3], s[1]});
}

/// (N, H*W, C) -> (N, C, H, W)
template <class T>
Var<T> from_tokens(const Var<T>& x, int64_t h, int64_t w) {
  const Shape s = x.shape();
  if (s.size() != 3 || s[1] != h * w) throw ShapeError("from_tokens geometry mismatch " + shape_str(s));
  return permute(reshape(x, Shape{s[0], h, w, s[2]}), {0, 3, 1, 2});
}

/// (B, n, heads*dh) -> (B*heads, n, dh)
template <class T>
Var<T> split_heads(const Var<T>& x, int64_t heads) {
  const Shape s = x.shape();
  if (s.size() != 3 || s[2] % heads != 0) throw ShapeError("split_heads: bad shape " + shape_str(s));
  const int64_t dh = s[2] / heads;
  return reshape(permute(reshape(x, Shape{s[0], s[1], heads, dh}), {0, 2, 1, 3}), Shape{s[0] * heads, s[1], dh});
}

/// (B*heads, n, dh) -> (B, n, heads*dh)
template <class T>
Var<T> merge_heads(const Var<T>& x, int64_t heads) {
  const Shape s = x.shape();
  if (s.size() != 3 || s[0] % heads != 0) throw ShapeError("merge_heads: bad shape " + shape_str(s));
  const int64_t B = s[0] / heads;
  return reshape(permute(reshape(x, Shape{B, heads, s[1], s[2]}), {0, 2, 1, 3}), Shape{B, s[1], heads * s[2]});
}

/// a + b where b's shape equals the trailing dims of a (broadcast over leading).
template <class T>
Var<T> add_broadcast(const Var<T>& a, const Var<T>& b) {
  const int64_t inner = b.numel();
  if (inner == 0 || a.numel() % inner != 0) throw ShapeError("add_broadcast: incompatible " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin()))
    throw ShapeError("add_broadcast: trailing dims differ " + shape_str(as) + " + " + shape_str(bs));
  const int64_t outer = a.numel() / inner;
  Tensor<T> out(as);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) out[o * inner + i] = a.value()[o * inner + i] + b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [outer, inner](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    if (auto* g = parent_grad(n, 1))
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) (*g)[i] += n.grad[o * inner + i];
  });
}

/// x (N, C, H, W) + v (N, C) broadcast over space.
template <class T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v) {
  const Shape& s = x.shape();
  if (s.size() != 4 || v.shape() != Shape{s[0], s[1]})
    throw ShapeError("add_channel: " + shape_str(s) + " + " + shape_str(v.shape()));
  const int64_t hw = s[2] * s[3];
  const int64_t nc = s[0] * s[1];
  Tensor<T> out(s);
  for (int64_t c = 0; c < nc; ++c)
    for (int64_t i = 0; i < hw; ++i) out[c * hw + i] = x.value()[c * hw + i] + v.value()[c];
  return make_result<T>(std::move(out), {x, v}, [nc, hw](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    if (auto* g = parent_grad(n, 1))
      for (int64_t c = 0; c < nc; ++c) {
        T acc = 0;
        for (int64_t i = 0; i < hw; ++i) acc += n.grad[c * hw + i];
        (*g)[c] += acc;
      }
  });
}

/// Rows of `table` (V, d) selected by ids -> (ids.size(), d).
template <class T>
Var<T> gather_rows(const Var<T>& table, std::vector<int64_t> ids) {
  if (table.shape().size() != 2) throw ShapeError("gather_rows expects a 2-D table");
  const int64_t V = table.dim(0), d = table.dim(1);
  Tensor<T> out(Shape{static_cast<int64_t>(ids.size()), d});
  for (size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= V) throw RangeError("gather_rows: id " + std::to_string(ids[r]) + " out of range");
    std::copy_n(table.value().data() + ids[r] * d, d, out.data() + static_cast<int64_t>(r) * d);
  }
  return make_result<T>(std::move(out), {table}, [ids, d](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (size_t r = 0; r < ids.size(); ++r)
        for (int64_t j = 0; j < d; ++j) (*g)[ids[r] * d + j] += n.grad[static_cast<int64_t>(r) * d + j];
  });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  const Shape s = x.shape();
  if (s.size() != 4) throw ShapeError("upsample expects (N,C,H,W)");
  const int64_t nc = s[0] * s[1], H = s[2], W = s[3];
  Tensor<T> out(Shape{s[0], s[1], 2 * H, 2 * W});
  for (int64_t c = 0; c < nc; ++c)
    for (int64_t y = 0; y < 2 * H; ++y)
      for (int64_t xx = 0; xx < 2 * W; ++xx) out[(c * 2 * H + y) * 2 * W + xx] = x.value()[(c * H + y / 2) * W + xx / 2];
  return make_result<T>(std::move(out), {x}, [nc, H, W](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (int64_t c = 0; c < nc; ++c)
        for (int64_t y = 0; y < 2 * H; ++y)
          for (int64_t xx = 0; xx < 2 * W; ++xx) (*g)[(c * H + y / 2) * W + xx / 2] += n.grad[(c * 2 * H + y) * 2 * W + xx];
  });
}

// ---------------------------------------------------------------- linear algebra

/// x (..., in) * W^T + b with W (out, in), b (out) or undefined.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& W, const Var<T>& b) {
  const Shape xs = x.shape();
  const int64_t in = W.dim(1), outf = W.dim(0);
  if (xs.empty() || xs.back() != in)
    throw ShapeError("linear: input " + shape_str(xs) + " incompatible with weight " + shape_str(W.shape()));
  const int64_t rows = x.numel() / in;
  Shape os = xs;
  os.back() = outf;
  Tensor<T> out(os);
  {
    CMapMat<T> X(x.value().data(), rows, in);
    CMapMat<T> Wm(W.value().data(), outf, in);
    MapMat<T> Y(out.data(), rows, outf);
    Y.noalias() = X * Wm.transpose();
    if (b.defined())
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < outf; ++j) Y(r, j) += b.value()[j];
  }
  std::vector<Var<T>> parents{x, W};
  if (b.defined()) parents.push_back(b);
  const bool has_bias = b.defined();
  return make_result<T>(std::move(out), parents, [rows, in, outf, has_bias](Node<T>& n) {
    CMapMat<T> G(n.grad.data(), rows, outf);
    if (auto* g = parent_grad(n, 0)) {
      MapMat<T> GX(g->data(), rows, in);
      GX.noalias() += G * CMapMat<T>(parent_value(n, 1).data(), outf, in);
    }
    if (auto* g = parent_grad(n, 1)) {
      MapMat<T> GW(g->data(), outf, in);
      GW.noalias() += G.transpose() * CMapMat<T>(parent_value(n, 0).data(), rows, in);
    }
    if (has_bias)
      if (auto* g = parent_grad(n, 2))
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < outf; ++j) (*g)[j] += G(r, j);
  });
}

/// Batched a (B, m, k) x b (B, k, n) -> (B, m, n).
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  const Shape as = a.shape(), bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1])
    throw ShapeError("bmm: " + shape_str(as) + " x " + shape_str(bs));
  const int64_t B = as[0], m = as[1], k = as[2], nn = bs[2];
  Tensor<T> out(Shape{B, m, nn});
  for (int64_t i = 0; i < B; ++i)
    MapMat<T>(out.data() + i * m * nn, m, nn).noalias() =
        CMapMat<T>(a.value().data() + i * m * k, m, k) * CMapMat<T>(b.value().data() + i * k * nn, k, nn);
  return make_result<T>(std::move(out), {a, b}, [B, m, k, nn](Node<T>& n) {
    for (int64_t i = 0; i < B; ++i) {
      CMapMat<T> G(n.grad.data() + i * m * nn, m, nn);
      if (auto* g = parent_grad(n, 0))
        MapMat<T>(g->data() + i * m * k, m, k).noalias() += G * CMapMat<T>(parent_value(n, 1).data() + i * k * nn, k, nn).transpose();
      if (auto* g = parent_grad(n, 1))
        MapMat<T>(g->data() + i * k * nn, k, nn).noalias() += CMapMat<T>(parent_value(n, 0).data() + i * m * k, m, k).transpose() * G;
    }
  });
}

/// Scaled dot-product attention with softmax over keys.
/// q (B, nq, d), k (B, nk, d), v (B, nk, dv). `key_len[b]`, when given,
/// restricts batch entry b to its first key_len[b] keys; an entry with no
/// valid keys yields zero output rows.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::vector<int64_t> key_len = {}) {
  const Shape qs = q.shape(), ks = k.shape(), vs = v.shape();
  if (qs.size() != 3 || ks.size() != 3 || vs.size() != 3 || qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] ||
      ks[1] != vs[1])
    throw ShapeError("attention: q" + shape_str(qs) + " k" + shape_str(ks) + " v" + shape_str(vs));
  const int64_t B = qs[0], nq = qs[1], nk = ks[1], d = qs[2], dv = vs[2];
  if (key_len.empty()) key_len.assign(static_cast<size_t>(B), nk);
  if (static_cast<int64_t>(key_len.size()) != B) throw ShapeError("attention: key_len size != batch");
  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> probs(Shape{B, nq, nk});
  Tensor<T> out(Shape{B, nq, dv});
  for (int64_t b = 0; b < B; ++b) {
    const int64_t L = std::min(key_len[b], nk);
    if (L <= 0) continue;
    CMapMat<T> Q(q.value().data() + b * nq * d, nq, d);
    CMapMat<T> K(k.value().data() + b * nk * d, L, d);
    CMapMat<T> V(v.value().data() + b * nk * dv, L, dv);
    RowMat<T> S = (Q * K.transpose()) * sc;
    for (int64_t i = 0; i < nq; ++i) {
      const T mx = S.row(i).maxCoeff();
      T z = 0;
      for (int64_t j = 0; j < L; ++j) {
        S(i, j) = std::exp(S(i, j) - mx);
        z += S(i, j);
      }
      for (int64_t j = 0; j < L; ++j) S(i, j) /= z;
    }
    for (int64_t i = 0; i < nq; ++i)
      for (int64_t j = 0; j < L; ++j) probs[(b * nq + i) * nk + j] = S(i, j);
    MapMat<T>(out.data() + b * nq * dv, nq, dv).noalias() = S * V;
  }
  return make_result<T>(std::move(out), {q, k, v}, [probs, key_len, B, nq, nk, d, dv, sc](Node<T>& n) {
    auto* gq = parent_grad(n, 0);
    auto* gk = parent_grad(n, 1);
    auto* gv = parent_grad(n, 2);
    for (int64_t b = 0; b < B; ++b) {
      const int64_t L = std::min(key_len[b], nk);
      if (L <= 0) continue;
      RowMat<T> P(nq, L);
      for (int64_t i = 0; i < nq; ++i)
        for (int64_t j = 0; j < L; ++j) P(i, j) = probs[(b * nq + i) * nk + j];
      CMapMat<T> G(n.grad.data() + b * nq * dv, nq, dv);
      CMapMat<T> Q(parent_value(n, 0).data() + b * nq * d, nq, d);
      CMapMat<T> K(parent_value(n, 1).data() + b * nk * d, L, d);
      CMapMat<T> V(parent_value(n, 2).data() + b * nk * dv, L, dv);
      if (gv) MapMat<T>(gv->data() + b * nk * dv, L, dv).noalias() += P.transpose() * G;
      if (!gq && !gk) continue;
      RowMat<T> dP = G * V.transpose();
      RowMat<T> dS(nq, L);
      for (int64_t i = 0; i < nq; ++i) {
        T dot = 0;
        for (int64_t j = 0; j < L; ++j) dot += dP(i, j) * P(i, j);
        for (int64_t j = 0; j < L; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * sc;
      }
      if (gq) MapMat<T>(gq->data() + b * nq * d, nq, d).noalias() += dS * K;
      if (gk) MapMat<T>(gk->data() + b * nk * d, L, d).noalias() += dS.transpose() * Q;
    }
  });
}

/// Softmax attention weights only (for inspection / tests), no autograd.
template <class T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k) {
  const int64_t B = q.dim(0), nq = q.dim(1), nk = k.dim(1), d = q.dim(2);
  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> probs(Shape{B, nq, nk});
  for (int64_t b = 0; b < B; ++b) {
    RowMat<T> S = (CMapMat<T>(q.data() + b * nq * d, nq, d) * CMapMat<T>(k.data() + b * nk * d, nk, d).transpose()) * sc;
    for (int64_t i = 0; i < nq; ++i) {
      const T mx = S.row(i).maxCoeff();
      S.row(i) = (S.row(i).array() - mx).exp();
      S.row(i) /= S.row(i).sum();
    }
    MapMat<T>(probs.data() + b * nq * nk, nq, nk) = S;
  }
  return probs;
}

// ---------------------------------------------------------------- convolution

namespace detail {
// Output columns [x_lo, x_hi) read inside the image for kernel offset kx.
inline void valid_range(int64_t W, int64_t Wo, int64_t stride, int64_t pad, int64_t kx, int64_t& x_lo, int64_t& x_hi) {
  x_lo = 0;
  while (x_lo < Wo && x_lo * stride - pad + kx < 0) ++x_lo;
  x_hi = Wo;
  while (x_hi > x_lo && (x_hi - 1) * stride - pad + kx >= W) --x_hi;
}

template <class T>
void im2col(const T* img, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
            int64_t Ho, int64_t Wo, T* cols) {
  for (int64_t kx = 0; kx < kw; ++kx) {
    int64_t x_lo, x_hi;
    valid_range(W, Wo, stride, pad, kx, x_lo, x_hi);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t ky = 0; ky < kh; ++ky) {
        T* row = cols + ((c * kh + ky) * kw + kx) * Ho * Wo;
        for (int64_t y = 0; y < Ho; ++y) {
          T* dst = row + y * Wo;
          const int64_t iy = y * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            std::fill_n(dst, Wo, T(0));
            continue;
          }
          std::fill_n(dst, x_lo, T(0));
          const T* src = img + (c * H + iy) * W - pad + kx;
          if (stride == 1) {
            std::copy(src + x_lo, src + x_hi, dst + x_lo);
          } else {
            for (int64_t x = x_lo; x < x_hi; ++x) dst[x] = src[x * stride];
          }
          std::fill(dst + x_hi, dst + Wo, T(0));
        }
      }
  }
}

template <class T>
void col2im(const T* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
            int64_t Ho, int64_t Wo, T* img) {
  for (int64_t kx = 0; kx < kw; ++kx) {
    int64_t x_lo, x_hi;
    valid_range(W, Wo, stride, pad, kx, x_lo, x_hi);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t ky = 0; ky < kh; ++ky) {
        const T* row = cols + ((c * kh + ky) * kw + kx) * Ho * Wo;
        for (int64_t y = 0; y < Ho; ++y) {
          const int64_t iy = y * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + y * Wo;
          T* dst = img + (c * H + iy) * W - pad + kx;
          for (int64_t x = x_lo; x < x_hi; ++x) dst[x * stride] += src[x];
        }
      }
  }
}
}  // namespace detail

/// 2-D cross-correlation. x (N, C, H, W), W (O, C, kh, kw), b (O) or undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& Wt, const Var<T>& b, int64_t stride, int64_t pad) {
  const Shape xs = x.shape(), ws = Wt.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
    throw ShapeError("conv2d: input " + shape_str(xs) + " weight " + shape_str(ws));
  const int64_t N = xs[0], C = xs[1], H = xs[2], Wd = xs[3], O = ws[0], kh = ws[2], kw = ws[3];
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (Wd + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(xs));
  const int64_t K = C * kh * kw, P = Ho * Wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
  Tensor<T> out(Shape{N, O, Ho, Wo});
  std::vector<T> cols(pointwise ? 0 : static_cast<size_t>(K * P));
  CMapMat<T> Wm(Wt.value().data(), O, K);
  for (int64_t n = 0; n < N; ++n) {
    const T* src = x.value().data() + n * C * H * Wd;
    if (!pointwise) detail::im2col(src, C, H, Wd, kh, kw, stride, pad, Ho, Wo, cols.data());
    CMapMat<T> Cm(pointwise ? src : cols.data(), K, P);
    MapMat<T> Y(out.data() + n * O * P, O, P);
    Y.noalias() = Wm * Cm;
    if (b.defined())
      for (int64_t o = 0; o < O; ++o) Y.row(o).array() += b.value()[o];
  }
  std::vector<Var<T>> parents{x, Wt};
  if (b.defined()) parents.push_back(b);
  const bool has_bias = b.defined();
  return make_result<T>(std::move(out), parents, [=](Node<T>& nd) {
    auto* gx = parent_grad(nd, 0);
    auto* gw = parent_grad(nd, 1);
    Tensor<T>* gb = has_bias ? parent_grad(nd, 2) : nullptr;
    const auto& xv = parent_value(nd, 0);
    CMapMat<T> Wm(parent_value(nd, 1).data(), O, K);
    std::vector<T> cols(pointwise ? 0 : static_cast<size_t>(K * P));
    std::vector<T> dcols(pointwise ? 0 : static_cast<size_t>(K * P));
    for (int64_t n = 0; n < N; ++n) {
      CMapMat<T> G(nd.grad.data() + n * O * P, O, P);
      const T* src = xv.data() + n * C * H * Wd;
      if (gw) {
        if (!pointwise) detail::im2col(src, C, H, Wd, kh, kw, stride, pad, Ho, Wo, cols.data());
        MapMat<T>(gw->data(), O, K).noalias() += G * CMapMat<T>(pointwise ? src : cols.data(), K, P).transpose();
      }
      if (gb)
        for (int64_t o = 0; o < O; ++o) (*gb)[o] += G.row(o).sum();
      if (gx) {
        if (pointwise) {
          MapMat<T>(gx->data() + n * C * H * Wd, K, P).noalias() += Wm.transpose() * G;
        } else {
          MapMat<T>(dcols.data(), K, P).noalias() = Wm.transpose() * G;
          detail::col2im(dcols.data(), C, H, Wd, kh, kw, stride, pad, Ho, Wo, gx->data() + n * C * H * Wd);
        }
      }
    }
  });
}

// ---------------------------------------------------------------- normalization

/// Group normalization over (N, C, H, W) with per-channel affine.
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int64_t groups, T eps = T(1e-5)) {
  const Shape s = x.shape();
  if (s.size() != 4 || s[1] % groups != 0) throw ShapeError("group_norm: " + shape_str(s) + " groups " + std::to_string(groups));
  const int64_t N = s[0], C = s[1], HW = s[2] * s[3], cpg = C / groups, gsize = cpg * HW;
  Tensor<T> out(s);
  Tensor<T> xhat(s);
  std::vector<T> rstd(static_cast<size_t>(N * groups));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t g = 0; g < groups; ++g) {
      const T* p = x.value().data() + (n * C + g * cpg) * HW;
      T m = 0;
      for (int64_t i = 0; i < gsize; ++i) m += p[i];
      m /= static_cast<T>(gsize);
      T var = 0;
      for (int64_t i = 0; i < gsize; ++i) var += (p[i] - m) * (p[i] - m);
      var /= static_cast<T>(gsize);
      const T r = T(1) / std::sqrt(var + eps);
      rstd[static_cast<size_t>(n * groups + g)] = r;
      for (int64_t i = 0; i < gsize; ++i) {
        const int64_t c = g * cpg + i / HW;
        const int64_t idx = (n * C + g * cpg) * HW + i;
        xhat[idx] = (p[i] - m) * r;
        out[idx] = xhat[idx] * gamma.value()[c] + beta.value()[c];
      }
    }
  return make_result<T>(std::move(out), {x, gamma, beta}, [xhat, rstd, N, C, HW, groups, cpg, gsize](Node<T>& nd) {
    auto* gx = parent_grad(nd, 0);
    auto* gg = parent_grad(nd, 1);
    auto* gb = parent_grad(nd, 2);
    const auto& gam = parent_value(nd, 1);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t g = 0; g < groups; ++g) {
        const int64_t base = (n * C + g * cpg) * HW;
        T sum_dy = 0, sum_dy_xhat = 0;
        for (int64_t i = 0; i < gsize; ++i) {
          const int64_t c = g * cpg + i / HW;
          const T dy = nd.grad[base + i];
          if (gg) (*gg)[c] += dy * xhat[base + i];
          if (gb) (*gb)[c] += dy;
          const T dxh = dy * gam[c];
          sum_dy += dxh;
          sum_dy_xhat += dxh * xhat[base + i];
        }
        if (!gx) continue;
        const T r = rstd[static_cast<size_t>(n * groups + g)];
        const T inv = T(1) / static_cast<T>(gsize);
        for (int64_t i = 0; i < gsize; ++i) {
          const int64_t c = g * cpg + i / HW;
          const T dxh = nd.grad[base + i] * gam[c];
          (*gx)[base + i] += r * (dxh - inv * sum_dy - xhat[base + i] * inv * sum_dy_xhat);
        }
      }
  });
}

/// Layer normalization over the last dimension.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const int64_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm: affine size mismatch");
  const int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> rstd(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = x.value().data() + r * d;
    T m = 0;
    for (int64_t i = 0; i < d; ++i) m += p[i];
    m /= static_cast<T>(d);
    T var = 0;
    for (int64_t i = 0; i < d; ++i) var += (p[i] - m) * (p[i] - m);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[static_cast<size_t>(r)] = rs;
    for (int64_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (p[i] - m) * rs;
      out[r * d + i] = xhat[r * d + i] * gamma.value()[i] + beta.value()[i];
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta}, [xhat, rstd, rows, d](Node<T>& nd) {
    auto* gx = parent_grad(nd, 0);
    auto* gg = parent_grad(nd, 1);
    auto* gb = parent_grad(nd, 2);
    const auto& gam = parent_value(nd, 1);
    for (int64_t r = 0; r < rows; ++r) {
      T sum_dxh = 0, sum_dxh_xhat = 0;
      for (int64_t i = 0; i < d; ++i) {
        const T dy = nd.grad[r * d + i];
        if (gg) (*gg)[i] += dy * xhat[r * d + i];
        if (gb) (*gb)[i] += dy;
        sum_dxh += dy * gam[i];
        sum_dxh_xhat += dy * gam[i] * xhat[r * d + i];
      }
      if (!gx) continue;
      const T inv = T(1) / static_cast<T>(d);
      const T rs = rstd[static_cast<size_t>(r)];
      for (int64_t i = 0; i < d; ++i)
        (*gx)[r * d + i] += rs * (nd.grad[r * d + i] * gam[i] - inv * sum_dxh - xhat[r * d + i] * inv * sum_dxh_xhat);
    }
  });
}

}  // namespace diffx::ops
