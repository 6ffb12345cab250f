#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "ctvseg/blas.hpp"
#include "ctvseg/tape.hpp"

// Dense differentiable operations. Each builder computes the forward value,
// pushes one node, and registers a closure that pulls this node's gradient
// and accumulates into its inputs. Convolutional ops live in conv.hpp.

namespace ctvseg {

namespace detail {

template <typename T>
inline T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// log(1 + exp(x)) without overflow
template <typename T>
inline T softplus_scalar(T x) {
  const T m = x > T(0) ? x : T(0);
  return m + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const Tensor<T>&xa = t.val(a), &xb = t.val(b);
  require_same_shape(xa, xb, "add");
  Tensor<T> out = xa;
  for (int64_t i = 0; i < out.size(); ++i) out[i] += xb[i];
  const bool ng = t.needs(a) || t.needs(b);
  Var self = t.next();
  return t.push(std::move(out), ng, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.needs(a)) {
      Tensor<T>& ga = tp.grad(a);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.needs(b)) {
      Tensor<T>& gb = tp.grad(b);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

template <typename T>
Var sub(Tape<T>& t, Var a, Var b) {
  const Tensor<T>&xa = t.val(a), &xb = t.val(b);
  require_same_shape(xa, xb, "sub");
  Tensor<T> out = xa;
  for (int64_t i = 0; i < out.size(); ++i) out[i] -= xb[i];
  const bool ng = t.needs(a) || t.needs(b);
  Var self = t.next();
  return t.push(std::move(out), ng, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.needs(a)) {
      Tensor<T>& ga = tp.grad(a);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.needs(b)) {
      Tensor<T>& gb = tp.grad(b);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  const Tensor<T>&xa = t.val(a), &xb = t.val(b);
  require_same_shape(xa, xb, "mul");
  Tensor<T> out = xa;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= xb[i];
  const bool ng = t.needs(a) || t.needs(b);
  Var self = t.next();
  return t.push(std::move(out), ng, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>&va = tp.val(a), &vb = tp.val(b);
    if (tp.needs(a)) {
      Tensor<T>& ga = tp.grad(a);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (tp.needs(b)) {
      Tensor<T>& gb = tp.grad(b);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T c) {
  Tensor<T> out = t.val(a);
  for (auto& v : out.data) v *= c;
  Var self = t.next();
  return t.push(std::move(out), t.needs(a), [=](Tape<T>& tp) {
    if (!tp.needs(a)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& ga = tp.grad(a);
    for (int64_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

// Adds a length-C bias vector to every row of an (R,C) matrix.
template <typename T>
Var add_bias_rows(Tape<T>& t, Var a, Var bias) {
  const Tensor<T>&xa = t.val(a), &xb = t.val(bias);
  if (xa.ndim() < 2 || xb.ndim() != 1 || xa.dim(xa.ndim() - 1) != xb.dim(0))
    throw ContractError("add_bias_rows: last axis " + shape_str(xa.shape) + " vs bias " +
                        shape_str(xb.shape));
  const int64_t c = xb.dim(0), rows = xa.size() / c;
  Tensor<T> out = xa;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j) out[r * c + j] += xb[j];
  const bool ng = t.needs(a) || t.needs(bias);
  Var self = t.next();
  return t.push(std::move(out), ng, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.needs(a)) {
      Tensor<T>& ga = tp.grad(a);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.needs(bias)) {
      Tensor<T>& gb = tp.grad(bias);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
    }
  });
}

// matmul over the last two axes of 2-D tensors, with optional transposes.
template <typename T>
Var matmul(Tape<T>& t, Var a, Var b, bool trans_a = false, bool trans_b = false) {
  const Tensor<T>&xa = t.val(a), &xb = t.val(b);
  if (xa.ndim() != 2 || xb.ndim() != 2)
    throw ContractError("matmul expects rank-2 inputs, got " + shape_str(xa.shape) + " and " +
                        shape_str(xb.shape));
  const int64_t m = trans_a ? xa.dim(1) : xa.dim(0);
  const int64_t ka = trans_a ? xa.dim(0) : xa.dim(1);
  const int64_t kb = trans_b ? xb.dim(1) : xb.dim(0);
  const int64_t n = trans_b ? xb.dim(0) : xb.dim(1);
  if (ka != kb)
    throw ContractError("matmul: inner axes disagree, " + shape_str(xa.shape) +
                        (trans_a ? "^T" : "") + " x " + shape_str(xb.shape) +
                        (trans_b ? "^T" : ""));
  Tensor<T> out({m, n});
  gemm(trans_a, trans_b, static_cast<int>(m), static_cast<int>(n), static_cast<int>(ka), T(1),
       xa.ptr(), static_cast<int>(xa.dim(1)), xb.ptr(), static_cast<int>(xb.dim(1)), T(0),
       out.ptr(), static_cast<int>(n));
  const bool ng = t.needs(a) || t.needs(b);
  Var self = t.next();
  return t.push(std::move(out), ng, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(self);  // (m,n)
    const Tensor<T>&va = tp.val(a), &vb = tp.val(b);
    const int im = static_cast<int>(m), in = static_cast<int>(n), ik = static_cast<int>(ka);
    if (tp.needs(a)) {
      Tensor<T>& ga = tp.grad(a);
      if (!trans_a)  // dA = G * op(B)^T
        gemm(false, !trans_b, im, ik, in, T(1), g.ptr(), in, vb.ptr(),
             static_cast<int>(vb.dim(1)), T(1), ga.ptr(), ik);
      else  // dA^T = op(B) * G^T  => dA = (G * op(B)^T)^T computed transposed
        gemm(trans_b, true, ik, im, in, T(1), vb.ptr(), static_cast<int>(vb.dim(1)), g.ptr(), in,
             T(1), ga.ptr(), im);
    }
    if (tp.needs(b)) {
      Tensor<T>& gb = tp.grad(b);
      if (!trans_b)  // dB = op(A)^T * G
        gemm(!trans_a, false, ik, in, im, T(1), va.ptr(), static_cast<int>(va.dim(1)), g.ptr(),
             in, T(1), gb.ptr(), in);
      else  // dB = G^T * op(A)
        gemm(true, trans_a, in, ik, im, T(1), g.ptr(), in, va.ptr(),
             static_cast<int>(va.dim(1)), T(1), gb.ptr(), ik);
    }
  });
}

template <typename T>
Var reshape(Tape<T>& t, Var a, Shape s) {
  const Tensor<T>& xa = t.val(a);
  if (numel(s) != xa.size())
    throw ContractError("reshape: " + shape_str(xa.shape) + " -> " + shape_str(s) +
                        " changes element count");
  Tensor<T> out = xa;
  out.shape = s;
  Var self = t.next();
  return t.push(std::move(out), t.needs(a), [=](Tape<T>& tp) {
    if (!tp.needs(a)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& ga = tp.grad(a);
    for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Var concat(Tape<T>& t, const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Tensor<T>& first = t.val(parts[0]);
  const int nd = first.ndim();
  if (axis < 0 || axis >= nd) throw ContractError("concat: bad axis");
  Shape out_shape = first.shape;
  out_shape[static_cast<size_t>(axis)] = 0;
  bool ng = false;
  for (Var p : parts) {
    const Tensor<T>& x = t.val(p);
    if (x.ndim() != nd) throw ContractError("concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis && x.dim(d) != first.dim(d))
        throw ContractError("concat: axis " + std::to_string(d) + " mismatch " +
                            shape_str(x.shape) + " vs " + shape_str(first.shape));
    out_shape[static_cast<size_t>(axis)] += x.dim(axis);
    ng = ng || t.needs(p);
  }
  // outer = product of axes before `axis`, inner = product after
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= first.dim(d);
  for (int d = axis + 1; d < nd; ++d) inner *= first.dim(d);
  Tensor<T> out(out_shape);
  const int64_t out_ax = out_shape[static_cast<size_t>(axis)];
  int64_t off = 0;
  for (Var p : parts) {
    const Tensor<T>& x = t.val(p);
    const int64_t ax = x.dim(axis);
    for (int64_t o = 0; o < outer; ++o)
      std::copy(x.ptr() + o * ax * inner, x.ptr() + (o + 1) * ax * inner,
                out.ptr() + (o * out_ax + off) * inner);
    off += ax;
  }
  std::vector<Var> parts_copy = parts;
  Var self = t.next();
  return t.push(std::move(out), ng, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(self);
    int64_t o2 = 0;
    for (Var p : parts_copy) {
      const int64_t ax = tp.val(p).dim(axis);
      if (tp.needs(p)) {
        Tensor<T>& gp = tp.grad(p);
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = g.ptr() + (o * out_ax + o2) * inner;
          T* dst = gp.ptr() + o * ax * inner;
          for (int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
        }
      }
      o2 += ax;
    }
  });
}

// Contiguous row slice of a rank-2 tensor.
template <typename T>
Var slice_rows(Tape<T>& t, Var a, int64_t start, int64_t count) {
  const Tensor<T>& xa = t.val(a);
  if (xa.ndim() != 2 || start < 0 || count < 1 || start + count > xa.dim(0))
    throw ContractError("slice_rows: bad range [" + std::to_string(start) + "," +
                        std::to_string(start + count) + ") for " + shape_str(xa.shape));
  const int64_t c = xa.dim(1);
  Tensor<T> out({count, c});
  std::copy(xa.ptr() + start * c, xa.ptr() + (start + count) * c, out.ptr());
  Var self = t.next();
  return t.push(std::move(out), t.needs(a), [=](Tape<T>& tp) {
    if (!tp.needs(a)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& ga = tp.grad(a);
    for (int64_t i = 0; i < count * c; ++i) ga[start * c + i] += g[i];
  });
}

template <typename T>
Var leaky_relu(Tape<T>& t, Var a, T slope) {
  const Tensor<T>& xa = t.val(a);
  Tensor<T> out = xa;
  for (auto& v : out.data) v = v > T(0) ? v : slope * v;
  Var self = t.next();
  return t.push(std::move(out), t.needs(a), [=](Tape<T>& tp) {
    if (!tp.needs(a)) return;
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& x = tp.val(a);
    Tensor<T>& ga = tp.grad(a);
    for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (x[i] > T(0) ? T(1) : slope);
  });
}

template <typename T>
Var relu(Tape<T>& t, Var a) {
  return leaky_relu(t, a, T(0));
}

template <typename T>
Var sigmoid(Tape<T>& t, Var a) {
  const Tensor<T>& xa = t.val(a);
  Tensor<T> out = xa;
  for (auto& v : out.data) v = detail::sigmoid_scalar(v);
  Var self = t.next();
  return t.push(std::move(out), t.needs(a), [=](Tape<T>& tp) {
    if (!tp.needs(a)) return;
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& y = tp.val(self);
    Tensor<T>& ga = tp.grad(a);
    for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var softplus(Tape<T>& t, Var a) {
  const Tensor<T>& xa = t.val(a);
  Tensor<T> out = xa;
  for (auto& v : out.data) v = detail::softplus_scalar(v);
  Var self = t.next();
  return t.push(std::move(out), t.needs(a), [=](Tape<T>& tp) {
    if (!tp.needs(a)) return;
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& x = tp.val(a);
    Tensor<T>& ga = tp.grad(a);
    for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * detail::sigmoid_scalar(x[i]);
  });
}

// Softmax along the last axis, with the row max subtracted before
// exponentiation.
template <typename T>
Var softmax(Tape<T>& t, Var a) {
  const Tensor<T>& xa = t.val(a);
  const int64_t c = xa.dim(xa.ndim() - 1), rows = xa.size() / c;
  Tensor<T> out = xa;
  for (int64_t r = 0; r < rows; ++r) {
    T* row = out.ptr() + r * c;
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int64_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const T inv = T(1) / sum;
    for (int64_t j = 0; j < c; ++j) row[j] *= inv;
  }
  Var self = t.next();
  return t.push(std::move(out), t.needs(a), [=](Tape<T>& tp) {
    if (!tp.needs(a)) return;
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& y = tp.val(self);
    Tensor<T>& ga = tp.grad(a);
    for (int64_t r = 0; r < rows; ++r) {
      const T *gr = g.ptr() + r * c, *yr = y.ptr() + r * c;
      T dot = T(0);
      for (int64_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
      T* gar = ga.ptr() + r * c;
      for (int64_t j = 0; j < c; ++j) gar[j] += yr[j] * (gr[j] - dot);
    }
  });
}

// Layer normalization over the last axis: y = (x - mu)/sqrt(var + eps) * gamma + beta.
template <typename T>
Var layer_norm(Tape<T>& t, Var a, Var gamma, Var beta, T eps = T(1e-5)) {
  const Tensor<T>& xa = t.val(a);
  const Tensor<T>&xg = t.val(gamma), &xb = t.val(beta);
  const int64_t c = xa.dim(xa.ndim() - 1);
  if (xg.size() != c || xb.size() != c) throw ContractError("layer_norm: gamma/beta must be (C)");
  const int64_t rows = xa.size() / c;
  Tensor<T> out(xa.shape);
  Tensor<T> xhat(xa.shape);
  std::vector<T> inv_std(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xa.ptr() + r * c;
    T mu = T(0);
    for (int64_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (int64_t j = 0; j < c; ++j) {
      const T d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < c; ++j) {
      const T xh = (row[j] - mu) * is;
      xhat[r * c + j] = xh;
      out[r * c + j] = xh * xg[j] + xb[j];
    }
  }
  const bool ng = t.needs(a) || t.needs(gamma) || t.needs(beta);
  Var self = t.next();
  auto xhat_s = std::make_shared<Tensor<T>>(std::move(xhat));
  auto istd_s = std::make_shared<std::vector<T>>(std::move(inv_std));
  return t.push(std::move(out), ng, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& vg = tp.val(gamma);
    const Tensor<T>& xh = *xhat_s;
    for (int64_t r = 0; r < rows; ++r) {
      const T* gr = g.ptr() + r * c;
      const T* xhr = xh.ptr() + r * c;
      if (tp.needs(gamma)) {
        Tensor<T>& gg = tp.grad(gamma);
        for (int64_t j = 0; j < c; ++j) gg[j] += gr[j] * xhr[j];
      }
      if (tp.needs(beta)) {
        Tensor<T>& gb = tp.grad(beta);
        for (int64_t j = 0; j < c; ++j) gb[j] += gr[j];
      }
      if (tp.needs(a)) {
        Tensor<T>& ga = tp.grad(a);
        T sum_dxh = T(0), sum_dxh_xh = T(0);
        for (int64_t j = 0; j < c; ++j) {
          const T dxh = gr[j] * vg[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xhr[j];
        }
        const T is = (*istd_s)[static_cast<size_t>(r)];
        const T inv_c = T(1) / static_cast<T>(c);
        for (int64_t j = 0; j < c; ++j) {
          const T dxh = gr[j] * vg[j];
          ga[r * c + j] += is * (dxh - inv_c * sum_dxh - xhr[j] * inv_c * sum_dxh_xh);
        }
      }
    }
  });
}

// Instance normalization for (B, C, spatial...) tensors: statistics per
// (sample, channel) over the spatial axes; affine per channel.
template <typename T>
Var instance_norm(Tape<T>& t, Var a, Var gamma, Var beta, T eps = T(1e-5)) {
  const Tensor<T>& xa = t.val(a);
  if (xa.ndim() < 3) throw ContractError("instance_norm expects (B,C,spatial...)");
  const int64_t b = xa.dim(0), c = xa.dim(1);
  const int64_t m = xa.size() / (b * c);
  const Tensor<T>&xg = t.val(gamma), &xb = t.val(beta);
  if (xg.size() != c || xb.size() != c)
    throw ContractError("instance_norm: gamma/beta must be (C)");
  Tensor<T> out(xa.shape);
  Tensor<T> xhat(xa.shape);
  std::vector<T> inv_std(static_cast<size_t>(b * c));
  for (int64_t g0 = 0; g0 < b * c; ++g0) {
    const T* row = xa.ptr() + g0 * m;
    T mu = T(0);
    for (int64_t j = 0; j < m; ++j) mu += row[j];
    mu /= static_cast<T>(m);
    T var = T(0);
    for (int64_t j = 0; j < m; ++j) {
      const T d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(m);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(g0)] = is;
    const T ga_c = xg[g0 % c], be_c = xb[g0 % c];
    for (int64_t j = 0; j < m; ++j) {
      const T xh = (row[j] - mu) * is;
      xhat[g0 * m + j] = xh;
      out[g0 * m + j] = xh * ga_c + be_c;
    }
  }
  const bool ng = t.needs(a) || t.needs(gamma) || t.needs(beta);
  Var self = t.next();
  auto xhat_s = std::make_shared<Tensor<T>>(std::move(xhat));
  auto istd_s = std::make_shared<std::vector<T>>(std::move(inv_std));
  return t.push(std::move(out), ng, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& vg = tp.val(gamma);
    const Tensor<T>& xh = *xhat_s;
    for (int64_t g0 = 0; g0 < b * c; ++g0) {
      const T* gr = g.ptr() + g0 * m;
      const T* xhr = xh.ptr() + g0 * m;
      const int64_t ch = g0 % c;
      if (tp.needs(gamma)) {
        Tensor<T>& gg = tp.grad(gamma);
        T s = T(0);
        for (int64_t j = 0; j < m; ++j) s += gr[j] * xhr[j];
        gg[ch] += s;
      }
      if (tp.needs(beta)) {
        Tensor<T>& gb = tp.grad(beta);
        T s = T(0);
        for (int64_t j = 0; j < m; ++j) s += gr[j];
        gb[ch] += s;
      }
      if (tp.needs(a)) {
        Tensor<T>& ga = tp.grad(a);
        const T w = vg[ch];
        T sum_dxh = T(0), sum_dxh_xh = T(0);
        for (int64_t j = 0; j < m; ++j) {
          const T dxh = gr[j] * w;
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xhr[j];
        }
        const T is = (*istd_s)[static_cast<size_t>(g0)];
        const T inv_m = T(1) / static_cast<T>(m);
        for (int64_t j = 0; j < m; ++j) {
          const T dxh = gr[j] * w;
          ga[g0 * m + j] += is * (dxh - inv_m * sum_dxh - xhr[j] * inv_m * sum_dxh_xh);
        }
      }
    }
  });
}

// Scaled dot-product attention over (heads, T_q, Dh) queries against
// (heads, T_k, Dh) keys/values. Row max is subtracted before
// exponentiation. `causal` masks positions j > i (requires T_q == T_k).
template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, bool causal = false) {
  const Tensor<T>&xq = t.val(q), &xk = t.val(k), &xv = t.val(v);
  if (xq.ndim() != 3 || xk.ndim() != 3 || xv.ndim() != 3)
    throw ContractError("attention expects (heads, tokens, dim) inputs");
  const int64_t nh = xq.dim(0), tq = xq.dim(1), dh = xq.dim(2), tk = xk.dim(1);
  if (xk.dim(0) != nh || xv.dim(0) != nh || xk.dim(2) != dh || xv.dim(1) != tk)
    throw ContractError("attention: q " + shape_str(xq.shape) + ", k " + shape_str(xk.shape) +
                        ", v " + shape_str(xv.shape) + " do not conform");
  const int64_t dv = xv.dim(2);
  if (causal && tq != tk) throw ContractError("attention: causal mask requires square scores");
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(dh));

  Tensor<T> probs({nh, tq, tk});
  Tensor<T> out({nh, tq, dv});
  for (int64_t h = 0; h < nh; ++h) {
    const T* qh = xq.ptr() + h * tq * dh;
    const T* kh = xk.ptr() + h * tk * dh;
    const T* vh = xv.ptr() + h * tk * dv;
    T* ph = probs.ptr() + h * tq * tk;
    // scores = q k^T / sqrt(d)
    gemm(false, true, static_cast<int>(tq), static_cast<int>(tk), static_cast<int>(dh),
         inv_sqrt_d, qh, static_cast<int>(dh), kh, static_cast<int>(dh), T(0), ph,
         static_cast<int>(tk));
    for (int64_t i = 0; i < tq; ++i) {
      T* row = ph + i * tk;
      const int64_t lim = causal ? i + 1 : tk;
      T mx = row[0];
      for (int64_t j = 1; j < lim; ++j) mx = std::max(mx, row[j]);
      T sum = T(0);
      for (int64_t j = 0; j < lim; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      const T inv = T(1) / sum;
      for (int64_t j = 0; j < lim; ++j) row[j] *= inv;
      for (int64_t j = lim; j < tk; ++j) row[j] = T(0);
    }
    gemm(false, false, static_cast<int>(tq), static_cast<int>(dv), static_cast<int>(tk), T(1),
         ph, static_cast<int>(tk), vh, static_cast<int>(dv), T(0), out.ptr() + h * tq * dv,
         static_cast<int>(dv));
  }
  const bool ng = t.needs(q) || t.needs(k) || t.needs(v);
  Var self = t.next();
  auto probs_s = std::make_shared<Tensor<T>>(std::move(probs));
  return t.push(std::move(out), ng, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(self);  // (nh, tq, dv)
    const Tensor<T>&vq = tp.val(q), &vk = tp.val(k), &vv = tp.val(v);
    const Tensor<T>& p = *probs_s;
    Tensor<T> dp({tq, tk});
    Tensor<T> ds({tq, tk});
    for (int64_t h = 0; h < nh; ++h) {
      const T* gh = g.ptr() + h * tq * dv;
      const T* ph = p.ptr() + h * tq * tk;
      const T* vh = vv.ptr() + h * tk * dv;
      if (tp.needs(v)) {
        Tensor<T>& gv = tp.grad(v);
        gemm(true, false, static_cast<int>(tk), static_cast<int>(dv), static_cast<int>(tq), T(1),
             ph, static_cast<int>(tk), gh, static_cast<int>(dv), T(1), gv.ptr() + h * tk * dv,
             static_cast<int>(dv));
      }
      // dP = G V^T; dS = P o (dP - rowsum(dP o P))
      gemm(false, true, static_cast<int>(tq), static_cast<int>(tk), static_cast<int>(dv), T(1),
           gh, static_cast<int>(dv), vh, static_cast<int>(dv), T(0), dp.ptr(),
           static_cast<int>(tk));
      for (int64_t i = 0; i < tq; ++i) {
        const T* pr = ph + i * tk;
        const T* dpr = dp.ptr() + i * tk;
        T dot = T(0);
        for (int64_t j = 0; j < tk; ++j) dot += dpr[j] * pr[j];
        T* dsr = ds.ptr() + i * tk;
        for (int64_t j = 0; j < tk; ++j) dsr[j] = pr[j] * (dpr[j] - dot) * inv_sqrt_d;
      }
      if (tp.needs(q)) {
        Tensor<T>& gq = tp.grad(q);
        gemm(false, false, static_cast<int>(tq), static_cast<int>(dh), static_cast<int>(tk),
             T(1), ds.ptr(), static_cast<int>(tk), vk.ptr() + h * tk * dh,
             static_cast<int>(dh), T(1), gq.ptr() + h * tq * dh, static_cast<int>(dh));
      }
      if (tp.needs(k)) {
        Tensor<T>& gk = tp.grad(k);
        gemm(true, false, static_cast<int>(tk), static_cast<int>(dh), static_cast<int>(tq), T(1),
             ds.ptr(), static_cast<int>(tk), vq.ptr() + h * tq * dh, static_cast<int>(dh), T(1),
             gk.ptr() + h * tk * dh, static_cast<int>(dh));
      }
    }
  });
}

// (T, H*Dh) -> (H, T, Dh)
template <typename T>
Var split_heads(Tape<T>& t, Var a, int64_t heads) {
  const Tensor<T>& xa = t.val(a);
  if (xa.ndim() != 2 || xa.dim(1) % heads != 0)
    throw ContractError("split_heads: " + shape_str(xa.shape) + " not divisible into " +
                        std::to_string(heads) + " heads");
  const int64_t tt = xa.dim(0), dh = xa.dim(1) / heads;
  Tensor<T> out({heads, tt, dh});
  for (int64_t i = 0; i < tt; ++i)
    for (int64_t h = 0; h < heads; ++h)
      std::copy(xa.ptr() + (i * heads + h) * dh, xa.ptr() + (i * heads + h + 1) * dh,
                out.ptr() + (h * tt + i) * dh);
  Var self = t.next();
  return t.push(std::move(out), t.needs(a), [=](Tape<T>& tp) {
    if (!tp.needs(a)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& ga = tp.grad(a);
    for (int64_t i = 0; i < tt; ++i)
      for (int64_t h = 0; h < heads; ++h) {
        const T* src = g.ptr() + (h * tt + i) * dh;
        T* dst = ga.ptr() + (i * heads + h) * dh;
        for (int64_t d = 0; d < dh; ++d) dst[d] += src[d];
      }
  });
}

// (H, T, Dh) -> (T, H*Dh)
template <typename T>
Var merge_heads(Tape<T>& t, Var a) {
  const Tensor<T>& xa = t.val(a);
  if (xa.ndim() != 3) throw ContractError("merge_heads expects (H,T,Dh)");
  const int64_t heads = xa.dim(0), tt = xa.dim(1), dh = xa.dim(2);
  Tensor<T> out({tt, heads * dh});
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < tt; ++i)
      std::copy(xa.ptr() + (h * tt + i) * dh, xa.ptr() + (h * tt + i + 1) * dh,
                out.ptr() + (i * heads + h) * dh);
  Var self = t.next();
  return t.push(std::move(out), t.needs(a), [=](Tape<T>& tp) {
    if (!tp.needs(a)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& ga = tp.grad(a);
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < tt; ++i) {
        const T* src = g.ptr() + (i * heads + h) * dh;
        T* dst = ga.ptr() + (h * tt + i) * dh;
        for (int64_t d = 0; d < dh; ++d) dst[d] += src[d];
      }
  });
}

// Embedding lookup: rows of `table` (V, D) selected by `ids`.
template <typename T>
Var embed(Tape<T>& t, Var table, const std::vector<int>& ids) {
  const Tensor<T>& xt = t.val(table);
  if (xt.ndim() != 2) throw ContractError("embed: table must be (V,D)");
  const int64_t v = xt.dim(0), d = xt.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ContractError("embed: id " + std::to_string(id) + " outside table of " +
                          std::to_string(v));
  Tensor<T> out({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(xt.ptr() + ids[i] * d, xt.ptr() + (ids[i] + 1) * d,
              out.ptr() + static_cast<int64_t>(i) * d);
  std::vector<int> ids_copy = ids;
  Var self = t.next();
  return t.push(std::move(out), t.needs(table), [=](Tape<T>& tp) {
    if (!tp.needs(table)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gt = tp.grad(table);
    for (size_t i = 0; i < ids_copy.size(); ++i) {
      const T* src = g.ptr() + static_cast<int64_t>(i) * d;
      T* dst = gt.ptr() + ids_copy[i] * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var sum(Tape<T>& t, Var a) {
  const Tensor<T>& xa = t.val(a);
  T s = T(0);
  for (T v : xa.data) s += v;
  Var self = t.next();
  return t.push(Tensor<T>::scalar(s), t.needs(a), [=](Tape<T>& tp) {
    if (!tp.needs(a)) return;
    const T g = tp.grad(self)[0];
    Tensor<T>& ga = tp.grad(a);
    for (auto& v : ga.data) v += g;
  });
}

template <typename T>
Var mean(Tape<T>& t, Var a) {
  const Tensor<T>& xa = t.val(a);
  const T inv = T(1) / static_cast<T>(xa.size());
  T s = T(0);
  for (T v : xa.data) s += v;
  Var self = t.next();
  return t.push(Tensor<T>::scalar(s * inv), t.needs(a), [=](Tape<T>& tp) {
    if (!tp.needs(a)) return;
    const T g = tp.grad(self)[0] * inv;
    Tensor<T>& ga = tp.grad(a);
    for (auto& v : ga.data) v += g;
  });
}

}  // namespace ctvseg
