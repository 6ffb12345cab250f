#pragma once

#include <memory>
#include <vector>

#include "ctvseg/ops.hpp"

// 3D convolution family. conv3d uses chunked im2col + GEMM so the hot loop
// is a BLAS call; the transposed variant is its mirror (GEMM + col2im
// scatter). Layouts: activations (B, C, H, W, S) with S fastest; conv
// kernels (Cout, Cin, K, K, K); transposed kernels (Cin, Cout, K, K, K).

namespace ctvseg {

namespace detail {

struct ConvDims {
  int64_t b, cin, h, w, s;        // input
  int64_t cout, k, stride, pad;   // kernel
  int64_t oh, ow, os;             // output spatial
  int64_t vin, vout, kdim;        // voxel counts and Cin*K^3
};

inline ConvDims conv_dims(const Shape& x, const Shape& wt, int64_t stride, int64_t pad,
                          bool transposed) {
  if (x.size() != 5) throw ContractError("conv3d: input must be (B,C,H,W,S), got " + shape_str(x));
  if (wt.size() != 5 || wt[2] != wt[3] || wt[3] != wt[4])
    throw ContractError("conv3d: kernel must be (Co,Ci,K,K,K), got " + shape_str(wt));
  ConvDims d;
  d.b = x[0];
  d.cin = x[1];
  d.h = x[2];
  d.w = x[3];
  d.s = x[4];
  d.k = wt[2];
  d.stride = stride;
  d.pad = pad;
  if (!transposed) {
    if (wt[1] != d.cin)
      throw ContractError("conv3d: kernel expects " + std::to_string(wt[1]) +
                          " input channels, input has " + std::to_string(d.cin));
    d.cout = wt[0];
    d.oh = (d.h + 2 * pad - d.k) / stride + 1;
    d.ow = (d.w + 2 * pad - d.k) / stride + 1;
    d.os = (d.s + 2 * pad - d.k) / stride + 1;
    if (d.oh < 1 || d.ow < 1 || d.os < 1)
      throw ContractError("conv3d: kernel larger than padded input " + shape_str(x));
  } else {
    if (wt[0] != d.cin)
      throw ContractError("transposed conv3d: kernel expects " + std::to_string(wt[0]) +
                          " input channels, input has " + std::to_string(d.cin));
    d.cout = wt[1];
    d.oh = (d.h - 1) * stride + d.k - 2 * pad;
    d.ow = (d.w - 1) * stride + d.k - 2 * pad;
    d.os = (d.s - 1) * stride + d.k - 2 * pad;
    if (d.oh < 1 || d.ow < 1 || d.os < 1)
      throw ContractError("transposed conv3d: degenerate output for input " + shape_str(x));
  }
  d.vin = d.h * d.w * d.s;
  d.vout = d.oh * d.ow * d.os;
  d.kdim = d.cin * d.k * d.k * d.k;
  return d;
}

// Fill `col` (rows x kdim) for output voxels [v0, v0+rows) of one sample.
template <typename T>
void im2col_chunk(const T* x, const ConvDims& d, int64_t v0, int64_t rows, T* col) {
  const int64_t k = d.k, st = d.stride, pd = d.pad;
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t v = v0 + r;
    const int64_t oh = v / (d.ow * d.os);
    const int64_t ow = (v / d.os) % d.ow;
    const int64_t os = v % d.os;
    T* crow = col + r * d.kdim;
    for (int64_t ci = 0; ci < d.cin; ++ci) {
      const T* xc = x + ci * d.vin;
      for (int64_t kh = 0; kh < k; ++kh) {
        const int64_t ih = oh * st - pd + kh;
        const bool h_ok = ih >= 0 && ih < d.h;
        for (int64_t kw = 0; kw < k; ++kw) {
          const int64_t iw = ow * st - pd + kw;
          const bool hw_ok = h_ok && iw >= 0 && iw < d.w;
          T* dst = crow + ((ci * k + kh) * k + kw) * k;
          if (!hw_ok) {
            for (int64_t ks = 0; ks < k; ++ks) dst[ks] = T(0);
            continue;
          }
          const T* src = xc + (ih * d.w + iw) * d.s;
          for (int64_t ks = 0; ks < k; ++ks) {
            const int64_t is = os * st - pd + ks;
            dst[ks] = (is >= 0 && is < d.s) ? src[is] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add `col` (rows x kdim) back into dx for one sample.
template <typename T>
void col2im_chunk(const T* col, const ConvDims& d, int64_t v0, int64_t rows, T* dx) {
  const int64_t k = d.k, st = d.stride, pd = d.pad;
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t v = v0 + r;
    const int64_t oh = v / (d.ow * d.os);
    const int64_t ow = (v / d.os) % d.ow;
    const int64_t os = v % d.os;
    const T* crow = col + r * d.kdim;
    for (int64_t ci = 0; ci < d.cin; ++ci) {
      T* xc = dx + ci * d.vin;
      for (int64_t kh = 0; kh < k; ++kh) {
        const int64_t ih = oh * st - pd + kh;
        if (ih < 0 || ih >= d.h) continue;
        for (int64_t kw = 0; kw < k; ++kw) {
          const int64_t iw = ow * st - pd + kw;
          if (iw < 0 || iw >= d.w) continue;
          const T* src = crow + ((ci * k + kh) * k + kw) * k;
          T* dst = xc + (ih * d.w + iw) * d.s;
          for (int64_t ks = 0; ks < k; ++ks) {
            const int64_t is = os * st - pd + ks;
            if (is >= 0 && is < d.s) dst[is] += src[ks];
          }
        }
      }
    }
  }
}

constexpr int64_t kConvChunk = 4096;

}  // namespace detail

// conv3d with cubic kernel, uniform stride and symmetric zero padding.
// bias may be an invalid Var to omit it.
template <typename T>
Var conv3d(Tape<T>& t, Var x, Var w, Var bias, int64_t stride = 1, int64_t pad = 1) {
  const Tensor<T>&xv = t.val(x), &wv = t.val(w);
  const detail::ConvDims d = detail::conv_dims(xv.shape, wv.shape, stride, pad, false);
  const bool has_bias = bias.valid();
  if (has_bias && t.val(bias).size() != d.cout)
    throw ContractError("conv3d: bias must have Cout elements");

  Tensor<T> out({d.b, d.cout, d.oh, d.ow, d.os});
  std::vector<T> col(static_cast<size_t>(std::min(detail::kConvChunk, d.vout) * d.kdim));
  for (int64_t b = 0; b < d.b; ++b) {
    const T* xb = xv.ptr() + b * d.cin * d.vin;
    T* yb = out.ptr() + b * d.cout * d.vout;
    for (int64_t v0 = 0; v0 < d.vout; v0 += detail::kConvChunk) {
      const int64_t rows = std::min(detail::kConvChunk, d.vout - v0);
      detail::im2col_chunk(xb, d, v0, rows, col.data());
      // Y[cout, v0:v0+rows] = W (Cout x Kdim) * Col^T
      gemm(false, true, static_cast<int>(d.cout), static_cast<int>(rows),
           static_cast<int>(d.kdim), T(1), wv.ptr(), static_cast<int>(d.kdim), col.data(),
           static_cast<int>(d.kdim), T(0), yb + v0, static_cast<int>(d.vout));
    }
    if (has_bias) {
      const Tensor<T>& bv = t.val(bias);
      for (int64_t co = 0; co < d.cout; ++co) {
        T* row = yb + co * d.vout;
        const T bc = bv[co];
        for (int64_t v = 0; v < d.vout; ++v) row[v] += bc;
      }
    }
  }
  const bool ng = t.needs(x) || t.needs(w) || (has_bias && t.needs(bias));
  Var self = t.next();
  return t.push(std::move(out), ng, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>&vx = tp.val(x), &vw = tp.val(w);
    const bool need_x = tp.needs(x), need_w = tp.needs(w);
    const bool need_b = has_bias && tp.needs(bias);
    std::vector<T> col(static_cast<size_t>(std::min(detail::kConvChunk, d.vout) * d.kdim));
    std::vector<T> dcol(need_x ? col.size() : 0);
    for (int64_t b = 0; b < d.b; ++b) {
      const T* xb = vx.ptr() + b * d.cin * d.vin;
      const T* gb = g.ptr() + b * d.cout * d.vout;
      for (int64_t v0 = 0; v0 < d.vout; v0 += detail::kConvChunk) {
        const int64_t rows = std::min(detail::kConvChunk, d.vout - v0);
        if (need_w || need_x) detail::im2col_chunk(xb, d, v0, rows, col.data());
        if (need_w) {
          // dW += G[:, v0:] (Cout x rows) * Col (rows x Kdim)
          Tensor<T>& gw = tp.grad(w);
          gemm(false, false, static_cast<int>(d.cout), static_cast<int>(d.kdim),
               static_cast<int>(rows), T(1), gb + v0, static_cast<int>(d.vout), col.data(),
               static_cast<int>(d.kdim), T(1), gw.ptr(), static_cast<int>(d.kdim));
        }
        if (need_x) {
          // dCol = G[:, v0:]^T (rows x Cout) * W (Cout x Kdim)
          gemm(true, false, static_cast<int>(rows), static_cast<int>(d.kdim),
               static_cast<int>(d.cout), T(1), gb + v0, static_cast<int>(d.vout), vw.ptr(),
               static_cast<int>(d.kdim), T(0), dcol.data(), static_cast<int>(d.kdim));
          detail::col2im_chunk(dcol.data(), d, v0, rows,
                               tp.grad(x).ptr() + b * d.cin * d.vin);
        }
      }
      if (need_b) {
        Tensor<T>& gbias = tp.grad(bias);
        for (int64_t co = 0; co < d.cout; ++co) {
          const T* row = gb + co * d.vout;
          T s = T(0);
          for (int64_t v = 0; v < d.vout; ++v) s += row[v];
          gbias[co] += s;
        }
      }
    }
  });
}

// Transposed conv3d (fractionally strided). Kernel layout (Cin, Cout, K,K,K).
template <typename T>
Var conv3d_transposed(Tape<T>& t, Var x, Var w, Var bias, int64_t stride = 2, int64_t pad = 0) {
  const Tensor<T>&xv = t.val(x), &wv = t.val(w);
  const detail::ConvDims d = detail::conv_dims(xv.shape, wv.shape, stride, pad, true);
  const bool has_bias = bias.valid();
  if (has_bias && t.val(bias).size() != d.cout)
    throw ContractError("transposed conv3d: bias must have Cout elements");
  const int64_t ckdim = d.cout * d.k * d.k * d.k;  // columns of the scatter matrix

  // The scatter of Tmp[v_in, (co,kh,kw,ks)] into the output grid; also used
  // as the gather for the gradient.
  auto scatter = [d](const T* tmp, int64_t v0, int64_t rows, T* y, bool gather) {
    const int64_t k = d.k, st = d.stride, pd = d.pad;
    for (int64_t r = 0; r < rows; ++r) {
      const int64_t v = v0 + r;
      const int64_t ih = v / (d.w * d.s);
      const int64_t iw = (v / d.s) % d.w;
      const int64_t is = v % d.s;
      for (int64_t co = 0; co < d.cout; ++co) {
        T* yc = y + co * d.vout;
        for (int64_t kh = 0; kh < k; ++kh) {
          const int64_t oh = ih * st - pd + kh;
          if (oh < 0 || oh >= d.oh) continue;
          for (int64_t kw = 0; kw < k; ++kw) {
            const int64_t ow = iw * st - pd + kw;
            if (ow < 0 || ow >= d.ow) continue;
            for (int64_t ks = 0; ks < k; ++ks) {
              const int64_t os = is * st - pd + ks;
              if (os < 0 || os >= d.os) continue;
              const int64_t ti = r * (d.cout * k * k * k) + ((co * k + kh) * k + kw) * k + ks;
              const int64_t yi = (oh * d.ow + ow) * d.s * 0 + (oh * d.ow + ow) * d.os * 0 +
                                 oh * d.ow * d.os + ow * d.os + os;
              if (gather)
                const_cast<T*>(tmp)[ti] = yc[yi];
              else
                yc[yi] += tmp[ti];
            }
          }
        }
      }
    }
  };

  Tensor<T> out({d.b, d.cout, d.oh, d.ow, d.os});
  std::vector<T> tmp(static_cast<size_t>(std::min(detail::kConvChunk, d.vin) * ckdim));
  for (int64_t b = 0; b < d.b; ++b) {
    const T* xb = xv.ptr() + b * d.cin * d.vin;
    T* yb = out.ptr() + b * d.cout * d.vout;
    for (int64_t v0 = 0; v0 < d.vin; v0 += detail::kConvChunk) {
      const int64_t rows = std::min(detail::kConvChunk, d.vin - v0);
      // Tmp (rows x CoutK^3) = X[:, v0:]^T (rows x Cin) * W (Cin x CoutK^3)
      gemm(true, false, static_cast<int>(rows), static_cast<int>(ckdim),
           static_cast<int>(d.cin), T(1), xb + v0, static_cast<int>(d.vin), wv.ptr(),
           static_cast<int>(ckdim), T(0), tmp.data(), static_cast<int>(ckdim));
      scatter(tmp.data(), v0, rows, yb, false);
    }
    if (has_bias) {
      const Tensor<T>& bv = t.val(bias);
      for (int64_t co = 0; co < d.cout; ++co) {
        T* row = yb + co * d.vout;
        const T bc = bv[co];
        for (int64_t v = 0; v < d.vout; ++v) row[v] += bc;
      }
    }
  }
  const bool ng = t.needs(x) || t.needs(w) || (has_bias && t.needs(bias));
  Var self = t.next();
  return t.push(std::move(out), ng, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>&vx = tp.val(x), &vw = tp.val(w);
    const bool need_x = tp.needs(x), need_w = tp.needs(w);
    const bool need_b = has_bias && tp.needs(bias);
    std::vector<T> dtmp(static_cast<size_t>(std::min(detail::kConvChunk, d.vin) * ckdim));
    for (int64_t b = 0; b < d.b; ++b) {
      const T* gb = g.ptr() + b * d.cout * d.vout;
      const T* xb = vx.ptr() + b * d.cin * d.vin;
      for (int64_t v0 = 0; v0 < d.vin; v0 += detail::kConvChunk) {
        const int64_t rows = std::min(detail::kConvChunk, d.vin - v0);
        // dTmp[r, (co,k)] = G[co, scatter-target(r,k)]
        scatter(dtmp.data(), v0, rows, const_cast<T*>(gb), true);
        if (need_x) {
          // dX[:, v0:] (Cin x rows) = W (Cin x CoutK^3) * dTmp^T
          gemm(false, true, static_cast<int>(d.cin), static_cast<int>(rows),
               static_cast<int>(ckdim), T(1), vw.ptr(), static_cast<int>(ckdim), dtmp.data(),
               static_cast<int>(ckdim), T(1), tp.grad(x).ptr() + b * d.cin * d.vin + v0,
               static_cast<int>(d.vin));
        }
        if (need_w) {
          // dW (Cin x CoutK^3) += X[:, v0:] (Cin x rows) * dTmp (rows x CoutK^3)
          gemm(false, false, static_cast<int>(d.cin), static_cast<int>(ckdim),
               static_cast<int>(rows), T(1), xb + v0, static_cast<int>(d.vin), dtmp.data(),
               static_cast<int>(ckdim), T(1), tp.grad(w).ptr(), static_cast<int>(ckdim));
        }
      }
      if (need_b) {
        Tensor<T>& gbias = tp.grad(bias);
        for (int64_t co = 0; co < d.cout; ++co) {
          const T* row = gb + co * d.vout;
          T s = T(0);
          for (int64_t v = 0; v < d.vout; ++v) s += row[v];
          gbias[co] += s;
        }
      }
    }
  });
}

// Trilinear upsampling by an integer factor (align_corners=false sampling).
// Kept as the learned-upsampling ablation alternative.
template <typename T>
Var upsample_trilinear(Tape<T>& t, Var x, int64_t factor = 2) {
  const Tensor<T>& xv = t.val(x);
  if (xv.ndim() != 5) throw ContractError("upsample_trilinear: input must be (B,C,H,W,S)");
  const int64_t b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3), s = xv.dim(4);
  const int64_t oh = h * factor, ow = w * factor, os = s * factor;
  const int64_t vin = h * w * s, vout = oh * ow * os;

  struct Lin {
    int64_t i0, i1;
    T w0, w1;
  };
  auto axis_weights = [factor](int64_t out_n, int64_t in_n) {
    std::vector<Lin> ws(static_cast<size_t>(out_n));
    for (int64_t o = 0; o < out_n; ++o) {
      const double pos = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
      double fl = std::floor(pos);
      T frac = static_cast<T>(pos - fl);
      int64_t i0 = static_cast<int64_t>(fl);
      int64_t i1 = i0 + 1;
      if (i0 < 0) i0 = 0;
      if (i1 > in_n - 1) i1 = in_n - 1;
      ws[static_cast<size_t>(o)] = {i0, i1, T(1) - frac, frac};
    }
    return ws;
  };
  const auto wh = axis_weights(oh, h), ww = axis_weights(ow, w), ws = axis_weights(os, s);

  Tensor<T> out({b, c, oh, ow, os});
  for (int64_t bc = 0; bc < b * c; ++bc) {
    const T* xin = xv.ptr() + bc * vin;
    T* y = out.ptr() + bc * vout;
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j)
        for (int64_t kz = 0; kz < os; ++kz) {
          const auto &lh = wh[i], &lw = ww[j], &ls = ws[kz];
          T acc = T(0);
          for (int dh = 0; dh < 2; ++dh)
            for (int dw = 0; dw < 2; ++dw)
              for (int dz = 0; dz < 2; ++dz) {
                const int64_t ih = dh ? lh.i1 : lh.i0;
                const int64_t iw = dw ? lw.i1 : lw.i0;
                const int64_t is = dz ? ls.i1 : ls.i0;
                const T wgt = (dh ? lh.w1 : lh.w0) * (dw ? lw.w1 : lw.w0) * (dz ? ls.w1 : ls.w0);
                acc += wgt * xin[(ih * w + iw) * s + is];
              }
          y[(i * ow + j) * os + kz] = acc;
        }
  }
  Var self = t.next();
  auto wh_s = std::make_shared<std::vector<Lin>>(wh);
  auto ww_s = std::make_shared<std::vector<Lin>>(ww);
  auto ws_s = std::make_shared<std::vector<Lin>>(ws);
  return t.push(std::move(out), t.needs(x), [=](Tape<T>& tp) {
    if (!tp.needs(x)) return;
    const Tensor<T>& g = tp.grad(self);
    Tensor<T>& gx = tp.grad(x);
    for (int64_t bc = 0; bc < b * c; ++bc) {
      const T* gy = g.ptr() + bc * vout;
      T* gxp = gx.ptr() + bc * vin;
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j)
          for (int64_t kz = 0; kz < os; ++kz) {
            const auto &lh = (*wh_s)[i], &lw = (*ww_s)[j], &ls = (*ws_s)[kz];
            const T gv = gy[(i * ow + j) * os + kz];
            for (int dh = 0; dh < 2; ++dh)
              for (int dw = 0; dw < 2; ++dw)
                for (int dz = 0; dz < 2; ++dz) {
                  const int64_t ih = dh ? lh.i1 : lh.i0;
                  const int64_t iw = dw ? lw.i1 : lw.i0;
                  const int64_t is = dz ? ls.i1 : ls.i0;
                  const T wgt =
                      (dh ? lh.w1 : lh.w0) * (dw ? lw.w1 : lw.w0) * (dz ? ls.w1 : ls.w0);
                  gxp[(ih * w + iw) * s + is] += wgt * gv;
                }
          }
    }
  });
}

}  // namespace ctvseg
