#include "mprvit/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace mprvit {

namespace {

// Convolutions lower onto an im2col / col2im pair around a register-blocked
// GEMM. Kernels parallelize only over independent output slots; every
// accumulated sum runs in a fixed sequential order, so results are bitwise
// reproducible for any thread count.

struct ConvDims {
  int batch, cin, h, w, cout, k, stride, pad, oh, ow;
};

struct TConvDims {
  int batch, c1, h, w, c2, k, stride, pad, oh, ow;
};

// C[M,N] = (or +=) A[M,K] * B[K,N], four output rows per pass.
template <class S>
void gemm(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
  for (std::ptrdiff_t i0s = 0; i0s < static_cast<std::ptrdiff_t>((m + 3) / 4); ++i0s) {
    const std::size_t i0 = static_cast<std::size_t>(i0s) * 4;
    const std::size_t rows = std::min<std::size_t>(4, m - i0);
    S* c0 = c + i0 * n;
    if (!accumulate) std::fill(c0, c0 + rows * n, S(0));
    if (rows == 4) {
      S* c1 = c0 + n;
      S* c2 = c1 + n;
      S* c3 = c2 + n;
      const S* a0 = a + i0 * k;
      const S* a1 = a0 + k;
      const S* a2 = a1 + k;
      const S* a3 = a2 + k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const S v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
        const S* br = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) {
          const S bv = br[j];
          c0[j] += v0 * bv;
          c1[j] += v1 * bv;
          c2[j] += v2 * bv;
          c3[j] += v3 * bv;
        }
      }
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        const S* ar = a + (i0 + r) * k;
        S* cr = c0 + r * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const S av = ar[kk];
          const S* br = b + kk * n;
          for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
      }
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T. Dot-product loops do not vectorize under
// strict FP semantics, so B is transposed once and the axpy-form gemm runs.
template <class S>
void gemm_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<S> bt(k * n);
#pragma omp parallel for schedule(static) if (k * n > 65536)
  for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(n); ++j) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      bt[kk * n + static_cast<std::size_t>(j)] = b[static_cast<std::size_t>(j) * k + kk];
    }
  }
  gemm(a, bt.data(), c, m, k, n, true);
}

// C[K,N] = (or +=) A[M,K]^T * B[M,N].
template <class S>
void gemm_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
  for (std::ptrdiff_t kk = 0; kk < static_cast<std::ptrdiff_t>(k); ++kk) {
    S* cr = c + static_cast<std::size_t>(kk) * n;
    if (!accumulate) std::fill(cr, cr + n, S(0));
    for (std::size_t i = 0; i < m; ++i) {
      const S av = a[i * k + static_cast<std::size_t>(kk)];
      const S* br = b + i * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// Patch matrix layout: row (c, kh, kw), column (ph, pw) over pos_h x pos_w
// positions; entry = img[c][ph*stride + kh - pad][pw*stride + kw - pad] or 0
// outside. Covers conv2d forward (positions = output grid) and the
// transposed-conv backward (positions = the transposed input grid).
template <class S>
void im2col(const S* img, int channels, int img_h, int img_w, int k, int stride, int pad,
            int pos_h, int pos_w, S* cols) {
  const std::size_t npos = static_cast<std::size_t>(pos_h) * pos_w;
#pragma omp parallel for schedule(static) if (channels * k * k * npos > 16384)
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(channels); ++c) {
    const S* plane = img + static_cast<std::size_t>(c) * img_h * img_w;
    S* crow = cols + static_cast<std::size_t>(c) * k * k * npos;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw, crow += npos) {
        int pw_lo = 0;
        while (pw_lo < pos_w && pw_lo * stride + kw - pad < 0) ++pw_lo;
        int pw_hi = pos_w;
        while (pw_hi > pw_lo && (pw_hi - 1) * stride + kw - pad >= img_w) --pw_hi;
        for (int ph = 0; ph < pos_h; ++ph) {
          S* dst = crow + static_cast<std::size_t>(ph) * pos_w;
          const int ih = ph * stride + kh - pad;
          if (ih < 0 || ih >= img_h) {
            std::fill(dst, dst + pos_w, S(0));
            continue;
          }
          std::fill(dst, dst + pw_lo, S(0));
          std::fill(dst + pw_hi, dst + pos_w, S(0));
          const S* src = plane + static_cast<std::size_t>(ih) * img_w + (kw - pad);
          if (stride == 1) {
            std::copy(src + pw_lo, src + pw_hi, dst + pw_lo);
          } else {
            for (int pw = pw_lo; pw < pw_hi; ++pw) dst[pw] = src[pw * stride];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds patch rows back into the image. Each
// channel's rows touch only that channel's plane, so the channel loop is the
// parallel axis and accumulation order inside a plane is fixed.
template <class S>
void col2im(const S* cols, int channels, int img_h, int img_w, int k, int stride, int pad,
            int pos_h, int pos_w, S* img) {
  const std::size_t npos = static_cast<std::size_t>(pos_h) * pos_w;
#pragma omp parallel for schedule(static) if (channels * k * k * npos > 16384)
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(channels); ++c) {
    S* plane = img + static_cast<std::size_t>(c) * img_h * img_w;
    const S* crow = cols + static_cast<std::size_t>(c) * k * k * npos;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw, crow += npos) {
        int pw_lo = 0;
        while (pw_lo < pos_w && pw_lo * stride + kw - pad < 0) ++pw_lo;
        int pw_hi = pos_w;
        while (pw_hi > pw_lo && (pw_hi - 1) * stride + kw - pad >= img_w) --pw_hi;
        for (int ph = 0; ph < pos_h; ++ph) {
          const int ih = ph * stride + kh - pad;
          if (ih < 0 || ih >= img_h) continue;
          const S* src = crow + static_cast<std::size_t>(ph) * pos_w;
          S* dst = plane + static_cast<std::size_t>(ih) * img_w + (kw - pad);
          if (stride == 1) {
            for (int pw = pw_lo; pw < pw_hi; ++pw) dst[pw] += src[pw];
          } else {
            for (int pw = pw_lo; pw < pw_hi; ++pw) dst[pw * stride] += src[pw];
          }
        }
      }
    }
  }
}

template <class S>
void add_channel_bias(S* y, const S* bias, int channels, std::size_t plane) {
  if (!bias) return;
  for (int c = 0; c < channels; ++c) {
    S* row = y + static_cast<std::size_t>(c) * plane;
    const S bv = bias[c];
    for (std::size_t i = 0; i < plane; ++i) row[i] += bv;
  }
}

// y[b] = W[Cout, Cin k^2] x cols(x[b]) + bias
template <class S>
void conv2d_forward(const S* x, const S* w, const S* bias, const ConvDims& d, S* y) {
  const std::size_t kdim = static_cast<std::size_t>(d.cin) * d.k * d.k;
  const std::size_t npos = static_cast<std::size_t>(d.oh) * d.ow;
  std::vector<S> cols(kdim * npos);
  for (int b = 0; b < d.batch; ++b) {
    const S* xb = x + static_cast<std::size_t>(b) * d.cin * d.h * d.w;
    S* yb = y + static_cast<std::size_t>(b) * d.cout * npos;
    im2col(xb, d.cin, d.h, d.w, d.k, d.stride, d.pad, d.oh, d.ow, cols.data());
    gemm(w, cols.data(), yb, static_cast<std::size_t>(d.cout), kdim, npos, false);
    add_channel_bias(yb, bias, d.cout, npos);
  }
}

// dx[b] += col2im(W^T dy[b]); dw += sum_b dy[b] cols(x[b])^T; db += sum dy.
template <class S>
void conv2d_backward(const S* x, const S* w, const S* dy, const ConvDims& d, S* dx, S* dw, S* db) {
  const std::size_t kdim = static_cast<std::size_t>(d.cin) * d.k * d.k;
  const std::size_t npos = static_cast<std::size_t>(d.oh) * d.ow;
  std::vector<S> cols((dw || dx) ? kdim * npos : 0);
  for (int b = 0; b < d.batch; ++b) {
    const S* xb = x + static_cast<std::size_t>(b) * d.cin * d.h * d.w;
    const S* dyb = dy + static_cast<std::size_t>(b) * d.cout * npos;
    if (dw) {
      im2col(xb, d.cin, d.h, d.w, d.k, d.stride, d.pad, d.oh, d.ow, cols.data());
      gemm_nt(dyb, cols.data(), dw, static_cast<std::size_t>(d.cout), npos, kdim);
    }
    if (dx) {
      std::vector<S>& dcols = cols;
      if (dcols.empty()) dcols.resize(kdim * npos);
      gemm_tn(w, dyb, dcols.data(), static_cast<std::size_t>(d.cout), kdim, npos, false);
      col2im(dcols.data(), d.cin, d.h, d.w, d.k, d.stride, d.pad, d.oh, d.ow,
             dx + static_cast<std::size_t>(b) * d.cin * d.h * d.w);
    }
  }
  if (db) {
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < d.cout; ++oc) {
      double acc = 0.0;
      for (int b = 0; b < d.batch; ++b) {
        const S* row = dy + (static_cast<std::size_t>(b) * d.cout + oc) * npos;
        for (std::size_t i = 0; i < npos; ++i) acc += static_cast<double>(row[i]);
      }
      db[oc] += static_cast<S>(acc);
    }
  }
}

// out[b] = col2im(W^T[C2 k^2, C1] x[b]) + bias; positions are the input grid.
template <class S>
void tconv_forward(const S* x, const S* w, const S* bias, const TConvDims& d, S* y) {
  const std::size_t kdim = static_cast<std::size_t>(d.c2) * d.k * d.k;
  const std::size_t npos = static_cast<std::size_t>(d.h) * d.w;
  const std::size_t plane_out = static_cast<std::size_t>(d.oh) * d.ow;
  std::vector<S> cols(kdim * npos);
  for (int b = 0; b < d.batch; ++b) {
    const S* xb = x + static_cast<std::size_t>(b) * d.c1 * npos;
    S* yb = y + static_cast<std::size_t>(b) * d.c2 * plane_out;
    gemm_tn(w, xb, cols.data(), static_cast<std::size_t>(d.c1), kdim, npos, false);
    std::fill(yb, yb + static_cast<std::size_t>(d.c2) * plane_out, S(0));
    col2im(cols.data(), d.c2, d.oh, d.ow, d.k, d.stride, d.pad, d.h, d.w, yb);
    add_channel_bias(yb, bias, d.c2, plane_out);
  }
}

// dx[b] += W[C1, C2 k^2] cols(dy[b]); dw += sum_b x[b] cols(dy[b])^T.
template <class S>
void tconv_backward(const S* x, const S* w, const S* dy, const TConvDims& d, S* dx, S* dw, S* db) {
  const std::size_t kdim = static_cast<std::size_t>(d.c2) * d.k * d.k;
  const std::size_t npos = static_cast<std::size_t>(d.h) * d.w;
  const std::size_t plane_out = static_cast<std::size_t>(d.oh) * d.ow;
  std::vector<S> cols((dx || dw) ? kdim * npos : 0);
  for (int b = 0; b < d.batch; ++b) {
    const S* xb = x + static_cast<std::size_t>(b) * d.c1 * npos;
    const S* dyb = dy + static_cast<std::size_t>(b) * d.c2 * plane_out;
    if (dx || dw) {
      im2col(dyb, d.c2, d.oh, d.ow, d.k, d.stride, d.pad, d.h, d.w, cols.data());
    }
    if (dx) {
      S* dxb = dx + static_cast<std::size_t>(b) * d.c1 * npos;
      gemm(w, cols.data(), dxb, static_cast<std::size_t>(d.c1), kdim, npos, true);
    }
    if (dw) {
      gemm_nt(xb, cols.data(), dw, static_cast<std::size_t>(d.c1), npos, kdim);
    }
  }
  if (db) {
#pragma omp parallel for schedule(static)
    for (int c2 = 0; c2 < d.c2; ++c2) {
      double acc = 0.0;
      for (int b = 0; b < d.batch; ++b) {
        const S* row = dy + (static_cast<std::size_t>(b) * d.c2 + c2) * plane_out;
        for (std::size_t i = 0; i < plane_out; ++i) acc += static_cast<double>(row[i]);
      }
      db[c2] += static_cast<S>(acc);
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d / conv_transpose2d
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias, int stride,
                  int pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("conv2d: expected x[B,Cin,H,W], w[Cout,Cin,k,k]");
  }
  ConvDims d;
  d.batch = static_cast<int>(x.extent(0));
  d.cin = static_cast<int>(x.extent(1));
  d.h = static_cast<int>(x.extent(2));
  d.w = static_cast<int>(x.extent(3));
  d.cout = static_cast<int>(w.extent(0));
  d.k = static_cast<int>(w.extent(2));
  d.stride = stride;
  d.pad = pad;
  if (w.extent(1) != static_cast<std::size_t>(d.cin) || w.extent(3) != static_cast<std::size_t>(d.k)) {
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != static_cast<std::size_t>(d.cout))) {
    throw DimensionError("conv2d: bias must be [Cout]");
  }
  d.oh = (d.h + 2 * pad - d.k) / stride + 1;
  d.ow = (d.w + 2 * pad - d.k) / stride + 1;
  if (d.h + 2 * pad - d.k < 0 || d.w + 2 * pad - d.k < 0 || d.oh < 1 || d.ow < 1) {
    throw DimensionError("conv2d: output extent < 1 for input " + shape_str(x.shape()) +
                         ", kernel " + std::to_string(d.k) + ", stride " + std::to_string(stride) +
                         ", pad " + std::to_string(pad));
  }
  std::vector<S> out(static_cast<std::size_t>(d.batch) * d.cout * d.oh * d.ow);
  conv2d_forward(x.data().data(), w.data().data(), bias.defined() ? bias.data().data() : nullptr, d,
                 out.data());
  const bool has_bias = bias.defined();
  auto bw = [d, has_bias](detail::TensorNode<S>& node) {
    auto& px = *node.parents[0];
    auto& pw = *node.parents[1];
    detail::TensorNode<S>* pb = has_bias ? node.parents[2].get() : nullptr;
    S* dx = nullptr;
    S* dw = nullptr;
    S* db = nullptr;
    if (px.requires_grad) {
      px.ensure_grad();
      dx = px.grad.data();
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      dw = pw.grad.data();
    }
    if (pb && pb->requires_grad) {
      pb->ensure_grad();
      db = pb->grad.data();
    }
    conv2d_backward(px.value.data(), pw.value.data(), node.grad.data(), d, dx, dw, db);
  };
  std::vector<TensorT<S>> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return detail::make_op<S>(
      Shape{static_cast<std::size_t>(d.batch), static_cast<std::size_t>(d.cout),
            static_cast<std::size_t>(d.oh), static_cast<std::size_t>(d.ow)},
      std::move(out), std::move(parents), bw, "conv2d");
}

template <class S>
TensorT<S> conv_transpose2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                            int stride, int pad, int out_pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("conv_transpose2d: expected x[B,Cin,H,W], w[Cin,Cout,k,k]");
  }
  if (stride != 1 && stride != 2) {
    throw ContractError("conv_transpose2d: stride must be 1 or 2");
  }
  TConvDims d;
  d.batch = static_cast<int>(x.extent(0));
  d.c1 = static_cast<int>(x.extent(1));
  d.h = static_cast<int>(x.extent(2));
  d.w = static_cast<int>(x.extent(3));
  d.c2 = static_cast<int>(w.extent(1));
  d.k = static_cast<int>(w.extent(2));
  d.stride = stride;
  d.pad = pad;
  if (w.extent(0) != static_cast<std::size_t>(d.c1) || w.extent(3) != static_cast<std::size_t>(d.k)) {
    throw DimensionError("conv_transpose2d: weight " + shape_str(w.shape()) +
                         " does not match input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != static_cast<std::size_t>(d.c2))) {
    throw DimensionError("conv_transpose2d: bias must be [Cout]");
  }
  d.oh = (d.h - 1) * stride - 2 * pad + d.k + out_pad;
  d.ow = (d.w - 1) * stride - 2 * pad + d.k + out_pad;
  if (d.oh < 1 || d.ow < 1) {
    throw DimensionError("conv_transpose2d: output extent < 1");
  }
  std::vector<S> out(static_cast<std::size_t>(d.batch) * d.c2 * d.oh * d.ow);
  tconv_forward(x.data().data(), w.data().data(), bias.defined() ? bias.data().data() : nullptr, d,
                out.data());
  const bool has_bias = bias.defined();
  auto bw = [d, has_bias](detail::TensorNode<S>& node) {
    auto& px = *node.parents[0];
    auto& pw = *node.parents[1];
    detail::TensorNode<S>* pb = has_bias ? node.parents[2].get() : nullptr;
    S* dx = nullptr;
    S* dw = nullptr;
    S* db = nullptr;
    if (px.requires_grad) {
      px.ensure_grad();
      dx = px.grad.data();
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      dw = pw.grad.data();
    }
    if (pb && pb->requires_grad) {
      pb->ensure_grad();
      db = pb->grad.data();
    }
    tconv_backward(px.value.data(), pw.value.data(), node.grad.data(), d, dx, dw, db);
  };
  std::vector<TensorT<S>> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return detail::make_op<S>(
      Shape{static_cast<std::size_t>(d.batch), static_cast<std::size_t>(d.c2),
            static_cast<std::size_t>(d.oh), static_cast<std::size_t>(d.ow)},
      std::move(out), std::move(parents), bw, "conv_transpose2d");
}

// ---------------------------------------------------------------------------
// instance_norm / layer_norm
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> instance_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, S eps) {
  if (x.rank() != 4) throw DimensionError("instance_norm: expected [B,C,H,W]");
  const std::size_t b = x.extent(0), c = x.extent(1), plane = x.extent(2) * x.extent(3);
  if (plane < 1) throw DimensionError("instance_norm: empty plane");
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("instance_norm: affine params must be [C]");
  }
  std::vector<S> out(x.numel());
  // Saved statistics for the backward pass: per (b,c) mean and 1/sqrt(var+eps).
  auto stats = std::make_shared<std::vector<S>>(2 * b * c);
  const S* px = x.data().data();
  const S* pg = gamma.data().data();
  const S* pb = beta.data().data();
#pragma omp parallel for collapse(2) schedule(static)
  for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(b); ++bi) {
    for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(c); ++ci) {
      const std::size_t base = (static_cast<std::size_t>(bi) * c + ci) * plane;
      double m = 0.0;
      for (std::size_t i = 0; i < plane; ++i) m += static_cast<double>(px[base + i]);
      m /= static_cast<double>(plane);
      double var = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double dlt = static_cast<double>(px[base + i]) - m;
        var += dlt * dlt;
      }
      var /= static_cast<double>(plane);
      const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
      const S g = pg[ci], bt = pb[ci];
      for (std::size_t i = 0; i < plane; ++i) {
        out[base + i] = g * static_cast<S>((static_cast<double>(px[base + i]) - m) * inv) + bt;
      }
      (*stats)[2 * (static_cast<std::size_t>(bi) * c + ci)] = static_cast<S>(m);
      (*stats)[2 * (static_cast<std::size_t>(bi) * c + ci) + 1] = static_cast<S>(inv);
    }
  }
  auto bw = [b, c, plane, stats](detail::TensorNode<S>& node) {
    auto& px = *node.parents[0];
    auto& pg = *node.parents[1];
    auto& pbt = *node.parents[2];
    const S* g = pg.value.data();
    if (px.requires_grad) {
      px.ensure_grad();
#pragma omp parallel for collapse(2) schedule(static)
      for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(b); ++bi) {
        for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(c); ++ci) {
          const std::size_t pc = static_cast<std::size_t>(bi) * c + ci;
          const std::size_t base = pc * plane;
          const double m = static_cast<double>((*stats)[2 * pc]);
          const double inv = static_cast<double>((*stats)[2 * pc + 1]);
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t i = 0; i < plane; ++i) {
            const double dy = static_cast<double>(node.grad[base + i]) * static_cast<double>(g[ci]);
            const double xhat = (static_cast<double>(px.value[base + i]) - m) * inv;
            sum_dy += dy;
            sum_dy_xhat += dy * xhat;
          }
          const double n = static_cast<double>(plane);
          for (std::size_t i = 0; i < plane; ++i) {
            const double dy = static_cast<double>(node.grad[base + i]) * static_cast<double>(g[ci]);
            const double xhat = (static_cast<double>(px.value[base + i]) - m) * inv;
            px.grad[base + i] +=
                static_cast<S>(inv * (dy - sum_dy / n - xhat * sum_dy_xhat / n));
          }
        }
      }
    }
    if (pg.requires_grad || pbt.requires_grad) {
      if (pg.requires_grad) pg.ensure_grad();
      if (pbt.requires_grad) pbt.ensure_grad();
      for (std::size_t ci = 0; ci < c; ++ci) {
        double dg = 0.0, db = 0.0;
        for (std::size_t bi = 0; bi < b; ++bi) {
          const std::size_t pc = bi * c + ci;
          const std::size_t base = pc * plane;
          const double m = static_cast<double>((*stats)[2 * pc]);
          const double inv = static_cast<double>((*stats)[2 * pc + 1]);
          for (std::size_t i = 0; i < plane; ++i) {
            const double dy = static_cast<double>(node.grad[base + i]);
            const double xhat = (static_cast<double>(px.value[base + i]) - m) * inv;
            dg += dy * xhat;
            db += dy;
          }
        }
        if (pg.requires_grad) pg.grad[ci] += static_cast<S>(dg);
        if (pbt.requires_grad) pbt.grad[ci] += static_cast<S>(db);
      }
    }
  };
  return detail::make_op<S>(x.shape(), std::move(out), {x, gamma, beta}, bw, "instance_norm");
}

template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, S eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm: empty tensor");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) throw DimensionError("layer_norm: affine params must be [D]");
  const std::size_t rows = x.numel() / d;
  std::vector<S> out(x.numel());
  auto stats = std::make_shared<std::vector<S>>(2 * rows);
  const S* px = x.data().data();
  const S* pg = gamma.data().data();
  const S* pb = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += static_cast<double>(px[base + j]);
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double dlt = static_cast<double>(px[base + j]) - m;
      var += dlt * dlt;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    for (std::size_t j = 0; j < d; ++j) {
      out[base + j] = pg[j] * static_cast<S>((static_cast<double>(px[base + j]) - m) * inv) + pb[j];
    }
    (*stats)[2 * r] = static_cast<S>(m);
    (*stats)[2 * r + 1] = static_cast<S>(inv);
  }
  auto bw = [rows, d, stats](detail::TensorNode<S>& node) {
    auto& px = *node.parents[0];
    auto& pg = *node.parents[1];
    auto& pbt = *node.parents[2];
    const S* g = pg.value.data();
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * d;
        const double m = static_cast<double>((*stats)[2 * r]);
        const double inv = static_cast<double>((*stats)[2 * r + 1]);
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dy = static_cast<double>(node.grad[base + j]) * static_cast<double>(g[j]);
          const double xhat = (static_cast<double>(px.value[base + j]) - m) * inv;
          sum_dy += dy;
          sum_dy_xhat += dy * xhat;
        }
        const double n = static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double dy = static_cast<double>(node.grad[base + j]) * static_cast<double>(g[j]);
          const double xhat = (static_cast<double>(px.value[base + j]) - m) * inv;
          px.grad[base + j] += static_cast<S>(inv * (dy - sum_dy / n - xhat * sum_dy_xhat / n));
        }
      }
    }
    if (pg.requires_grad || pbt.requires_grad) {
      if (pg.requires_grad) pg.ensure_grad();
      if (pbt.requires_grad) pbt.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * d;
        const double m = static_cast<double>((*stats)[2 * r]);
        const double inv = static_cast<double>((*stats)[2 * r + 1]);
        for (std::size_t j = 0; j < d; ++j) {
          const double dy = static_cast<double>(node.grad[base + j]);
          const double xhat = (static_cast<double>(px.value[base + j]) - m) * inv;
          if (pg.requires_grad) pg.grad[j] += static_cast<S>(dy * xhat);
          if (pbt.requires_grad) pbt.grad[j] += static_cast<S>(dy);
        }
      }
    }
  };
  return detail::make_op<S>(x.shape(), std::move(out), {x, gamma, beta}, bw, "layer_norm");
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

namespace {

// Corner-aligned 1-d sample positions: maps output index to input coordinate.
inline double corner_aligned_pos(std::size_t i, std::size_t out_n, std::size_t in_n) {
  if (out_n <= 1) return 0.0;
  return static_cast<double>(i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
}

struct LinearTap {
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<LinearTap> linear_taps(std::size_t out_n, std::size_t in_n) {
  std::vector<LinearTap> taps(out_n);
  for (std::size_t i = 0; i < out_n; ++i) {
    const double p = corner_aligned_pos(i, out_n, in_n);
    std::size_t i0 = static_cast<std::size_t>(p);
    if (i0 + 1 >= in_n) i0 = in_n >= 2 ? in_n - 2 : 0;
    const double f = p - static_cast<double>(i0);
    taps[i] = {i0, std::min(i0 + 1, in_n - 1), 1.0 - f, f};
  }
  return taps;
}

// Keys cubic-convolution kernel, a = -0.5.
inline double keys_weight(double t) {
  t = std::abs(t);
  if (t < 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
  if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
  return 0.0;
}

struct CubicTap {
  int base;  // first of 4 sample indices (may be out of range; extrapolated)
  double w[4];
};

std::vector<CubicTap> cubic_taps(std::size_t out_n, std::size_t in_n) {
  std::vector<CubicTap> taps(out_n);
  for (std::size_t i = 0; i < out_n; ++i) {
    const double p = corner_aligned_pos(i, out_n, in_n);
    const int i1 = static_cast<int>(std::floor(p));
    const double f = p - i1;
    CubicTap t;
    t.base = i1 - 1;
    t.w[0] = keys_weight(f + 1.0);
    t.w[1] = keys_weight(f);
    t.w[2] = keys_weight(f - 1.0);
    t.w[3] = keys_weight(f - 2.0);
    taps[i] = t;
  }
  return taps;
}

// Linear extrapolation beyond the border keeps constants and degree-1 ramps
// exact at the image edge.
template <class S>
inline double sample_extrapolated(const S* row, std::ptrdiff_t n, std::ptrdiff_t i) {
  if (i < 0) return 2.0 * static_cast<double>(row[0]) - static_cast<double>(row[std::min<std::ptrdiff_t>(-i, n - 1)]);
  if (i >= n) {
    const std::ptrdiff_t r = 2 * (n - 1) - i;
    return 2.0 * static_cast<double>(row[n - 1]) - static_cast<double>(row[std::max<std::ptrdiff_t>(r, 0)]);
  }
  return static_cast<double>(row[i]);
}

}  // namespace

template <class S>
TensorT<S> bilinear_resize(const TensorT<S>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw DimensionError("bilinear_resize: expected [B,C,H,W]");
  if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize: target extents must be >= 1");
  const std::size_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const auto ty = linear_taps(out_h, h);
  const auto tx = linear_taps(out_w, w);
  std::vector<S> out(b * c * out_h * out_w);
  const S* px = x.data().data();
  const std::size_t planes = b * c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(planes); ++p) {
    const S* src = px + static_cast<std::size_t>(p) * h * w;
    S* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const LinearTap& yt = ty[oy];
      const S* r0 = src + yt.i0 * w;
      const S* r1 = src + yt.i1 * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const LinearTap& xt = tx[ox];
        const double v = yt.w0 * (xt.w0 * r0[xt.i0] + xt.w1 * r0[xt.i1]) +
                         yt.w1 * (xt.w0 * r1[xt.i0] + xt.w1 * r1[xt.i1]);
        dst[oy * out_w + ox] = static_cast<S>(v);
      }
    }
  }
  auto bw = [b, c, h, w, out_h, out_w, ty, tx](detail::TensorNode<S>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const std::size_t planes = b * c;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
      S* gsrc = p.grad.data() + static_cast<std::size_t>(pi) * h * w;
      const S* gout = node.grad.data() + static_cast<std::size_t>(pi) * out_h * out_w;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const LinearTap& yt = ty[oy];
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const LinearTap& xt = tx[ox];
          const double g = static_cast<double>(gout[oy * out_w + ox]);
          gsrc[yt.i0 * w + xt.i0] += static_cast<S>(g * yt.w0 * xt.w0);
          gsrc[yt.i0 * w + xt.i1] += static_cast<S>(g * yt.w0 * xt.w1);
          gsrc[yt.i1 * w + xt.i0] += static_cast<S>(g * yt.w1 * xt.w0);
          gsrc[yt.i1 * w + xt.i1] += static_cast<S>(g * yt.w1 * xt.w1);
        }
      }
    }
  };
  return detail::make_op<S>(Shape{b, c, out_h, out_w}, std::move(out), {x}, bw, "bilinear_resize");
}

template <class S>
TensorT<S> bicubic_resize(const TensorT<S>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw DimensionError("bicubic_resize: expected [B,C,H,W]");
  if (out_h < 1 || out_w < 1) throw DimensionError("bicubic_resize: target extents must be >= 1");
  if (GradTape<S>::current().enabled() && x.requires_grad()) {
    throw ContractError("bicubic_resize: data-preparation op, not differentiable");
  }
  const std::size_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const auto ty = cubic_taps(out_h, h);
  const auto tx = cubic_taps(out_w, w);
  std::vector<S> out(b * c * out_h * out_w);
  const S* px = x.data().data();
  const std::size_t planes = b * c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(planes); ++p) {
    const S* src = px + static_cast<std::size_t>(p) * h * w;
    S* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    std::vector<double> col(4);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const CubicTap& yt = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const CubicTap& xt = tx[ox];
        // Separable: cubic along x for each of 4 rows, then cubic along y.
        for (int r = 0; r < 4; ++r) {
          const std::ptrdiff_t iy = yt.base + r;
          double acc = 0.0;
          if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h)) {
            const S* row = src + static_cast<std::size_t>(iy) * w;
            for (int q = 0; q < 4; ++q) {
              acc += xt.w[q] * sample_extrapolated(row, static_cast<std::ptrdiff_t>(w), xt.base + q);
            }
          } else {
            // Extrapolate the whole row linearly from the two edge rows.
            const std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h);
            std::ptrdiff_t e0, e1;
            if (iy < 0) {
              e0 = 0;
              e1 = std::min<std::ptrdiff_t>(-iy, hh - 1);
            } else {
              e0 = hh - 1;
              e1 = std::max<std::ptrdiff_t>(2 * (hh - 1) - iy, 0);
            }
            const S* row0 = src + static_cast<std::size_t>(e0) * w;
            const S* row1 = src + static_cast<std::size_t>(e1) * w;
            for (int q = 0; q < 4; ++q) {
              const double v0 = sample_extrapolated(row0, static_cast<std::ptrdiff_t>(w), xt.base + q);
              const double v1 = sample_extrapolated(row1, static_cast<std::ptrdiff_t>(w), xt.base + q);
              acc += xt.w[q] * (2.0 * v0 - v1);
            }
          }
          col[r] = acc;
        }
        double v = 0.0;
        for (int r = 0; r < 4; ++r) v += yt.w[r] * col[r];
        dst[oy * out_w + ox] = static_cast<S>(v);
      }
    }
  }
  return detail::make_op<S>(Shape{b, c, out_h, out_w}, std::move(out), {x}, nullptr, "bicubic_resize");
}

template <class S>
TensorT<S> l1_loss(const TensorT<S>& pred, const TensorT<S>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("l1_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
  }
  return mean(abs_val(sub(pred, target)));
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define MPRVIT_INSTANTIATE(S)                                                                     \
  template TensorT<S> conv2d<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&, int,    \
                                int);                                                            \
  template TensorT<S> conv_transpose2d<S>(const TensorT<S>&, const TensorT<S>&,                  \
                                          const TensorT<S>&, int, int, int);                     \
  template TensorT<S> instance_norm<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&,  \
                                       S);                                                       \
  template TensorT<S> layer_norm<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&, S); \
  template TensorT<S> bilinear_resize<S>(const TensorT<S>&, std::size_t, std::size_t);           \
  template TensorT<S> bicubic_resize<S>(const TensorT<S>&, std::size_t, std::size_t);            \
  template TensorT<S> l1_loss<S>(const TensorT<S>&, const TensorT<S>&);

MPRVIT_INSTANTIATE(float)
MPRVIT_INSTANTIATE(double)

#undef MPRVIT_INSTANTIATE

}  // namespace mprvit
