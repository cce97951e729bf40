#pragma once

#include "mprvit/tensor.hpp"

namespace mprvit {

// Cross-correlation with zero padding. x: [B,Cin,H,W], w: [Cout,Cin,k,k],
// bias: [Cout] (pass an undefined tensor for no bias).
// H' = floor((H + 2*pad - k) / stride) + 1, likewise W'.
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                  int stride, int pad);

// Adjoint of conv2d. x: [B,Cin,H,W], w: [Cin,Cout,k,k], bias: [Cout].
// H' = (H - 1)*stride - 2*pad + k + out_pad. With shared weights and
// out_pad = 0, <conv2d(x; w), y> == <x, conv_transpose2d(y; w)> (bias excluded).
template <class S>
TensorT<S> conv_transpose2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                            int stride, int pad, int out_pad = 0);

// Per-(batch, channel) plane normalization with learnable per-channel affine.
// gamma, beta: [C].
template <class S>
TensorT<S> instance_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                         S eps = S(1e-5));

// Normalization over the last axis with learnable affine. gamma, beta: [D].
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps = S(1e-5));

// Separable bilinear resampling on a corner-aligned grid; differentiable.
template <class S>
TensorT<S> bilinear_resize(const TensorT<S>& x, std::size_t out_h, std::size_t out_w);

// Separable cubic-convolution resampling (Keys kernel, a = -0.5) on a
// corner-aligned grid. Border samples are linearly extrapolated so constants
// and degree-1 ramps are reproduced exactly. Data-preparation only: refuses
// inputs that participate in the tape.
template <class S>
TensorT<S> bicubic_resize(const TensorT<S>& x, std::size_t out_h, std::size_t out_w);

// Mean absolute difference; subgradient 0 at exact ties.
template <class S>
TensorT<S> l1_loss(const TensorT<S>& pred, const TensorT<S>& target);

}  // namespace mprvit
