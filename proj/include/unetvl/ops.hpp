#pragma once

#include <cstddef>
#include <vector>

#include "unetvl/tensor.hpp"

/// Differentiable tensor operations. Every op returns a fresh tensor and
/// never mutates its inputs. Binary ops require identical shapes and dtypes;
/// the only broadcasting is the explicit *_first / *_last vector forms.
namespace uvl {

// linear algebra --------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// out[n, h*dout + o] = sum_i x[n, h*din + i] * w[h, i, o] + b[h, o].
/// Block-diagonal (per-head) affine map; `b` may be undefined.
Tensor block_linear(const Tensor& x, const Tensor& w, const Tensor& b);

// layout ------------------------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
/// Reverses the order along `axis`.
Tensor flip(const Tensor& a, std::size_t axis = 0);
/// out[i] = a[index[i]]; backward scatter-adds.
Tensor gather(const Tensor& a, std::vector<std::size_t> index, Shape out_shape);
/// Concatenation along axis 0.
Tensor concat(const std::vector<Tensor>& parts);

// elementwise -------------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.01);
Tensor square(const Tensor& a);

/// x[..., k] (+|*) v[k]: v spans the last axis.
Tensor add_last(const Tensor& x, const Tensor& v);
Tensor mul_last(const Tensor& x, const Tensor& v);
/// x[c, ...] (+|*) v[c]: v spans the first axis.
Tensor add_first(const Tensor& x, const Tensor& v);
Tensor mul_first(const Tensor& x, const Tensor& v);

// reductions --------------------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sums over the last axis: [..., L] -> [...].
Tensor sum_last(const Tensor& a);

// normalization -----------------------------------------------------------------
Tensor softmax_last(const Tensor& a);
Tensor log_softmax_last(const Tensor& a);
/// Zero-mean unit-variance rows over the last axis (biased variance).
Tensor normalize_last(const Tensor& x, double eps = 1e-5);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Per-channel normalization over all spatial positions of a [C, ...] tensor.
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// convolution ---------------------------------------------------------------------
/// Cross-correlation. x: [Cin, H, W, D], w: [Cout, Cin, k, k, k].
Tensor conv3d(const Tensor& x, const Tensor& w, std::size_t stride = 1, std::size_t padding = 0);
/// Adjoint of conv3d with zero padding. x: [Ca, h, w, d], w: [Ca, Cb, k, k, k]
/// -> [Cb, (h-1)*stride+k, ...].
Tensor conv_transpose3d(const Tensor& x, const Tensor& w, std::size_t stride);

std::size_t conv_out_extent(std::size_t extent, std::size_t kernel, std::size_t stride,
                            std::size_t padding);

}  // namespace uvl
