#pragma once

#include "bfa/tensor.hpp"

namespace bfa {

// Convolution parameters. Weight layout (C_out, C_in/groups, k, k); bias is
// per output channel and optional. Semantics are cross-correlation (no kernel
// flip) with dilation 1.
struct ConvParams {
    Tensor weight;
    Tensor bias;  // undefined handle when absent
    int stride = 1;
    int padding = 0;
    int groups = 1;

    int out_channels() const { return weight.shape().n; }
    int in_channels() const { return weight.shape().c * groups; }
    int kernel() const { return weight.shape().h; }
};

Tensor conv2d(Tape* tape, const Tensor& x, const ConvParams& p);

// Depthwise convolution: one k x k kernel per channel, padding (k-1)/2 so the
// spatial size is preserved. weight (C,1,k,k); bias per channel or undefined.
Tensor depthwise_conv2d(Tape* tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

// GroupNorm over (C/groups, H, W) slices per sample, then per-channel affine.
Tensor group_norm(Tape* tape, const Tensor& x, int num_groups, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

// Samples x at real-valued coordinates. coords (N,2,Hp,Wp), channel 0 = y,
// channel 1 = x, in pixel units. Out-of-bounds neighbors read as 0. Output
// (N,C,Hp,Wp); differentiable w.r.t. both x and coords.
Tensor bilinear_sample(Tape* tape, const Tensor& x, const Tensor& coords);

// Deformable convolution (no modulation): every kernel tap samples at its
// base grid position plus a learned offset, bilinearly. offsets has 2*k*k
// channels ordered (dy0, dx0, dy1, dx1, ...) over taps in row-major kernel
// order, spatial size equal to the output size.
Tensor deformable_conv2d(Tape* tape, const Tensor& x, const ConvParams& p, const Tensor& offsets);

Tensor upsample_nearest2x(Tape* tape, const Tensor& x);
Tensor global_avg_pool(Tape* tape, const Tensor& x);  // -> (N,C,1,1)

// Output spatial size of a convolution along one axis.
int conv_out_size(int in, int k, int stride, int padding);

}  // namespace bfa
