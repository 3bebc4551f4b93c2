#pragma once

#include <utility>

#include "evcseg/tensor.hpp"

namespace evcseg {

/// Convolution weights. For ordinary convolutions the kernel is laid out
/// (out_ch, in_ch, kd, kh, kw); transposed convolutions (upconv) use the
/// adjoint layout (in_ch, out_ch, kd, kh, kw) so a downconv kernel can be
/// shared verbatim. Bias has shape (out_ch, 1, 1, 1, 1).
struct ConvParams {
  Tensor5 kernel;
  Tensor5 bias;
  int stride = 1;
  int padding = 0;

  int kernel_out() const { return kernel.shape.n; }
  int kernel_in() const { return kernel.shape.c; }
};

struct ConvGrads {
  Tensor5 grad_x;
  Tensor5 grad_kernel;
  Tensor5 grad_bias;
};

/// Cross-correlation with stride and zero padding. Output spatial dims are
/// floor((d + 2*pad - k) / stride) + 1 per axis.
Tensor5 conv3d_forward(const Tensor5& x, const ConvParams& p);
ConvGrads conv3d_backward(const Tensor5& x, const ConvParams& p, const Tensor5& grad_out);

/// 2^3 kernel, stride 2: halves every spatial axis (which must be even).
Tensor5 downconv(const Tensor5& x, const ConvParams& p);
ConvGrads downconv_backward(const Tensor5& x, const ConvParams& p, const Tensor5& grad_out);

/// Transposed 2^3 stride-2 convolution: doubles every spatial axis. Its
/// linear part is the adjoint of downconv's for the same kernel tensor.
Tensor5 upconv(const Tensor5& x, const ConvParams& p);
ConvGrads upconv_backward(const Tensor5& x, const ConvParams& p, const Tensor5& grad_out);

/// Per-channel PReLU; slopes has shape (channels, 1, 1, 1, 1).
Tensor5 prelu(const Tensor5& x, const Tensor5& slopes);
struct PreluGrads {
  Tensor5 grad_x;
  Tensor5 grad_slopes;
};
PreluGrads prelu_backward(const Tensor5& x, const Tensor5& slopes, const Tensor5& grad_out);

Tensor5 concat_channels(const Tensor5& a, const Tensor5& b);
/// Backward of concat: routes the first `channels_a` channels to a, the rest to b.
std::pair<Tensor5, Tensor5> split_channels(const Tensor5& grad, int channels_a);

/// Repeats channels cyclically up to `channels` (out channel c reads input
/// channel c % in_channels); backward sums the copies.
Tensor5 tile_channels(const Tensor5& x, int channels);
Tensor5 tile_channels_backward(const Tensor5& grad, int in_channels);

Tensor5 add(const Tensor5& a, const Tensor5& b);
void add_inplace(Tensor5& a, const Tensor5& b);

/// Softmax over the channel axis at each voxel.
Tensor5 softmax_channels(const Tensor5& logits);
Tensor5 softmax_backward(const Tensor5& probs, const Tensor5& grad_out);

/// Block-mean downsampling of the raw input by 2^level per axis (the exact
/// trilinear 2x reduction applied `level` times). Level 0 returns the input.
Tensor5 raw_input_at_level(const Tensor5& input, int level);

}  // namespace evcseg
