#pragma once

#include <array>

#include "segkd/tensor.hpp"

namespace segkd {

// Geometry of one 3D convolution. Kernel dims must be odd for regular
// convolutions; transposed convolutions accept even kernels (stride-2
// upsampling uses 2x2x2).
struct ConvSpec {
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  std::array<int64_t, 3> kernel{3, 3, 3};
  std::array<int64_t, 3> stride{1, 1, 1};
  std::array<int64_t, 3> padding{1, 1, 1};

  // floor((in + 2*pad - kernel) / stride) + 1, rejecting any axis that
  // would collapse below 1.
  std::array<int64_t, 3> output_size(const std::array<int64_t, 3>& in) const;
  // (in - 1) * stride - 2*pad + kernel
  std::array<int64_t, 3> transposed_output_size(const std::array<int64_t, 3>& in) const;

  int64_t kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
};

struct ConvGrads {
  Tensor grad_input;
  Tensor grad_weights;
  Tensor grad_bias;
};

// input [Cin,D,H,W], weights [Cout,Cin,kd,kh,kw], bias [Cout].
// Cross-correlation with zero padding; accumulation in double.
Tensor conv3d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias, const ConvSpec& spec);
ConvGrads conv3d_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out, const ConvSpec& spec);

// weights [Cin,Cout,kd,kh,kw]; output size per transposed_output_size.
Tensor transposed_conv3d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias, const ConvSpec& spec);
ConvGrads transposed_conv3d_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                                     const ConvSpec& spec);

// input [C,D,H,W]; per-channel standardization with eps inside the sqrt.
Tensor instance_norm_forward(const Tensor& input, const Tensor& gain, const Tensor& shift, float eps = 1e-5f);
struct InstanceNormGrads {
  Tensor grad_input;
  Tensor grad_gain;
  Tensor grad_shift;
};
InstanceNormGrads instance_norm_backward(const Tensor& input, const Tensor& gain, const Tensor& grad_out,
                                         float eps = 1e-5f);

Tensor leaky_relu_forward(const Tensor& input, float slope);
Tensor leaky_relu_backward(const Tensor& input, const Tensor& grad_out, float slope);

// softmax(z / temperature) over axis 0 of a [C, ...] tensor, per voxel,
// stabilized by max subtraction.
Tensor softmax_channels(const Tensor& input, float temperature);

}  // namespace segkd
