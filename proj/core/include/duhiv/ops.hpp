#pragma once

#include <cstddef>
#include <vector>

#include "duhiv/tensor.hpp"

// Differentiable operations. Every op throws std::invalid_argument on shape
// errors and NumericError if its output is not finite.
namespace duhiv::ops {

/// 2-D cross-correlation. input [N,C,H,W], kernel [F,C,kh,kw] -> [N,F,H',W'] with
/// H' = (H + 2*padding - kh) / stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1, std::size_t padding = 0);

/// Adds bias[C] along axis 1 of a [N,C,...] tensor.
Tensor add_channel_bias(const Tensor& input, const Tensor& bias);

/// Nearest-neighbour upsampling of the two trailing axes.
Tensor upsample_nearest(const Tensor& input, std::size_t factor);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& input, std::size_t begin, std::size_t end);

/// input [N,D] x weight [D,E] + bias [E].
Tensor dense_affine(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor reshape(const Tensor& input, Shape shape);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
/// Throws NumericError if any element is <= 0.
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// [N, ...] -> [N]: sums everything but the leading axis.
Tensor sum_per_row(const Tensor& x);

}  // namespace duhiv::ops
