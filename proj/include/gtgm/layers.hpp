#pragma once

// Dense 3D layer kernels on channel-major feature maps, each with an explicit
// backward pass. Convolutions use 3x3x3 kernels with zero padding 1, or 1x1x1.

#include "gtgm/tensor.hpp"

#include <span>
#include <vector>

namespace gtgm::layers {

// weight layout [out][in][k][k][k], k = 1 or 3 (odd, "same" padding).
FeatureMap conv3d(const FeatureMap& x, std::span<const double> weight, std::span<const double> bias, std::size_t out_channels,
                  std::size_t kernel);

// Accumulates into grad_weight / grad_bias (bias may be empty) and returns dL/dx
// when want_input is set (otherwise an empty map).
FeatureMap conv3d_backward(const FeatureMap& x, const FeatureMap& grad_out, std::span<const double> weight,
                           std::span<double> grad_weight, std::span<double> grad_bias, std::size_t kernel, bool want_input);

FeatureMap relu(const FeatureMap& x);
// grad_out masked by pre_activation > 0.
FeatureMap relu_backward(const FeatureMap& pre_activation, const FeatureMap& grad_out);

// 2x2x2 average pooling; dims must be even.
FeatureMap avgpool2(const FeatureMap& x);
FeatureMap avgpool2_backward(const FeatureMap& grad_out, Dims3 input_dims);

FeatureMap upsample2(const FeatureMap& x);
FeatureMap upsample2_backward(const FeatureMap& grad_out);

FeatureMap concat(const FeatureMap& a, const FeatureMap& b);
// Splits a gradient of concat(a, b) back into its two parts.
std::pair<FeatureMap, FeatureMap> split(const FeatureMap& g, std::size_t channels_a);

std::vector<double> global_average(const FeatureMap& x);
FeatureMap global_average_backward(std::span<const double> grad_out, Dims3 dims);

} // namespace gtgm::layers
