#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "psla/tensor.hpp"

namespace psla {

using MaskBits = std::vector<std::uint8_t>;

// Direct cross-correlation with zero padding. padding must equal
// (kernel_size - 1) / 2 so the spatial size is preserved.
Tensor conv2d(const Tensor& input, const ConvParams& params, std::size_t padding);
Tensor conv2d(const Tensor& input, const ConvParams& params);

// Same kernel over raw parameter tensors: weights (out, in, k, k), bias (out)
// or empty.
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t padding);

struct ConvGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

ConvGrads conv2d_backward(const Tensor& input, const Tensor& weights, bool has_bias, const Tensor& grad_out,
                          std::size_t padding, bool need_input = true, bool need_params = true);

Tensor relu(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

// Softmax restricted to entries whose mask is set; masked entries are exactly
// zero. Logits are divided by temperature before normalisation.
std::vector<float> softmax_masked(std::span<const float> values, std::span<const std::uint8_t> mask,
                                  float temperature = 1.0f);
// Allocation-free form used by the attention kernels. Returns false when no
// entry is valid (out is left zeroed).
bool softmax_masked_into(std::span<const float> values, std::span<const std::uint8_t> mask, std::span<float> out,
                         float temperature = 1.0f);
void softmax_masked_backward(std::span<const float> probs, std::span<const float> grad_out,
                             std::span<const std::uint8_t> mask, std::span<float> grad_in, float temperature = 1.0f);

Tensor concat_channels(const Tensor& a, const Tensor& b);

// Fixed-order dot product with eight partial sums.
float dot(const float* a, const float* b, std::size_t n);

// (C, H, W) <-> (H, W, C) layout changes used by the attention kernels.
std::vector<float> to_channels_last(const Tensor& map);
Tensor from_channels_last(std::span<const float> hwc, std::size_t channels, std::size_t height, std::size_t width);

}  // namespace psla
