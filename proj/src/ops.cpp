#include "psla/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "psla/errors.hpp"
#include "psla/parallel.hpp"

namespace psla {

namespace {

void check_feature_map(const Tensor& t, const char* what) {
  if (t.rank() != 3) {
    throw ConfigError(std::string(what) + " must be a (C,H,W) feature map, got shape " + shape_string(t.shape()));
  }
}

struct ConvGeometry {
  std::size_t in, out, k, h, w;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t padding) {
  check_feature_map(input, "conv2d input");
  if (weights.rank() != 4 || weights.dim(2) != weights.dim(3)) {
    throw ConfigError("conv2d weights must be (out,in,k,k), got " + shape_string(weights.shape()));
  }
  const std::size_t k = weights.dim(2);
  if (k != 1 && k != 3) throw UnsupportedError("kernel size " + std::to_string(k) + " (only 1 and 3 are supported)");
  if (weights.dim(1) != input.channels()) {
    throw ConfigError("conv2d channel mismatch: layer expects " + std::to_string(weights.dim(1)) +
                      " input channels, map has " + std::to_string(input.channels()));
  }
  if (!bias.empty() && bias.size() != weights.dim(0)) throw ConfigError("conv2d bias length mismatch");
  if (padding != (k - 1) / 2) {
    throw ConfigError("conv2d padding " + std::to_string(padding) + " does not preserve size for kernel " +
                      std::to_string(k));
  }
  return {weights.dim(1), weights.dim(0), k, input.height(), input.width()};
}

}  // namespace

Tensor conv2d(const Tensor& input, const ConvParams& params, std::size_t padding) {
  params.validate();
  return conv2d(input, params.weights, params.bias, padding);
}

Tensor conv2d(const Tensor& input, const ConvParams& params) {
  return conv2d(input, params, (params.kernel_size - 1) / 2);
}

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t padding) {
  const auto g = conv_geometry(input, weights, bias, padding);
  Tensor out = Tensor::feature_map(g.out, g.h, g.w);
  const std::size_t plane = g.h * g.w;
  const long pad = static_cast<long>(padding);
  const long H = static_cast<long>(g.h);
  const long W = static_cast<long>(g.w);
  parallel_for(0, g.out, [&](std::size_t o) {
    float* dst = out.data().data() + o * plane;
    const float b = bias.empty() ? 0.0f : bias[o];
    std::fill(dst, dst + plane, b);
    for (std::size_t i = 0; i < g.in; ++i) {
      const float* src = input.data().data() + i * plane;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const float wv = weights[((o * g.in + i) * g.k + ky) * g.k + kx];
          const long dy = static_cast<long>(ky) - pad;
          const long dx = static_cast<long>(kx) - pad;
          const long x0 = std::max(0L, -dx);
          const long x1 = std::min(W, W - dx);
          for (long y = std::max(0L, -dy); y < std::min(H, H - dy); ++y) {
            float* row = dst + y * W;
            const float* srow = src + (y + dy) * W + dx;
            for (long x = x0; x < x1; ++x) row[x] += wv * srow[x];
          }
        }
      }
    }
  }, 2);
  return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& weights, bool has_bias, const Tensor& grad_out,
                          std::size_t padding, bool need_input, bool need_params) {
  const auto g = conv_geometry(input, weights, Tensor(), padding);
  if (grad_out.shape() != Shape{g.out, g.h, g.w}) throw ConfigError("conv2d_backward gradient shape mismatch");
  const std::size_t plane = g.h * g.w;
  const long pad = static_cast<long>(padding);
  const long H = static_cast<long>(g.h);
  const long W = static_cast<long>(g.w);
  ConvGrads grads;

  if (need_input) {
    grads.input = Tensor::feature_map(g.in, g.h, g.w);
    parallel_for(0, g.in, [&](std::size_t i) {
      float* dst = grads.input.data().data() + i * plane;
      for (std::size_t o = 0; o < g.out; ++o) {
        const float* go = grad_out.data().data() + o * plane;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const float wv = weights[((o * g.in + i) * g.k + ky) * g.k + kx];
            const long dy = static_cast<long>(ky) - pad;
            const long dx = static_cast<long>(kx) - pad;
            const long x0 = std::max(0L, -dx);
            const long x1 = std::min(W, W - dx);
            for (long y = std::max(0L, -dy); y < std::min(H, H - dy); ++y) {
              const float* grow = go + y * W;
              float* drow = dst + (y + dy) * W + dx;
              for (long x = x0; x < x1; ++x) drow[x] += wv * grow[x];
            }
          }
        }
      }
    }, 2);
  }

  if (need_params) {
    grads.weights = Tensor(weights.shape());
    parallel_for(0, g.out, [&](std::size_t o) {
      const float* go = grad_out.data().data() + o * plane;
      for (std::size_t i = 0; i < g.in; ++i) {
        const float* src = input.data().data() + i * plane;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const long dy = static_cast<long>(ky) - pad;
            const long dx = static_cast<long>(kx) - pad;
            const long x0 = std::max(0L, -dx);
            const long x1 = std::min(W, W - dx);
            double acc = 0.0;
            for (long y = std::max(0L, -dy); y < std::min(H, H - dy); ++y) {
              const float* grow = go + y * W;
              const float* srow = src + (y + dy) * W + dx;
              float row_acc = 0.0f;
              for (long x = x0; x < x1; ++x) row_acc += grow[x] * srow[x];
              acc += row_acc;
            }
            grads.weights[((o * g.in + i) * g.k + ky) * g.k + kx] = static_cast<float>(acc);
          }
        }
      }
    }, 2);
    if (has_bias) {
      grads.bias = Tensor({g.out});
      for (std::size_t o = 0; o < g.out; ++o) {
        double acc = 0.0;
        for (float v : grad_out.channel(o)) acc += v;
        grads.bias[o] = static_cast<float>(acc);
      }
    }
  }
  return grads;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (auto& v : out.data()) v = std::max(v, 0.0f);
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  if (!input.same_shape(grad_out)) throw ConfigError("relu_backward shape mismatch");
  Tensor grad(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) grad[i] = input[i] > 0.0f ? grad_out[i] : 0.0f;
  return grad;
}

bool softmax_masked_into(std::span<const float> values, std::span<const std::uint8_t> mask, std::span<float> out,
                         float temperature) {
  const std::size_t n = values.size();
  const float inv_t = 1.0f / temperature;
  float peak = -std::numeric_limits<float>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) {
      peak = std::max(peak, values[i] * inv_t);
      any = true;
    }
  }
  if (!any) {
    std::fill(out.begin(), out.end(), 0.0f);
    return false;
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) {
      const float e = std::exp(values[i] * inv_t - peak);
      out[i] = e;
      sum += e;
    } else {
      out[i] = 0.0f;
    }
  }
  const double inv_sum = 1.0 / sum;
  for (std::size_t i = 0; i < n; ++i) {
    const float w = static_cast<float>(out[i] * inv_sum);
    // subnormal weights are flushed: they change nothing but slow every
    // multiply that touches them
    out[i] = w < std::numeric_limits<float>::min() ? 0.0f : w;
  }
  return true;
}

std::vector<float> softmax_masked(std::span<const float> values, std::span<const std::uint8_t> mask,
                                  float temperature) {
  if (values.size() != mask.size()) {
    throw InvalidInputError("softmax_masked: values and mask lengths differ (" + std::to_string(values.size()) +
                            " vs " + std::to_string(mask.size()) + ")");
  }
  if (!(temperature > 0.0f)) throw InvalidInputError("softmax_masked: temperature must be positive");
  std::vector<float> out(values.size());
  if (!softmax_masked_into(values, mask, out, temperature)) {
    throw InvalidInputError("softmax_masked: mask has no valid entry");
  }
  return out;
}

void softmax_masked_backward(std::span<const float> probs, std::span<const float> grad_out,
                             std::span<const std::uint8_t> mask, std::span<float> grad_in, float temperature) {
  double inner = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) inner += static_cast<double>(probs[i]) * grad_out[i];
  const double inv_t = 1.0 / temperature;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    grad_in[i] = mask[i] ? static_cast<float>(probs[i] * (grad_out[i] - inner) * inv_t) : 0.0f;
  }
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check_feature_map(a, "concat_channels lhs");
  check_feature_map(b, "concat_channels rhs");
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ConfigError("concat_channels spatial mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor out = Tensor::feature_map(a.channels() + b.channels(), a.height(), a.width());
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

float dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

std::vector<float> to_channels_last(const Tensor& map) {
  const std::size_t C = map.channels(), P = map.plane();
  std::vector<float> hwc(C * P);
  for (std::size_t c = 0; c < C; ++c) {
    const float* src = map.data().data() + c * P;
    for (std::size_t p = 0; p < P; ++p) hwc[p * C + c] = src[p];
  }
  return hwc;
}

Tensor from_channels_last(std::span<const float> hwc, std::size_t channels, std::size_t height, std::size_t width) {
  Tensor map = Tensor::feature_map(channels, height, width);
  const std::size_t P = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    float* dst = map.data().data() + c * P;
    for (std::size_t p = 0; p < P; ++p) dst[p] = hwc[p * channels + c];
  }
  return map;
}

}  // namespace psla
