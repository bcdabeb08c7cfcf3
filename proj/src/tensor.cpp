#include "psla/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include "psla/errors.hpp"

namespace psla {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    throw ConfigError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                      shape_string(shape_));
  }
}

Tensor Tensor::feature_map(std::size_t channels, std::size_t height, std::size_t width, float fill) {
  return Tensor({channels, height, width}, fill);
}

std::size_t Tensor::channels() const {
  if (rank() != 3) throw UsageError("channels() on rank-" + std::to_string(rank()) + " tensor");
  return shape_[0];
}
std::size_t Tensor::height() const {
  if (rank() != 3) throw UsageError("height() on rank-" + std::to_string(rank()) + " tensor");
  return shape_[1];
}
std::size_t Tensor::width() const {
  if (rank() != 3) throw UsageError("width() on rank-" + std::to_string(rank()) + " tensor");
  return shape_[2];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape_ == b.shape_ &&
         (a.data_.empty() || std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0);
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ConfigError("max_abs_diff shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

Tensor random_uniform(Shape shape, float lo, float hi, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Tensor random_normal(Shape shape, float stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

ConvParams ConvParams::zeros(std::size_t in, std::size_t out, std::size_t kernel, bool with_bias) {
  ConvParams p;
  p.kernel_size = kernel;
  p.in_channels = in;
  p.out_channels = out;
  p.weights = Tensor({out, in, kernel, kernel});
  if (with_bias) p.bias = Tensor({out});
  p.validate();
  return p;
}

ConvParams ConvParams::uniform_init(std::size_t in, std::size_t out, std::size_t kernel, std::mt19937_64& rng,
                                    bool with_bias) {
  ConvParams p = zeros(in, out, kernel, with_bias);
  const double fan_in = static_cast<double>(in * kernel * kernel);
  const auto bound = static_cast<float>(std::sqrt(6.0 / std::max(fan_in, 1.0)));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (auto& w : p.weights.data()) w = dist(rng);
  return p;
}

ConvParams ConvParams::identity(std::size_t channels, bool with_bias) {
  ConvParams p = zeros(channels, channels, 1, with_bias);
  for (std::size_t c = 0; c < channels; ++c) p.weight(c, c, 0, 0) = 1.0f;
  return p;
}

void ConvParams::validate() const {
  if (kernel_size != 1 && kernel_size != 3) {
    throw UnsupportedError("kernel size " + std::to_string(kernel_size) + " (only 1 and 3 are supported)");
  }
  if (in_channels == 0 || out_channels == 0) throw ConfigError("conv layer with zero channels");
  if (weights.size() != out_channels * in_channels * kernel_size * kernel_size) {
    throw ConfigError("conv weights length " + std::to_string(weights.size()) + " != out*in*k*k");
  }
  if (!bias.empty() && bias.size() != out_channels) {
    throw ConfigError("conv bias length " + std::to_string(bias.size()) + " != out_channels");
  }
}

}  // namespace psla
