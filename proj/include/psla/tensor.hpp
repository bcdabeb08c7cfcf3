#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace psla {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float32 tensor of arbitrary rank.
// 
// Rank-3 tensors are the library's feature maps, laid out (channels, height,
// width) with channel-major then row-major spatial order. The c/h/w accessors
// require rank 3.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor feature_map(std::size_t channels, std::size_t height, std::size_t width,
                            float fill = 0.0f);
  static Tensor scalar(float value) { return Tensor({1}, std::vector<float>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::size_t channels() const;
  std::size_t height() const;
  std::size_t width() const;
  std::size_t plane() const { return height() * width(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  std::span<float> channel(std::size_t c) { return std::span<float>(data_).subspan(c * plane(), plane()); }
  std::span<const float> channel(std::size_t c) const {
    return std::span<const float>(data_).subspan(c * plane(), plane());
  }

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  bool all_finite() const noexcept;

  // Bitwise equality of shape and contents.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::vector<float> data_;
};

using FeatureMap = Tensor;

float max_abs_diff(const Tensor& a, const Tensor& b);

Tensor random_uniform(Shape shape, float lo, float hi, std::mt19937_64& rng);
Tensor random_normal(Shape shape, float stddev, std::mt19937_64& rng);

// Convolution layer parameters. weights are (out, in, k, k); bias is (out)
// or empty when the layer carries no bias.
struct ConvParams {
  std::size_t kernel_size = 1;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Tensor weights;
  Tensor bias;

  static ConvParams zeros(std::size_t in, std::size_t out, std::size_t kernel, bool with_bias = true);
  // Zero-mean uniform init with bound sqrt(6 / fan_in); bias zero.
  static ConvParams uniform_init(std::size_t in, std::size_t out, std::size_t kernel,
                                 std::mt19937_64& rng, bool with_bias = true);
  // 1x1 layer with identity weights (out == in), zero bias.
  static ConvParams identity(std::size_t channels, bool with_bias = true);

  bool has_bias() const noexcept { return !bias.empty(); }
  std::size_t param_count() const noexcept { return weights.size() + bias.size(); }
  float& weight(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) {
    return weights[((o * in_channels + i) * kernel_size + ky) * kernel_size + kx];
  }
  float weight(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) const {
    return weights[((o * in_channels + i) * kernel_size + ky) * kernel_size + kx];
  }
  // Throws ConfigError/UnsupportedError when fields disagree.
  void validate() const;
};

}  // namespace psla
