#include "psla/neighborhood.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>

#include "psla/errors.hpp"

namespace psla {

std::optional<std::size_t> NeighborhoodSpec::index_of(Offset o) const {
  const auto it = std::find(offsets.begin(), offsets.end(), o);
  if (it == offsets.end()) return std::nullopt;
  return static_cast<std::size_t>(it - offsets.begin());
}

NeighborhoodSpec build_progressive(int max_displacement) {
  if (max_displacement < 1) {
    throw InvalidInputError("max displacement must be >= 1 (got " + std::to_string(max_displacement) +
                            "); use identity alignment for d = 0");
  }
  std::vector<int> strides(static_cast<std::size_t>(max_displacement));
  for (int s = 1; s <= max_displacement; ++s) strides[static_cast<std::size_t>(s - 1)] = s;
  return build_progressive_strides(strides);
}

NeighborhoodSpec build_progressive_strides(std::span<const int> strides) {
  if (strides.empty()) throw InvalidInputError("stride schedule is empty");
  int previous = 0;
  for (int s : strides) {
    if (s <= previous) throw InvalidInputError("stride schedule must be positive and strictly increasing");
    previous = s;
  }
  NeighborhoodSpec spec;
  spec.max_displacement = strides.back();
  spec.offsets.push_back({0, 0});
  spec.strides.push_back(0);
  for (int s : strides) {
    for (int a : {-s, 0, s}) {
      for (int b : {-s, 0, s}) {
        if (a == 0 && b == 0) continue;
        spec.offsets.push_back({a, b});
        spec.strides.push_back(s);
      }
    }
  }
  return spec;
}

NeighborhoodSpec build_dense(int max_displacement) {
  if (max_displacement < 1) {
    throw InvalidInputError("max displacement must be >= 1 (got " + std::to_string(max_displacement) + ")");
  }
  const int d = max_displacement;
  NeighborhoodSpec spec;
  spec.max_displacement = d;
  spec.offsets.push_back({0, 0});
  spec.strides.push_back(0);
  for (int a = -d; a <= d; ++a) {
    for (int b = -d; b <= d; ++b) {
      if (a == 0 && b == 0) continue;
      spec.offsets.push_back({a, b});
      spec.strides.push_back(std::max(std::abs(a), std::abs(b)));
    }
  }
  return spec;
}

ValidityMask::ValidityMask(std::size_t height, std::size_t width, std::size_t k, MaskBits bits)
    : height_(height), width_(width), k_(k), bits_(std::move(bits)) {
  if (bits_.size() != height_ * width_ * k_) throw ConfigError("validity mask length mismatch");
}

std::size_t ValidityMask::valid_count(std::size_t y, std::size_t x) const {
  const auto row = at(y, x);
  return static_cast<std::size_t>(std::count(row.begin(), row.end(), std::uint8_t{1}));
}

ValidityMask make_mask(const NeighborhoodSpec& spec, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw InvalidInputError("mask dimensions must be positive");
  const std::size_t K = spec.size();
  MaskBits bits(height * width * K, 0);
  const long H = static_cast<long>(height), W = static_cast<long>(width);
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      std::uint8_t* row = bits.data() + (static_cast<std::size_t>(y * W + x)) * K;
      for (std::size_t k = 0; k < K; ++k) {
        const long sy = y + spec.offsets[k].dy;
        const long sx = x + spec.offsets[k].dx;
        row[k] = (sy >= 0 && sy < H && sx >= 0 && sx < W) ? 1 : 0;
      }
    }
  }
  return ValidityMask(height, width, K, std::move(bits));
}

nlohmann::json to_json(const NeighborhoodSpec& spec) {
  nlohmann::json offsets = nlohmann::json::array();
  for (const auto& o : spec.offsets) offsets.push_back({o.dy, o.dx});
  return {{"d", spec.max_displacement}, {"offsets", offsets}, {"strides", spec.strides}};
}

}  // namespace psla
