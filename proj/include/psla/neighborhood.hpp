#pragma once

#include <compare>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "psla/ops.hpp"

namespace psla {

struct Offset {
  int dy = 0;
  int dx = 0;
  friend auto operator<=>(const Offset&, const Offset&) = default;
};

// Ordered set of (dy, dx) offsets a target cell is compared against.
// 
// The center (0,0) is always index 0. The enumeration order is part of the
// contract: attention weight index k refers to offsets[k].
struct NeighborhoodSpec {
  int max_displacement = 0;
  std::vector<Offset> offsets;
  // Ring label of each offset: 0 for the center, otherwise max(|dy|, |dx|).
  std::vector<int> strides;

  std::size_t size() const noexcept { return offsets.size(); }
  std::optional<std::size_t> index_of(Offset o) const;
  bool contains(Offset o) const { return index_of(o).has_value(); }
};

// Center plus, for each stride s = 1..d, the eight offsets of {-s,0,s}^2
// minus the center, scanned row-major. Size 1 + 8d.
NeighborhoodSpec build_progressive(int max_displacement);

// Same construction over an arbitrary strictly increasing stride schedule,
// e.g. {1, 2, 4, 8}.
NeighborhoodSpec build_progressive_strides(std::span<const int> strides);

// Every offset of [-d, d]^2 in row-major order with the center moved first.
NeighborhoodSpec build_dense(int max_displacement);

// Per-location validity of each offset on an H x W map, layout (H, W, K).
class ValidityMask {
 public:
  ValidityMask() = default;
  ValidityMask(std::size_t height, std::size_t width, std::size_t k, MaskBits bits);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t k() const noexcept { return k_; }
  bool valid(std::size_t y, std::size_t x, std::size_t k) const { return bits_[(y * width_ + x) * k_ + k] != 0; }
  std::span<const std::uint8_t> at(std::size_t y, std::size_t x) const {
    return std::span<const std::uint8_t>(bits_).subspan((y * width_ + x) * k_, k_);
  }
  std::size_t valid_count(std::size_t y, std::size_t x) const;
  const MaskBits& bits() const noexcept { return bits_; }

 private:
  std::size_t height_ = 0, width_ = 0, k_ = 0;
  MaskBits bits_;
};

ValidityMask make_mask(const NeighborhoodSpec& spec, std::size_t height, std::size_t width);

// {"d": int, "offsets": [[dy,dx],...], "strides": [...]}
nlohmann::json to_json(const NeighborhoodSpec& spec);

}  // namespace psla
