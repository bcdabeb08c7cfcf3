#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "psla/neighborhood.hpp"
#include "psla/tensor.hpp"

namespace psla {

enum class LowProjection {
  Identity,  // low-level stream is the high-level content plus noise (needs equal widths)
  Random,    // fixed random mix of the texture channels, weak blob, plus noise
};

struct SyntheticVideoConfig {
  std::uint64_t seed = 0;
  std::size_t frames = 20;
  std::size_t feat_channels = 16;
  std::size_t low_channels = 16;
  std::size_t height = 16;
  std::size_t width = 16;
  // Per-frame displacement; ignored when `steps` is non-empty.
  Offset velocity{0, 0};
  // steps[t] is the displacement from frame t-1 to frame t (steps[0] unused).
  std::vector<Offset> steps;
  float high_noise = 0.0f;
  float low_noise = 0.0f;
  LowProjection low_projection = LowProjection::Random;
  // Seeds the random projection separately so videos can share one "backbone".
  std::uint64_t projection_seed = 0;
  float blob_sigma = 1.5f;
  float blob_amplitude = 3.0f;
  float low_blob_gain = 0.25f;
};

// Synthetic stand-in for backbone features with exact motion ground truth.
// 
// content[t] is content[0] translated by the cumulative displacement with
// replicate-edge fill. high[t] adds observation noise; low[t] is a degraded
// view of the same scene. Channel 0 of the content carries a Gaussian blob
// whose normalised heatmap is the toy-task target.
struct SyntheticVideo {
  SyntheticVideoConfig config;
  std::vector<Offset> displacement;
  std::vector<Tensor> content;
  std::vector<Tensor> high;
  std::vector<Tensor> low;
  std::vector<Tensor> heatmap;

  std::size_t frames() const noexcept { return content.size(); }
  // Offset from a target-frame cell to its source-frame correspondence.
  Offset ground_truth_offset(std::size_t source_frame, std::size_t target_frame) const;
  // False where the frame's content at (y, x) is replicated border fill.
  bool has_true_content(std::size_t frame, std::size_t y, std::size_t x) const;
};

// out(y, x) = base(clamp(y - dy), clamp(x - dx)) per channel.
Tensor translate_replicate(const Tensor& base, Offset shift);

SyntheticVideo make_synthetic_video(const SyntheticVideoConfig& config);

}  // namespace psla
