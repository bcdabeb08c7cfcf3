#include "psla/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "psla/errors.hpp"

namespace psla {

Offset SyntheticVideo::ground_truth_offset(std::size_t source_frame, std::size_t target_frame) const {
  const Offset s = displacement.at(source_frame);
  const Offset t = displacement.at(target_frame);
  return {s.dy - t.dy, s.dx - t.dx};
}

bool SyntheticVideo::has_true_content(std::size_t frame, std::size_t y, std::size_t x) const {
  const Offset d = displacement.at(frame);
  const long sy = static_cast<long>(y) - d.dy;
  const long sx = static_cast<long>(x) - d.dx;
  return sy >= 0 && sx >= 0 && sy < static_cast<long>(config.height) && sx < static_cast<long>(config.width);
}

Tensor translate_replicate(const Tensor& base, Offset shift) {
  const long C = static_cast<long>(base.channels());
  const long H = static_cast<long>(base.height());
  const long W = static_cast<long>(base.width());
  Tensor out(base.shape());
  for (long c = 0; c < C; ++c) {
    for (long y = 0; y < H; ++y) {
      const long sy = std::clamp(y - shift.dy, 0L, H - 1);
      for (long x = 0; x < W; ++x) {
        const long sx = std::clamp(x - shift.dx, 0L, W - 1);
        out.at(c, y, x) = base.at(c, sy, sx);
      }
    }
  }
  return out;
}

SyntheticVideo make_synthetic_video(const SyntheticVideoConfig& config) {
  if (config.frames == 0 || config.height == 0 || config.width == 0 || config.feat_channels == 0 ||
      config.low_channels == 0) {
    throw ConfigError("synthetic video dimensions must be positive");
  }
  if (config.low_projection == LowProjection::Identity && config.low_channels != config.feat_channels) {
    throw ConfigError("identity low-level projection needs low_channels == feat_channels");
  }
  if (!config.steps.empty() && config.steps.size() != config.frames) {
    throw ConfigError("synthetic video steps must list one displacement per frame");
  }
  std::mt19937_64 rng(config.seed);
  const std::size_t C = config.feat_channels, H = config.height, W = config.width;

  SyntheticVideo video;
  video.config = config;

  Tensor base = random_normal({C, H, W}, 1.0f, rng);
  Tensor blob = Tensor::feature_map(1, H, W);
  {
    std::uniform_real_distribution<float> cy(static_cast<float>(H) * 0.25f, static_cast<float>(H) * 0.75f);
    std::uniform_real_distribution<float> cx(static_cast<float>(W) * 0.25f, static_cast<float>(W) * 0.75f);
    const float by = cy(rng), bx = cx(rng);
    const float inv = 1.0f / (2.0f * config.blob_sigma * config.blob_sigma);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const float dy = static_cast<float>(y) - by, dx = static_cast<float>(x) - bx;
        blob.at(0, y, x) = std::exp(-(dy * dy + dx * dx) * inv);
      }
    }
  }
  for (std::size_t p = 0; p < H * W; ++p) base[p] = config.blob_amplitude * blob[p];

  // Texture-to-low mixing for the random projection (texture channels only).
  Tensor mix({config.low_channels, C});
  if (config.low_projection == LowProjection::Random) {
    const float scale = 1.0f / std::sqrt(static_cast<float>(std::max<std::size_t>(C - 1, 1)));
    std::mt19937_64 projection_rng(config.projection_seed);
    mix = random_normal({config.low_channels, C}, scale, projection_rng);
    for (std::size_t c = 0; c < config.low_channels; ++c) mix[c * C] = 0.0f;
  }

  Offset cumulative{0, 0};
  std::normal_distribution<float> high_noise(0.0f, 1.0f);
  for (std::size_t t = 0; t < config.frames; ++t) {
    if (t > 0) {
      const Offset step = config.steps.empty() ? config.velocity : config.steps[t];
      cumulative.dy += step.dy;
      cumulative.dx += step.dx;
    }
    video.displacement.push_back(cumulative);
    Tensor content = translate_replicate(base, cumulative);
    Tensor heat = translate_replicate(blob, cumulative);

    Tensor high = content;
    if (config.high_noise > 0.0f) {
      for (auto& v : high.data()) v += config.high_noise * high_noise(rng);
    }

    Tensor low = Tensor::feature_map(config.low_channels, H, W);
    if (config.low_projection == LowProjection::Identity) {
      low = content;
    } else {
      const std::size_t P = H * W;
      for (std::size_t o = 0; o < config.low_channels; ++o) {
        for (std::size_t j = 1; j < C; ++j) {
          const float m = mix[o * C + j];
          for (std::size_t p = 0; p < P; ++p) low[o * P + p] += m * content[j * P + p];
        }
      }
      for (std::size_t p = 0; p < P; ++p) low[p] += config.low_blob_gain * config.blob_amplitude * heat[p];
    }
    if (config.low_noise > 0.0f) {
      for (auto& v : low.data()) v += config.low_noise * high_noise(rng);
    }

    video.content.push_back(std::move(content));
    video.high.push_back(std::move(high));
    video.low.push_back(std::move(low));
    video.heatmap.push_back(std::move(heat));
  }
  return video;
}

}  // namespace psla
