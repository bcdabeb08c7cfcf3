#include "doctest.h"

#include "psla/errors.hpp"
#include "psla/synthetic.hpp"

using namespace psla;

TEST_CASE("translate_replicate shifts and fills with the edge") {
  Tensor base({1, 1, 4}, std::vector<float>{1, 2, 3, 4});
  CHECK(translate_replicate(base, {0, 1}).storage() == std::vector<float>{1, 1, 2, 3});
  CHECK(translate_replicate(base, {0, -2}).storage() == std::vector<float>{3, 4, 4, 4});
  CHECK(translate_replicate(base, {0, 0}) == base);
}

TEST_CASE("content is a translation of the first frame with exact ground truth") {
  SyntheticVideoConfig cfg;
  cfg.frames = 5;
  cfg.velocity = {1, -1};
  cfg.feat_channels = cfg.low_channels = 4;
  cfg.height = cfg.width = 12;
  const auto v = make_synthetic_video(cfg);
  REQUIRE(v.frames() == 5);
  CHECK(v.displacement[3] == Offset{3, -3});
  CHECK(v.ground_truth_offset(1, 3) == Offset{-2, 2});
  // target(y, x) == source(y + dy, x + dx) on cells with true content
  const Offset g = v.ground_truth_offset(1, 3);
  for (std::size_t y = 0; y < 12; ++y)
    for (std::size_t x = 0; x < 12; ++x) {
      if (!v.has_true_content(3, y, x)) continue;
      const long sy = long(y) + g.dy, sx = long(x) + g.dx;
      for (std::size_t c = 0; c < 4; ++c) CHECK(v.content[3].at(c, y, x) == v.content[1].at(c, sy, sx));
    }
  CHECK_FALSE(v.has_true_content(3, 0, 5));
  CHECK(v.has_true_content(3, 5, 5));
}

TEST_CASE("explicit steps, heatmap and determinism") {
  SyntheticVideoConfig cfg;
  cfg.frames = 3;
  cfg.steps = {{0, 0}, {0, 2}, {1, 0}};
  cfg.high_noise = 0.2f;
  cfg.low_noise = 0.2f;
  const auto a = make_synthetic_video(cfg);
  const auto b = make_synthetic_video(cfg);
  CHECK(a.displacement[2] == Offset{1, 2});
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(a.high[t] == b.high[t]);
    CHECK(a.low[t] == b.low[t]);
  }
  float peak = 0.0f;
  for (float v : a.heatmap[0].data()) peak = std::max(peak, v);
  CHECK(peak > 0.5f);
  CHECK(peak <= 1.0f);
  cfg.seed = 1;
  CHECK_FALSE(make_synthetic_video(cfg).high[0] == a.high[0]);
}

TEST_CASE("videos with the same projection seed share the low-level mix") {
  SyntheticVideoConfig cfg;
  cfg.frames = 1;
  cfg.blob_amplitude = 0.0f;
  cfg.seed = 3;
  const auto a = make_synthetic_video(cfg);
  cfg.projection_seed = 7;
  const auto b = make_synthetic_video(cfg);
  CHECK(a.content[0] == b.content[0]);
  CHECK_FALSE(a.low[0] == b.low[0]);
}

TEST_CASE("invalid configurations") {
  SyntheticVideoConfig cfg;
  cfg.frames = 0;
  CHECK_THROWS_AS(make_synthetic_video(cfg), ConfigError);
  cfg.frames = 2;
  cfg.low_projection = LowProjection::Identity;
  cfg.low_channels = 3;
  CHECK_THROWS_AS(make_synthetic_video(cfg), ConfigError);
  cfg.low_channels = cfg.feat_channels;
  cfg.steps = {{0, 0}};
  CHECK_THROWS_AS(make_synthetic_video(cfg), ConfigError);
}
