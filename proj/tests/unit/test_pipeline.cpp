#include "doctest.h"

#include <cmath>
#include <random>

#include "psla/errors.hpp"
#include "psla/pipeline.hpp"

using namespace psla;

namespace {

// Exact identity through reduce/relu/mid/relu/out: split x into relu(x) and
// relu(-x), carry both, recombine.
TransformNet identity_transform(std::size_t C) {
  TransformNet net;
  net.reduce = ConvParams::zeros(C, 2 * C, 1);
  net.mid = ConvParams::zeros(2 * C, 2 * C, 3);
  net.out = ConvParams::zeros(2 * C, C, 3);
  for (std::size_t c = 0; c < C; ++c) {
    net.reduce.weight(c, c, 0, 0) = 1.0f;
    net.reduce.weight(C + c, c, 0, 0) = -1.0f;
    net.out.weight(c, c, 1, 1) = 1.0f;
    net.out.weight(c, C + c, 1, 1) = -1.0f;
  }
  for (std::size_t c = 0; c < 2 * C; ++c) net.mid.weight(c, c, 1, 1) = 1.0f;
  return net;
}

Tensor unit_cells(Tensor m) {
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x) {
      double n = 0.0;
      for (std::size_t c = 0; c < m.channels(); ++c) n += double(m.at(c, y, x)) * m.at(c, y, x);
      for (std::size_t c = 0; c < m.channels(); ++c) m.at(c, y, x) = float(m.at(c, y, x) / std::sqrt(n));
    }
  return m;
}

// Unit-norm cells make every cell its own best match under a dot product.
SyntheticVideo distinctive_video(const SyntheticVideoConfig& cfg) {
  auto v = make_synthetic_video(cfg);
  for (auto& f : v.high) f = unit_cells(f);
  for (auto& f : v.low) f = unit_cells(f);
  return v;
}

PipelineConfig small_config(std::size_t C = 16) {
  PipelineConfig cfg;
  cfg.d = 4;
  cfg.interval = 4;
  cfg.channels = {C, C, 0};
  cfg.reduce_width = 8;
  cfg.hidden_width = 4;
  cfg.bottleneck = 8;
  cfg.transform_mid = 8;
  cfg.temperature = 0.01f;
  return cfg;
}

SyntheticVideoConfig clean_video(std::size_t frames, Offset velocity, std::size_t C = 16) {
  SyntheticVideoConfig v;
  v.seed = 9;
  v.frames = frames;
  v.feat_channels = v.low_channels = C;
  v.height = v.width = 16;
  v.velocity = velocity;
  v.low_projection = LowProjection::Identity;
  return v;
}

PropagationModel oracle_model(const PipelineConfig& cfg, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  auto model = PropagationModel::make(cfg, rng);
  model.transform_net = identity_transform(cfg.channels.feat);
  return model;
}

}  // namespace

TEST_CASE("schedule examples") {
  CHECK(schedule(10, 10).key_indices == std::vector<std::size_t>{5});
  CHECK(schedule(20, 10).key_indices == std::vector<std::size_t>{5, 15});
  CHECK(schedule(25, 10).key_indices == std::vector<std::size_t>{5, 15, 22});
  const auto every = schedule(7, 1);
  CHECK(every.key_indices.size() == 7);
  for (std::size_t t = 0; t < 7; ++t) CHECK(every.is_key(t));
  CHECK_THROWS_AS(schedule(0, 3), InvalidInputError);
  CHECK_THROWS_AS(schedule(3, 0), InvalidInputError);
}

TEST_CASE("schedule properties") {
  for (std::size_t T = 1; T <= 40; ++T)
    for (std::size_t l = 1; l <= 12; ++l) {
      const auto s = schedule(T, l);
      CHECK(s.key_indices.size() == (T + l - 1) / l);
      for (std::size_t i = 0; i < s.key_indices.size(); ++i) {
        CHECK(s.segment_of(s.key_indices[i]) == i);
        CHECK(s.key_indices[i] < T);
      }
    }
}

TEST_CASE("rfu_step initialisation, forced current stream, static fixed point") {
  std::mt19937_64 rng(2);
  const auto cfg = small_config();
  auto model = PropagationModel::make(cfg, rng);
  const Tensor a = unit_cells(random_normal({16, 10, 10}, 1.0f, rng));
  const Tensor b = unit_cells(random_normal({16, 10, 10}, 1.0f, rng));

  const auto first = rfu_step({}, a, 3, model.rfu_embedding, model.attention, model.update_net);
  CHECK(first.f_t == a);
  CHECK(first.update_count == 1);
  CHECK(first.last_key_index == 3u);

  auto forced = model.update_net;
  forced.head.bias[0] = -100.0f;
  forced.head.bias[1] = 100.0f;
  const auto next = rfu_step(first, b, 7, model.rfu_embedding, model.attention, forced);
  CHECK(next.f_t == b);
  CHECK(next.update_count == 2);

  TemporalState state = first;
  for (int i = 0; i < 5; ++i)
    state = rfu_step(state, a, 4 + i, model.rfu_embedding, model.attention, model.update_net);
  CHECK(max_abs_diff(state.f_t, a) < 1e-5f);

  CHECK_THROWS_AS(rfu_step(first, random_normal({16, 9, 10}, 1.0f, rng), 5, model.rfu_embedding, model.attention,
                           model.update_net),
                  ConfigError);
}

TEST_CASE("denseft_step examples") {
  std::mt19937_64 rng(3);
  const auto cfg = small_config();
  auto model = oracle_model(cfg);
  const Tensor key = unit_cells(random_normal({16, 12, 12}, 1.0f, rng));
  CHECK_THROWS_AS(denseft_step({}, key, model.transform_net, model.denseft_embedding, model.attention,
                               model.quality_net),
                  UsageError);

  const TemporalState state{key, 0, 1};
  Alignment diag;
  const Tensor same = denseft_step(state, key, model.transform_net, model.denseft_embedding, model.attention,
                                   model.quality_net, nullptr, &diag);
  for (std::size_t y = 0; y < 12; ++y)
    for (std::size_t x = 0; x < 12; ++x) CHECK(diag.weights.argmax(y, x) == 0);
  CHECK(max_abs_diff(same, key) < 1e-4f);

  auto one_hot = model.quality_net;
  one_hot.head.bias[0] = 100.0f;
  one_hot.head.bias[1] = -100.0f;
  const Tensor moved = translate_replicate(key, {0, 2});
  const Tensor prop = denseft_step(state, moved, model.transform_net, model.denseft_embedding, model.attention,
                                   one_hot, nullptr, &diag);
  CHECK(prop == diag.aligned);
  // moved(y, x) = key(y, x - 2)
  for (std::size_t y = 4; y < 8; ++y)
    for (std::size_t x = 4; x < 8; ++x) CHECK(argmax_offset(model.attention, diag.weights, y, x) == Offset{0, -2});
}

TEST_CASE("run_video on a single frame returns its own features") {
  const auto cfg = small_config();
  const auto model = oracle_model(cfg);
  const auto video = distinctive_video(clean_video(1, {0, 0}));
  const auto out = run_video(video, model);
  REQUIRE(out.features.size() == 1);
  CHECK(out.features[0] == video.high[0]);
  CHECK(out.stats.frames[0].is_key);
}

TEST_CASE("static video stays at the key-frame features") {
  const auto cfg = small_config();
  const auto model = oracle_model(cfg);
  const auto video = distinctive_video(clean_video(20, {0, 0}));
  const auto out = run_video(video, model);
  for (std::size_t t = 0; t < 20; ++t) {
    CAPTURE(t);
    CHECK(max_abs_diff(out.features[t], video.high[0]) < 1e-4f);
  }
}

TEST_CASE("drifting video: correspondences recovered") {
  auto cfg = small_config();
  cfg.temperature = 1.0f;
  const auto model = oracle_model(cfg);
  auto vc = clean_video(16, {0, 1});
  vc.width = 32;
  const auto video = distinctive_video(vc);
  const auto out = run_video(video, model);
  REQUIRE(out.stats.mean_correspondence_accuracy.has_value());
  CHECK(*out.stats.mean_correspondence_accuracy > 0.9);
  std::size_t with_accuracy = 0;
  for (const auto& f : out.stats.frames) with_accuracy += f.correspondence_accuracy.has_value();
  CHECK(with_accuracy == 15);
}

TEST_CASE("outputs never depend on frames after their key frame's segment") {
  const auto cfg = small_config();
  const auto model = oracle_model(cfg);
  auto video = distinctive_video(clean_video(12, {0, 1}));
  const auto before = run_video(video, model);
  std::mt19937_64 rng(4);
  for (std::size_t t = 8; t < 12; ++t) {
    video.high[t] = random_normal(video.high[t].shape(), 1.0f, rng);
    video.low[t] = random_normal(video.low[t].shape(), 1.0f, rng);
  }
  const auto after = run_video(video, model);
  for (std::size_t t = 0; t < 8; ++t) CHECK(before.features[t] == after.features[t]);
  CHECK_FALSE(before.features[10] == after.features[10]);
}

TEST_CASE("modes: propagate and low-only") {
  auto cfg = small_config();
  const auto video = distinctive_video(clean_video(8, {0, 0}));
  cfg.mode = Mode::LowOnly;
  const auto low = run_video(video, oracle_model(cfg));
  CHECK(low.features[1] == video.low[1]);
  CHECK_FALSE(low.stats.mean_correspondence_accuracy.has_value());
  cfg.mode = Mode::Propagate;
  const auto prop = run_video(video, oracle_model(cfg));
  CHECK(max_abs_diff(prop.features[1], video.high[2]) < 1e-4f);
  CHECK(prop.features[2] == video.high[2]);
}

TEST_CASE("runs are deterministic and stats are complete") {
  const auto cfg = small_config();
  const auto video = distinctive_video(clean_video(9, {1, 0}));
  const auto a = run_video(video, oracle_model(cfg));
  const auto b = run_video(video, oracle_model(cfg));
  for (std::size_t t = 0; t < 9; ++t) CHECK(a.features[t] == b.features[t]);
  const auto j = to_json(a.stats);
  CHECK(j["frames"].size() == 9);
  CHECK(j["frames"][0]["stage_times_ms"].contains("total"));
  CHECK(j["aggregate"]["fps_equivalent"].get<double>() > 0.0);
  CHECK(j["aggregate"]["params_total"].get<std::size_t>() == oracle_model(cfg).param_count());
}

TEST_CASE("video/config mismatch is a config error") {
  const auto model = oracle_model(small_config(8));
  CHECK_THROWS_AS(run_video(distinctive_video(clean_video(3, {0, 0}, 16)), model), ConfigError);
}

TEST_CASE("config parsing") {
  const auto doc = nlohmann::json::parse(R"({"d": 3, "interval": 5, "variant": "dense", "mode": "S",
      "channels": {"low": 12, "feat": 24, "embed": 6}})");
  const auto cfg = parse_pipeline_config(doc);
  CHECK(cfg.d == 3);
  CHECK(cfg.interval == 5);
  CHECK(cfg.variant == Variant::Dense);
  CHECK(cfg.mode == Mode::Propagate);
  CHECK(cfg.channels.feat == 24);
  CHECK(parse_pipeline_config(to_json(cfg)).channels.embed == 6);

  try {
    parse_pipeline_config(nlohmann::json::parse(R"({"d": 3, "dd": 1})"));
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("'dd'") != std::string::npos);
  }
  CHECK_NOTHROW(parse_pipeline_config(nlohmann::json::parse(R"({"repeat": 5})"), {"repeat"}));
  CHECK_THROWS_AS(parse_pipeline_config(nlohmann::json::parse(R"({"d": 0})")), ConfigError);
  CHECK_THROWS_AS(parse_pipeline_config(nlohmann::json::parse(R"({"mode": "Q"})")), ConfigError);
  CHECK_THROWS_AS(parse_pipeline_config(nlohmann::json::parse(R"({"d": "four"})")), ConfigError);
}

TEST_CASE("parameter ledger") {
  PipelineConfig full;
  const auto ledger = param_ledger(full);
  CHECK(ledger.rfu_embedding == 524800);
  CHECK(ledger.update_net == 561714);
  CHECK(ledger.total() < 8000000);
  CHECK(ledger.total() == 2 * 524800 + 2 * 561714 + 3212800);

  for (const auto mode : {Mode::Full, Mode::Propagate, Mode::LowOnly}) {
    auto cfg = small_config();
    cfg.channels.embed = 4;
    cfg.mode = mode;
    std::mt19937_64 rng(5);
    CHECK(param_ledger(cfg).total() == PropagationModel::make(cfg, rng).param_count());
  }

  auto off = full;
  off.channels.embed = 0;
  CHECK(param_ledger(off).rfu_embedding == 0);
  CHECK(param_ledger(off).denseft_embedding == 0);

  auto doubled = full;
  doubled.channels.feat = 2048;
  auto quad = full;
  quad.channels.feat = 4096;
  const auto e1 = param_ledger(full).rfu_embedding, e2 = param_ledger(doubled).rfu_embedding,
             e4 = param_ledger(quad).rfu_embedding;
  CHECK(e4 - e2 == 2 * (e2 - e1));
}
