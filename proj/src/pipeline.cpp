#include "psla/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <set>
#include <string>

#include "psla/errors.hpp"
#include "psla/ops.hpp"

namespace psla {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::size_t embedding_params(std::size_t in, std::size_t embed, bool bias) {
  return embed == 0 ? 0 : 2 * (in * embed + (bias ? embed : 0));
}

std::size_t fusion_params(const PipelineConfig& c) {
  const std::size_t r = c.reduce_width, h = c.hidden_width;
  return (2 * c.channels.feat * r + r) + (r * h * 9 + h) + (h * 2 * 9 + 2);
}

std::size_t transform_params(const PipelineConfig& c) {
  const std::size_t b = c.bottleneck, m = c.transform_mid;
  return (c.channels.low * b + b) + (b * m * 9 + m) + (m * c.channels.feat * 9 + c.channels.feat);
}

void run_backbone(const std::vector<ConvParams>& layers, const Tensor& input, StageTimes* times) {
  if (layers.empty()) return;
  ScopedStage stage(times, "backbone");
  Tensor x = input;
  for (const auto& layer : layers) x = relu(conv2d(x, layer));
}

template <typename T>
T read_key(const nlohmann::json& doc, const char* key, T fallback) {
  if (!doc.contains(key)) return fallback;
  try {
    return doc.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace

std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::Full: return "F";
    case Mode::Propagate: return "S";
    case Mode::LowOnly: return "L";
  }
  return "?";
}

Mode parse_mode(std::string_view name) {
  if (name == "F") return Mode::Full;
  if (name == "S") return Mode::Propagate;
  if (name == "L") return Mode::LowOnly;
  throw ConfigError("config key 'mode': unknown mode '" + std::string(name) + "' (expected S|F|L)");
}

void PipelineConfig::validate() const {
  if (d < 1) throw ConfigError("config key 'd' must be >= 1");
  if (interval < 1) throw ConfigError("config key 'interval' must be >= 1");
  if (channels.low == 0 || channels.feat == 0) throw ConfigError("config key 'channels': low and feat must be positive");
  if (!(temperature > 0.0f)) throw ConfigError("config key 'temperature' must be positive");
  if (reduce_width == 0 || hidden_width == 0 || bottleneck == 0 || transform_mid == 0) {
    throw ConfigError("net widths must be positive");
  }
}

PipelineConfig parse_pipeline_config(const nlohmann::json& doc, const std::vector<std::string>& extra_keys) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known = {"d",           "interval",      "channels",      "variant",
                                              "mode",        "temperature",   "reduce_width",  "hidden_width",
                                              "bottleneck",  "transform_mid", "embed_bias",    "stop_transform_gradient",
                                              "backbone"};
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key) && std::find(extra_keys.begin(), extra_keys.end(), key) == extra_keys.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  PipelineConfig c;
  c.d = read_key(doc, "d", c.d);
  c.interval = read_key(doc, "interval", c.interval);
  if (doc.contains("channels")) {
    const auto& ch = doc.at("channels");
    if (!ch.is_object()) throw ConfigError("config key 'channels' must be an object");
    for (const auto& [key, value] : ch.items()) {
      if (key != "low" && key != "feat" && key != "embed") throw ConfigError("unknown config key 'channels." + key + "'");
    }
    c.channels.low = read_key(ch, "low", c.channels.low);
    c.channels.feat = read_key(ch, "feat", c.channels.feat);
    c.channels.embed = read_key(ch, "embed", c.channels.embed);
  }
  if (doc.contains("variant")) c.variant = parse_variant(read_key<std::string>(doc, "variant", ""));
  if (doc.contains("mode")) c.mode = parse_mode(read_key<std::string>(doc, "mode", ""));
  c.temperature = read_key(doc, "temperature", c.temperature);
  c.reduce_width = read_key(doc, "reduce_width", c.reduce_width);
  c.hidden_width = read_key(doc, "hidden_width", c.hidden_width);
  c.bottleneck = read_key(doc, "bottleneck", c.bottleneck);
  c.transform_mid = read_key(doc, "transform_mid", c.transform_mid);
  c.embed_bias = read_key(doc, "embed_bias", c.embed_bias);
  c.stop_transform_gradient = read_key(doc, "stop_transform_gradient", c.stop_transform_gradient);
  if (doc.contains("backbone")) {
    const auto& bb = doc.at("backbone");
    if (!bb.is_object()) throw ConfigError("config key 'backbone' must be an object");
    for (const auto& [key, value] : bb.items()) {
      if (key != "heavy_layers" && key != "light_layers") throw ConfigError("unknown config key 'backbone." + key + "'");
    }
    c.backbone_heavy_layers = read_key(bb, "heavy_layers", c.backbone_heavy_layers);
    c.backbone_light_layers = read_key(bb, "light_layers", c.backbone_light_layers);
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const PipelineConfig& c) {
  return {{"d", c.d},
          {"interval", c.interval},
          {"channels", {{"low", c.channels.low}, {"feat", c.channels.feat}, {"embed", c.channels.embed}}},
          {"variant", std::string(variant_name(c.variant))},
          {"mode", std::string(mode_name(c.mode))},
          {"temperature", c.temperature},
          {"reduce_width", c.reduce_width},
          {"hidden_width", c.hidden_width},
          {"bottleneck", c.bottleneck},
          {"transform_mid", c.transform_mid},
          {"embed_bias", c.embed_bias},
          {"stop_transform_gradient", c.stop_transform_gradient},
          {"backbone", {{"heavy_layers", c.backbone_heavy_layers}, {"light_layers", c.backbone_light_layers}}}};
}

bool FrameSchedule::is_key(std::size_t frame) const {
  return std::binary_search(key_indices.begin(), key_indices.end(), frame);
}

FrameSchedule schedule(std::size_t total_frames, std::size_t interval) {
  if (total_frames == 0 || interval == 0) throw InvalidInputError("schedule needs T >= 1 and l >= 1");
  FrameSchedule s;
  s.total_frames = total_frames;
  s.interval = interval;
  for (std::size_t start = 0; start < total_frames; start += interval) {
    const std::size_t length = std::min(interval, total_frames - start);
    s.key_indices.push_back(start + length / 2);
  }
  return s;
}

TemporalState rfu_step(const TemporalState& state, const Tensor& f_h_key, std::size_t key_index,
                       const EmbeddingPair& emb, const AttentionConfig& attention, const TwoStreamFusionNet& update_net,
                       StageTimes* times, Alignment* diagnostics) {
  if (!state.initialized()) {
    return TemporalState{f_h_key, key_index, 1};
  }
  if (!state.f_t.same_shape(f_h_key)) {
    throw ConfigError("rfu_step: key-frame features " + shape_string(f_h_key.shape()) +
                      " do not match temporal feature " + shape_string(state.f_t.shape()));
  }
  Alignment aligned = align(attention, f_h_key, state.f_t, emb, times);
  TemporalState next;
  {
    ScopedStage stage(times, "update_net");
    next.f_t = fuse(update_net_forward(aligned.aligned, f_h_key, update_net), aligned.aligned, f_h_key);
  }
  next.last_key_index = key_index;
  next.update_count = state.update_count + 1;
  if (diagnostics) *diagnostics = std::move(aligned);
  return next;
}

Tensor denseft_step(const TemporalState& state, const Tensor& f_l_nonkey, const TransformNet& transform_net,
                    const EmbeddingPair& emb, const AttentionConfig& attention, const TwoStreamFusionNet& quality_net,
                    StageTimes* times, Alignment* diagnostics) {
  if (!state.initialized()) throw UsageError("denseft_step before any key frame initialised the temporal feature");
  Tensor encoded;
  {
    ScopedStage stage(times, "transform_net");
    encoded = transform_net_forward(f_l_nonkey, transform_net);
  }
  if (!encoded.same_shape(state.f_t)) {
    throw ConfigError("denseft_step: encoded features " + shape_string(encoded.shape()) +
                      " do not match temporal feature " + shape_string(state.f_t.shape()));
  }
  Alignment propagated = align(attention, encoded, state.f_t, emb, times);
  Tensor out;
  {
    ScopedStage stage(times, "quality_net");
    out = quality_net_forward(propagated.aligned, encoded, quality_net);
  }
  if (diagnostics) *diagnostics = std::move(propagated);
  return out;
}

PropagationModel PropagationModel::make(const PipelineConfig& config, std::mt19937_64& rng) {
  config.validate();
  PropagationModel m;
  m.config = config;
  m.attention = AttentionConfig::make(config.variant, config.d, config.temperature);
  const auto& ch = config.channels;
  m.rfu_embedding = EmbeddingPair::make(ch.feat, ch.embed, rng, config.embed_bias);
  m.denseft_embedding = EmbeddingPair::make(ch.feat, ch.embed, rng, config.embed_bias);
  m.update_net = TwoStreamFusionNet::make(ch.feat, rng, config.reduce_width, config.hidden_width);
  m.quality_net = TwoStreamFusionNet::make(ch.feat, rng, config.reduce_width, config.hidden_width);
  m.transform_net = TransformNet::make(ch.low, ch.feat, rng, config.bottleneck, config.transform_mid);
  for (std::size_t i = 0; i < config.backbone_heavy_layers; ++i) {
    m.backbone_heavy.push_back(ConvParams::uniform_init(ch.feat, ch.feat, 3, rng));
  }
  for (std::size_t i = 0; i < config.backbone_light_layers; ++i) {
    m.backbone_light.push_back(ConvParams::uniform_init(ch.low, ch.low, 3, rng));
  }
  return m;
}

std::vector<NamedLayer> PropagationModel::named_layers() const {
  std::vector<NamedLayer> layers;
  auto add_embedding = [&](const std::string& prefix, const EmbeddingPair& emb) {
    if (emb.source) layers.push_back({prefix + ".f", *emb.source});
    if (emb.target) layers.push_back({prefix + ".g", *emb.target});
  };
  auto add_fusion = [&](const std::string& prefix, const TwoStreamFusionNet& net) {
    layers.push_back({prefix + ".reduce", net.reduce});
    layers.push_back({prefix + ".hidden", net.hidden});
    layers.push_back({prefix + ".head", net.head});
  };
  if (config.mode == Mode::Full) {
    add_embedding("rfu_embedding", rfu_embedding);
    add_fusion("update_net", update_net);
  }
  if (config.mode != Mode::LowOnly) add_embedding("denseft_embedding", denseft_embedding);
  if (config.mode == Mode::Full) add_fusion("quality_net", quality_net);
  layers.push_back({"transform_net.reduce", transform_net.reduce});
  layers.push_back({"transform_net.mid", transform_net.mid});
  layers.push_back({"transform_net.out", transform_net.out});
  return layers;
}

std::vector<ConvParams*> PropagationModel::trainable() {
  std::vector<ConvParams*> params;
  auto add_embedding = [&](EmbeddingPair& emb) {
    if (emb.source) params.push_back(&*emb.source);
    if (emb.target) params.push_back(&*emb.target);
  };
  auto add_fusion = [&](TwoStreamFusionNet& net) {
    params.insert(params.end(), {&net.reduce, &net.hidden, &net.head});
  };
  if (config.mode == Mode::Full) {
    add_embedding(rfu_embedding);
    add_fusion(update_net);
  }
  if (config.mode != Mode::LowOnly) add_embedding(denseft_embedding);
  if (config.mode == Mode::Full) add_fusion(quality_net);
  params.insert(params.end(), {&transform_net.reduce, &transform_net.mid, &transform_net.out});
  return params;
}

std::size_t PropagationModel::param_count() const {
  std::size_t total = 0;
  for (const auto& layer : named_layers()) total += layer.params.param_count();
  return total;
}

ParamLedger param_ledger(const PipelineConfig& config) {
  ParamLedger ledger;
  const std::size_t emb = embedding_params(config.channels.feat, config.channels.embed, config.embed_bias);
  if (config.mode == Mode::Full) {
    ledger.rfu_embedding = emb;
    ledger.update_net = fusion_params(config);
    ledger.quality_net = fusion_params(config);
  }
  if (config.mode != Mode::LowOnly) ledger.denseft_embedding = emb;
  ledger.transform_net = transform_params(config);
  return ledger;
}

nlohmann::json to_json(const RunStats& stats) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : stats.frames) {
    nlohmann::json rec{{"frame", f.frame}, {"is_key", f.is_key}, {"stage_times_ms", f.stage_times_ms}};
    rec["correspondence_accuracy"] =
        f.correspondence_accuracy ? nlohmann::json(*f.correspondence_accuracy) : nlohmann::json(nullptr);
    rec["source_key"] = f.source_key ? nlohmann::json(*f.source_key) : nlohmann::json(nullptr);
    frames.push_back(std::move(rec));
  }
  nlohmann::json aggregate{{"fps_equivalent", stats.fps_equivalent},
                           {"params_total", stats.params_total},
                           {"stage_totals_ms", stats.total_ms}};
  aggregate["mean_correspondence_accuracy"] = stats.mean_correspondence_accuracy
                                                  ? nlohmann::json(*stats.mean_correspondence_accuracy)
                                                  : nlohmann::json(nullptr);
  return {{"frames", frames}, {"aggregate", aggregate}};
}

std::optional<double> correspondence_accuracy(const SyntheticVideo& video, const AttentionConfig& attention,
                                              const AttentionWeights& weights, std::size_t source_frame,
                                              std::size_t target_frame) {
  const Offset truth = video.ground_truth_offset(source_frame, target_frame);
  if (attention.variant != Variant::Nonlocal && !attention.spec.contains(truth)) return std::nullopt;
  const long H = static_cast<long>(weights.height), W = static_cast<long>(weights.width);
  const long margin = attention.max_displacement;
  std::size_t counted = 0, correct = 0;
  for (long y = margin; y < H - margin; ++y) {
    for (long x = margin; x < W - margin; ++x) {
      const long sy = y + truth.dy, sx = x + truth.dx;
      if (sy < 0 || sx < 0 || sy >= H || sx >= W) continue;
      if (!video.has_true_content(target_frame, static_cast<std::size_t>(y), static_cast<std::size_t>(x))) continue;
      ++counted;
      if (argmax_offset(attention, weights, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) == truth) {
        ++correct;
      }
    }
  }
  if (counted == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(counted);
}

RunOutput run_video(const SyntheticVideo& video, const PropagationModel& model, const RunOptions& options) {
  const std::size_t T = video.frames();
  if (T == 0) throw InvalidInputError("run_video: empty video");
  const auto& cfg = model.config;
  if (video.high.front().channels() != cfg.channels.feat || video.low.front().channels() != cfg.channels.low) {
    throw ConfigError("run_video: video channels do not match the pipeline configuration");
  }
  const FrameSchedule sched = schedule(T, cfg.interval);
  RunOutput out;
  out.features.resize(T);
  out.alignments.resize(T);
  out.stats.frames.resize(T);
  TemporalState state;
  std::vector<bool> done(T, false);

  auto process_key = [&](std::size_t k) {
    FrameRecord& rec = out.stats.frames[k];
    rec.frame = k;
    rec.is_key = true;
    StageTimes* st = &rec.stage_times_ms;
    const auto start = Clock::now();
    run_backbone(model.backbone_heavy, video.high[k], st);
    if (cfg.mode == Mode::Full) {
      const bool had_state = state.initialized();
      const auto source = state.last_key_index;
      Alignment diag;
      state = rfu_step(state, video.high[k], k, model.rfu_embedding, model.attention, model.update_net, st,
                       had_state ? &diag : nullptr);
      if (had_state) {
        rec.source_key = source;
        rec.correspondence_accuracy = correspondence_accuracy(video, model.attention, diag.weights, *source, k);
        if (options.keep_alignments) out.alignments[k] = std::move(diag);
      }
    } else {
      state = TemporalState{video.high[k], k, state.update_count + 1};
    }
    out.features[k] = state.f_t;
    rec.stage_times_ms["total"] = elapsed_ms(start);
    done[k] = true;
  };

  auto process_nonkey = [&](std::size_t t) {
    FrameRecord& rec = out.stats.frames[t];
    rec.frame = t;
    rec.is_key = false;
    StageTimes* st = &rec.stage_times_ms;
    const auto start = Clock::now();
    run_backbone(model.backbone_light, video.low[t], st);
    Alignment diag;
    bool aligned = false;
    switch (cfg.mode) {
      case Mode::Full:
        out.features[t] = denseft_step(state, video.low[t], model.transform_net, model.denseft_embedding,
                                       model.attention, model.quality_net, st, &diag);
        aligned = true;
        break;
      case Mode::Propagate: {
        Tensor encoded;
        {
          ScopedStage stage(st, "transform_net");
          encoded = transform_net_forward(video.low[t], model.transform_net);
        }
        diag = align(model.attention, encoded, state.f_t, model.denseft_embedding, st);
        out.features[t] = diag.aligned;
        aligned = true;
        break;
      }
      case Mode::LowOnly: {
        ScopedStage stage(st, "transform_net");
        out.features[t] = transform_net_forward(video.low[t], model.transform_net);
        break;
      }
    }
    if (aligned) {
      rec.source_key = state.last_key_index;
      rec.correspondence_accuracy =
          correspondence_accuracy(video, model.attention, diag.weights, *state.last_key_index, t);
      if (options.keep_alignments) out.alignments[t] = std::move(diag);
    }
    rec.stage_times_ms["total"] = elapsed_ms(start);
    done[t] = true;
  };

  for (std::size_t t = 0; t < T; ++t) {
    if (done[t]) continue;
    if (sched.is_key(t)) {
      process_key(t);
    } else {
      if (!state.initialized()) process_key(sched.key_indices.front());
      process_nonkey(t);
    }
  }

  double total_ms = 0.0, acc_sum = 0.0;
  std::size_t acc_count = 0;
  for (const auto& rec : out.stats.frames) {
    for (const auto& [stage, ms] : rec.stage_times_ms) out.stats.total_ms[stage] += ms;
    total_ms += rec.stage_times_ms.at("total");
    if (rec.correspondence_accuracy) {
      acc_sum += *rec.correspondence_accuracy;
      ++acc_count;
    }
  }
  out.stats.fps_equivalent = total_ms > 0.0 ? static_cast<double>(T) / (total_ms / 1000.0) : 0.0;
  out.stats.params_total = model.param_count();
  if (acc_count) out.stats.mean_correspondence_accuracy = acc_sum / static_cast<double>(acc_count);
  return out;
}

}  // namespace psla
