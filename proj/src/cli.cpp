#include "psla/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "psla/attention.hpp"
#include "psla/errors.hpp"
#include "psla/fusion.hpp"
#include "psla/ops.hpp"
#include "psla/tensor_io.hpp"

namespace psla::cli {

namespace {

using Var = GradTape::Var;

template <typename T>
std::vector<T> scalar_or_list(const nlohmann::json& doc, const char* key, const std::function<T(const nlohmann::json&)>& read,
                              T fallback) {
  if (!doc.contains(key)) return {fallback};
  const auto& v = doc.at(key);
  std::vector<T> out;
  try {
    if (v.is_array()) {
      for (const auto& item : v) out.push_back(read(item));
    } else {
      out.push_back(read(v));
    }
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
  if (out.empty()) throw ConfigError(std::string("config key '") + key + "' is an empty list");
  return out;
}

std::string format_double(double v, int precision = 6) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

std::uint64_t alignments_in_run(Mode mode, const FrameSchedule& sched) {
  const std::uint64_t keys = sched.key_indices.size();
  const std::uint64_t nonkeys = sched.total_frames - keys;
  switch (mode) {
    case Mode::Full: return nonkeys + (keys > 0 ? keys - 1 : 0);
    case Mode::Propagate: return nonkeys;
    case Mode::LowOnly: return 0;
  }
  return 0;
}

}  // namespace

// ---------------------------------------------------------------- shared

nlohmann::json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void apply_video_json(SyntheticVideoConfig& video, const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config key 'video' must be an object");
  static const std::set<std::string> known = {"frames",     "height",    "width",        "velocity",
                                              "high_noise", "low_noise", "blob_sigma",   "blob_amplitude",
                                              "projection", "low_blob_gain", "projection_seed"};
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key 'video." + key + "'");
  }
  try {
    video.frames = doc.value("frames", video.frames);
    video.height = doc.value("height", video.height);
    video.width = doc.value("width", video.width);
    if (doc.contains("velocity")) {
      const auto& v = doc.at("velocity");
      if (!v.is_array() || v.size() != 2) throw ConfigError("config key 'video.velocity' must be [dy, dx]");
      video.velocity = {v[0].get<int>(), v[1].get<int>()};
    }
    video.high_noise = doc.value("high_noise", video.high_noise);
    video.low_noise = doc.value("low_noise", video.low_noise);
    video.blob_sigma = doc.value("blob_sigma", video.blob_sigma);
    video.blob_amplitude = doc.value("blob_amplitude", video.blob_amplitude);
    video.low_blob_gain = doc.value("low_blob_gain", video.low_blob_gain);
    video.projection_seed = doc.value("projection_seed", video.projection_seed);
    if (doc.contains("projection")) {
      const auto name = doc.at("projection").get<std::string>();
      if (name == "identity") {
        video.low_projection = LowProjection::Identity;
      } else if (name == "random") {
        video.low_projection = LowProjection::Random;
      } else {
        throw ConfigError("config key 'video.projection': unknown projection '" + name + "'");
      }
    }
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key 'video' has a field of the wrong type");
  }
}

// ---------------------------------------------------------------- bench

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double percentile90(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(values.size())));
  return values[std::max<std::size_t>(rank, 1) - 1];
}

BenchConfig default_bench_config() {
  BenchConfig c;
  c.base.channels = {32, 64, 32};
  c.base.reduce_width = 32;
  c.base.hidden_width = 16;
  c.base.bottleneck = 16;
  c.base.transform_mid = 16;
  c.base.backbone_heavy_layers = 4;
  c.base.backbone_light_layers = 1;
  c.variants = {c.base.variant};
  c.ds = {c.base.d};
  c.intervals = {c.base.interval};
  c.modes = {c.base.mode};
  c.video.frames = 20;
  c.video.height = 38;
  c.video.width = 38;
  c.video.velocity = {0, 1};
  c.video.high_noise = 0.1f;
  c.video.low_noise = 0.1f;
  return c;
}

BenchConfig parse_bench_config(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("bench config must be a JSON object");
  BenchConfig c = default_bench_config();
  nlohmann::json pipeline = to_json(c.base);
  for (const auto& [key, value] : doc.items()) {
    if (key == "video" || key == "stages" || key == "repeat" || key == "warmup") continue;
    if (key == "channels" || key == "backbone") {
      if (!value.is_object()) throw ConfigError("config key '" + key + "' must be an object");
      for (const auto& [sub, v] : value.items()) pipeline[key][sub] = v;
      continue;
    }
    pipeline[key] = value.is_array() && !value.empty() ? value.front() : value;
  }
  c.base = parse_pipeline_config(pipeline);

  c.variants = scalar_or_list<Variant>(
      doc, "variant", [](const nlohmann::json& v) { return parse_variant(v.get<std::string>()); }, c.base.variant);
  c.ds = scalar_or_list<int>(doc, "d", [](const nlohmann::json& v) { return v.get<int>(); }, c.base.d);
  c.intervals = scalar_or_list<std::size_t>(
      doc, "interval", [](const nlohmann::json& v) { return v.get<std::size_t>(); }, c.base.interval);
  c.modes = scalar_or_list<Mode>(
      doc, "mode", [](const nlohmann::json& v) { return parse_mode(v.get<std::string>()); }, c.base.mode);
  for (int d : c.ds) {
    if (d < 1) throw ConfigError("config key 'd' must be >= 1");
  }
  for (auto l : c.intervals) {
    if (l < 1) throw ConfigError("config key 'interval' must be >= 1");
  }

  if (doc.contains("video")) apply_video_json(c.video, doc.at("video"));
  if (c.video.frames == 0 || c.video.height == 0 || c.video.width == 0) {
    throw ConfigError("config key 'video': frames, height and width must be positive");
  }
  try {
    if (doc.contains("stages")) c.stages = doc.at("stages").get<std::vector<std::string>>();
    c.repeat = doc.value("repeat", c.repeat);
    c.warmup = doc.value("warmup", c.warmup);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config keys 'stages', 'repeat', 'warmup' have the wrong type");
  }
  if (c.stages.empty()) throw ConfigError("config key 'stages' must not be empty");
  if (c.repeat < 5) throw ConfigError("config key 'repeat' must be >= 5");
  return c;
}

std::vector<BenchRow> BenchReport::rows() const {
  std::vector<BenchRow> out;
  for (const auto& cell : cells) out.insert(out.end(), cell.rows.begin(), cell.rows.end());
  return out;
}

BenchReport run_bench(const BenchConfig& config, std::uint64_t seed) {
  if (config.repeat < 5) throw ConfigError("bench needs at least 5 repetitions");
  BenchReport report;
  SyntheticVideoConfig vc = config.video;
  vc.seed = seed;
  vc.feat_channels = config.base.channels.feat;
  vc.low_channels = config.base.channels.low;
  // Setup stays outside the measured region.
  const SyntheticVideo video = make_synthetic_video(vc);

  for (Variant variant : config.variants) {
    for (int d : config.ds) {
      for (std::size_t interval : config.intervals) {
        for (Mode mode : config.modes) {
          PipelineConfig pc = config.base;
          pc.variant = variant;
          pc.d = d;
          pc.interval = interval;
          pc.mode = mode;
          std::mt19937_64 rng(seed);
          const PropagationModel model = PropagationModel::make(pc, rng);

          std::map<std::string, std::vector<double>> samples;
          std::vector<double> fps;
          std::optional<double> corr;
          for (std::size_t r = 0; r < config.warmup + config.repeat; ++r) {
            const RunOutput out = run_video(video, model);
            if (r < config.warmup) continue;
            for (const auto& stage : config.stages) {
              const auto it = out.stats.total_ms.find(stage);
              samples[stage].push_back(it == out.stats.total_ms.end() ? 0.0 : it->second);
            }
            fps.push_back(out.stats.fps_equivalent);
            corr = out.stats.mean_correspondence_accuracy;
          }

          BenchCell cell;
          cell.config = pc;
          cell.fps_equivalent = median(fps);
          const std::size_t embed = pc.channels.embed ? pc.channels.embed : pc.channels.feat;
          const std::uint64_t macs = attention_macs(model.attention, embed, pc.channels.feat, vc.height, vc.width) *
                                     alignments_in_run(mode, schedule(vc.frames, interval));
          for (const auto& stage : config.stages) {
            BenchRow row;
            row.variant = variant;
            row.mode = mode;
            row.d = d;
            row.interval = interval;
            row.channels = pc.channels.feat;
            row.height = vc.height;
            row.width = vc.width;
            row.stage = stage;
            row.median_ms = median(samples[stage]);
            row.p90_ms = percentile90(samples[stage]);
            row.macs = macs;
            row.params = model.param_count();
            row.corr_acc = corr;
            cell.rows.push_back(std::move(row));
          }
          report.cells.push_back(std::move(cell));
        }
      }
    }
  }
  return report;
}

void write_bench_csv(std::ostream& out, const BenchReport& report) {
  out << kBenchCsvHeader << '\n';
  for (const auto& r : report.rows()) {
    out << variant_name(r.variant) << ',' << mode_name(r.mode) << ',' << r.d << ',' << r.interval << ','
        << r.channels << ',' << r.height << ',' << r.width << ',' << r.stage << ',' << format_double(r.median_ms)
        << ',' << format_double(r.p90_ms) << ',' << r.macs << ',' << r.params << ','
        << (r.corr_acc ? format_double(*r.corr_acc) : std::string()) << '\n';
  }
}

nlohmann::json to_json(const BenchReport& report) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& cell : report.cells) {
    nlohmann::json stages = nlohmann::json::object();
    for (const auto& r : cell.rows) stages[r.stage] = {{"median_ms", r.median_ms}, {"p90_ms", r.p90_ms}};
    nlohmann::json c{{"config", to_json(cell.config)}, {"fps_equivalent", cell.fps_equivalent}, {"stages", stages}};
    if (!cell.rows.empty()) {
      const auto& r = cell.rows.front();
      c["input"] = {{"C", r.channels}, {"H", r.height}, {"W", r.width}};
      c["macs"] = r.macs;
      c["params"] = r.params;
      c["corr_acc"] = r.corr_acc ? nlohmann::json(*r.corr_acc) : nlohmann::json(nullptr);
    }
    cells.push_back(std::move(c));
  }
  return {{"cells", cells}};
}

// ---------------------------------------------------------------- gradcheck

namespace {

Tensor small_random(const Shape& shape, std::mt19937_64& rng, float scale = 0.3f) {
  return random_normal(shape, scale, rng);
}

// Keeps values at least `gap` away from zero so kinks stay out of the
// finite-difference stencil.
Tensor away_from_zero(Tensor t, float gap) {
  for (auto& v : t.data()) v += v >= 0.0f ? gap : -gap;
  return t;
}

void push_conv(std::vector<Tensor>& inputs, const ConvParams& p) {
  inputs.push_back(p.weights);
  if (p.has_bias()) inputs.push_back(p.bias);
}

ConvVars take_conv(std::span<const Var> vars, std::size_t& i, const ConvParams& p) {
  ConvVars v{vars[i++], std::nullopt};
  if (p.has_bias()) v.bias = vars[i++];
  return v;
}

ConvParams randomized(ConvParams p, std::mt19937_64& rng) {
  p.weights = small_random(p.weights.shape(), rng, 0.3f);
  if (p.has_bias()) p.bias = small_random(p.bias.shape(), rng, 0.1f);
  return p;
}

TwoStreamFusionNet random_fusion(std::size_t feat, std::mt19937_64& rng) {
  TwoStreamFusionNet net = TwoStreamFusionNet::make(feat, rng, 4, 3);
  net.reduce = randomized(net.reduce, rng);
  net.hidden = randomized(net.hidden, rng);
  net.head = randomized(net.head, rng);
  return net;
}

void push_fusion(std::vector<Tensor>& inputs, const TwoStreamFusionNet& net) {
  push_conv(inputs, net.reduce);
  push_conv(inputs, net.hidden);
  push_conv(inputs, net.head);
}

ag::FusionNetVars take_fusion(std::span<const Var> vars, std::size_t& i, const TwoStreamFusionNet& net) {
  ag::FusionNetVars v;
  v.reduce = take_conv(vars, i, net.reduce);
  v.hidden = take_conv(vars, i, net.hidden);
  v.head = take_conv(vars, i, net.head);
  return v;
}

void push_transform(std::vector<Tensor>& inputs, const TransformNet& net) {
  push_conv(inputs, net.reduce);
  push_conv(inputs, net.mid);
  push_conv(inputs, net.out);
}

ag::TransformNetVars take_transform(std::span<const Var> vars, std::size_t& i, const TransformNet& net) {
  ag::TransformNetVars v;
  v.reduce = take_conv(vars, i, net.reduce);
  v.mid = take_conv(vars, i, net.mid);
  v.out = take_conv(vars, i, net.out);
  return v;
}

constexpr std::size_t kC = 3, kH = 5, kW = 6;
// Large enough that float rounding in the forward pass stays well under the
// tolerance, small enough that truncation error does too.
constexpr double kGradEps = 1e-3;

GradCheckResult check_align(Variant variant, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const AttentionConfig config = AttentionConfig::make(variant, 2);
  EmbeddingPair emb = EmbeddingPair::make(kC, 2, rng, true);
  std::vector<Tensor> inputs{small_random({kC, kH, kW}, rng), small_random({kC, kH, kW}, rng)};
  if (variant == Variant::MatchTrans) {
    // Sum normalisation is steep where the clamped affinities nearly vanish.
    // Near-identity embeddings of correlated maps keep the sums large.
    for (auto* layer : {&*emb.source, &*emb.target}) {
      *layer = ConvParams::identity(kC);
      for (auto& w : layer->weights.data()) w += 0.1f * std::normal_distribution<float>()(rng);
    }
    inputs[0] = small_random({kC, kH, kW}, rng, 0.6f);
    for (std::size_t n = 0; n < inputs[1].size(); ++n) inputs[1][n] = inputs[0][n] + 0.2f * inputs[1][n];
  }
  push_conv(inputs, *emb.source);
  push_conv(inputs, *emb.target);
  auto fn = [config, emb](GradTape& tape, std::span<const Var> v) {
    std::size_t i = 2;
    ag::EmbeddingVars ev;
    ev.source = take_conv(v, i, *emb.source);
    ev.target = take_conv(v, i, *emb.target);
    return ag::align(tape, config, v[0], v[1], ev);
  };
  return grad_check_detailed(fn, inputs, kGradEps);
}

}  // namespace

std::vector<GradCheckCase> default_grad_checks() {
  std::vector<GradCheckCase> cases;
  cases.push_back({"conv2d_3x3", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::vector<Tensor> inputs{small_random({kC, kH, kW}, rng), small_random({4, kC, 3, 3}, rng),
                                                      small_random({4}, rng)};
                     return grad_check_detailed(
                         [](GradTape& tape, std::span<const Var> v) {
                           return ag::conv2d(tape, v[0], ConvVars{v[1], v[2]});
                         },
                         inputs, kGradEps);
                   }});
  cases.push_back({"conv2d_1x1", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::vector<Tensor> inputs{small_random({kC, kH, kW}, rng), small_random({4, kC, 1, 1}, rng),
                                                      small_random({4}, rng)};
                     return grad_check_detailed(
                         [](GradTape& tape, std::span<const Var> v) {
                           return ag::conv2d(tape, v[0], ConvVars{v[1], v[2]});
                         },
                         inputs, kGradEps);
                   }});
  cases.push_back({"relu", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::vector<Tensor> inputs{away_from_zero(small_random({kC, kH, kW}, rng), 0.05f)};
                     return grad_check_detailed(
                         [](GradTape& tape, std::span<const Var> v) { return ag::relu(tape, v[0]); }, inputs, kGradEps);
                   }});
  cases.push_back({"affinity", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const NeighborhoodSpec spec = build_progressive(2);
                     const std::vector<Tensor> inputs{small_random({kC, kH, kW}, rng),
                                                      small_random({kC, kH, kW}, rng)};
                     return grad_check_detailed(
                         [spec](GradTape& tape, std::span<const Var> v) {
                           return ag::affinities(tape, v[0], v[1], spec);
                         },
                         inputs, kGradEps);
                   }});
  cases.push_back({"softmax", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const NeighborhoodSpec spec = build_progressive(2);
                     auto mask = std::make_shared<const ValidityMask>(make_mask(spec, kH, kW));
                     const std::vector<Tensor> inputs{small_random({kH, kW, spec.size()}, rng, 1.0f)};
                     return grad_check_detailed(
                         [mask](GradTape& tape, std::span<const Var> v) {
                           // Weighted so the per-location sum is not constant.
                           const Var p = ag::masked_softmax(tape, v[0], mask, 0.7f);
                           return ag::mse(tape, p, Tensor(tape.value(p).shape(), 0.3f));
                         },
                         inputs, kGradEps);
                   }});
  cases.push_back({"matchtrans_normalize", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const NeighborhoodSpec spec = build_dense(1);
                     auto mask = std::make_shared<const ValidityMask>(make_mask(spec, kH, kW));
                     Tensor raw = small_random({kH, kW, spec.size()}, rng, 1.0f);
                     for (auto& v : raw.data()) v = std::abs(v) + 0.1f;
                     const std::vector<Tensor> inputs{raw};
                     return grad_check_detailed(
                         [mask](GradTape& tape, std::span<const Var> v) {
                           const Var p = ag::matchtrans_normalize(tape, v[0], mask);
                           return ag::mse(tape, p, Tensor(tape.value(p).shape(), 0.3f));
                         },
                         inputs, kGradEps);
                   }});
  cases.push_back({"aggregation", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const NeighborhoodSpec spec = build_progressive(2);
                     const std::vector<Tensor> inputs{small_random({kC, kH, kW}, rng),
                                                      small_random({kH, kW, spec.size()}, rng)};
                     return grad_check_detailed(
                         [spec](GradTape& tape, std::span<const Var> v) {
                           return ag::aggregate(tape, v[0], v[1], spec);
                         },
                         inputs, kGradEps);
                   }});
  cases.push_back({"global_affinity", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::vector<Tensor> inputs{small_random({kC, kH, kW}, rng),
                                                      small_random({kC, kH, kW}, rng)};
                     return grad_check_detailed(
                         [](GradTape& tape, std::span<const Var> v) {
                           return ag::global_affinities(tape, v[0], v[1]);
                         },
                         inputs, kGradEps);
                   }});
  cases.push_back({"global_aggregation", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::vector<Tensor> inputs{small_random({kC, kH, kW}, rng),
                                                      small_random({kH, kW, kH * kW}, rng, 0.2f)};
                     return grad_check_detailed(
                         [](GradTape& tape, std::span<const Var> v) {
                           return ag::global_aggregate(tape, v[0], v[1]);
                         },
                         inputs, kGradEps);
                   }});
  cases.push_back({"align_psla", [](std::uint64_t seed) { return check_align(Variant::Psla, seed); }});
  cases.push_back({"align_dense", [](std::uint64_t seed) { return check_align(Variant::Dense, seed); }});
  cases.push_back({"align_matchtrans", [](std::uint64_t seed) { return check_align(Variant::MatchTrans, seed); }});
  cases.push_back({"align_nonlocal", [](std::uint64_t seed) { return check_align(Variant::Nonlocal, seed); }});
  auto fusion_case = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const TwoStreamFusionNet net = random_fusion(kC, rng);
    std::vector<Tensor> inputs{small_random({kC, kH, kW}, rng), small_random({kC, kH, kW}, rng)};
    push_fusion(inputs, net);
    return grad_check_detailed(
        [net](GradTape& tape, std::span<const Var> v) {
          std::size_t i = 2;
          return ag::fuse_streams(tape, v[0], v[1], take_fusion(v, i, net));
        },
        inputs, kGradEps);
  };
  cases.push_back({"update_net", fusion_case});
  cases.push_back({"quality_net", [fusion_case](std::uint64_t seed) { return fusion_case(seed ^ 0x9e3779b97f4a7c15ULL); }});
  cases.push_back({"transform_net", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     TransformNet net = TransformNet::make(2, kC, rng, 4, 4);
                     net.reduce = randomized(net.reduce, rng);
                     net.mid = randomized(net.mid, rng);
                     net.out = randomized(net.out, rng);
                     std::vector<Tensor> inputs{small_random({2, kH, kW}, rng)};
                     push_transform(inputs, net);
                     return grad_check_detailed(
                         [net](GradTape& tape, std::span<const Var> v) {
                           std::size_t i = 1;
                           return ag::transform(tape, v[0], take_transform(v, i, net));
                         },
                         inputs, kGradEps);
                   }});
  cases.push_back({"denseft_path", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     TransformNet transform = TransformNet::make(2, kC, rng, 4, 4);
                     transform.reduce = randomized(transform.reduce, rng);
                     transform.mid = randomized(transform.mid, rng);
                     transform.out = randomized(transform.out, rng);
                     const TwoStreamFusionNet quality = random_fusion(kC, rng);
                     const EmbeddingPair emb = EmbeddingPair::make(kC, 2, rng, true);
                     const AttentionConfig config = AttentionConfig::make(Variant::Psla, 2);
                     std::vector<Tensor> inputs{small_random({2, kH, kW}, rng), small_random({kC, kH, kW}, rng)};
                     push_transform(inputs, transform);
                     push_conv(inputs, *emb.source);
                     push_conv(inputs, *emb.target);
                     push_fusion(inputs, quality);
                     return grad_check_detailed(
                         [=](GradTape& tape, std::span<const Var> v) {
                           std::size_t i = 2;
                           const auto tv = take_transform(v, i, transform);
                           ag::EmbeddingVars ev;
                           ev.source = take_conv(v, i, *emb.source);
                           ev.target = take_conv(v, i, *emb.target);
                           const auto qv = take_fusion(v, i, quality);
                           const Var encoded = ag::transform(tape, v[0], tv);
                           const Var propagated = ag::align(tape, config, encoded, v[1], ev);
                           return ag::fuse_streams(tape, propagated, encoded, qv);
                         },
                         inputs, kGradEps);
                   }});
  cases.push_back({"rfu_path", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const TwoStreamFusionNet update = random_fusion(kC, rng);
                     const AttentionConfig config = AttentionConfig::make(Variant::Psla, 2);
                     std::vector<Tensor> inputs{small_random({kC, kH, kW}, rng), small_random({kC, kH, kW}, rng)};
                     push_fusion(inputs, update);
                     return grad_check_detailed(
                         [=](GradTape& tape, std::span<const Var> v) {
                           std::size_t i = 2;
                           const auto uv = take_fusion(v, i, update);
                           const Var aligned = ag::align(tape, config, v[0], v[1], {});
                           return ag::fuse_streams(tape, aligned, v[0], uv);
                         },
                         inputs, kGradEps);
                   }});
  cases.push_back({"mse", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const Tensor target = small_random({1, kH, kW}, rng);
                     const std::vector<Tensor> inputs{small_random({1, kH, kW}, rng)};
                     return grad_check_detailed(
                         [target](GradTape& tape, std::span<const Var> v) { return ag::mse(tape, v[0], target); },
                         inputs, kGradEps);
                   }});
  return cases;
}

std::vector<GradCheckRow> run_grad_checks(const std::vector<GradCheckCase>& cases, std::uint64_t seed) {
  std::vector<GradCheckRow> rows;
  for (const auto& c : cases) {
    GradCheckRow row{c.name, c.run(seed), false};
    const auto& r = row.result;
    // A check that had to skip most of its entries has not checked anything.
    row.pass = std::isfinite(r.max_rel_error) && r.max_rel_error < kGradCheckTolerance && r.checked > 0 &&
               r.skipped * 2 <= r.checked + r.skipped;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_grad_table(std::ostream& out, const std::vector<GradCheckRow>& rows) {
  out << std::left << std::setw(22) << "check" << std::setw(14) << "max_rel_error" << std::setw(9) << "entries"
      << std::setw(9) << "skipped" << "status\n";
  for (const auto& r : rows) {
    std::ostringstream err;
    err << std::scientific << std::setprecision(3) << r.result.max_rel_error;
    out << std::left << std::setw(22) << r.name << std::setw(14) << err.str() << std::setw(9)
        << r.result.checked + r.result.skipped << std::setw(9) << r.result.skipped << (r.pass ? "PASS" : "FAIL") << '\n';
  }
}

bool all_pass(const std::vector<GradCheckRow>& rows) {
  return std::all_of(rows.begin(), rows.end(), [](const GradCheckRow& r) { return r.pass; });
}

// ---------------------------------------------------------------- params

nlohmann::json params_report(const PipelineConfig& config) {
  const ParamLedger ledger = param_ledger(config);
  return {{"mode", std::string(mode_name(config.mode))},
          {"channels", {{"low", config.channels.low}, {"feat", config.channels.feat}, {"embed", config.channels.embed}}},
          {"components",
           {{"rfu_embedding", ledger.rfu_embedding},
            {"denseft_embedding", ledger.denseft_embedding},
            {"update_net", ledger.update_net},
            {"quality_net", ledger.quality_net},
            {"transform_net", ledger.transform_net}}},
          {"total", ledger.total()}};
}

void write_params_table(std::ostream& out, const PipelineConfig& config) {
  const ParamLedger ledger = param_ledger(config);
  const std::pair<const char*, std::size_t> rows[] = {{"rfu_embedding", ledger.rfu_embedding},
                                                      {"denseft_embedding", ledger.denseft_embedding},
                                                      {"update_net", ledger.update_net},
                                                      {"quality_net", ledger.quality_net},
                                                      {"transform_net", ledger.transform_net},
                                                      {"total", ledger.total()}};
  out << "mode " << mode_name(config.mode) << "  low=" << config.channels.low << " feat=" << config.channels.feat
      << " embed=" << config.channels.embed << '\n';
  for (const auto& [name, count] : rows) out << std::left << std::setw(20) << name << count << '\n';
}

// ---------------------------------------------------------------- demo

DemoConfig default_demo_config() {
  DemoConfig c;
  c.pipeline.channels = {8, 8, 8};
  c.pipeline.interval = 4;
  c.pipeline.reduce_width = 16;
  c.pipeline.hidden_width = 8;
  c.pipeline.bottleneck = 8;
  c.pipeline.transform_mid = 8;
  c.video.frames = 12;
  c.video.height = 16;
  c.video.width = 16;
  c.video.velocity = {0, 1};
  c.video.high_noise = 0.1f;
  c.video.low_noise = 0.1f;
  return c;
}

DemoConfig parse_demo_config(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("demo config must be a JSON object");
  DemoConfig c = default_demo_config();
  nlohmann::json pipeline = to_json(c.pipeline);
  for (const auto& [key, value] : doc.items()) {
    if (key == "video") continue;
    if ((key == "channels" || key == "backbone") && value.is_object()) {
      for (const auto& [sub, v] : value.items()) pipeline[key][sub] = v;
    } else {
      pipeline[key] = value;
    }
  }
  c.pipeline = parse_pipeline_config(pipeline);
  if (doc.contains("video")) apply_video_json(c.video, doc.at("video"));
  return c;
}

DemoSummary run_demo(const DemoConfig& config, std::uint64_t seed, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw IoError("cannot create output directory '" + out_dir.string() + "'");
  }
  SyntheticVideoConfig vc = config.video;
  vc.seed = seed;
  vc.feat_channels = config.pipeline.channels.feat;
  vc.low_channels = config.pipeline.channels.low;
  const SyntheticVideo video = make_synthetic_video(vc);
  std::mt19937_64 rng(seed);
  const PropagationModel model = PropagationModel::make(config.pipeline, rng);
  const RunOutput out = run_video(video, model, RunOptions{true});

  DemoSummary summary;
  summary.stats = out.stats;
  auto save = [&](const std::string& name, const Tensor& t) {
    const auto path = out_dir / name;
    io::save(path, t);
    summary.tensor_files.push_back(path);
  };
  auto write_json = [&](const std::string& name, const nlohmann::json& doc) {
    std::ofstream f(out_dir / name);
    if (!f) throw IoError("cannot write '" + (out_dir / name).string() + "'");
    f << doc.dump(2) << '\n';
  };
  const nlohmann::json sidecar{{"d", config.pipeline.d}, {"variant", std::string(variant_name(config.pipeline.variant))}};
  for (std::size_t t = 0; t < video.frames(); ++t) {
    std::ostringstream prefix;
    prefix << "frame_" << std::setw(3) << std::setfill('0') << t;
    save(prefix.str() + ".features.psla", out.features[t]);
    if (!out.alignments[t]) continue;
    const std::string kind = out.stats.frames[t].is_key ? ".rfu" : ".denseft";
    save(prefix.str() + kind + "_aligned.psla", out.alignments[t]->aligned);
    save(prefix.str() + kind + "_weights.psla", out.alignments[t]->weights.normalized_tensor());
    write_json(prefix.str() + kind + "_weights.json", sidecar);
  }
  nlohmann::json stats = to_json(out.stats);
  write_json("run_stats.json", stats);
  write_json("config.json", {{"seed", seed}, {"pipeline", to_json(config.pipeline)}});
  return summary;
}

}  // namespace psla::cli
