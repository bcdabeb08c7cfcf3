#include "psla/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "psla/errors.hpp"
#include "psla/ops.hpp"
#include "psla/parallel.hpp"

namespace psla {

namespace {

void require_same_dims(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 3 || b.rank() != 3) throw ConfigError(std::string(what) + ": operands must be (C,H,W) maps");
  if (!a.same_shape(b)) {
    throw ConfigError(std::string(what) + ": dims differ " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
}

std::vector<long> linear_deltas(const NeighborhoodSpec& spec, std::size_t width) {
  std::vector<long> deltas(spec.size());
  for (std::size_t k = 0; k < spec.size(); ++k) {
    deltas[k] = static_cast<long>(spec.offsets[k].dy) * static_cast<long>(width) + spec.offsets[k].dx;
  }
  return deltas;
}

// Rows (or columns) i of an n-long axis for which i + d stays inside.
std::pair<long, long> inside_range(long n, int d) {
  const long lo = std::max(0L, -static_cast<long>(d));
  const long hi = std::min(n, n - d);
  return hi > lo ? std::make_pair(lo, hi) : std::make_pair(0L, 0L);
}

// raw[p, k] = <t[:, p], s[:, p + offset_k]> on planar (C,H,W) maps. Offset
// major: every offset costs one shifted multiply-add sweep per channel over
// its in-bounds rectangle, so the work is proportional to K. Out-of-bounds
// entries stay 0.
void affinity_kernel(const Tensor& t, const Tensor& s, const NeighborhoodSpec& spec, std::vector<float>& raw) {
  const std::size_t C = t.channels(), H = t.height(), W = t.width(), K = spec.size(), P = H * W;
  std::vector<float> planes(K * P, 0.0f);
  const std::size_t chunks = std::min(worker_count(), K);
  parallel_for(0, chunks, [&](std::size_t chunk) {
    const std::size_t k0 = chunk * K / chunks, k1 = (chunk + 1) * K / chunks;
    for (std::size_t c = 0; c < C; ++c) {
      const float* tc = t.data().data() + c * P;
      const float* sc = s.data().data() + c * P;
      for (std::size_t k = k0; k < k1; ++k) {
        const int dy = spec.offsets[k].dy, dx = spec.offsets[k].dx;
        const auto [y0, y1] = inside_range(static_cast<long>(H), dy);
        const auto [x0, x1] = inside_range(static_cast<long>(W), dx);
        float* acc = planes.data() + k * P;
        for (long y = y0; y < y1; ++y) {
          const float* tr = tc + y * W;
          const float* sr = sc + (y + dy) * static_cast<long>(W) + dx;
          float* ar = acc + y * W;
          for (long x = x0; x < x1; ++x) ar[x] += tr[x] * sr[x];
        }
      }
    }
  }, 2);
  raw.resize(P * K);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t k = 0; k < K; ++k) raw[p * K + k] = planes[k * P + p];
  }
}

// out[:, p] = sum_k w[p, k] * s[:, p + offset_k]; planar source and output,
// (H,W,K) weights.
Tensor aggregate_kernel(const Tensor& s, const NeighborhoodSpec& spec, const float* w) {
  const std::size_t C = s.channels(), H = s.height(), W = s.width(), K = spec.size(), P = H * W;
  std::vector<float> planes(K * P);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t k = 0; k < K; ++k) planes[k * P + p] = w[p * K + k];
  }
  Tensor out = Tensor::feature_map(C, H, W);
  parallel_for(0, C, [&](std::size_t c) {
    const float* sc = s.data().data() + c * P;
    float* oc = out.data().data() + c * P;
    for (std::size_t k = 0; k < K; ++k) {
      const int dy = spec.offsets[k].dy, dx = spec.offsets[k].dx;
      const auto [y0, y1] = inside_range(static_cast<long>(H), dy);
      const auto [x0, x1] = inside_range(static_cast<long>(W), dx);
      const float* wk = planes.data() + k * P;
      for (long y = y0; y < y1; ++y) {
        const float* wr = wk + y * W;
        const float* sr = sc + (y + dy) * static_cast<long>(W) + dx;
        float* orow = oc + y * W;
        for (long x = x0; x < x1; ++x) orow[x] += wr[x] * sr[x];
      }
    }
  }, 4);
  return out;
}

void check_weights_for(const Tensor& source, const AttentionWeights& weights, std::size_t expected_k) {
  if (source.rank() != 3 || source.height() != weights.height || source.width() != weights.width) {
    throw ConfigError("aggregate: source " + shape_string(source.shape()) + " does not match weights " +
                      std::to_string(weights.height) + "x" + std::to_string(weights.width));
  }
  if (weights.k != expected_k) throw ConfigError("aggregate: weights K does not match the neighborhood");
  if (weights.normalized.size() != weights.height * weights.width * weights.k) {
    throw UsageError("aggregate: weights are not normalized");
  }
}

ValidityMask full_mask(std::size_t height, std::size_t width) {
  const std::size_t K = height * width;
  return ValidityMask(height, width, K, MaskBits(height * width * K, 1));
}

void softmax_rows(const std::vector<float>& raw, const ValidityMask& mask, std::size_t K, float temperature,
                  std::vector<float>& out) {
  out.assign(raw.size(), 0.0f);
  const std::size_t W = mask.width();
  parallel_for(0, mask.height(), [&](std::size_t y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t p = y * W + x;
      softmax_masked_into(std::span<const float>(raw).subspan(p * K, K), mask.at(y, x),
                          std::span<float>(out).subspan(p * K, K), temperature);
    }
  }, 4);
}

void matchtrans_rows(const std::vector<float>& raw, const ValidityMask& mask, std::size_t K,
                     std::vector<float>& out) {
  out.assign(raw.size(), 0.0f);
  const std::size_t rows = mask.height() * mask.width();
  for (std::size_t p = 0; p < rows; ++p) {
    const auto valid = mask.at(p / mask.width(), p % mask.width());
    const float* r = raw.data() + p * K;
    float* w = out.data() + p * K;
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      if (valid[k] && r[k] > 0.0f) total += r[k];
    }
    if (total > 0.0) {
      for (std::size_t k = 0; k < K; ++k) w[k] = (valid[k] && r[k] > 0.0f) ? static_cast<float>(r[k] / total) : 0.0f;
    } else {
      w[0] = 1.0f;
    }
  }
}

}  // namespace

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Psla: return "psla";
    case Variant::Dense: return "dense";
    case Variant::MatchTrans: return "matchtrans";
    case Variant::Nonlocal: return "nonlocal";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  if (name == "psla") return Variant::Psla;
  if (name == "dense") return Variant::Dense;
  if (name == "matchtrans") return Variant::MatchTrans;
  if (name == "nonlocal") return Variant::Nonlocal;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected psla|dense|matchtrans|nonlocal)");
}

EmbeddingPair EmbeddingPair::make(std::size_t in_channels, std::size_t embed_channels, std::mt19937_64& rng,
                                  bool with_bias) {
  if (embed_channels == 0) return identity();
  EmbeddingPair emb;
  emb.source = ConvParams::uniform_init(in_channels, embed_channels, 1, rng, with_bias);
  emb.target = ConvParams::uniform_init(in_channels, embed_channels, 1, rng, with_bias);
  return emb;
}

void EmbeddingPair::validate() const {
  if (source.has_value() != target.has_value()) throw ConfigError("embedding pair needs both or neither layer");
  if (!source) return;
  source->validate();
  target->validate();
  if (source->kernel_size != 1 || target->kernel_size != 1) throw ConfigError("embeddings must be 1x1 convolutions");
  if (source->out_channels != target->out_channels) throw ConfigError("embedding output widths differ");
}

std::size_t param_count(const EmbeddingPair& emb) {
  return (emb.source ? emb.source->param_count() : 0) + (emb.target ? emb.target->param_count() : 0);
}

std::size_t AttentionWeights::argmax(std::size_t y, std::size_t x) const {
  const auto w = weights_at(y, x);
  std::size_t best = 0;
  for (std::size_t i = 1; i < w.size(); ++i) {
    if (w[i] > w[best]) best = i;
  }
  return best;
}

Tensor AttentionWeights::normalized_tensor() const { return Tensor({height, width, k}, normalized); }

Tensor embed(const Tensor& map, const std::optional<ConvParams>& layer) {
  return layer ? conv2d(map, *layer) : map;
}

AttentionWeights compute_affinities(const Tensor& target_emb, const Tensor& source_emb,
                                    const NeighborhoodSpec& spec) {
  require_same_dims(target_emb, source_emb, "compute_affinities");
  if (spec.size() == 0) throw ConfigError("compute_affinities: empty neighborhood");
  AttentionWeights w;
  w.height = target_emb.height();
  w.width = target_emb.width();
  w.k = spec.size();
  w.mask = make_mask(spec, w.height, w.width);
  affinity_kernel(target_emb, source_emb, spec, w.raw);
  return w;
}

AttentionWeights normalize_psla(AttentionWeights weights, float temperature) {
  if (!(temperature > 0.0f)) throw InvalidInputError("temperature must be positive");
  softmax_rows(weights.raw, weights.mask, weights.k, temperature, weights.normalized);
  return weights;
}

AttentionWeights normalize_matchtrans(AttentionWeights weights) {
  matchtrans_rows(weights.raw, weights.mask, weights.k, weights.normalized);
  return weights;
}

Tensor aggregate(const Tensor& source, const AttentionWeights& weights, const NeighborhoodSpec& spec) {
  check_weights_for(source, weights, spec.size());
  return aggregate_kernel(source, spec, weights.normalized.data());
}

AttentionWeights compute_global_affinities(const Tensor& target_emb, const Tensor& source_emb) {
  require_same_dims(target_emb, source_emb, "compute_global_affinities");
  AttentionWeights w;
  w.height = target_emb.height();
  w.width = target_emb.width();
  const std::size_t P = w.height * w.width, C = target_emb.channels();
  w.k = P;
  w.mask = full_mask(w.height, w.width);
  const auto t = to_channels_last(target_emb);
  const auto s = to_channels_last(source_emb);
  w.raw.assign(P * P, 0.0f);
  parallel_for(0, P, [&](std::size_t p) {
    for (std::size_t q = 0; q < P; ++q) w.raw[p * P + q] = dot(t.data() + p * C, s.data() + q * C, C);
  });
  return w;
}

Tensor aggregate_global(const Tensor& source, const AttentionWeights& weights) {
  check_weights_for(source, weights, source.rank() == 3 ? source.plane() : 0);
  const std::size_t P = source.plane(), C = source.channels();
  const auto s = to_channels_last(source);
  std::vector<float> out(P * C, 0.0f);
  parallel_for(0, P, [&](std::size_t p) {
    float* op = out.data() + p * C;
    for (std::size_t q = 0; q < P; ++q) {
      const float wq = weights.normalized[p * P + q];
      const float* sq = s.data() + q * C;
      for (std::size_t c = 0; c < C; ++c) op[c] += wq * sq[c];
    }
  });
  return from_channels_last(out, C, source.height(), source.width());
}

Alignment psla_align(const Tensor& target, const Tensor& source, const EmbeddingPair& emb,
                     const NeighborhoodSpec& spec, float temperature) {
  require_same_dims(target, source, "psla_align");
  emb.validate();
  AttentionWeights w = compute_affinities(embed(target, emb.target), embed(source, emb.source), spec);
  w = normalize_psla(std::move(w), temperature);
  Tensor aligned = aggregate(source, w, spec);
  return {std::move(aligned), std::move(w)};
}

Tensor nonlocal_align(const Tensor& target, const Tensor& source, const EmbeddingPair& emb) {
  require_same_dims(target, source, "nonlocal_align");
  emb.validate();
  AttentionWeights w = compute_global_affinities(embed(target, emb.target), embed(source, emb.source));
  w = normalize_psla(std::move(w));
  return aggregate_global(source, w);
}

AttentionConfig AttentionConfig::make(Variant variant, int max_displacement, float temperature) {
  AttentionConfig c;
  c.variant = variant;
  c.max_displacement = max_displacement;
  c.temperature = temperature;
  switch (variant) {
    case Variant::Psla: c.spec = build_progressive(max_displacement); break;
    case Variant::Dense:
    case Variant::MatchTrans: c.spec = build_dense(max_displacement); break;
    case Variant::Nonlocal: break;
  }
  return c;
}

Alignment align(const AttentionConfig& config, const Tensor& target, const Tensor& source, const EmbeddingPair& emb,
                StageTimes* times) {
  require_same_dims(target, source, "align");
  emb.validate();
  Tensor t_emb, s_emb;
  {
    ScopedStage stage(times, "embed");
    t_emb = embed(target, emb.target);
    s_emb = embed(source, emb.source);
  }
  ScopedStage stage(times, "attend");
  Alignment out;
  switch (config.variant) {
    case Variant::Psla:
    case Variant::Dense:
      out.weights = normalize_psla(compute_affinities(t_emb, s_emb, config.spec), config.temperature);
      out.aligned = aggregate(source, out.weights, config.spec);
      break;
    case Variant::MatchTrans:
      out.weights = normalize_matchtrans(compute_affinities(t_emb, s_emb, config.spec));
      out.aligned = aggregate(source, out.weights, config.spec);
      break;
    case Variant::Nonlocal:
      out.weights = normalize_psla(compute_global_affinities(t_emb, s_emb), config.temperature);
      out.aligned = aggregate_global(source, out.weights);
      break;
  }
  return out;
}

Offset argmax_offset(const AttentionConfig& config, const AttentionWeights& weights, std::size_t y, std::size_t x) {
  const std::size_t k = weights.argmax(y, x);
  if (config.variant == Variant::Nonlocal) {
    return {static_cast<int>(k / weights.width) - static_cast<int>(y),
            static_cast<int>(k % weights.width) - static_cast<int>(x)};
  }
  return config.spec.offsets.at(k);
}

std::uint64_t attention_macs(const AttentionConfig& config, std::size_t embed_channels, std::size_t channels,
                             std::size_t height, std::size_t width) {
  std::uint64_t gathers = 0;
  if (config.variant == Variant::Nonlocal) {
    gathers = static_cast<std::uint64_t>(height * width) * (height * width);
  } else {
    const auto mask = make_mask(config.spec, height, width);
    for (auto bit : mask.bits()) gathers += bit;
  }
  return gathers * (embed_channels + channels);
}

namespace ag {

EmbeddingVars bind(GradTape& tape, const EmbeddingPair& emb, bool requires_grad) {
  emb.validate();
  EmbeddingVars vars;
  if (emb.source) vars.source = bind(tape, *emb.source, requires_grad);
  if (emb.target) vars.target = bind(tape, *emb.target, requires_grad);
  return vars;
}

Var embed(GradTape& tape, Var map, const std::optional<ConvVars>& layer) {
  return layer ? conv2d(tape, map, *layer) : map;
}

Var affinities(GradTape& tape, Var target_emb, Var source_emb, const NeighborhoodSpec& spec) {
  const Tensor& t = tape.value(target_emb);
  const Tensor& s = tape.value(source_emb);
  require_same_dims(t, s, "affinities");
  const std::size_t H = t.height(), W = t.width(), K = spec.size();
  auto mask = std::make_shared<const ValidityMask>(make_mask(spec, H, W));
  std::vector<float> raw;
  affinity_kernel(t, s, spec, raw);
  return tape.record(
      Tensor({H, W, K}, std::move(raw)), {target_emb, source_emb},
      [&tape, target_emb, source_emb, spec, mask](const Tensor& g, const std::vector<bool>& needs) {
        const Tensor& t = tape.value(target_emb);
        const Tensor& s = tape.value(source_emb);
        const std::size_t C = t.channels(), H = t.height(), W = t.width(), K = spec.size();
        const auto deltas = linear_deltas(spec, W);
        const auto th = to_channels_last(t);
        const auto sh = to_channels_last(s);
        std::vector<float> gt(H * W * C, 0.0f), gs(H * W * C, 0.0f);
        for (std::size_t p = 0; p < H * W; ++p) {
          const auto valid = mask->at(p / W, p % W);
          for (std::size_t k = 0; k < K; ++k) {
            if (!valid[k]) continue;
            const float gk = g[p * K + k];
            const std::size_t q = static_cast<std::size_t>(static_cast<long>(p) + deltas[k]);
            for (std::size_t c = 0; c < C; ++c) {
              gt[p * C + c] += gk * sh[q * C + c];
              gs[q * C + c] += gk * th[p * C + c];
            }
          }
        }
        return std::vector<Tensor>{needs[0] ? from_channels_last(gt, C, H, W) : Tensor(),
                                   needs[1] ? from_channels_last(gs, C, H, W) : Tensor()};
      });
}

Var masked_softmax(GradTape& tape, Var raw, std::shared_ptr<const ValidityMask> mask, float temperature) {
  const Tensor& r = tape.value(raw);
  const std::size_t K = r.dim(2);
  if (mask->k() != K) throw ConfigError("masked_softmax: mask K mismatch");
  std::vector<float> out;
  softmax_rows(r.storage(), *mask, K, temperature, out);
  const Var self{tape.size()};
  return tape.record(Tensor(r.shape(), std::move(out)), {raw},
                     [&tape, self, mask, K, temperature](const Tensor& g, const std::vector<bool>&) {
                       const Tensor& y = tape.value(self);
                       Tensor gin(y.shape());
                       const std::size_t rows = y.size() / K;
                       for (std::size_t p = 0; p < rows; ++p) {
                         softmax_masked_backward(y.data().subspan(p * K, K), g.data().subspan(p * K, K),
                                                 mask->at(p / mask->width(), p % mask->width()),
                                                 gin.data().subspan(p * K, K), temperature);
                       }
                       return std::vector<Tensor>{std::move(gin)};
                     });
}

Var matchtrans_normalize(GradTape& tape, Var raw, std::shared_ptr<const ValidityMask> mask) {
  const Tensor& r = tape.value(raw);
  const std::size_t K = r.dim(2);
  if (mask->k() != K) throw ConfigError("matchtrans_normalize: mask K mismatch");
  std::vector<float> out;
  matchtrans_rows(r.storage(), *mask, K, out);
  tape.note_branches(r.data());
  const Var self{tape.size()};
  return tape.record(Tensor(r.shape(), std::move(out)), {raw},
                     [&tape, self, raw, mask, K](const Tensor& g, const std::vector<bool>&) {
                       const Tensor& r = tape.value(raw);
                       const Tensor& w = tape.value(self);
                       Tensor gin(r.shape());
                       const std::size_t rows = r.size() / K;
                       for (std::size_t p = 0; p < rows; ++p) {
                         const auto valid = mask->at(p / mask->width(), p % mask->width());
                         double total = 0.0, inner = 0.0;
                         for (std::size_t k = 0; k < K; ++k) {
                           if (valid[k] && r[p * K + k] > 0.0f) total += r[p * K + k];
                           inner += static_cast<double>(w[p * K + k]) * g[p * K + k];
                         }
                         if (total <= 0.0) continue;
                         for (std::size_t k = 0; k < K; ++k) {
                           if (valid[k] && r[p * K + k] > 0.0f) {
                             gin[p * K + k] = static_cast<float>((g[p * K + k] - inner) / total);
                           }
                         }
                       }
                       return std::vector<Tensor>{std::move(gin)};
                     });
}

Var aggregate(GradTape& tape, Var source, Var weights, const NeighborhoodSpec& spec) {
  const Tensor& s = tape.value(source);
  const Tensor& w = tape.value(weights);
  const std::size_t H = s.height(), W = s.width(), K = spec.size();
  if (w.shape() != Shape{H, W, K}) throw ConfigError("aggregate: weights shape mismatch");
  auto mask = std::make_shared<const ValidityMask>(make_mask(spec, H, W));
  return tape.record(
      aggregate_kernel(s, spec, w.data().data()), {source, weights},
      [&tape, source, weights, spec, mask](const Tensor& g, const std::vector<bool>& needs) {
        const Tensor& s = tape.value(source);
        const Tensor& w = tape.value(weights);
        const std::size_t C = s.channels(), H = s.height(), W = s.width(), K = spec.size();
        const auto deltas = linear_deltas(spec, W);
        const auto sh = to_channels_last(s);
        const auto gh = to_channels_last(g);
        std::vector<float> gs(H * W * C, 0.0f);
        Tensor gw(w.shape());
        for (std::size_t p = 0; p < H * W; ++p) {
          const auto valid = mask->at(p / W, p % W);
          for (std::size_t k = 0; k < K; ++k) {
            if (!valid[k]) continue;
            const std::size_t q = static_cast<std::size_t>(static_cast<long>(p) + deltas[k]);
            gw[p * K + k] = dot(gh.data() + p * C, sh.data() + q * C, C);
            const float wk = w[p * K + k];
            for (std::size_t c = 0; c < C; ++c) gs[q * C + c] += wk * gh[p * C + c];
          }
        }
        return std::vector<Tensor>{needs[0] ? from_channels_last(gs, C, H, W) : Tensor(),
                                   needs[1] ? std::move(gw) : Tensor()};
      });
}

Var global_affinities(GradTape& tape, Var target_emb, Var source_emb) {
  AttentionWeights w = compute_global_affinities(tape.value(target_emb), tape.value(source_emb));
  const std::size_t H = w.height, W = w.width;
  return tape.record(Tensor({H, W, H * W}, std::move(w.raw)), {target_emb, source_emb},
                     [&tape, target_emb, source_emb](const Tensor& g, const std::vector<bool>& needs) {
                       const Tensor& t = tape.value(target_emb);
                       const Tensor& s = tape.value(source_emb);
                       const std::size_t C = t.channels(), P = t.plane();
                       const auto th = to_channels_last(t);
                       const auto sh = to_channels_last(s);
                       std::vector<float> gt(P * C, 0.0f), gs(P * C, 0.0f);
                       for (std::size_t p = 0; p < P; ++p) {
                         for (std::size_t q = 0; q < P; ++q) {
                           const float gk = g[p * P + q];
                           for (std::size_t c = 0; c < C; ++c) {
                             gt[p * C + c] += gk * sh[q * C + c];
                             gs[q * C + c] += gk * th[p * C + c];
                           }
                         }
                       }
                       return std::vector<Tensor>{
                           needs[0] ? from_channels_last(gt, C, t.height(), t.width()) : Tensor(),
                           needs[1] ? from_channels_last(gs, C, s.height(), s.width()) : Tensor()};
                     });
}

Var global_aggregate(GradTape& tape, Var source, Var weights) {
  const Tensor& s = tape.value(source);
  AttentionWeights w;
  w.height = s.height();
  w.width = s.width();
  w.k = s.plane();
  w.mask = full_mask(w.height, w.width);
  w.normalized = tape.value(weights).storage();
  Tensor out = aggregate_global(s, w);
  return tape.record(std::move(out), {source, weights},
                     [&tape, source, weights](const Tensor& g, const std::vector<bool>& needs) {
                       const Tensor& s = tape.value(source);
                       const Tensor& w = tape.value(weights);
                       const std::size_t C = s.channels(), P = s.plane();
                       const auto sh = to_channels_last(s);
                       const auto gh = to_channels_last(g);
                       std::vector<float> gs(P * C, 0.0f);
                       Tensor gw(w.shape());
                       for (std::size_t p = 0; p < P; ++p) {
                         for (std::size_t q = 0; q < P; ++q) {
                           gw[p * P + q] = dot(gh.data() + p * C, sh.data() + q * C, C);
                           const float wq = w[p * P + q];
                           for (std::size_t c = 0; c < C; ++c) gs[q * C + c] += wq * gh[p * C + c];
                         }
                       }
                       return std::vector<Tensor>{needs[0] ? from_channels_last(gs, C, s.height(), s.width()) : Tensor(),
                                                  needs[1] ? std::move(gw) : Tensor()};
                     });
}

Var align(GradTape& tape, const AttentionConfig& config, Var target, Var source, const EmbeddingVars& emb) {
  require_same_dims(tape.value(target), tape.value(source), "align");
  const Var t_emb = embed(tape, target, emb.target);
  const Var s_emb = embed(tape, source, emb.source);
  const Tensor& t = tape.value(target);
  switch (config.variant) {
    case Variant::Psla:
    case Variant::Dense: {
      auto mask = std::make_shared<const ValidityMask>(make_mask(config.spec, t.height(), t.width()));
      const Var raw = affinities(tape, t_emb, s_emb, config.spec);
      return aggregate(tape, source, masked_softmax(tape, raw, mask, config.temperature), config.spec);
    }
    case Variant::MatchTrans: {
      auto mask = std::make_shared<const ValidityMask>(make_mask(config.spec, t.height(), t.width()));
      const Var raw = affinities(tape, t_emb, s_emb, config.spec);
      return aggregate(tape, source, matchtrans_normalize(tape, raw, mask), config.spec);
    }
    case Variant::Nonlocal: {
      const std::size_t P = t.plane();
      auto mask = std::make_shared<const ValidityMask>(t.height(), t.width(), P, MaskBits(P * P, 1));
      const Var raw = global_affinities(tape, t_emb, s_emb);
      return global_aggregate(tape, source, masked_softmax(tape, raw, mask, config.temperature));
    }
  }
  throw UsageError("unknown variant");
}

}  // namespace ag
}  // namespace psla
