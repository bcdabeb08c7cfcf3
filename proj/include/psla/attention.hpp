#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "psla/autograd.hpp"
#include "psla/neighborhood.hpp"
#include "psla/tensor.hpp"
#include "psla/timing.hpp"

namespace psla {

// Alignment operator family. Psla uses the progressive sparse neighborhood
// with softmax; Dense the full local window with softmax; MatchTrans the full
// window with clamped sum-normalisation; Nonlocal softmax over every position.
enum class Variant { Psla, Dense, MatchTrans, Nonlocal };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

// The two 1x1 embeddings of the affinity: `source` embeds the map being
// aligned (f), `target` the map it is aligned to (g). Parameters are never
// shared between the two. Disengaged layers mean identity embedding.
struct EmbeddingPair {
  std::optional<ConvParams> source;
  std::optional<ConvParams> target;

  static EmbeddingPair identity() { return {}; }
  static EmbeddingPair make(std::size_t in_channels, std::size_t embed_channels, std::mt19937_64& rng,
                            bool with_bias = true);

  bool is_identity() const noexcept { return !source && !target; }
  std::size_t embed_channels() const noexcept { return source ? source->out_channels : 0; }
  void validate() const;
};

std::size_t param_count(const EmbeddingPair& emb);

// Correspondence weights, layout (H, W, K) with K innermost. raw holds the
// affinities (0 where the mask is unset), normalized the weights.
struct AttentionWeights {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t k = 0;
  std::vector<float> raw;
  std::vector<float> normalized;
  ValidityMask mask;

  std::span<const float> raw_at(std::size_t y, std::size_t x) const {
    return std::span<const float>(raw).subspan((y * width + x) * k, k);
  }
  std::span<const float> weights_at(std::size_t y, std::size_t x) const {
    return std::span<const float>(normalized).subspan((y * width + x) * k, k);
  }
  // Index of the largest normalized weight; ties go to the lowest index.
  std::size_t argmax(std::size_t y, std::size_t x) const;
  Tensor normalized_tensor() const;
};

Tensor embed(const Tensor& map, const std::optional<ConvParams>& layer);

AttentionWeights compute_affinities(const Tensor& target_emb, const Tensor& source_emb,
                                    const NeighborhoodSpec& spec);
AttentionWeights normalize_psla(AttentionWeights weights, float temperature = 1.0f);
// max(raw, 0) / sum over valid offsets; one-hot on the center when every
// clamped affinity is zero.
AttentionWeights normalize_matchtrans(AttentionWeights weights);
Tensor aggregate(const Tensor& source, const AttentionWeights& weights, const NeighborhoodSpec& spec);

// Global attention: K = H*W, index q = sy*W + sx, every entry valid.
AttentionWeights compute_global_affinities(const Tensor& target_emb, const Tensor& source_emb);
Tensor aggregate_global(const Tensor& source, const AttentionWeights& weights);

struct Alignment {
  Tensor aligned;
  AttentionWeights weights;
};

Alignment psla_align(const Tensor& target, const Tensor& source, const EmbeddingPair& emb,
                     const NeighborhoodSpec& spec, float temperature = 1.0f);
Tensor nonlocal_align(const Tensor& target, const Tensor& source, const EmbeddingPair& emb);

// Which operator to run and over which neighborhood.
struct AttentionConfig {
  Variant variant = Variant::Psla;
  int max_displacement = 4;
  float temperature = 1.0f;
  NeighborhoodSpec spec;  // empty for Nonlocal

  static AttentionConfig make(Variant variant, int max_displacement, float temperature = 1.0f);
};

// Aligns `source` to `target` with the configured operator. When `times` is
// given, embedding and attention wall time land under "embed" and "attend".
Alignment align(const AttentionConfig& config, const Tensor& target, const Tensor& source, const EmbeddingPair& emb,
                StageTimes* times = nullptr);

// Offset of the argmax weight at (y, x) in source coordinates relative to (y, x).
Offset argmax_offset(const AttentionConfig& config, const AttentionWeights& weights, std::size_t y, std::size_t x);

// Multiply-accumulates of affinity + aggregation over valid offsets.
std::uint64_t attention_macs(const AttentionConfig& config, std::size_t embed_channels, std::size_t channels,
                             std::size_t height, std::size_t width);

namespace ag {

struct EmbeddingVars {
  std::optional<ConvVars> source;
  std::optional<ConvVars> target;
};

EmbeddingVars bind(GradTape& tape, const EmbeddingPair& emb, bool requires_grad = true);
Var embed(GradTape& tape, Var map, const std::optional<ConvVars>& layer);

// Raw affinities (H,W,K) with zeros at invalid offsets.
Var affinities(GradTape& tape, Var target_emb, Var source_emb, const NeighborhoodSpec& spec);
Var masked_softmax(GradTape& tape, Var raw, std::shared_ptr<const ValidityMask> mask, float temperature = 1.0f);
Var matchtrans_normalize(GradTape& tape, Var raw, std::shared_ptr<const ValidityMask> mask);
Var aggregate(GradTape& tape, Var source, Var weights, const NeighborhoodSpec& spec);
Var global_affinities(GradTape& tape, Var target_emb, Var source_emb);
Var global_aggregate(GradTape& tape, Var source, Var weights);

// Full operator: embed, affinity, normalisation, aggregation.
Var align(GradTape& tape, const AttentionConfig& config, Var target, Var source, const EmbeddingVars& emb);

}  // namespace ag
}  // namespace psla
