#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "psla/autograd.hpp"
#include "psla/tensor.hpp"

namespace psla {

// Update Net / Quality Net: 1x1 reduce over the concatenated streams, a 3x3
// hidden layer and a 3x3 head with two output channels, one logit per stream.
// ReLU follows reduce and hidden; the head is linear.
struct TwoStreamFusionNet {
  ConvParams reduce;
  ConvParams hidden;
  ConvParams head;

  // Head starts at zero so the initial fusion is an even 50/50 blend.
  static TwoStreamFusionNet make(std::size_t feat_channels, std::mt19937_64& rng, std::size_t reduce_width = 256,
                                 std::size_t hidden_width = 16);
  std::size_t feat_channels() const noexcept { return reduce.in_channels / 2; }
  void validate() const;
};

// Transform Net bottleneck: 1x1 reduce, then 3x3 mid and 3x3 out layers
// lifting low-level features to the high-level channel count.
struct TransformNet {
  ConvParams reduce;
  ConvParams mid;
  ConvParams out;

  static TransformNet make(std::size_t low_channels, std::size_t feat_channels, std::mt19937_64& rng,
                           std::size_t bottleneck = 256, std::size_t mid_width = 256);
  void validate() const;
};

// Per-location blend weights, both (1,H,W); w_hat weighs the aligned /
// propagated stream and w the current / encoded stream.
struct FusionWeights {
  Tensor w_hat;
  Tensor w;
};

FusionWeights update_net_forward(const Tensor& aligned, const Tensor& current, const TwoStreamFusionNet& net);
Tensor fuse(const FusionWeights& weights, const Tensor& aligned, const Tensor& current);
Tensor transform_net_forward(const Tensor& low, const TransformNet& net);
Tensor quality_net_forward(const Tensor& propagated, const Tensor& encoded, const TwoStreamFusionNet& net);

std::size_t param_count(const ConvParams& layer);
std::size_t param_count(std::span<const ConvParams> layers);
std::size_t param_count(const TwoStreamFusionNet& net);
std::size_t param_count(const TransformNet& net);

namespace ag {

struct FusionNetVars {
  ConvVars reduce, hidden, head;
};
struct TransformNetVars {
  ConvVars reduce, mid, out;
};

FusionNetVars bind(GradTape& tape, const TwoStreamFusionNet& net, bool requires_grad = true);
TransformNetVars bind(GradTape& tape, const TransformNet& net, bool requires_grad = true);

// (2,H,W) softmax weights over the two streams.
Var fusion_weights(GradTape& tape, Var aligned, Var current, const FusionNetVars& net);
// Update Net followed by fuse.
Var fuse_streams(GradTape& tape, Var aligned, Var current, const FusionNetVars& net);
Var transform(GradTape& tape, Var low, const TransformNetVars& net);

}  // namespace ag
}  // namespace psla
