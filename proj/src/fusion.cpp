#include "psla/fusion.hpp"

#include <cmath>
#include <string>

#include "psla/errors.hpp"
#include "psla/ops.hpp"

namespace psla {

namespace {

void require_same_dims(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 3 || !a.same_shape(b)) {
    throw ConfigError(std::string(what) + ": stream dims differ " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
}

Tensor two_stream_logits(const Tensor& a, const Tensor& b, const TwoStreamFusionNet& net) {
  Tensor x = relu(conv2d(concat_channels(a, b), net.reduce));
  x = relu(conv2d(x, net.hidden));
  return conv2d(x, net.head);
}

}  // namespace

TwoStreamFusionNet TwoStreamFusionNet::make(std::size_t feat_channels, std::mt19937_64& rng,
                                            std::size_t reduce_width, std::size_t hidden_width) {
  TwoStreamFusionNet net;
  net.reduce = ConvParams::uniform_init(2 * feat_channels, reduce_width, 1, rng);
  net.hidden = ConvParams::uniform_init(reduce_width, hidden_width, 3, rng);
  net.head = ConvParams::zeros(hidden_width, 2, 3);
  return net;
}

void TwoStreamFusionNet::validate() const {
  reduce.validate();
  hidden.validate();
  head.validate();
  if (reduce.kernel_size != 1 || hidden.kernel_size != 3 || head.kernel_size != 3) {
    throw ConfigError("fusion net expects 1x1 reduce and 3x3 hidden/head layers");
  }
  if (reduce.in_channels % 2 != 0) throw ConfigError("fusion net reduce must take two equal streams");
  if (hidden.in_channels != reduce.out_channels || head.in_channels != hidden.out_channels) {
    throw ConfigError("fusion net layer widths do not chain");
  }
  if (head.out_channels != 2) throw ConfigError("fusion net head must have exactly 2 output channels");
}

TransformNet TransformNet::make(std::size_t low_channels, std::size_t feat_channels, std::mt19937_64& rng,
                                std::size_t bottleneck, std::size_t mid_width) {
  TransformNet net;
  net.reduce = ConvParams::uniform_init(low_channels, bottleneck, 1, rng);
  net.mid = ConvParams::uniform_init(bottleneck, mid_width, 3, rng);
  net.out = ConvParams::uniform_init(mid_width, feat_channels, 3, rng);
  return net;
}

void TransformNet::validate() const {
  reduce.validate();
  mid.validate();
  out.validate();
  if (reduce.kernel_size != 1 || mid.kernel_size != 3 || out.kernel_size != 3) {
    throw ConfigError("transform net expects 1x1 reduce and 3x3 mid/out layers");
  }
  if (mid.in_channels != reduce.out_channels || out.in_channels != mid.out_channels) {
    throw ConfigError("transform net layer widths do not chain");
  }
}

FusionWeights update_net_forward(const Tensor& aligned, const Tensor& current, const TwoStreamFusionNet& net) {
  require_same_dims(aligned, current, "update_net_forward");
  net.validate();
  if (aligned.channels() != net.feat_channels()) {
    throw ConfigError("fusion net expects " + std::to_string(net.feat_channels()) + " channels per stream, got " +
                      std::to_string(aligned.channels()));
  }
  const Tensor logits = two_stream_logits(aligned, current, net);
  const std::size_t H = aligned.height(), W = aligned.width(), P = H * W;
  FusionWeights fw{Tensor::feature_map(1, H, W), Tensor::feature_map(1, H, W)};
  for (std::size_t p = 0; p < P; ++p) {
    const float a = logits[p], b = logits[P + p];
    const float m = std::max(a, b);
    const double ea = std::exp(static_cast<double>(a - m));
    const double eb = std::exp(static_cast<double>(b - m));
    fw.w_hat[p] = static_cast<float>(ea / (ea + eb));
    fw.w[p] = static_cast<float>(eb / (ea + eb));
  }
  return fw;
}

Tensor fuse(const FusionWeights& weights, const Tensor& aligned, const Tensor& current) {
  require_same_dims(aligned, current, "fuse");
  if (weights.w_hat.rank() != 3 || weights.w_hat.plane() != aligned.plane() || !weights.w.same_shape(weights.w_hat)) {
    throw ConfigError("fuse: weight maps do not match feature dims");
  }
  const std::size_t C = aligned.channels(), P = aligned.plane();
  Tensor out(aligned.shape());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < P; ++p) {
      out[c * P + p] = weights.w_hat[p] * aligned[c * P + p] + weights.w[p] * current[c * P + p];
    }
  }
  return out;
}

Tensor transform_net_forward(const Tensor& low, const TransformNet& net) {
  net.validate();
  if (low.rank() != 3 || low.channels() != net.reduce.in_channels) {
    throw ConfigError("transform net expects " + std::to_string(net.reduce.in_channels) +
                      " low-level channels, got map " + shape_string(low.shape()));
  }
  Tensor x = relu(conv2d(low, net.reduce));
  x = relu(conv2d(x, net.mid));
  return conv2d(x, net.out);
}

Tensor quality_net_forward(const Tensor& propagated, const Tensor& encoded, const TwoStreamFusionNet& net) {
  return fuse(update_net_forward(propagated, encoded, net), propagated, encoded);
}

std::size_t param_count(const ConvParams& layer) { return layer.param_count(); }

std::size_t param_count(std::span<const ConvParams> layers) {
  std::size_t total = 0;
  for (const auto& l : layers) total += l.param_count();
  return total;
}

std::size_t param_count(const TwoStreamFusionNet& net) {
  return net.reduce.param_count() + net.hidden.param_count() + net.head.param_count();
}

std::size_t param_count(const TransformNet& net) {
  return net.reduce.param_count() + net.mid.param_count() + net.out.param_count();
}

namespace ag {

FusionNetVars bind(GradTape& tape, const TwoStreamFusionNet& net, bool requires_grad) {
  net.validate();
  return {bind(tape, net.reduce, requires_grad), bind(tape, net.hidden, requires_grad),
          bind(tape, net.head, requires_grad)};
}

TransformNetVars bind(GradTape& tape, const TransformNet& net, bool requires_grad) {
  net.validate();
  return {bind(tape, net.reduce, requires_grad), bind(tape, net.mid, requires_grad),
          bind(tape, net.out, requires_grad)};
}

Var fusion_weights(GradTape& tape, Var aligned, Var current, const FusionNetVars& net) {
  require_same_dims(tape.value(aligned), tape.value(current), "fusion_weights");
  Var x = relu(tape, conv2d(tape, concat_channels(tape, aligned, current), net.reduce));
  x = relu(tape, conv2d(tape, x, net.hidden));
  return channel_softmax(tape, conv2d(tape, x, net.head));
}

Var fuse_streams(GradTape& tape, Var aligned, Var current, const FusionNetVars& net) {
  return fuse(tape, fusion_weights(tape, aligned, current, net), aligned, current);
}

Var transform(GradTape& tape, Var low, const TransformNetVars& net) {
  Var x = relu(tape, conv2d(tape, low, net.reduce));
  x = relu(tape, conv2d(tape, x, net.mid));
  return conv2d(tape, x, net.out);
}

}  // namespace ag
}  // namespace psla
