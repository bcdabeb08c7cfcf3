#include "psla/training.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "psla/errors.hpp"
#include "psla/ops.hpp"

namespace psla {

namespace {

using Var = GradTape::Var;

long clamp_frame(long v, std::size_t total) { return std::clamp(v, 0L, static_cast<long>(total) - 1); }

std::size_t uniform_in(long lo, long hi, std::mt19937_64& rng) {
  return static_cast<std::size_t>(std::uniform_int_distribution<long>(lo, hi)(rng));
}

// Visits every parameter tensor with its tape leaf.
void for_each_param(ToyModel& model, const ToyModelVars& vars, const std::function<void(Tensor&, Var)>& fn) {
  auto conv = [&](ConvParams& p, const ConvVars& v) {
    fn(p.weights, v.weights);
    if (v.bias) fn(p.bias, *v.bias);
  };
  auto embedding = [&](EmbeddingPair& e, const ag::EmbeddingVars& v) {
    if (e.source) conv(*e.source, *v.source);
    if (e.target) conv(*e.target, *v.target);
  };
  auto fusion = [&](TwoStreamFusionNet& n, const ag::FusionNetVars& v) {
    conv(n.reduce, v.reduce);
    conv(n.hidden, v.hidden);
    conv(n.head, v.head);
  };
  auto& p = model.propagation;
  embedding(p.rfu_embedding, vars.rfu_embedding);
  embedding(p.denseft_embedding, vars.denseft_embedding);
  fusion(p.update_net, vars.update_net);
  fusion(p.quality_net, vars.quality_net);
  conv(p.transform_net.reduce, vars.transform_net.reduce);
  conv(p.transform_net.mid, vars.transform_net.mid);
  conv(p.transform_net.out, vars.transform_net.out);
  conv(model.head, vars.head);
}

}  // namespace

TrainingTriplet sample_triplet(std::size_t i, std::size_t interval, std::size_t total_frames, std::mt19937_64& rng) {
  if (total_frames == 0 || i >= total_frames) throw InvalidInputError("sample_triplet needs 0 <= i < T");
  if (interval == 0) throw InvalidInputError("sample_triplet needs l >= 1");
  const long n = static_cast<long>(i), l = static_cast<long>(interval), half = l / 2;
  TrainingTriplet t;
  t.i = i;
  t.k1 = uniform_in(clamp_frame(n - l, total_frames), clamp_frame(n - half, total_frames), rng);
  t.k2 = uniform_in(clamp_frame(n - half, total_frames), clamp_frame(n + half, total_frames), rng);
  return t;
}

PipelineConfig toy_pipeline_defaults() {
  PipelineConfig c;
  c.d = 4;
  c.interval = 4;
  c.channels = {8, 8, 8};
  c.reduce_width = 16;
  c.hidden_width = 8;
  c.bottleneck = 16;
  c.transform_mid = 16;
  return c;
}

SyntheticVideoConfig toy_video_defaults() {
  SyntheticVideoConfig v;
  v.frames = 12;
  v.feat_channels = 8;
  v.low_channels = 8;
  v.height = 16;
  v.width = 16;
  v.high_noise = 0.3f;
  v.low_noise = 0.5f;
  v.low_projection = LowProjection::Random;
  v.blob_sigma = 2.5f;
  v.low_blob_gain = 0.3f;
  return v;
}

ToyModel ToyModel::make(const PipelineConfig& config, std::mt19937_64& rng) {
  ToyModel m;
  m.propagation = PropagationModel::make(config, rng);
  m.head = ConvParams::uniform_init(config.channels.feat, 1, 1, rng);
  return m;
}

std::vector<ConvParams*> ToyModel::trainable() {
  auto params = propagation.trainable();
  params.push_back(&head);
  return params;
}

ToyDataset make_toy_dataset(const ToyTaskConfig& config, std::size_t videos, std::size_t triplets,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> speed(-config.max_speed, config.max_speed);
  ToyDataset data;
  for (std::size_t v = 0; v < videos; ++v) {
    SyntheticVideoConfig vc = config.video;
    vc.feat_channels = config.pipeline.channels.feat;
    vc.low_channels = config.pipeline.channels.low;
    vc.seed = rng();
    vc.velocity = {speed(rng), speed(rng)};
    data.videos.push_back(make_synthetic_video(vc));
  }
  for (std::size_t n = 0; n < triplets && videos > 0; ++n) {
    const std::size_t v = std::uniform_int_distribution<std::size_t>(0, videos - 1)(rng);
    const std::size_t T = data.videos[v].frames();
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, T - 1)(rng);
    data.triplets.emplace_back(v, sample_triplet(i, config.pipeline.interval, T, rng));
  }
  return data;
}

Tensor toy_predict(const ToyModel& model, const SyntheticVideo& video, const TrainingTriplet& t) {
  const auto& p = model.propagation;
  Tensor out;
  switch (p.config.mode) {
    case Mode::Full: {
      TemporalState state = rfu_step({}, video.high[t.k1], t.k1, p.rfu_embedding, p.attention, p.update_net);
      state = rfu_step(state, video.high[t.k2], t.k2, p.rfu_embedding, p.attention, p.update_net);
      out = denseft_step(state, video.low[t.i], p.transform_net, p.denseft_embedding, p.attention, p.quality_net);
      break;
    }
    case Mode::Propagate: {
      const Tensor encoded = transform_net_forward(video.low[t.i], p.transform_net);
      out = align(p.attention, encoded, video.high[t.k2], p.denseft_embedding).aligned;
      break;
    }
    case Mode::LowOnly:
      out = transform_net_forward(video.low[t.i], p.transform_net);
      break;
  }
  return conv2d(out, model.head);
}

double toy_loss(const ToyModel& model, const SyntheticVideo& video, const TrainingTriplet& t) {
  const Tensor pred = toy_predict(model, video, t);
  const Tensor& target = video.heatmap[t.i];
  double total = 0.0;
  for (std::size_t n = 0; n < pred.size(); ++n) {
    const double d = static_cast<double>(pred[n]) - target[n];
    total += d * d;
  }
  return total / static_cast<double>(pred.size());
}

double evaluate_toy(const ToyModel& model, const ToyDataset& data) {
  if (data.triplets.empty()) throw InvalidInputError("evaluate_toy: no triplets");
  double total = 0.0;
  for (const auto& [v, t] : data.triplets) total += toy_loss(model, data.videos[v], t);
  return total / static_cast<double>(data.triplets.size());
}

ToyModelVars bind(GradTape& tape, const ToyModel& model, bool requires_grad) {
  const auto& p = model.propagation;
  return ToyModelVars{ag::bind(tape, p.rfu_embedding, requires_grad),
                      ag::bind(tape, p.denseft_embedding, requires_grad),
                      ag::bind(tape, p.update_net, requires_grad),
                      ag::bind(tape, p.quality_net, requires_grad),
                      ag::bind(tape, p.transform_net, requires_grad),
                      ag::bind(tape, model.head, requires_grad)};
}

ToyGraph toy_forward(GradTape& tape, const ToyModelVars& vars, const ToyModel& model, const SyntheticVideo& video,
                     const TrainingTriplet& t, bool low_requires_grad) {
  const auto& p = model.propagation;
  ToyGraph graph;
  graph.low_input = tape.leaf(video.low[t.i], low_requires_grad);
  Var low = graph.low_input;
  if (p.config.stop_transform_gradient) low = ag::stop_gradient(tape, low);
  const Var encoded = ag::transform(tape, low, vars.transform_net);
  Var out = encoded;
  if (p.config.mode == Mode::Full) {
    Var f_t = tape.leaf(video.high[t.k1], false);
    const Var key = tape.leaf(video.high[t.k2], false);
    const Var aligned = ag::align(tape, p.attention, key, f_t, vars.rfu_embedding);
    f_t = ag::fuse_streams(tape, aligned, key, vars.update_net);
    const Var propagated = ag::align(tape, p.attention, encoded, f_t, vars.denseft_embedding);
    out = ag::fuse_streams(tape, propagated, encoded, vars.quality_net);
  } else if (p.config.mode == Mode::Propagate) {
    const Var key = tape.leaf(video.high[t.k2], false);
    out = ag::align(tape, p.attention, encoded, key, vars.denseft_embedding);
  }
  graph.prediction = ag::conv2d(tape, out, vars.head);
  return graph;
}

TrainResult train_toy(const ToyTaskConfig& config) {
  config.pipeline.validate();
  if (config.batch == 0 || config.train_videos == 0) throw ConfigError("train_toy needs batch >= 1 and videos >= 1");
  if (!(config.learning_rate >= 0.0f)) throw ConfigError("learning rate must be non-negative");
  std::mt19937_64 rng(config.seed);
  TrainResult result{ToyModel::make(config.pipeline, rng), {}, {}, 0.0};
  ToyModel& model = result.model;

  const ToyDataset train = make_toy_dataset(config, config.train_videos, config.monitor_triplets, rng());
  const ToyDataset heldout = make_toy_dataset(config, config.heldout_videos, config.heldout_triplets, rng());
  const std::size_t drop_at =
      static_cast<std::size_t>(std::ceil(config.drop_fraction * static_cast<double>(config.steps)));

  for (std::size_t step = 0; step < config.steps; ++step) {
    if (!train.triplets.empty()) result.loss_curve.push_back(evaluate_toy(model, train));

    GradTape tape;
    const ToyModelVars vars = bind(tape, model);
    Var total{};
    for (std::size_t b = 0; b < config.batch; ++b) {
      const std::size_t v = std::uniform_int_distribution<std::size_t>(0, train.videos.size() - 1)(rng);
      const auto& video = train.videos[v];
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, video.frames() - 1)(rng);
      const TrainingTriplet t = sample_triplet(i, config.pipeline.interval, video.frames(), rng);
      const Var loss = ag::mse(tape, toy_forward(tape, vars, model, video, t).prediction, video.heatmap[t.i]);
      total = total.valid() ? ag::add(tape, total, loss) : loss;
    }
    const double batch_loss = tape.value(total)[0] / static_cast<double>(config.batch);
    if (!std::isfinite(batch_loss)) throw TrainingError(step, "loss is not finite");
    result.batch_loss.push_back(batch_loss);
    tape.backward(total, Tensor(tape.value(total).shape(), 1.0f / static_cast<float>(config.batch)));

    float lr = config.learning_rate;
    if (step >= drop_at) lr *= 0.1f;
    double scale = 1.0;
    if (config.grad_clip > 0.0f) {
      double norm2 = 0.0;
      for_each_param(model, vars, [&](Tensor&, Var v) {
        for (float g : tape.grad(v).data()) norm2 += static_cast<double>(g) * g;
      });
      const double norm = std::sqrt(norm2);
      if (norm > config.grad_clip) scale = config.grad_clip / norm;
    }
    bool finite = true;
    for_each_param(model, vars, [&](Tensor& param, Var v) {
      const Tensor& g = tape.grad(v);
      for (std::size_t n = 0; n < param.size(); ++n) {
        param[n] -= static_cast<float>(lr * scale * g[n]);
        finite = finite && std::isfinite(param[n]);
      }
    });
    if (!finite) throw TrainingError(step, "parameters diverged");
  }
  if (!train.triplets.empty()) result.loss_curve.push_back(evaluate_toy(model, train));
  result.heldout_loss = heldout.triplets.empty() ? 0.0 : evaluate_toy(model, heldout);
  return result;
}

}  // namespace psla
