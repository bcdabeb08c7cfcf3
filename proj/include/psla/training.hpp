#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "psla/autograd.hpp"
#include "psla/pipeline.hpp"
#include "psla/synthetic.hpp"

namespace psla {

struct TrainingTriplet {
  std::size_t k1 = 0;  // initialises F_t
  std::size_t k2 = 0;  // RFU update
  std::size_t i = 0;   // supervised non-key frame
};

// k1 uniform in [i-l, i-l/2], k2 uniform in [i-l/2, i+l/2], with l/2 rounded
// down and both windows clamped to [0, T).
TrainingTriplet sample_triplet(std::size_t i, std::size_t interval, std::size_t total_frames, std::mt19937_64& rng);

PipelineConfig toy_pipeline_defaults();
SyntheticVideoConfig toy_video_defaults();

struct ToyTaskConfig {
  std::uint64_t seed = 0;
  PipelineConfig pipeline = toy_pipeline_defaults();
  // Template for every video; seed and velocity are drawn per video.
  SyntheticVideoConfig video = toy_video_defaults();
  int max_speed = 1;
  std::size_t train_videos = 8;
  std::size_t heldout_videos = 4;
  std::size_t steps = 500;
  std::size_t batch = 4;
  float learning_rate = 0.1f;
  // Step size is divided by 10 from this fraction of the run onwards.
  double drop_fraction = 2.0 / 3.0;
  float grad_clip = 2.0f;  // global norm, 0 disables
  std::size_t monitor_triplets = 16;
  std::size_t heldout_triplets = 32;
};

struct ToyModel {
  PropagationModel propagation;
  ConvParams head;  // 1x1, feat -> 1

  static ToyModel make(const PipelineConfig& config, std::mt19937_64& rng);
  std::vector<ConvParams*> trainable();
};

struct TrainResult {
  ToyModel model;
  // Loss on a fixed monitor set before every step plus once after the last.
  std::vector<double> loss_curve;
  // Mean minibatch loss of each step.
  std::vector<double> batch_loss;
  double heldout_loss = 0.0;
};

struct ToyDataset {
  std::vector<SyntheticVideo> videos;
  std::vector<std::pair<std::size_t, TrainingTriplet>> triplets;  // fixed evaluation triplets
};

ToyDataset make_toy_dataset(const ToyTaskConfig& config, std::size_t videos, std::size_t triplets,
                            std::uint64_t seed);

// Heatmap prediction for the triplet's frame i, using the pure operators.
Tensor toy_predict(const ToyModel& model, const SyntheticVideo& video, const TrainingTriplet& t);
double toy_loss(const ToyModel& model, const SyntheticVideo& video, const TrainingTriplet& t);
double evaluate_toy(const ToyModel& model, const ToyDataset& data);

struct ToyModelVars {
  ag::EmbeddingVars rfu_embedding;
  ag::EmbeddingVars denseft_embedding;
  ag::FusionNetVars update_net;
  ag::FusionNetVars quality_net;
  ag::TransformNetVars transform_net;
  ConvVars head;
};

ToyModelVars bind(GradTape& tape, const ToyModel& model, bool requires_grad = true);

struct ToyGraph {
  GradTape::Var prediction;
  GradTape::Var low_input;
};

// Tape version of toy_predict. The low-level input is a leaf so tests can
// inspect the gradient that reaches it.
ToyGraph toy_forward(GradTape& tape, const ToyModelVars& vars, const ToyModel& model, const SyntheticVideo& video,
                     const TrainingTriplet& t, bool low_requires_grad = false);

TrainResult train_toy(const ToyTaskConfig& config);

}  // namespace psla
