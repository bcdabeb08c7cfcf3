#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "psla/attention.hpp"
#include "psla/checkpoint.hpp"
#include "psla/fusion.hpp"
#include "psla/synthetic.hpp"
#include "psla/timing.hpp"

namespace psla {

// Framework configuration. Full ("F") runs RFU on key frames and DenseFT
// with the Quality Net on non-key frames; Propagate ("S") only propagates
// the latest key frame through the Transform Net and the aligner; LowOnly
// ("L") feeds the encoded low-level features straight through.
enum class Mode { Full, Propagate, LowOnly };

std::string_view mode_name(Mode m);
Mode parse_mode(std::string_view name);

struct ChannelConfig {
  std::size_t low = 1024;
  std::size_t feat = 1024;
  std::size_t embed = 256;  // 0 disables the embeddings (identity)
};

struct PipelineConfig {
  int d = 4;
  std::size_t interval = 10;
  ChannelConfig channels;
  Variant variant = Variant::Psla;
  Mode mode = Mode::Full;
  float temperature = 1.0f;
  std::size_t reduce_width = 256;
  std::size_t hidden_width = 16;
  std::size_t bottleneck = 256;
  std::size_t transform_mid = 256;
  bool embed_bias = true;
  bool stop_transform_gradient = false;
  // Feature-extraction cost stand-ins timed under "backbone": key frames run
  // heavy_layers 3x3 convs over the high-level map, non-key frames
  // light_layers over the low-level map. Outputs are discarded.
  std::size_t backbone_heavy_layers = 0;
  std::size_t backbone_light_layers = 0;

  void validate() const;
};

// Reads the pipeline keys of a JSON object. Unknown keys outside `extra_keys`
// raise ConfigError naming the key.
PipelineConfig parse_pipeline_config(const nlohmann::json& doc, const std::vector<std::string>& extra_keys = {});
nlohmann::json to_json(const PipelineConfig& config);

// Middle-of-segment key frames over segments of `interval` frames.
struct FrameSchedule {
  std::size_t total_frames = 0;
  std::size_t interval = 1;
  std::vector<std::size_t> key_indices;

  bool is_key(std::size_t frame) const;
  std::size_t segment_of(std::size_t frame) const { return frame / interval; }
};

FrameSchedule schedule(std::size_t total_frames, std::size_t interval);

struct TemporalState {
  Tensor f_t;
  std::optional<std::size_t> last_key_index;
  std::size_t update_count = 0;

  bool initialized() const noexcept { return update_count > 0; }
};

// Recursive Feature Updating at a key frame. The first call adopts the key
// frame's features; later calls align the temporal feature to the key frame
// and blend the two with the Update Net.
TemporalState rfu_step(const TemporalState& state, const Tensor& f_h_key, std::size_t key_index,
                       const EmbeddingPair& emb, const AttentionConfig& attention, const TwoStreamFusionNet& update_net,
                       StageTimes* times = nullptr, Alignment* diagnostics = nullptr);

// Dense Feature Transforming for a non-key frame.
Tensor denseft_step(const TemporalState& state, const Tensor& f_l_nonkey, const TransformNet& transform_net,
                    const EmbeddingPair& emb, const AttentionConfig& attention, const TwoStreamFusionNet& quality_net,
                    StageTimes* times = nullptr, Alignment* diagnostics = nullptr);

// All trainable pieces of the propagation machinery. RFU and DenseFT each
// own an embedding pair.
struct PropagationModel {
  PipelineConfig config;
  AttentionConfig attention;
  EmbeddingPair rfu_embedding;
  EmbeddingPair denseft_embedding;
  TwoStreamFusionNet update_net;
  TwoStreamFusionNet quality_net;
  TransformNet transform_net;
  std::vector<ConvParams> backbone_heavy;
  std::vector<ConvParams> backbone_light;

  static PropagationModel make(const PipelineConfig& config, std::mt19937_64& rng);

  // Layers that take part in the configured mode.
  std::vector<NamedLayer> named_layers() const;
  std::vector<ConvParams*> trainable();
  std::size_t param_count() const;
};

struct ParamLedger {
  std::size_t rfu_embedding = 0;
  std::size_t denseft_embedding = 0;
  std::size_t update_net = 0;
  std::size_t quality_net = 0;
  std::size_t transform_net = 0;
  std::size_t total() const {
    return rfu_embedding + denseft_embedding + update_net + quality_net + transform_net;
  }
};

// Closed-form counts at the configured channel sizes for the configured mode.
ParamLedger param_ledger(const PipelineConfig& config);

struct FrameRecord {
  std::size_t frame = 0;
  bool is_key = false;
  StageTimes stage_times_ms;
  std::optional<double> correspondence_accuracy;
  std::optional<std::size_t> source_key;
};

struct RunStats {
  std::vector<FrameRecord> frames;
  double fps_equivalent = 0.0;
  std::size_t params_total = 0;
  std::optional<double> mean_correspondence_accuracy;
  StageTimes total_ms;
};

nlohmann::json to_json(const RunStats& stats);

struct RunOptions {
  bool keep_alignments = false;
};

struct RunOutput {
  std::vector<Tensor> features;
  std::vector<std::optional<Alignment>> alignments;
  RunStats stats;
};

// Runs the key-frame schedule over a synthetic video in frame order. Non-key
// frames draw on the nearest preceding key frame; frames ahead of the first
// key frame draw on the first key frame.
RunOutput run_video(const SyntheticVideo& video, const PropagationModel& model, const RunOptions& options = {});

// Fraction of interior cells whose argmax offset equals the ground truth;
// nullopt when the true offset is outside the neighborhood or no cell counts.
std::optional<double> correspondence_accuracy(const SyntheticVideo& video, const AttentionConfig& attention,
                                              const AttentionWeights& weights, std::size_t source_frame,
                                              std::size_t target_frame);

}  // namespace psla
