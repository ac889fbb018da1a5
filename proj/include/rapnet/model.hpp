#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapnet/anchors.hpp"
#include "rapnet/autodiff.hpp"
#include "rapnet/data_io.hpp"

namespace rapnet::model {

struct ModelConfig {
  std::size_t input_T = 128;
  std::size_t input_D = 256;
  std::size_t levels = 6;
  std::size_t anchors_per_level = 2;
  std::size_t trunk_channels = 64;
  /// Levels that get a self-attention block; nullopt means every level.
  std::optional<std::vector<std::size_t>> attention_levels;
  double lambda_conf = 0.2;
  double lambda_center = 1.0;
  double lambda_width = 1.0;
  double lambda_iou = 1.0;
  /// Weight of the auxiliary actionness BCE; not part of the proposal loss.
  double lambda_actionness = 1.0;
  double iou_threshold = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  bool has_attention(std::size_t level) const;
  std::size_t level_length(std::size_t level) const { return input_T >> level; }
  /// 2^level / T.
  double level_stride(std::size_t level) const;
};

nlohmann::json to_json(const ModelConfig& c);
/// Rejects unknown keys.
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Model {
  ModelConfig config;
  nn::ParameterSet params;
  /// Anchor widths the model was trained with; stored in checkpoints.
  std::optional<anchors::AnchorSet> anchors;
};

/// Conv trunk, per-level attention, top-down fusion, heads. Deterministic in
/// config.seed.
Model build_model(const ModelConfig& config);

struct LevelOutput {
  nn::Var conf;    // [M x T_i] logits
  nn::Var center;  // [M x T_i] logits of the in-cell offset
  nn::Var width;   // [M x T_i] log width relative to the anchor
};

struct LevelPredictions {
  std::vector<LevelOutput> levels;
  nn::Var actionness;            // [1 x T] logits from the finest merged level
  std::vector<nn::Var> pyramid;  // merged features, level i is [C x T/2^i]
};

/// features is [T x D]. Parameters are bound as tracked leaves.
LevelPredictions forward(Model& model, nn::Tape& tape, const nn::Tensor& features);
/// Inference: parameters enter the tape as constants.
LevelPredictions forward(const Model& model, nn::Tape& tape, const nn::Tensor& features);

/// One (level, position, anchor) cell of the prediction grid.
struct AnchorCell {
  int level = 0;
  int position = 0;
  int anchor = 0;
  double stride = 0.0;
  double anchor_width = 0.0;
  /// Cell-centered anchor segment, clamped to [0, 1].
  TemporalSegment prior;
};

/// Cells in (level, position, anchor) order.
std::vector<AnchorCell> anchor_grid(const ModelConfig& config,
                                    const anchors::AnchorSet& anchors);

/// Unclamped decoded interval for a cell.
TemporalSegment decode_cell_raw(const AnchorCell& cell, double center_logit,
                                double width_log);
/// Decoded interval clamped to [0, 1]; may be empty.
TemporalSegment decode_cell(const AnchorCell& cell, double center_logit, double width_log);

struct EncodedTarget {
  double center_logit;
  double width_log;
};
/// Inverse of decode_cell_raw. The target center must lie strictly inside the
/// cell.
EncodedTarget encode_cell(const AnchorCell& cell, const TemporalSegment& target);

/// Clamped decoded segment per grid cell, aligned with anchor_grid().
std::vector<TemporalSegment> decoded_segments(const LevelPredictions& preds,
                                              const std::vector<AnchorCell>& grid);

struct DecodeResult {
  std::vector<io::ProposalRecord> records;
  std::size_t dropped = 0;
};

/// One record per grid cell; empty segments after clamping are dropped.
DecodeResult decode(const LevelPredictions& preds, const std::vector<AnchorCell>& grid,
                    const std::string& video_id, const std::string& source = "rapnet");

/// sigmoid of the actionness head.
std::vector<double> actionness_curve(const LevelPredictions& preds);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace rapnet::model
