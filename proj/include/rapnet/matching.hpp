#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rapnet/autodiff.hpp"
#include "rapnet/model.hpp"
#include "rapnet/segment.hpp"

namespace rapnet::match {

struct Positive {
  std::size_t cell = 0;  // index into the anchor grid
  std::size_t gt = 0;    // index into the ground-truth list
};

/// Positives, screened negatives and ignored cells partition the grid.
struct AssignmentResult {
  std::vector<Positive> positives;
  std::vector<std::uint8_t> negative;  // per grid cell
  std::vector<std::uint8_t> ignored;   // per grid cell
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;

  std::size_t n_ignored() const;
};

/// (1) Greedy one-to-one matching of gts to anchor priors by descending IoU,
/// ties broken by cell order then gt index. (2) Unmatched cells whose decoded
/// segment overlaps some gt with IoU > iou_threshold are ignored. (3) The rest
/// are negatives.
AssignmentResult assign_labels(const std::vector<model::AnchorCell>& grid,
                               std::span<const TemporalSegment> decoded,
                               std::span<const TemporalSegment> gts,
                               double iou_threshold);

struct LossWeights {
  double conf = 0.2;
  double center = 1.0;
  double width = 1.0;
  double iou = 1.0;

  static LossWeights from(const model::ModelConfig& c) {
    return {c.lambda_conf, c.lambda_center, c.lambda_width, c.lambda_iou};
  }
};

struct LossBreakdown {
  double conf_pos = 0.0;
  double conf_neg = 0.0;
  double center = 0.0;
  double width = 0.0;
  double iou = 0.0;
  double total = 0.0;
};

/// Tracked scalars for each summand of the proposal loss.
struct LossTerms {
  nn::Var conf_pos;
  nn::Var conf_neg;
  nn::Var center;
  nn::Var width;
  nn::Var iou;
  nn::Var total;

  LossBreakdown values() const;
};

/// Center regression target of a positive: gt center in cell units, clamped to
/// [0, 1] for cells that won a gt centered in a neighbouring cell.
double center_target(const model::AnchorCell& cell, const TemporalSegment& gt);
double width_target(const model::AnchorCell& cell, const TemporalSegment& gt);

LossTerms compute_loss(const model::LevelPredictions& preds,
                       const std::vector<model::AnchorCell>& grid,
                       const AssignmentResult& assignment,
                       std::span<const TemporalSegment> gts, const LossWeights& weights);

/// Mean BCE between the actionness head and the oracle actionness of gts.
nn::Var actionness_loss(const model::LevelPredictions& preds,
                        std::span<const TemporalSegment> gts);

}  // namespace rapnet::match
