#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapnet/data_io.hpp"
#include "rapnet/segment.hpp"

namespace rapnet::eval {

using GroundTruthMap = std::map<std::string, std::vector<TemporalSegment>>;

/// Ground truth per video, optionally restricted to one subset.
GroundTruthMap ground_truth_from(const io::AnnotationMap& annotations,
                                 std::optional<io::Subset> subset = std::nullopt);

/// Keeps only the videos present in `gts`.
io::ProposalMap restrict_to(const io::ProposalMap& proposals, const GroundTruthMap& gts);

struct EvalConfig {
  std::vector<double> tiou_grid = default_tiou_grid();
  int an_max = 100;

  static std::vector<double> default_tiou_grid();
  void validate() const;
};

/// Fraction of corpus gts recovered by some top-an proposal of their video at
/// segment_iou >= tiou. Proposals are ranked by (score desc, start, end).
double recall_at(const io::ProposalMap& proposals, const GroundTruthMap& gts, double tiou,
                 int an);

struct RecallCurve {
  std::vector<int> an_values;
  std::vector<double> ar_values;
  std::vector<double> tiou_grid;
};

/// AR(an) = mean over the grid of recall_at, for an = 1..an_max.
RecallCurve average_recall_curve(const io::ProposalMap& proposals, const GroundTruthMap& gts,
                                 const EvalConfig& cfg = {});

/// Trapezoidal area under AR over [1, an_max], divided by the span, in percent.
double auc(const RecallCurve& curve);

struct VideoRecall {
  std::string video_id;
  std::size_t num_gts = 0;
  std::size_t num_proposals = 0;
  double ar_at_max = 0.0;
};

struct EvalReport {
  double ar1 = 0.0;
  double ar5 = 0.0;
  double ar10 = 0.0;
  double ar100 = 0.0;
  double auc = 0.0;
  RecallCurve curve;
  std::vector<VideoRecall> per_video;
  nlohmann::json config = nlohmann::json::object();
};

EvalReport evaluate(const io::ProposalMap& proposals, const GroundTruthMap& gts,
                    const EvalConfig& cfg = {});

nlohmann::json to_json(const EvalReport& r);
nlohmann::json to_json(const EvalConfig& c);
EvalConfig eval_config_from_json(const nlohmann::json& j);

/// Writes metrics.json, ar_curve.csv and ar_curve.svg into out_dir.
void emit_report(const EvalReport& report, const std::filesystem::path& out_dir);

std::string curve_csv(const RecallCurve& curve);
std::string curve_svg(const RecallCurve& curve);

}  // namespace rapnet::eval
