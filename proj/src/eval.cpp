#include "rapnet/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>

#include "rapnet/error.hpp"
#include "rapnet/json_util.hpp"

namespace rapnet::eval {

using nlohmann::json;

GroundTruthMap ground_truth_from(const io::AnnotationMap& annotations,
                                 std::optional<io::Subset> subset) {
  GroundTruthMap out;
  for (const auto& [vid, a] : annotations) {
    if (subset && a.subset != *subset) continue;
    out[vid] = a.segments;
  }
  return out;
}

io::ProposalMap restrict_to(const io::ProposalMap& proposals, const GroundTruthMap& gts) {
  io::ProposalMap out;
  for (const auto& [vid, recs] : proposals) {
    if (gts.count(vid)) out[vid] = recs;
  }
  return out;
}

std::vector<double> EvalConfig::default_tiou_grid() {
  std::vector<double> g;
  for (int k = 0; k < 10; ++k) g.push_back(0.5 + 0.05 * k);
  return g;
}

void EvalConfig::validate() const {
  if (tiou_grid.empty()) throw ConfigError("eval.tiou_grid must not be empty");
  for (double t : tiou_grid) {
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("eval.tiou_grid values must lie in (0, 1]");
  }
  if (an_max < 2) throw ConfigError("eval.an_max must be >= 2");
}

namespace {

std::vector<TemporalSegment> ranked_segments(const std::vector<io::ProposalRecord>& recs) {
  auto sorted = recs;
  io::sort_by_rank(sorted);
  std::vector<TemporalSegment> out;
  out.reserve(sorted.size());
  for (const auto& r : sorted) out.push_back(r.segment);
  return out;
}

constexpr std::size_t kNever = std::numeric_limits<std::size_t>::max();

// For every gt of the corpus and every grid threshold, the first rank at which
// a proposal recovers it.
struct FirstHits {
  std::vector<std::vector<std::size_t>> per_tiou;  // [tiou][gt]
  std::vector<std::size_t> gts_per_video;
  std::vector<std::string> videos;
  std::vector<std::size_t> proposals_per_video;
  std::size_t total = 0;
};

FirstHits first_hits(const io::ProposalMap& proposals, const GroundTruthMap& gts,
                     const std::vector<double>& grid) {
  FirstHits h;
  h.per_tiou.resize(grid.size());
  static const std::vector<io::ProposalRecord> kNone;
  for (const auto& [vid, segs] : gts) {
    if (segs.empty()) continue;
    const auto it = proposals.find(vid);
    const auto ranked = ranked_segments(it == proposals.end() ? kNone : it->second);
    h.videos.push_back(vid);
    h.gts_per_video.push_back(segs.size());
    h.proposals_per_video.push_back(ranked.size());
    for (const auto& g : segs) {
      std::vector<double> ious(ranked.size());
      for (std::size_t r = 0; r < ranked.size(); ++r) ious[r] = segment_iou(g, ranked[r]);
      for (std::size_t t = 0; t < grid.size(); ++t) {
        std::size_t first = kNever;
        for (std::size_t r = 0; r < ranked.size(); ++r) {
          if (ious[r] >= grid[t]) {
            first = r;
            break;
          }
        }
        h.per_tiou[t].push_back(first);
      }
      ++h.total;
    }
  }
  return h;
}

double recall_from(const std::vector<std::size_t>& first, std::size_t begin, std::size_t end,
                   int an) {
  std::size_t hit = 0;
  for (std::size_t i = begin; i < end; ++i) hit += first[i] < static_cast<std::size_t>(an);
  return static_cast<double>(hit) / static_cast<double>(end - begin);
}

}  // namespace

double recall_at(const io::ProposalMap& proposals, const GroundTruthMap& gts, double tiou,
                 int an) {
  if (an < 1) throw ContractError("recall_at: an must be >= 1, got " + std::to_string(an));
  const auto h = first_hits(proposals, gts, {tiou});
  if (h.total == 0) throw EvaluationError("recall_at: corpus has no ground truth");
  return recall_from(h.per_tiou[0], 0, h.total, an);
}

RecallCurve average_recall_curve(const io::ProposalMap& proposals, const GroundTruthMap& gts,
                                 const EvalConfig& cfg) {
  cfg.validate();
  const auto h = first_hits(proposals, gts, cfg.tiou_grid);
  if (h.total == 0) throw EvaluationError("average_recall_curve: corpus has no ground truth");
  RecallCurve c;
  c.tiou_grid = cfg.tiou_grid;
  for (int an = 1; an <= cfg.an_max; ++an) {
    double sum = 0.0;
    for (const auto& first : h.per_tiou) sum += recall_from(first, 0, h.total, an);
    c.an_values.push_back(an);
    c.ar_values.push_back(sum / static_cast<double>(cfg.tiou_grid.size()));
  }
  return c;
}

double auc(const RecallCurve& curve) {
  const auto& ar = curve.ar_values;
  const auto& an = curve.an_values;
  if (ar.size() != an.size() || ar.size() < 2) {
    throw ContractError("auc: curve needs at least two matching points");
  }
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < ar.size(); ++i) {
    area += 0.5 * (ar[i] + ar[i + 1]) * static_cast<double>(an[i + 1] - an[i]);
  }
  return area / static_cast<double>(an.back() - an.front()) * 100.0;
}

EvalReport evaluate(const io::ProposalMap& proposals, const GroundTruthMap& gts,
                    const EvalConfig& cfg) {
  EvalReport r;
  r.curve = average_recall_curve(proposals, gts, cfg);
  auto at = [&](int an) {
    return r.curve.ar_values[static_cast<std::size_t>(std::min(an, cfg.an_max) - 1)];
  };
  r.ar1 = at(1);
  r.ar5 = at(5);
  r.ar10 = at(10);
  r.ar100 = at(100);
  r.auc = auc(r.curve);
  r.config = to_json(cfg);

  const auto h = first_hits(proposals, gts, cfg.tiou_grid);
  std::size_t offset = 0;
  for (std::size_t v = 0; v < h.videos.size(); ++v) {
    const std::size_t n = h.gts_per_video[v];
    double sum = 0.0;
    for (const auto& first : h.per_tiou) sum += recall_from(first, offset, offset + n, cfg.an_max);
    r.per_video.push_back({h.videos[v], n, h.proposals_per_video[v],
                           sum / static_cast<double>(cfg.tiou_grid.size())});
    offset += n;
  }
  return r;
}

json to_json(const EvalConfig& c) { return {{"tiou_grid", c.tiou_grid}, {"an_max", c.an_max}}; }

EvalConfig eval_config_from_json(const json& j) {
  jsonutil::reject_unknown_keys(j, {"tiou_grid", "an_max"}, "eval");
  EvalConfig c;
  jsonutil::read_if_present(j, "tiou_grid", c.tiou_grid, "eval");
  jsonutil::read_if_present(j, "an_max", c.an_max, "eval");
  c.validate();
  return c;
}

json to_json(const EvalReport& r) {
  json per_video = json::array();
  for (const auto& v : r.per_video) {
    per_video.push_back({{"video_id", v.video_id},
                         {"num_gts", v.num_gts},
                         {"num_proposals", v.num_proposals},
                         {"ar_at_max", v.ar_at_max}});
  }
  return {{"AR@1", r.ar1},     {"AR@5", r.ar5}, {"AR@10", r.ar10},
          {"AR@100", r.ar100}, {"AUC", r.auc},  {"per_video", per_video},
          {"config", r.config}};
}

std::string curve_csv(const RecallCurve& curve) {
  std::string out = "an,ar\n";
  char buf[64];
  for (std::size_t i = 0; i < curve.an_values.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%d,%.6f\n", curve.an_values[i], curve.ar_values[i]);
    out += buf;
  }
  return out;
}

std::string curve_svg(const RecallCurve& curve) {
  constexpr double kW = 480.0, kH = 320.0, kPad = 40.0;
  const double lo = curve.an_values.empty() ? 1.0 : curve.an_values.front();
  const double hi = curve.an_values.empty() ? 2.0 : curve.an_values.back();
  const double span = hi > lo ? hi - lo : 1.0;
  char buf[128];
  std::string out =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\" "
      "viewBox=\"0 0 480 320\">\n"
      "<rect x=\"0\" y=\"0\" width=\"480\" height=\"320\" fill=\"white\"/>\n"
      "<line x1=\"40\" y1=\"280\" x2=\"440\" y2=\"280\" stroke=\"black\"/>\n"
      "<line x1=\"40\" y1=\"40\" x2=\"40\" y2=\"280\" stroke=\"black\"/>\n"
      "<text x=\"240\" y=\"310\" text-anchor=\"middle\" font-size=\"12\">AN</text>\n"
      "<text x=\"12\" y=\"160\" text-anchor=\"middle\" font-size=\"12\">AR</text>\n"
      "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < curve.an_values.size(); ++i) {
    const double x = kPad + (curve.an_values[i] - lo) / span * (kW - 2 * kPad);
    const double y = kH - kPad - curve.ar_values[i] * (kH - 2 * kPad);
    std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", x, y);
    out += buf;
  }
  out += "\"/>\n</svg>\n";
  return out;
}

void emit_report(const EvalReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  io::write_text_file(out_dir / "metrics.json", to_json(report).dump(2) + "\n");
  io::write_text_file(out_dir / "ar_curve.csv", curve_csv(report.curve));
  io::write_text_file(out_dir / "ar_curve.svg", curve_svg(report.curve));
}

}  // namespace rapnet::eval
