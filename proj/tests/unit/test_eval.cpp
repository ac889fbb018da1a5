#include <algorithm>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "rapnet/data_io.hpp"
#include "rapnet/error.hpp"
#include "rapnet/eval.hpp"

using namespace rapnet;
using namespace rapnet::eval;
using io::ProposalRecord;

namespace {

ProposalRecord rec(double s, double e, double score) {
  ProposalRecord r;
  r.segment = {s, e};
  r.set_stage(io::Stage::kRawConf, score);
  return r;
}

double ref_iou(const TemporalSegment& a, const TemporalSegment& b) {
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = std::max(a.end, b.end) - std::min(a.start, b.start);
  return inter / uni;
}

// Exhaustive recall: rank each video's proposals, then test every (gt, proposal) pair.
double brute_recall(io::ProposalMap props, const GroundTruthMap& gts, double tiou, int an) {
  std::size_t hit = 0, total = 0;
  for (const auto& [vid, g] : gts) {
    auto& p = props[vid];
    std::sort(p.begin(), p.end(), [](const ProposalRecord& a, const ProposalRecord& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.segment.start != b.segment.start) return a.segment.start < b.segment.start;
      return a.segment.end < b.segment.end;
    });
    for (const auto& gt : g) {
      ++total;
      bool found = false;
      for (int k = 0; k < an && k < static_cast<int>(p.size()); ++k) {
        found = found || ref_iou(p[static_cast<std::size_t>(k)].segment, gt) >= tiou;
      }
      hit += found;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

void random_corpus(std::mt19937_64& rng, io::ProposalMap& props, GroundTruthMap& gts) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto seg = [&] {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    return TemporalSegment{a, std::min(1.0, b + 1e-3)};
  };
  const int videos = 1 + static_cast<int>(rng() % 5);
  for (int v = 0; v < videos; ++v) {
    const std::string id = "v" + std::to_string(v);
    const int ng = static_cast<int>(rng() % 4);
    for (int k = 0; k < ng; ++k) gts[id].push_back(seg());
    if (ng == 0) gts[id];
    const int np = static_cast<int>(rng() % 21);
    for (int k = 0; k < np; ++k) {
      const auto s = seg();
      props[id].push_back(rec(s.start, s.end, std::round(u(rng) * 10) / 10));
    }
  }
  if (std::all_of(gts.begin(), gts.end(), [](const auto& kv) { return kv.second.empty(); })) {
    gts["v0"].push_back(seg());
  }
}

}  // namespace

TEST_CASE("recall examples") {
  GroundTruthMap g{{"v", {{0.2, 0.6}}}};
  io::ProposalMap p;
  p["v"] = {rec(0.4, 0.8, 0.9)};
  CHECK(recall_at(p, g, 0.5, 1) == 0.0);
  CHECK(recall_at(p, g, 0.3, 1) == 1.0);

  p["v"] = {rec(0.2, 0.6, 0.9)};
  for (double t : EvalConfig::default_tiou_grid()) CHECK(recall_at(p, g, t, 1) == 1.0);
  CHECK_THROWS_AS(recall_at(p, g, 0.5, 0), ContractError);
}

TEST_CASE("crafted two-video corpus") {
  GroundTruthMap g{{"a", {{0.1, 0.3}, {0.5, 0.9}}}, {"b", {{0.0, 0.4}}}};
  io::ProposalMap p;
  p["a"] = {rec(0.5, 0.85, 0.9), rec(0.1, 0.25, 0.8), rec(0.0, 1.0, 0.95)};
  p["b"] = {rec(0.05, 0.4, 0.6), rec(0.6, 0.7, 0.7)};
  // By hand at tIoU 0.7: a/gt0 hit by rank 3 (IoU 0.75), a/gt1 by rank 2 (IoU 0.875), b/gt0 by rank 2 (IoU 0.875).
  CHECK(recall_at(p, g, 0.7, 1) == 0.0);
  CHECK(recall_at(p, g, 0.7, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(recall_at(p, g, 0.7, 3) == 1.0);
  CHECK(recall_at(p, g, 0.8, 3) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  for (double t = 0.05; t < 1.0; t += 0.05)
    for (int an = 1; an <= 4; ++an) CHECK(recall_at(p, g, t, an) == brute_recall(p, g, t, an));
}

TEST_CASE("all metrics equal an exhaustive oracle on random corpora") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    io::ProposalMap p;
    GroundTruthMap g;
    random_corpus(rng, p, g);
    EvalConfig cfg;
    const auto curve = average_recall_curve(p, g, cfg);
    for (int an = 1; an <= 100; ++an) {
      double sum = 0.0;
      for (double t : cfg.tiou_grid) sum += brute_recall(p, g, t, an);
      CHECK(curve.ar_values[static_cast<std::size_t>(an - 1)] == sum / cfg.tiou_grid.size());
      if (an > 1) CHECK(curve.ar_values[an - 1] >= curve.ar_values[an - 2]);
    }
    for (int an : {1, 5, 20}) {
      double prev = 1.0;
      for (double t : cfg.tiou_grid) {
        const double r = recall_at(p, g, t, an);
        CHECK(r <= prev);
        prev = r;
      }
    }
    // Scale invariance.
    auto scaled = p;
    for (auto& [_, v] : scaled)
      for (auto& r : v) r.set_stage(io::Stage::kRawConf, r.score * 0.37);
    const auto a = evaluate(p, g, cfg), b = evaluate(scaled, g, cfg);
    CHECK(a.curve.ar_values == b.curve.ar_values);
    CHECK(a.auc == b.auc);
  }
}

TEST_CASE("no proposals gives zero recall") {
  GroundTruthMap g{{"v", {{0.2, 0.6}}}};
  const auto c = average_recall_curve({}, g);
  for (double v : c.ar_values) CHECK(v == 0.0);
  CHECK(auc(c) == 0.0);
}

TEST_CASE("empty corpus is an evaluation error") {
  CHECK_THROWS_AS(average_recall_curve({}, {}), EvaluationError);
  CHECK_THROWS_AS(evaluate({}, GroundTruthMap{{"v", {}}}), EvaluationError);
}

TEST_CASE("AUC examples") {
  RecallCurve c;
  for (int an = 1; an <= 100; ++an) {
    c.an_values.push_back(an);
    c.ar_values.push_back(1.0);
  }
  CHECK(auc(c) == doctest::Approx(100.0).epsilon(1e-14));
  std::fill(c.ar_values.begin(), c.ar_values.end(), 0.5);
  CHECK(auc(c) == doctest::Approx(50.0).epsilon(1e-14));
  for (int an = 1; an <= 100; ++an) c.ar_values[an - 1] = (an - 1) / 99.0;
  CHECK(auc(c) == doctest::Approx(50.0).epsilon(1e-12));
}

TEST_CASE("report files") {
  GroundTruthMap g{{"v", {{0.2, 0.6}}}};
  io::ProposalMap p;
  p["v"] = {rec(0.2, 0.6, 0.9)};
  auto r = evaluate(p, g);
  CHECK(r.ar100 == 1.0);
  CHECK(r.per_video.size() == 1);
  r.curve.ar_values.back() = 0.7821;
  const auto csv = curve_csv(r.curve);
  CHECK(csv.rfind("an,ar\n", 0) == 0);
  CHECK(csv.find("\n100,0.782100\n") != std::string::npos);
  CHECK(curve_svg(r.curve) == curve_svg(r.curve));

  const auto dir = std::filesystem::temp_directory_path() / "rapnet_test_eval";
  std::filesystem::remove_all(dir);
  emit_report(r, dir);
  const auto first = io::read_text_file(dir / "ar_curve.svg");
  emit_report(r, dir);
  CHECK(io::read_text_file(dir / "ar_curve.svg") == first);
  const auto j = nlohmann::json::parse(io::read_text_file(dir / "metrics.json"));
  CHECK(j.contains("AR@100"));
  CHECK(j.contains("AUC"));

  r.per_video.clear();
  emit_report(r, dir);
  CHECK(nlohmann::json::parse(io::read_text_file(dir / "metrics.json"))["per_video"].empty());
}

TEST_CASE("eval config") {
  const auto grid = EvalConfig::default_tiou_grid();
  REQUIRE(grid.size() == 10);
  CHECK(grid.front() == 0.5);
  CHECK(grid.back() == doctest::Approx(0.95).epsilon(1e-15));
  EvalConfig bad;
  bad.an_max = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  EvalConfig c;
  c.an_max = 50;
  CHECK(eval_config_from_json(to_json(c)).an_max == 50);
}

TEST_CASE("ground truth by subset") {
  io::AnnotationMap a;
  a["x"] = {"x", 10.0, io::Subset::kTraining, {{0.1, 0.2}}, {"a"}};
  a["y"] = {"y", 10.0, io::Subset::kValidation, {{0.3, 0.4}}, {"a"}};
  const auto g = ground_truth_from(a, io::Subset::kValidation);
  CHECK(g.size() == 1);
  CHECK(g.count("y") == 1);
  io::ProposalMap p;
  p["x"] = {rec(0.1, 0.2, 0.5)};
  p["y"] = {rec(0.1, 0.2, 0.5)};
  CHECK(restrict_to(p, g).size() == 1);
}
