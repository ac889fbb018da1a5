#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "rapnet/data_io.hpp"
#include "rapnet/error.hpp"
#include "rapnet/eval.hpp"
#include "rapnet/postprocess.hpp"

using namespace rapnet;
using namespace rapnet::post;
using io::ProposalRecord;

namespace {

ProposalRecord rec(double s, double e, double score, const std::string& vid = "v") {
  ProposalRecord r;
  r.video_id = vid;
  r.segment = {s, e};
  r.set_stage(io::Stage::kRawConf, score);
  return r;
}

std::vector<double> step_curve(std::size_t T, std::size_t a, std::size_t b) {
  std::vector<double> c(T, 0.0);
  for (std::size_t i = a; i <= b; ++i) c[i] = 1.0;
  return c;
}

double iou(double s1, double e1, double s2, double e2) {
  const double inter = std::max(0.0, std::min(e1, e2) - std::max(s1, s2));
  const double uni = std::max(e1, e2) - std::min(s1, s2);
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace

TEST_CASE("soft-NMS leaves disjoint proposals alone") {
  std::vector<ProposalRecord> p{rec(0.0, 0.1, 0.9), rec(0.2, 0.3, 0.5), rec(0.5, 0.6, 0.7)};
  const auto out = soft_nms(p, {});
  REQUIRE(out.size() == 3);
  CHECK(out[0].score == 0.9);
  CHECK(out[1].score == 0.7);
  CHECK(out[2].score == 0.5);
  CHECK(out[2].stage_scores.post_nms == 0.5);
}

TEST_CASE("soft-NMS decays a duplicate") {
  const auto out = soft_nms({rec(0.2, 0.4, 0.9), rec(0.2, 0.4, 0.8)}, {});
  REQUIRE(out.size() == 2);
  CHECK(out[1].score == doctest::Approx(0.8 * std::exp(-2.0)).epsilon(1e-15));
  CHECK(out[1].score == doctest::Approx(0.10827).epsilon(1e-4));
}

TEST_CASE("soft-NMS matches a quadratic reference on 500 proposals") {
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ProposalRecord> p;
  for (int i = 0; i < 500; ++i) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    p.push_back(rec(a, b + 1e-4, u(rng)));
  }
  for (std::size_t max_kept : {100u, 1000u}) {
    NmsConfig cfg;
    cfg.max_kept = max_kept;
    const auto out = soft_nms(p, cfg);

    std::vector<std::pair<TemporalSegment, double>> pool;
    for (const auto& r : p)
      if (r.score >= cfg.score_floor) pool.emplace_back(r.segment, r.score);
    std::vector<std::pair<TemporalSegment, double>> expected;
    while (!pool.empty() && expected.size() < max_kept) {
      std::size_t top = 0;
      for (std::size_t i = 1; i < pool.size(); ++i)
        if (pool[i].second > pool[top].second) top = i;
      const auto chosen = pool[top];
      pool.erase(pool.begin() + static_cast<long>(top));
      expected.push_back(chosen);
      std::vector<std::pair<TemporalSegment, double>> rest;
      for (auto [seg, s] : pool) {
        const double o = iou(chosen.first.start, chosen.first.end, seg.start, seg.end);
        s *= std::exp(-o * o / cfg.sigma);
        if (s >= cfg.score_floor) rest.emplace_back(seg, s);
      }
      pool = rest;
    }
    REQUIRE(out.size() == expected.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      CHECK(out[i].segment == expected[i].first);
      CHECK(out[i].score == doctest::Approx(expected[i].second).epsilon(1e-13));
      CHECK(out[i].score <= out[i].stage_scores.raw_conf.value());
      if (i) CHECK(out[i - 1].score >= out[i].score);
    }
  }
}

TEST_CASE("TAG regions on a step curve") {
  const auto c = step_curve(128, 32, 95);
  const auto r = tag_regions(c, {});
  REQUIRE(r.size() == 1);
  CHECK(r[0] == TemporalSegment{0.25, 0.75});
  for (double tau = 0.05; tau < 1.0; tau += 0.1) {
    TagConfig one;
    one.thresholds = {tau};
    CHECK(tag_regions(c, one) == r);
  }
  CHECK(tag_regions(std::vector<double>(128, 0.0), {}).empty());
}

TEST_CASE("TAG merges runs across small gaps and keeps the runs") {
  // Runs 20..39 and 45..69: the gap of 5 is 10% of the merged span of 50.
  auto c = step_curve(128, 20, 39);
  for (std::size_t i = 45; i <= 69; ++i) c[i] = 1.0;
  TagConfig loose;
  const auto merged = tag_regions(c, loose);
  REQUIRE(merged.size() == 3);
  CHECK(merged[0] == TemporalSegment{20.0 / 128, 40.0 / 128});
  CHECK(merged[1] == TemporalSegment{20.0 / 128, 70.0 / 128});
  CHECK(merged[2] == TemporalSegment{45.0 / 128, 70.0 / 128});
  TagConfig tight;
  tight.merge_gap_ratio = 0.05;
  const auto apart = tag_regions(c, tight);
  REQUIRE(apart.size() == 2);
  CHECK(apart[0] == TemporalSegment{20.0 / 128, 40.0 / 128});
  CHECK(apart[1] == TemporalSegment{45.0 / 128, 70.0 / 128});
}

TEST_CASE("TAG pools regions across thresholds") {
  std::vector<double> c(16, 0.0);
  for (std::size_t i = 4; i < 12; ++i) c[i] = 0.5;
  for (std::size_t i = 6; i < 8; ++i) c[i] = 0.9;
  TagConfig cfg;
  cfg.thresholds = {0.3, 0.4, 0.8};
  const auto r = tag_regions(c, cfg);
  REQUIRE(r.size() == 2);
  CHECK(r[0] == TemporalSegment{4.0 / 16, 12.0 / 16});
  CHECK(r[1] == TemporalSegment{6.0 / 16, 8.0 / 16});
}

TEST_CASE("boundary snapping") {
  const std::vector<TemporalSegment> regions{{0.25, 0.75}};
  auto out = snap_boundaries({rec(0.26, 0.74, 0.5)}, regions, {});
  CHECK(out[0].segment.start == 0.25);
  CHECK(out[0].segment.end == 0.75);
  CHECK(out[0].score == 0.5);

  out = snap_boundaries({rec(0.1, 0.4, 0.5)}, regions, {});
  CHECK(out[0].segment == TemporalSegment{0.1, 0.4});

  // Snapping the start forward past the end would invert the segment.
  TagConfig wide;
  wide.snap_window = 0.3;
  const std::vector<TemporalSegment> late{{0.5, 0.9}};
  out = snap_boundaries({rec(0.3, 0.45, 0.5)}, late, wide);
  CHECK(out[0].segment == TemporalSegment{0.3, 0.45});
}

TEST_CASE("snapping is idempotent and restores jittered ground truth") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> jit(-0.025, 0.025);
  TagConfig cfg;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t a = 10 + rng() % 40;
    const std::size_t b = a + 20 + rng() % 50;
    const std::vector<TemporalSegment> gt{{a / 128.0, b / 128.0}};
    const auto act = io::oracle_actionness(gt, 128);
    const auto regions = tag_regions(act, cfg);
    std::vector<ProposalRecord> p;
    for (int k = 0; k < 5; ++k) p.push_back(rec(gt[0].start + jit(rng), gt[0].end + jit(rng), 0.5));
    const auto once = snap_boundaries(p, regions, cfg);
    const auto twice = snap_boundaries(once, regions, cfg);
    for (std::size_t k = 0; k < p.size(); ++k) {
      CHECK(once[k].segment == gt[0]);
      CHECK(twice[k].segment == once[k].segment);
    }
  }
}

TEST_CASE("actionness sampling and PEM features") {
  const std::vector<double> ones(128, 1.0);
  const auto f = pem_features(ones, {0.3, 0.6}, {});
  CHECK(f == std::vector<double>(32, 1.0));

  // Step from 0 to 1 at the snippet center where the proposal starts.
  const auto c = step_curve(128, 32, 95);
  const TemporalSegment p{32.5 / 128, 95.5 / 128};
  const auto g = pem_features(c, p, {});
  for (std::size_t i = 0; i < 16; ++i) CHECK(g[i] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(g[16] == 0.0);
  CHECK(g[23] == 1.0);

  const auto d = pem_features(c, {0.5, 0.5}, {});
  for (double v : d) CHECK(v == d[0]);

  CHECK(sample_actionness(std::vector<double>{0.0, 1.0}, 0.5) == 0.5);
  CHECK(sample_actionness(std::vector<double>{0.0, 1.0}, 0.0) == 0.0);
  CHECK(sample_actionness(std::vector<double>{0.0, 1.0}, 1.0) == 1.0);
}

TEST_CASE("PEM training reduces its loss") {
  io::SyntheticSpec spec;
  spec.num_videos = 20;
  spec.feature_dim = 4;
  const auto corpus = io::generate_synthetic_corpus(spec);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  io::ProposalMap props;
  for (const auto& [vid, ann] : corpus.annotations) {
    for (int k = 0; k < 40; ++k) {
      double a = u(rng), b = u(rng);
      if (a > b) std::swap(a, b);
      props[vid].push_back(rec(a, b + 1e-3, u(rng), vid));
    }
  }
  PemConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 64;
  cfg.learning_rate = 3e-3;
  const auto samples = pem_training_samples(props, corpus.actionness, corpus.annotations, cfg);
  CHECK(samples.size() == 20 * 40);
  PemModel pem(cfg);
  const auto losses = train_pem(pem, samples);
  REQUIRE(losses.size() == 15);
  CHECK(losses.back() < 0.8 * losses.front());
  std::vector<std::vector<double>> feats{samples[0].features};
  const double out = pem.predict(feats)[0];
  CHECK(out > 0.0);
  CHECK(out < 1.0);
}

TEST_CASE("PEM checkpoints round-trip") {
  PemConfig cfg;
  cfg.hidden = 8;
  PemModel pem(cfg);
  const auto path = std::filesystem::temp_directory_path() / "rapnet_test_pem.ckpt";
  pem.save(path);
  const auto back = PemModel::load(path);
  CHECK(back.params() == pem.params());
  CHECK(back.config().hidden == 8);
}

TEST_CASE("oracle PEM ranks by confidence times true IoU") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  io::AnnotationMap gts;
  gts["v"] = {"v", 100.0, io::Subset::kValidation, {{0.2, 0.5}, {0.6, 0.8}}, {"a", "a"}};
  io::ProposalMap props;
  for (int k = 0; k < 60; ++k) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    props["v"].push_back(rec(a, b + 1e-3, u(rng)));
  }
  io::ActionnessMap act{{"v", std::vector<double>(128, 0.5)}};
  auto expected = props["v"];
  std::vector<std::pair<double, TemporalSegment>> keyed;
  for (const auto& r : expected) {
    double best = 0.0;
    for (const auto& g : gts["v"].segments)
      best = std::max(best, iou(r.segment.start, r.segment.end, g.start, g.end));
    keyed.emplace_back(r.score * best, r.segment);
  }
  std::sort(keyed.begin(), keyed.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return x.second < y.second;
  });
  const auto rep = pem_rerank(PemModel::oracle({}), props, act, &gts);
  CHECK(rep.missing_actionness.empty());
  for (std::size_t i = 0; i < keyed.size(); ++i) {
    CHECK(props["v"][i].segment == keyed[i].second);
    CHECK(props["v"][i].score == doctest::Approx(keyed[i].first).epsilon(1e-14));
  }
}

TEST_CASE("oracle PEM with uniform confidence sorts by IoU and lifts AUC") {
  io::AnnotationMap gts;
  gts["v"] = {"v", 100.0, io::Subset::kValidation, {{0.2, 0.5}}, {"a"}};
  io::ProposalMap props;
  props["v"] = {rec(0.6, 0.9, 0.9), rec(0.1, 0.4, 0.8), rec(0.2, 0.5, 0.7)};
  const auto gt = eval::ground_truth_from(gts);
  const double before = eval::evaluate(props, gt).auc;
  io::ActionnessMap act{{"v", std::vector<double>(128, 0.5)}};
  pem_rerank(PemModel::oracle({}), props, act, &gts);
  CHECK(props["v"][0].segment == TemporalSegment{0.2, 0.5});
  CHECK(eval::evaluate(props, gt).auc >= before);
  CHECK(eval::evaluate(props, gt).auc > before);

  io::ProposalMap flat;
  flat["v"] = {rec(0.6, 0.9, 0.5), rec(0.1, 0.4, 0.5), rec(0.25, 0.5, 0.5)};
  pem_rerank(PemModel::oracle({}), flat, act, &gts);
  CHECK(flat["v"][0].segment == TemporalSegment{0.25, 0.5});
  CHECK(flat["v"][1].segment == TemporalSegment{0.1, 0.4});
  CHECK(flat["v"][2].segment == TemporalSegment{0.6, 0.9});
}

TEST_CASE("PEM with unit output keeps the order") {
  // A PEM whose output saturates at one leaves raw-confidence order unchanged.
  PemConfig cfg;
  cfg.hidden = 4;
  PemModel pem(cfg);
  for (auto& p : pem.params().items()) p.value.fill(0.0);
  pem.params().get("pem/fc2/bias").value.fill(50.0);
  io::ProposalMap props;
  props["v"] = {rec(0.1, 0.3, 0.9), rec(0.4, 0.6, 0.6), rec(0.0, 0.9, 0.3)};
  const auto before = props["v"];
  io::ActionnessMap act{{"v", std::vector<double>(128, 0.3)}};
  pem_rerank(pem, props, act);
  for (std::size_t i = 0; i < 3; ++i) CHECK(props["v"][i].segment == before[i].segment);
}

TEST_CASE("missing actionness is reported per video") {
  io::ProposalMap props;
  props["a"] = {rec(0.1, 0.3, 0.9, "a")};
  props["b"] = {rec(0.1, 0.3, 0.9, "b")};
  io::ActionnessMap act{{"a", std::vector<double>(128, 0.5)}};
  const auto rep = pem_rerank(PemModel(PemConfig{}), props, act);
  CHECK(rep.missing_actionness == std::vector<std::string>{"b"});
  CHECK(props["b"][0].score == 0.9);
  CHECK(props["a"][0].stage_scores.pem.has_value());
}

TEST_CASE("ensemble fusion") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  io::ProposalMap m;
  for (int k = 0; k < 20; ++k) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    m["v"].push_back(rec(a, b + 1e-3, 0.1 + 0.9 * u(rng)));
  }
  const std::vector<io::ProposalMap> twice{m, m};
  const auto fused = ensemble_fuse(twice, {});
  // Reference: soft-NMS of the min-max normalized single list.
  auto norm = m["v"];
  double lo = 1, hi = 0;
  for (const auto& r : norm) {
    lo = std::min(lo, r.score);
    hi = std::max(hi, r.score);
  }
  for (auto& r : norm) r.set_stage(io::Stage::kRawConf, (r.score - lo) / (hi - lo));
  const auto single = soft_nms(norm, {});
  CHECK(fused.at("v")[0].segment == single[0].segment);
  std::vector<TemporalSegment> distinct;
  for (const auto& r : fused.at("v"))
    if (std::find(distinct.begin(), distinct.end(), r.segment) == distinct.end()) distinct.push_back(r.segment);
  REQUIRE(distinct.size() >= 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(distinct[i] == single[i].segment);

  io::ProposalMap zero;
  for (const auto& r : m["v"]) zero["v"].push_back(rec(r.segment.start, r.segment.end, 0.0));
  const std::vector<io::ProposalMap> mixed{m, zero};
  for (const auto& r : ensemble_fuse(mixed, {}).at("v")) {
    CHECK(r.source.rfind("source0", 0) == 0);
  }

  io::ProposalMap other;
  other["w"] = {rec(0.1, 0.2, 0.4, "w")};
  FuseReport rep;
  const std::vector<io::ProposalMap> partial{m, other};
  const auto f = ensemble_fuse(partial, {}, &rep);
  CHECK(rep.single_source_videos == 2);
  CHECK(f.at("w").size() == 1);
  CHECK_THROWS_AS(ensemble_fuse(std::vector<io::ProposalMap>{m}, {}), ContractError);
}

TEST_CASE("postprocess config JSON") {
  TagConfig t;
  t.thresholds = {0.2, 0.7};
  CHECK(to_json(tag_config_from_json(to_json(t))) == to_json(t));
  TagConfig bad;
  bad.thresholds = {0.5, 0.3};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  NmsConfig n;
  n.sigma = 0.0;
  CHECK_THROWS_AS(n.validate(), ConfigError);
  CHECK_THROWS_AS(nms_config_from_json({{"sigmaa", 1.0}}), ConfigError);
  PemConfig p;
  p.hidden = 7;
  CHECK(to_json(pem_config_from_json(to_json(p))) == to_json(p));
}
