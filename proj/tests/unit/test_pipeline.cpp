#include <filesystem>
#include <set>

#include "doctest.h"
#include "rapnet/error.hpp"
#include "rapnet/pipeline.hpp"

using namespace rapnet;
using namespace rapnet::pipeline;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

PipelineConfig small_config() {
  PipelineConfig c;
  c.synthetic.num_videos = 12;
  c.synthetic.feature_dim = 8;
  c.synthetic.temporal_length = 32;
  c.model.input_T = 32;
  c.model.input_D = 8;
  c.model.levels = 3;
  c.model.trunk_channels = 8;
  c.anchors.k = 6;
  c.train.epochs = 2;
  c.train.batch_size = 4;
  c.pem.epochs = 2;
  c.pem.hidden = 8;
  return c;
}

}  // namespace

TEST_CASE("config round-trips through JSON") {
  auto c = small_config();
  c.postprocess.tag = false;
  c.nms.sigma = 0.3;
  const auto back = pipeline_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_FALSE(back.postprocess.tag);
}

TEST_CASE("missing sections keep defaults") {
  const auto c = pipeline_config_from_json(json::object());
  CHECK(to_json(c) == to_json(PipelineConfig{}));
  const auto d = pipeline_config_from_json({{"train", {{"epochs", 3}}}});
  CHECK(d.train.epochs == 3);
  CHECK(d.train.batch_size == PipelineConfig{}.train.batch_size);
}

TEST_CASE("unknown keys are rejected") {
  CHECK_THROWS_AS(pipeline_config_from_json({{"trian", json::object()}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json({{"train", {{"epoch", 3}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json({{"synthetic", {{"videos", 3}}}}), ConfigError);
}

TEST_CASE("cross-section invariants") {
  auto c = small_config();
  c.anchors.k = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.model.input_D = 16;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.model.input_T = 64;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(small_config().validate());
  CHECK_NOTHROW(PipelineConfig{}.validate());
}

TEST_CASE("config files") {
  const auto dir = fs::temp_directory_path() / "rapnet_test_pipeline_cfg";
  fs::remove_all(dir);
  fs::create_directories(dir);
  io::write_text_file(dir / "bad.json", "{");
  CHECK_THROWS_AS(load_pipeline_config(dir / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_pipeline_config(dir / "missing.json"), IoError);
  echo_config(to_json(small_config()), dir);
  CHECK(to_json(load_pipeline_config(dir / "config.json")) == to_json(small_config()));
}

TEST_CASE("corpus layout and examples") {
  const auto cfg = small_config();
  const auto corpus = io::generate_synthetic_corpus(cfg.synthetic);
  const auto dir = fs::temp_directory_path() / "rapnet_test_pipeline_data";
  fs::remove_all(dir);
  write_corpus(corpus, dir);
  CHECK(fs::exists(annotations_path(dir)));
  CHECK(fs::exists(oracle_actionness_path(dir)));
  const auto feats = read_features(features_dir(dir));
  REQUIRE(feats.size() == 12);
  for (std::size_t i = 0; i < feats.size(); ++i) CHECK(feats[i].values == corpus.features[i].values);
  const auto ann = io::load_annotations(annotations_path(dir)).videos;
  const auto train_ex = make_examples(ann, feats, io::Subset::kTraining, 32);
  const auto val_ex = make_examples(ann, feats, io::Subset::kValidation, 32);
  CHECK(train_ex.size() + val_ex.size() == 12);
  CHECK(val_ex.size() == 2);

  const auto anchors = cluster_anchors(ann, cfg.anchors, cfg.model.levels);
  CHECK(anchors.num_levels() == 3);
  CHECK(anchors.per_level() == 2);
}

TEST_CASE("small end-to-end run is deterministic") {
  const auto cfg = small_config();
  const auto corpus = io::generate_synthetic_corpus(cfg.synthetic);
  const auto root = fs::temp_directory_path() / "rapnet_test_pipeline_run";
  fs::remove_all(root);
  write_corpus(corpus, root / "data");
  const auto a = train_from_disk(cfg, root / "data", root / "run_a");
  const auto b = train_from_disk(cfg, root / "data", root / "run_b");
  CHECK(io::read_text_file(a.checkpoint) == io::read_text_file(b.checkpoint));
  CHECK(io::read_text_file(a.pem_checkpoint) == io::read_text_file(b.pem_checkpoint));
  CHECK(a.epochs.size() == 2);

  const auto m = model::load_model(a.checkpoint);
  REQUIRE(m.anchors.has_value());
  const auto feats = read_features(features_dir(root / "data"));
  const auto out = infer(m, feats);
  CHECK(out.proposals.size() == 12);
  CHECK(out.actionness.at("v_000000").size() == 32);
  const auto pem = post::PemModel::load(a.pem_checkpoint);
  PostprocessOptions opts;
  opts.tag = cfg.tag;
  opts.pem = &pem;
  const auto p1 = postprocess(out.proposals, out.actionness, opts);
  const auto p2 = postprocess(out.proposals, out.actionness, opts);
  CHECK(io::proposals_to_json(p1) == io::proposals_to_json(p2));
  for (const auto& [vid, recs] : p1) {
    CHECK(recs.size() <= cfg.nms.max_kept);
    for (const auto& r : recs) CHECK(r.stage_scores.post_nms.has_value());
  }

  model::Model bare = m;
  bare.anchors.reset();
  CHECK_THROWS_AS(infer(bare, feats), ContractError);
}

TEST_CASE("fusing two seeded models") {
  PipelineConfig cfg;
  cfg.synthetic.num_videos = 60;
  cfg.synthetic.feature_dim = 16;
  cfg.model.input_D = 16;
  cfg.model.levels = 3;
  cfg.model.trunk_channels = 16;
  cfg.anchors.k = 6;
  cfg.train.epochs = 4;
  const auto corpus = io::generate_synthetic_corpus(cfg.synthetic);
  const auto& ann = corpus.annotations;
  const auto train = make_examples(ann, corpus.features, io::Subset::kTraining, 128);
  const auto val = make_examples(ann, corpus.features, io::Subset::kValidation, 128);
  std::vector<io::FeatureMap> feats;
  for (const auto& ex : val) feats.push_back({ex.video_id, ex.features});
  const auto anchor_set = cluster_anchors(ann, cfg.anchors, cfg.model.levels);

  std::vector<io::ProposalMap> lists;
  for (std::uint64_t seed : {0u, 1u}) {
    auto mc = cfg.model;
    mc.seed = seed;
    auto tc = cfg.train;
    tc.seed = seed;
    const auto res = train::train(mc, tc, anchor_set, train);
    const auto inf = infer(res.model, feats);
    lists.push_back(postprocess(inf.proposals, inf.actionness, {}));
  }
  post::FuseReport report;
  const auto fused = post::ensemble_fuse(lists, cfg.nms, &report);
  CHECK(report.single_source_videos == 0);
  REQUIRE(fused.size() == val.size());
  for (const auto& [vid, recs] : fused) {
    CHECK(recs.size() <= cfg.nms.max_kept);
    std::set<TemporalSegment> inputs;
    for (const auto& l : lists)
      for (const auto& r : l.at(vid)) inputs.insert(r.segment);
    for (std::size_t i = 0; i < recs.size(); ++i) {
      CHECK(recs[i].score >= 0.0);
      CHECK(recs[i].score <= 1.0);
      CHECK(inputs.count(recs[i].segment) == 1);
      if (i > 0) CHECK(recs[i - 1].score >= recs[i].score);
    }
  }
}
