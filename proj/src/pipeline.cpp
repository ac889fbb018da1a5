#include "rapnet/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <utility>

#include "rapnet/error.hpp"
#include "rapnet/json_util.hpp"

namespace rapnet::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

void PipelineConfig::validate() const {
  synthetic.validate();
  model.validate();
  train.validate();
  nms.validate();
  tag.validate();
  pem.validate();
  eval.validate();
  if (anchors.k != model.levels * model.anchors_per_level) {
    throw ConfigError("anchors.k (" + std::to_string(anchors.k) +
                      ") must equal model.levels * model.anchors_per_level (" +
                      std::to_string(model.levels * model.anchors_per_level) + ")");
  }
  if (synthetic.temporal_length != model.input_T) {
    throw ConfigError("synthetic.temporal_length must equal model.input_T");
  }
  if (synthetic.feature_dim != model.input_D) {
    throw ConfigError("synthetic.feature_dim must equal model.input_D");
  }
}

json to_json(const io::SyntheticSpec& s) {
  return {{"num_videos", s.num_videos},
          {"feature_dim", s.feature_dim},
          {"temporal_length", s.temporal_length},
          {"mean_instances_per_video", s.mean_instances_per_video},
          {"duration_range", {s.duration_range.first, s.duration_range.second}},
          {"actionness_noise_sigma", s.actionness_noise_sigma},
          {"validation_fraction", s.validation_fraction},
          {"seed", s.seed}};
}

io::SyntheticSpec synthetic_spec_from_json(const json& j) {
  const std::string ctx = "synthetic";
  jsonutil::reject_unknown_keys(j,
                                {"num_videos", "feature_dim", "temporal_length",
                                 "mean_instances_per_video", "duration_range",
                                 "actionness_noise_sigma", "validation_fraction", "seed"},
                                ctx);
  io::SyntheticSpec s;
  jsonutil::read_if_present(j, "num_videos", s.num_videos, ctx);
  jsonutil::read_if_present(j, "feature_dim", s.feature_dim, ctx);
  jsonutil::read_if_present(j, "temporal_length", s.temporal_length, ctx);
  jsonutil::read_if_present(j, "mean_instances_per_video", s.mean_instances_per_video, ctx);
  jsonutil::read_if_present(j, "duration_range", s.duration_range, ctx);
  jsonutil::read_if_present(j, "actionness_noise_sigma", s.actionness_noise_sigma, ctx);
  jsonutil::read_if_present(j, "validation_fraction", s.validation_fraction, ctx);
  jsonutil::read_if_present(j, "seed", s.seed, ctx);
  s.validate();
  return s;
}

json to_json(const PipelineConfig& c) {
  return {{"synthetic", to_json(c.synthetic)},
          {"anchors", {{"k", c.anchors.k}, {"seed", c.anchors.seed}, {"max_iter", c.anchors.max_iter}}},
          {"model", model::to_json(c.model)},
          {"train", train::to_json(c.train)},
          {"nms", post::to_json(c.nms)},
          {"tag", post::to_json(c.tag)},
          {"pem", post::to_json(c.pem)},
          {"postprocess", {{"pem", c.postprocess.pem}, {"tag", c.postprocess.tag}}},
          {"eval", eval::to_json(c.eval)},
          {"paths", {{"data_dir", c.paths.data_dir}, {"run_dir", c.paths.run_dir}}}};
}

PipelineConfig pipeline_config_from_json(const json& j) {
  jsonutil::reject_unknown_keys(j,
                                {"synthetic", "anchors", "model", "train", "nms", "tag", "pem",
                                 "postprocess", "eval", "paths"},
                                "config");
  PipelineConfig c;
  if (j.contains("synthetic")) c.synthetic = synthetic_spec_from_json(j["synthetic"]);
  if (j.contains("anchors")) {
    const auto& a = j["anchors"];
    jsonutil::reject_unknown_keys(a, {"k", "seed", "max_iter"}, "anchors");
    jsonutil::read_if_present(a, "k", c.anchors.k, "anchors");
    jsonutil::read_if_present(a, "seed", c.anchors.seed, "anchors");
    jsonutil::read_if_present(a, "max_iter", c.anchors.max_iter, "anchors");
  }
  if (j.contains("model")) c.model = model::model_config_from_json(j["model"]);
  if (j.contains("train")) c.train = train::train_config_from_json(j["train"]);
  if (j.contains("nms")) c.nms = post::nms_config_from_json(j["nms"]);
  if (j.contains("tag")) c.tag = post::tag_config_from_json(j["tag"]);
  if (j.contains("pem")) c.pem = post::pem_config_from_json(j["pem"]);
  if (j.contains("postprocess")) {
    const auto& p = j["postprocess"];
    jsonutil::reject_unknown_keys(p, {"pem", "tag"}, "postprocess");
    jsonutil::read_if_present(p, "pem", c.postprocess.pem, "postprocess");
    jsonutil::read_if_present(p, "tag", c.postprocess.tag, "postprocess");
  }
  if (j.contains("eval")) c.eval = eval::eval_config_from_json(j["eval"]);
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    jsonutil::reject_unknown_keys(p, {"data_dir", "run_dir"}, "paths");
    jsonutil::read_if_present(p, "data_dir", c.paths.data_dir, "paths");
    jsonutil::read_if_present(p, "run_dir", c.paths.run_dir, "paths");
  }
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(io::read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return pipeline_config_from_json(j);
}

std::vector<double> segment_widths(const io::AnnotationMap& annotations,
                                   std::optional<io::Subset> subset) {
  std::vector<double> out;
  for (const auto& [_, a] : annotations) {
    if (subset && a.subset != *subset) continue;
    for (const auto& s : a.segments) out.push_back(s.length());
  }
  return out;
}

anchors::AnchorSet cluster_anchors(const io::AnnotationMap& annotations, const AnchorConfig& cfg,
                                   std::size_t levels) {
  auto widths = segment_widths(annotations, io::Subset::kTraining);
  if (widths.empty()) widths = segment_widths(annotations);
  const auto centroids = anchors::kmeans_anchors(widths, cfg.k, cfg.seed, cfg.max_iter);
  return anchors::assign_anchors_to_levels(centroids, levels);
}

std::vector<train::Example> make_examples(const io::AnnotationMap& annotations,
                                          const std::vector<io::FeatureMap>& features,
                                          std::optional<io::Subset> subset,
                                          std::size_t input_T) {
  std::vector<train::Example> out;
  for (const auto& f : features) {
    const auto it = annotations.find(f.video_id);
    if (it == annotations.end()) continue;
    if (subset && it->second.subset != *subset) continue;
    out.push_back({f.video_id, io::rescale_features(f, input_T).values, it->second.segments});
  }
  return out;
}

InferenceOutput infer(const model::Model& model, const std::vector<io::FeatureMap>& features) {
  if (!model.anchors) throw ContractError("infer: model carries no anchors");
  const auto grid = model::anchor_grid(model.config, *model.anchors);
  InferenceOutput out;
  for (const auto& f : features) {
    const auto x = io::rescale_features(f, model.config.input_T);
    nn::Tape tape;
    const auto preds = model::forward(model, tape, x.values);
    auto decoded = model::decode(preds, grid, f.video_id);
    io::sort_by_rank(decoded.records);
    out.proposals[f.video_id] = std::move(decoded.records);
    out.dropped += decoded.dropped;
    out.actionness[f.video_id] = model::actionness_curve(preds);
  }
  return out;
}

io::ProposalMap postprocess(io::ProposalMap proposals, const io::ActionnessMap& actionness,
                            const PostprocessOptions& options, PostprocessReport* report) {
  if (options.pem) {
    auto r = post::pem_rerank(*options.pem, proposals, actionness, options.oracle_gts);
    if (report) report->missing_actionness = r.missing_actionness;
  }
  for (auto& [vid, recs] : proposals) {
    recs = post::soft_nms(std::move(recs), options.nms);
    if (!options.tag) continue;
    const auto a = actionness.find(vid);
    if (a == actionness.end()) continue;
    const auto regions = post::tag_regions(a->second, *options.tag);
    recs = post::snap_boundaries(std::move(recs), regions, *options.tag);
  }
  return proposals;
}

fs::path annotations_path(const fs::path& data_dir) { return data_dir / "annotations.json"; }
fs::path features_dir(const fs::path& data_dir) { return data_dir / "features"; }
fs::path oracle_actionness_path(const fs::path& data_dir) {
  return data_dir / "oracle_actionness.json";
}

void write_corpus(const io::SyntheticCorpus& corpus, const fs::path& data_dir) {
  std::error_code ec;
  fs::create_directories(features_dir(data_dir), ec);
  if (ec) throw IoError("cannot create " + data_dir.string() + ": " + ec.message());
  io::write_annotations(annotations_path(data_dir), corpus.annotations);
  for (const auto& f : corpus.features) {
    io::write_feature_file(features_dir(data_dir) / (f.video_id + ".rapf"), f);
  }
  io::write_actionness(oracle_actionness_path(data_dir), corpus.actionness);
}

std::vector<io::FeatureMap> read_features(const fs::path& path) {
  std::vector<io::FeatureMap> out;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path)) {
      if (e.is_regular_file() && e.path().extension() == ".rapf") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.push_back(io::read_feature_file(f));
  } else {
    out.push_back(io::read_feature_file(path));
  }
  return out;
}

void echo_config(const json& config, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  io::write_text_file(dir / "config.json", config.dump(2) + "\n");
}

TrainArtifacts train_from_disk(const PipelineConfig& cfg, const fs::path& data_dir,
                               const fs::path& run_dir) {
  const auto annotations = io::load_annotations(annotations_path(data_dir)).videos;
  const auto features = read_features(features_dir(data_dir));
  const auto anchor_set = cluster_anchors(annotations, cfg.anchors, cfg.model.levels);
  const auto examples =
      make_examples(annotations, features, io::Subset::kTraining, cfg.model.input_T);

  echo_config(to_json(cfg), run_dir);
  io::write_text_file(run_dir / "anchors.json", anchors::anchors_to_json(anchor_set));

  TrainArtifacts art;
  art.log = run_dir / "train_log.jsonl";
  std::ofstream log(art.log, std::ios::binary);
  if (!log) throw IoError("cannot write " + art.log.string());
  auto result = train::train(cfg.model, cfg.train, anchor_set, examples,
                             [&](const train::EpochLog& e) {
                               log << train::to_json(e).dump() << "\n";
                               log.flush();
                             });
  art.epochs = result.log;
  art.checkpoint = run_dir / cfg.train.checkpoint_path;
  model::save_model(art.checkpoint, result.model);

  std::vector<io::FeatureMap> train_features;
  for (const auto& f : features) {
    const auto it = annotations.find(f.video_id);
    if (it != annotations.end() && it->second.subset == io::Subset::kTraining) {
      train_features.push_back(f);
    }
  }
  const auto inferred = infer(result.model, train_features);
  const auto samples =
      post::pem_training_samples(inferred.proposals, inferred.actionness, annotations, cfg.pem);
  post::PemModel pem(cfg.pem);
  post::train_pem(pem, samples);
  art.pem_checkpoint = run_dir / "pem.ckpt";
  pem.save(art.pem_checkpoint);
  return art;
}

}  // namespace rapnet::pipeline
