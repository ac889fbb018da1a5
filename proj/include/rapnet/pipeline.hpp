#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapnet/anchors.hpp"
#include "rapnet/data_io.hpp"
#include "rapnet/eval.hpp"
#include "rapnet/model.hpp"
#include "rapnet/postprocess.hpp"
#include "rapnet/trainer.hpp"

namespace rapnet::pipeline {

struct AnchorConfig {
  std::size_t k = 12;
  std::uint64_t seed = 0;
  int max_iter = 100;
};

struct PostprocessConfig {
  bool pem = true;
  bool tag = true;
};

struct PathsConfig {
  std::string data_dir = "data";
  std::string run_dir = "run";
};

/// Everything needed to replay the pipeline end to end.
struct PipelineConfig {
  io::SyntheticSpec synthetic;
  AnchorConfig anchors;
  model::ModelConfig model;
  train::TrainConfig train;
  post::NmsConfig nms;
  post::TagConfig tag;
  post::PemConfig pem;
  PostprocessConfig postprocess;
  eval::EvalConfig eval;
  PathsConfig paths;

  void validate() const;
};

nlohmann::json to_json(const io::SyntheticSpec& s);
io::SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PipelineConfig& c);
/// Missing sections keep their defaults; unknown keys throw ConfigError.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

/// Segment widths, restricted to one subset when given.
std::vector<double> segment_widths(const io::AnnotationMap& annotations,
                                   std::optional<io::Subset> subset = std::nullopt);

/// K-means on the training widths (all widths when there is no training split),
/// chunked over `levels`.
anchors::AnchorSet cluster_anchors(const io::AnnotationMap& annotations,
                                   const AnchorConfig& cfg, std::size_t levels);

/// Features rescaled to input_T and paired with their ground truth.
std::vector<train::Example> make_examples(const io::AnnotationMap& annotations,
                                          const std::vector<io::FeatureMap>& features,
                                          std::optional<io::Subset> subset,
                                          std::size_t input_T);

struct InferenceOutput {
  io::ProposalMap proposals;
  io::ActionnessMap actionness;
  std::size_t dropped = 0;
};

/// Raw decoded proposals and the actionness curve per video. The model must
/// carry its anchors.
InferenceOutput infer(const model::Model& model, const std::vector<io::FeatureMap>& features);

struct PostprocessOptions {
  post::NmsConfig nms;
  std::optional<post::TagConfig> tag;  // nullopt skips boundary snapping
  const post::PemModel* pem = nullptr;  // nullptr skips re-ranking
  const io::AnnotationMap* oracle_gts = nullptr;  // oracle-mode PEM only
};

struct PostprocessReport {
  std::vector<std::string> missing_actionness;
};

/// PEM re-ranking, soft-NMS, then TAG boundary snapping, per video.
io::ProposalMap postprocess(io::ProposalMap proposals, const io::ActionnessMap& actionness,
                            const PostprocessOptions& options,
                            PostprocessReport* report = nullptr);

// On-disk layout used by the command line tool.
std::filesystem::path annotations_path(const std::filesystem::path& data_dir);
std::filesystem::path features_dir(const std::filesystem::path& data_dir);
std::filesystem::path oracle_actionness_path(const std::filesystem::path& data_dir);

/// Writes annotations, feature files and oracle actionness.
void write_corpus(const io::SyntheticCorpus& corpus, const std::filesystem::path& data_dir);
/// All feature files of a directory (or a single file), ordered by video id.
std::vector<io::FeatureMap> read_features(const std::filesystem::path& path);

struct TrainArtifacts {
  std::filesystem::path checkpoint;
  std::filesystem::path pem_checkpoint;
  std::filesystem::path log;
  std::vector<train::EpochLog> epochs;
};

/// Anchors, proposal network and PEM trained from the corpus in data_dir;
/// artifacts go to run_dir.
TrainArtifacts train_from_disk(const PipelineConfig& cfg, const std::filesystem::path& data_dir,
                               const std::filesystem::path& run_dir);

/// Writes `config.json` (the effective config) into dir.
void echo_config(const nlohmann::json& config, const std::filesystem::path& dir);

}  // namespace rapnet::pipeline
