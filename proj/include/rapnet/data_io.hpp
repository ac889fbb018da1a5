#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rapnet/segment.hpp"
#include "rapnet/tensor.hpp"

namespace rapnet::io {

enum class Subset { kTraining, kValidation, kTesting };

std::string subset_name(Subset s);
Subset parse_subset(const std::string& name);

struct VideoAnnotation {
  std::string video_id;
  double duration_seconds = 0.0;
  Subset subset = Subset::kTraining;
  std::vector<TemporalSegment> segments;  // normalized to [0, 1]
  std::vector<std::string> labels;        // parallel to segments
};

using AnnotationMap = std::map<std::string, VideoAnnotation>;

struct AnnotationIngest {
  AnnotationMap videos;
  /// Segments that fell outside [0, duration] and were clamped.
  std::size_t clamped_segments = 0;
};

AnnotationIngest parse_annotations(const std::string& json_text,
                                   const std::string& source = "<memory>");
AnnotationIngest load_annotations(const std::filesystem::path& path);
/// Writes ActivityNet-style JSON with segments converted back to seconds.
void write_annotations(const std::filesystem::path& path, const AnnotationMap& videos);

/// Snippet features of one video; values is [T' x D].
struct FeatureMap {
  std::string video_id;
  nn::Tensor values;

  std::size_t length() const { return values.dim(0); }
  std::size_t dim() const { return values.dim(1); }
};

/// Linear resampling of the time axis to target_T snippets. Output snippet j
/// reads input position j * (T' - 1) / (target_T - 1).
FeatureMap rescale_features(const FeatureMap& f, std::size_t target_T = 128);

// Feature file: "RAPF" | u32 version | u32 T' | u32 D | f32 payload, all LE.
inline constexpr std::uint32_t kFeatureFileVersion = 1;

std::vector<std::uint8_t> encode_feature_map(const FeatureMap& f);
FeatureMap decode_feature_map(std::span<const std::uint8_t> bytes,
                              std::string video_id);
void write_feature_file(const std::filesystem::path& path, const FeatureMap& f);
/// The video id is taken from the file stem.
FeatureMap read_feature_file(const std::filesystem::path& path);

struct SyntheticSpec {
  std::size_t num_videos = 250;
  std::size_t feature_dim = 256;
  std::size_t temporal_length = 128;
  double mean_instances_per_video = 1.5;
  std::pair<double, double> duration_range{0.05, 0.3};
  double actionness_noise_sigma = 0.0;
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;

  /// Throws ConfigError when an invariant is violated.
  void validate() const;
};

struct SyntheticCorpus {
  AnnotationMap annotations;
  std::vector<FeatureMap> features;  // same order as video index
  std::map<std::string, std::vector<double>> actionness;
};

/// Deterministic corpus: clipped-Poisson instance counts, snippet-aligned
/// non-overlapping segments, inside/boundary feature blocks plus noise.
SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec);

/// Instance count rule used by the generator: a Poisson draw clamped to [1, 4].
int clip_instance_count(long long poisson_draw) noexcept;

/// Oracle actionness: the instance indicator smoothed by a triangular kernel
/// one snippet wide, sampled at snippet centers.
std::vector<double> oracle_actionness(std::span<const TemporalSegment> segments,
                                      std::size_t T);

enum class Stage { kRawConf, kPem, kPostNms };

struct StageScores {
  std::optional<double> raw_conf;
  std::optional<double> pem;
  std::optional<double> post_nms;
};

struct Provenance {
  int level = -1;
  int position = -1;
  int anchor = -1;
};

struct ProposalRecord {
  std::string video_id;
  TemporalSegment segment;
  double score = 0.0;
  StageScores stage_scores;
  std::string source;
  Provenance provenance;

  /// Populates a stage and makes it the current score.
  void set_stage(Stage stage, double value);
};

using ProposalMap = std::map<std::string, std::vector<ProposalRecord>>;

/// Descending score, ties by (start, end) ascending.
bool proposal_rank_less(const ProposalRecord& a, const ProposalRecord& b);
void sort_by_rank(std::vector<ProposalRecord>& records);

std::string proposals_to_json(const ProposalMap& proposals);
ProposalMap proposals_from_json(const std::string& json_text,
                                const std::string& source = "<memory>");
void write_proposals(const std::filesystem::path& path, const ProposalMap& proposals);
ProposalMap read_proposals(const std::filesystem::path& path);

using ActionnessMap = std::map<std::string, std::vector<double>>;
void write_actionness(const std::filesystem::path& path, const ActionnessMap& curves);
ActionnessMap read_actionness(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace rapnet::io
