#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapnet/autodiff.hpp"
#include "rapnet/data_io.hpp"

namespace rapnet::post {

struct NmsConfig {
  double sigma = 0.5;
  double score_floor = 1e-3;
  std::size_t max_kept = 100;

  void validate() const;
};

/// Gaussian soft-NMS: repeatedly keep the best remaining proposal and decay
/// the others by exp(-iou^2 / sigma). Output is sorted by final score and
/// carries the post_nms stage.
std::vector<io::ProposalRecord> soft_nms(std::vector<io::ProposalRecord> proposals,
                                         const NmsConfig& cfg);

struct TagConfig {
  std::vector<double> thresholds{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  double merge_gap_ratio = 0.3;
  double snap_window = 0.05;

  void validate() const;
};

/// Multi-threshold grouping of actionness runs into snippet-aligned regions.
/// Both the raw runs and their gap-merged groups are pooled, sorted by
/// (start, end) with exact duplicates removed.
std::vector<TemporalSegment> tag_regions(std::span<const double> actionness,
                                         const TagConfig& cfg);

/// Moves each proposal boundary onto the nearest region boundary of the same
/// kind within snap_window. Scores are untouched.
std::vector<io::ProposalRecord> snap_boundaries(std::vector<io::ProposalRecord> proposals,
                                                std::span<const TemporalSegment> regions,
                                                const TagConfig& cfg);

struct PemConfig {
  std::size_t n_inner = 16;
  std::size_t n_boundary = 8;
  std::size_t hidden = 64;
  int epochs = 20;
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::size_t proposals_per_video = 64;
  std::uint64_t seed = 0;

  std::size_t feature_length() const { return n_inner + 2 * n_boundary; }
  void validate() const;
};

/// Actionness read by linear interpolation between snippet centers, with
/// positions clamped to [0, 1].
double sample_actionness(std::span<const double> actionness, double t);

/// n_inner samples over [s, e], n_boundary over [s - d/5, s + d/5] and over
/// [e - d/5, e + d/5], d = e - s.
std::vector<double> pem_features(std::span<const double> actionness,
                                 const TemporalSegment& p, const PemConfig& cfg);

/// Two-layer perceptron on sampled actionness regressing the proposal's IoU
/// with the closest ground truth.
class PemModel {
 public:
  explicit PemModel(const PemConfig& cfg);

  /// Test path: the score is the true best IoU against ground truth.
  static PemModel oracle(const PemConfig& cfg);

  bool oracle_mode() const noexcept { return oracle_; }
  const PemConfig& config() const noexcept { return cfg_; }
  nn::ParameterSet& params() noexcept { return params_; }
  const nn::ParameterSet& params() const noexcept { return params_; }

  /// Output in (0, 1) per feature row; features is [n x feature_length].
  std::vector<double> predict(const std::vector<std::vector<double>>& features) const;
  /// Tracked smooth-L1 loss of the sigmoid output against targets (mean).
  nn::Var loss(nn::Tape& tape, const std::vector<std::vector<double>>& features,
               std::span<const double> targets);

  void save(const std::filesystem::path& path) const;
  static PemModel load(const std::filesystem::path& path);

 private:
  PemConfig cfg_;
  nn::ParameterSet params_;
  bool oracle_ = false;
};

struct PemSample {
  std::vector<double> features;
  double target = 0.0;
};

/// Proposals (top proposals_per_video by score per video) turned into
/// (feature, best-IoU) pairs.
std::vector<PemSample> pem_training_samples(const io::ProposalMap& proposals,
                                            const io::ActionnessMap& actionness,
                                            const io::AnnotationMap& gts, const PemConfig& cfg);

/// Adam on the mean smooth-L1 loss. Returns the per-epoch mean loss.
std::vector<double> train_pem(PemModel& pem, std::span<const PemSample> samples);

struct RerankReport {
  std::vector<std::string> missing_actionness;  // videos left unscored
};

/// score = raw_conf * pem_output; stage "pem"; re-sorted. In oracle mode the
/// gts map supplies the true IoU. Videos without an actionness curve are left
/// as they are and reported.
RerankReport pem_rerank(const PemModel& pem, io::ProposalMap& proposals,
                        const io::ActionnessMap& actionness,
                        const io::AnnotationMap* gts = nullptr);

struct FuseReport {
  std::size_t single_source_videos = 0;
};

/// Per video: min-max normalize each source, concatenate, soft-NMS.
io::ProposalMap ensemble_fuse(std::span<const io::ProposalMap> sources, const NmsConfig& cfg,
                              FuseReport* report = nullptr);

nlohmann::json to_json(const NmsConfig& c);
nlohmann::json to_json(const TagConfig& c);
nlohmann::json to_json(const PemConfig& c);
NmsConfig nms_config_from_json(const nlohmann::json& j);
TagConfig tag_config_from_json(const nlohmann::json& j);
PemConfig pem_config_from_json(const nlohmann::json& j);

}  // namespace rapnet::post
