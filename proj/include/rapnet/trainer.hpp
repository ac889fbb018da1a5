#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapnet/anchors.hpp"
#include "rapnet/matching.hpp"
#include "rapnet/model.hpp"

namespace rapnet::train {

enum class OptimizerKind { kSgdMomentum, kAdam };

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 8;
  double learning_rate = 2e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double momentum = 0.9;  // sgd_momentum only; 0 gives plain SGD
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> gradient_clip_norm = 10.0;
  std::uint64_t seed = 0;
  std::string checkpoint_path = "rapnet.ckpt";
  std::size_t threads = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// One fixed-length training video.
struct Example {
  std::string video_id;
  nn::Tensor features;  // [T x D]
  std::vector<TemporalSegment> gts;
};

struct EpochLog {
  int epoch = 0;
  match::LossBreakdown loss;  // mean over the epoch's videos
  double actionness = 0.0;
  double wall_seconds = 0.0;
};

nlohmann::json to_json(const EpochLog& e);

/// First-order optimizer with explicit, serializable state.
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config) : config_(config) {}

  /// Applies one update from the gradients stored on the parameters.
  void step(nn::ParameterSet& params);
  std::int64_t steps() const noexcept { return steps_; }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  TrainConfig config_;
  std::int64_t steps_ = 0;
  nn::ParameterSet first_;   // momentum buffer or Adam first moment
  nn::ParameterSet second_;  // Adam second moment
};

/// Rescales gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(nn::ParameterSet& params, double max_norm);

struct StepResult {
  match::LossBreakdown loss;  // batch mean
  double actionness = 0.0;
};

/// Forward, assignment, loss and backward for one video; gradients of
/// scale * (proposal loss + lambda_actionness * actionness loss) are added to
/// the parameters.
StepResult accumulate_example(model::Model& model, const std::vector<model::AnchorCell>& grid,
                              const Example& example, double scale);

class Trainer {
 public:
  Trainer(model::Model model, const TrainConfig& config, const anchors::AnchorSet& anchors);

  /// One optimizer step over the given batch, in the given order.
  StepResult step(std::span<const Example* const> batch);
  /// One epoch with the seeded shuffle for that epoch.
  EpochLog run_epoch(std::span<const Example> corpus);

  const model::Model& model() const noexcept { return model_; }
  model::Model& model() noexcept { return model_; }
  Optimizer& optimizer() noexcept { return optimizer_; }
  int epochs_done() const noexcept { return epoch_; }

 private:
  model::Model model_;
  TrainConfig config_;
  std::vector<model::AnchorCell> grid_;
  Optimizer optimizer_;
  int epoch_ = 0;
};

struct TrainResult {
  model::Model model;
  std::vector<EpochLog> log;
};

TrainResult train(const model::ModelConfig& model_config, const TrainConfig& train_config,
                  const anchors::AnchorSet& anchors, std::span<const Example> corpus,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Central finite differences of the proposal loss summed over the batch
/// against reverse-mode gradients, for every parameter element. Label
/// assignment is computed once at the unperturbed point and held fixed.
GradCheckResult grad_check(const model::ModelConfig& model_config,
                           const anchors::AnchorSet& anchors,
                           std::span<const Example> batch, double eps = 1e-5);

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

}  // namespace rapnet::train
