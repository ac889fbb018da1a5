#include "rapnet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "rapnet/checkpoint.hpp"
#include "rapnet/error.hpp"
#include "rapnet/json_util.hpp"

namespace rapnet::train {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  if (gradient_clip_norm && !(*gradient_clip_norm > 0.0)) {
    throw ConfigError("train.gradient_clip_norm must be positive");
  }
  if (threads < 1) throw ConfigError("train.threads must be >= 1");
}

json to_json(const TrainConfig& c) {
  json j{{"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"optimizer", c.optimizer == OptimizerKind::kAdam ? "adam" : "sgd_momentum"},
         {"momentum", c.momentum},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"seed", c.seed},
         {"checkpoint_path", c.checkpoint_path},
         {"threads", c.threads}};
  j["gradient_clip_norm"] = c.gradient_clip_norm ? json(*c.gradient_clip_norm) : json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  const std::string ctx = "train";
  jsonutil::reject_unknown_keys(
      j,
      {"epochs", "batch_size", "learning_rate", "optimizer", "momentum", "beta1", "beta2",
       "adam_eps", "gradient_clip_norm", "seed", "checkpoint_path", "threads"},
      ctx);
  TrainConfig c;
  jsonutil::read_if_present(j, "epochs", c.epochs, ctx);
  jsonutil::read_if_present(j, "batch_size", c.batch_size, ctx);
  jsonutil::read_if_present(j, "learning_rate", c.learning_rate, ctx);
  jsonutil::read_if_present(j, "momentum", c.momentum, ctx);
  jsonutil::read_if_present(j, "beta1", c.beta1, ctx);
  jsonutil::read_if_present(j, "beta2", c.beta2, ctx);
  jsonutil::read_if_present(j, "adam_eps", c.adam_eps, ctx);
  jsonutil::read_if_present(j, "seed", c.seed, ctx);
  jsonutil::read_if_present(j, "checkpoint_path", c.checkpoint_path, ctx);
  jsonutil::read_if_present(j, "threads", c.threads, ctx);
  if (j.contains("optimizer")) {
    const auto name = j["optimizer"].get<std::string>();
    if (name == "adam") {
      c.optimizer = OptimizerKind::kAdam;
    } else if (name == "sgd_momentum" || name == "sgd") {
      c.optimizer = OptimizerKind::kSgdMomentum;
    } else {
      throw ConfigError("train.optimizer: expected 'adam' or 'sgd_momentum', got '" + name + "'");
    }
  }
  if (j.contains("gradient_clip_norm")) {
    if (j["gradient_clip_norm"].is_null()) {
      c.gradient_clip_norm.reset();
    } else {
      c.gradient_clip_norm = j["gradient_clip_norm"].get<double>();
    }
  }
  c.validate();
  return c;
}

json to_json(const EpochLog& e) {
  return json{{"epoch", e.epoch},
              {"conf_pos", e.loss.conf_pos},
              {"conf_neg", e.loss.conf_neg},
              {"center", e.loss.center},
              {"width", e.loss.width},
              {"iou", e.loss.iou},
              {"total", e.loss.total},
              {"actionness", e.actionness},
              {"wall_time", e.wall_seconds}};
}

// ---------------------------------------------------------------------------
// Optimizer

void Optimizer::step(nn::ParameterSet& params) {
  if (first_.size() == 0) {
    for (const auto& p : params.items()) {
      first_.add(p.name, nn::Tensor(p.value.shape(), 0.0));
      second_.add(p.name, nn::Tensor(p.value.shape(), 0.0));
    }
  }
  ++steps_;
  const double lr = config_.learning_rate;
  for (std::size_t n = 0; n < params.size(); ++n) {
    auto& p = params.items()[n];
    if (!p.grad) continue;
    auto value = p.value.data();
    auto grad = p.grad->data();
    auto m = first_.items()[n].value.data();
    if (config_.optimizer == OptimizerKind::kSgdMomentum) {
      if (config_.momentum == 0.0) {
        for (std::size_t i = 0; i < value.size(); ++i) value[i] -= lr * grad[i];
      } else {
        for (std::size_t i = 0; i < value.size(); ++i) {
          m[i] = config_.momentum * m[i] + grad[i];
          value[i] -= lr * m[i];
        }
      }
      continue;
    }
    auto v = second_.items()[n].value.data();
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      value[i] -= lr * mhat / (std::sqrt(vhat) + config_.adam_eps);
    }
  }
}

void Optimizer::save(const std::filesystem::path& path) const {
  nn::ParameterSet all;
  for (const auto& p : first_.items()) all.add("first/" + p.name, p.value);
  for (const auto& p : second_.items()) all.add("second/" + p.name, p.value);
  json cfg{{"kind", "optimizer"}, {"steps", steps_}};
  ckpt::write_checkpoint(path, cfg.dump(), all);
}

void Optimizer::load(const std::filesystem::path& path) {
  auto ck = ckpt::read_checkpoint(path);
  const auto cfg = json::parse(ck.config_json);
  if (cfg.value("kind", "") != "optimizer") {
    throw FormatError(path.string() + ": not an optimizer state file", 12);
  }
  steps_ = cfg.at("steps").get<std::int64_t>();
  first_ = nn::ParameterSet();
  second_ = nn::ParameterSet();
  for (auto& p : ck.params.items()) {
    if (p.name.rfind("first/", 0) == 0) {
      first_.add(p.name.substr(6), std::move(p.value));
    } else if (p.name.rfind("second/", 0) == 0) {
      second_.add(p.name.substr(7), std::move(p.value));
    }
  }
}

double clip_global_norm(nn::ParameterSet& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params.items()) {
    if (!p.grad) continue;
    for (double g : p.grad->data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params.items()) {
      if (!p.grad) continue;
      for (auto& g : p.grad->data()) g *= f;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training

StepResult accumulate_example(model::Model& model, const std::vector<model::AnchorCell>& grid,
                              const Example& example, double scale) {
  nn::Tape tape;
  auto preds = model::forward(model, tape, example.features);
  const auto decoded = model::decoded_segments(preds, grid);
  const auto assignment =
      match::assign_labels(grid, decoded, example.gts, model.config.iou_threshold);
  auto terms = match::compute_loss(preds, grid, assignment, example.gts,
                                   match::LossWeights::from(model.config));
  nn::Var act = match::actionness_loss(preds, example.gts);
  nn::Var objective =
      nn::weighted_sum({terms.total, act}, {scale, scale * model.config.lambda_actionness});
  tape.backward(objective);
  return {terms.values(), act.value()[0]};
}

Trainer::Trainer(model::Model model, const TrainConfig& config,
                 const anchors::AnchorSet& anchors)
    : model_(std::move(model)),
      config_(config),
      grid_(model::anchor_grid(model_.config, anchors)),
      optimizer_(config) {
  config_.validate();
}

StepResult Trainer::step(std::span<const Example* const> batch) {
  if (batch.empty()) throw ContractError("train step on an empty batch");
  const double scale = 1.0 / static_cast<double>(batch.size());
  model_.params.zero_grad();
  std::vector<StepResult> results(batch.size());
  const std::size_t workers = std::min(config_.threads, batch.size());
  const std::int64_t step_index = optimizer_.steps();
  auto guarded = [&](auto&& fn) {
    try {
      fn();
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step_index) + ": " + e.what());
    }
  };
  if (workers <= 1) {
    for (std::size_t b = 0; b < batch.size(); ++b) {
      guarded([&] { results[b] = accumulate_example(model_, grid_, *batch[b], scale); });
    }
  } else {
    // Per-video gradients on private copies, reduced in batch order so the
    // result does not depend on the thread count.
    std::vector<model::Model> copies(batch.size(), model_);
    std::vector<std::exception_ptr> errors(batch.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t b = w; b < batch.size(); b += workers) {
          try {
            copies[b].params.clear_grad();
            results[b] = accumulate_example(copies[b], grid_, *batch[b], scale);
          } catch (...) {
            errors[b] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) guarded([&] { std::rethrow_exception(e); });
    }
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (std::size_t n = 0; n < model_.params.size(); ++n) {
        auto dst = model_.params.items()[n].grad->data();
        const auto& g = copies[b].params.items()[n].grad;
        if (!g) continue;
        auto src = g->data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }
  StepResult mean;
  for (const auto& r : results) {
    mean.loss.conf_pos += scale * r.loss.conf_pos;
    mean.loss.conf_neg += scale * r.loss.conf_neg;
    mean.loss.center += scale * r.loss.center;
    mean.loss.width += scale * r.loss.width;
    mean.loss.iou += scale * r.loss.iou;
    mean.loss.total += scale * r.loss.total;
    mean.actionness += scale * r.actionness;
  }
  if (!std::isfinite(mean.loss.total)) {
    throw NumericError("step " + std::to_string(step_index) + ": non-finite total loss");
  }
  if (config_.gradient_clip_norm) clip_global_norm(model_.params, *config_.gradient_clip_norm);
  optimizer_.step(model_.params);
  return mean;
}

EpochLog Trainer::run_epoch(std::span<const Example> corpus) {
  if (corpus.empty()) throw ContractError("training corpus is empty");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config_.seed * 1000003ULL + static_cast<std::uint64_t>(epoch_));
  std::shuffle(order.begin(), order.end(), rng);

  EpochLog log;
  log.epoch = epoch_;
  double weight_sum = 0.0;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    const std::size_t end = std::min(order.size(), start + config_.batch_size);
    std::vector<const Example*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&corpus[order[i]]);
    const auto r = step(batch);
    const double w = static_cast<double>(batch.size());
    log.loss.conf_pos += w * r.loss.conf_pos;
    log.loss.conf_neg += w * r.loss.conf_neg;
    log.loss.center += w * r.loss.center;
    log.loss.width += w * r.loss.width;
    log.loss.iou += w * r.loss.iou;
    log.loss.total += w * r.loss.total;
    log.actionness += w * r.actionness;
    weight_sum += w;
  }
  for (double* v : {&log.loss.conf_pos, &log.loss.conf_neg, &log.loss.center, &log.loss.width,
                    &log.loss.iou, &log.loss.total, &log.actionness}) {
    *v /= weight_sum;
  }
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ++epoch_;
  return log;
}

TrainResult train(const model::ModelConfig& model_config, const TrainConfig& train_config,
                  const anchors::AnchorSet& anchors, std::span<const Example> corpus,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  if (corpus.empty()) throw ContractError("train: corpus has no training videos");
  Trainer trainer(model::build_model(model_config), train_config, anchors);
  TrainResult result;
  for (int e = 0; e < train_config.epochs; ++e) {
    result.log.push_back(trainer.run_epoch(corpus));
    if (on_epoch) on_epoch(result.log.back());
  }
  result.model = std::move(trainer.model());
  result.model.anchors = anchors;
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const model::ModelConfig& model_config,
                           const anchors::AnchorSet& anchors, std::span<const Example> batch,
                           double eps) {
  model::Model m = model::build_model(model_config);
  const auto grid = model::anchor_grid(m.config, anchors);
  const auto weights = match::LossWeights::from(m.config);

  std::vector<match::AssignmentResult> assignments;
  for (const auto& ex : batch) {
    nn::Tape tape;
    auto preds = model::forward(std::as_const(m), tape, ex.features);
    assignments.push_back(match::assign_labels(grid, model::decoded_segments(preds, grid),
                                               ex.gts, m.config.iou_threshold));
  }
  auto loss_value = [&](bool with_grad) {
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      nn::Tape tape;
      auto preds = with_grad ? model::forward(m, tape, batch[b].features)
                             : model::forward(std::as_const(m), tape, batch[b].features);
      auto terms = match::compute_loss(preds, grid, assignments[b], batch[b].gts, weights);
      if (with_grad) tape.backward(terms.total);
      total += terms.total.value()[0];
    }
    return total;
  };

  m.params.zero_grad();
  loss_value(true);
  GradCheckResult result;
  for (auto& p : m.params.items()) {
    const nn::Tensor analytic = *p.grad;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + eps;
      const double up = loss_value(false);
      p.value[i] = orig - eps;
      const double down = loss_value(false);
      p.value[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = relative_error(analytic[i], numeric);
      ++result.checked;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_parameter = p.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace rapnet::train
