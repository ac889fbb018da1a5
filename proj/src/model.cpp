#include "rapnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "rapnet/checkpoint.hpp"
#include "rapnet/error.hpp"
#include "rapnet/json_util.hpp"

namespace rapnet::model {

using nlohmann::json;
using nn::Tensor;
using nn::Var;

void ModelConfig::validate() const {
  if (levels < 1) throw ConfigError("model.levels must be >= 1");
  if (levels > 16) throw ConfigError("model.levels must be <= 16");
  if (anchors_per_level < 1) throw ConfigError("model.anchors_per_level must be >= 1");
  if (trunk_channels < 1) throw ConfigError("model.trunk_channels must be >= 1");
  if (input_D < 1) throw ConfigError("model.input_D must be >= 1");
  const std::size_t div = std::size_t{1} << (levels - 1);
  if (input_T < 1 || input_T % div != 0) {
    throw ConfigError("model.input_T=" + std::to_string(input_T) +
                      " must be divisible by 2^(levels-1)=" + std::to_string(div));
  }
  if (attention_levels) {
    for (auto l : *attention_levels) {
      if (l >= levels) {
        throw ConfigError("model.attention_levels contains level " + std::to_string(l) +
                          " but the model has " + std::to_string(levels));
      }
    }
  }
  for (double w : {lambda_conf, lambda_center, lambda_width, lambda_iou, lambda_actionness}) {
    if (!(w >= 0.0)) throw ConfigError("model loss weights must be nonnegative");
  }
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0)) {
    throw ConfigError("model.iou_threshold must lie in [0, 1]");
  }
}

bool ModelConfig::has_attention(std::size_t level) const {
  if (!attention_levels) return true;
  return std::find(attention_levels->begin(), attention_levels->end(), level) !=
         attention_levels->end();
}

double ModelConfig::level_stride(std::size_t level) const {
  return static_cast<double>(std::size_t{1} << level) / static_cast<double>(input_T);
}

json to_json(const ModelConfig& c) {
  json j{{"input_T", c.input_T},
         {"input_D", c.input_D},
         {"levels", c.levels},
         {"anchors_per_level", c.anchors_per_level},
         {"trunk_channels", c.trunk_channels},
         {"lambda_conf", c.lambda_conf},
         {"lambda_center", c.lambda_center},
         {"lambda_width", c.lambda_width},
         {"lambda_iou", c.lambda_iou},
         {"lambda_actionness", c.lambda_actionness},
         {"iou_threshold", c.iou_threshold},
         {"seed", c.seed}};
  if (c.attention_levels) {
    j["attention_levels"] = *c.attention_levels;
  } else {
    j["attention_levels"] = "all";
  }
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  const std::string ctx = "model";
  jsonutil::reject_unknown_keys(
      j,
      {"input_T", "input_D", "levels", "anchors_per_level", "trunk_channels",
       "attention_levels", "lambda_conf", "lambda_center", "lambda_width", "lambda_iou",
       "lambda_actionness", "iou_threshold", "seed"},
      ctx);
  ModelConfig c;
  jsonutil::read_if_present(j, "input_T", c.input_T, ctx);
  jsonutil::read_if_present(j, "input_D", c.input_D, ctx);
  jsonutil::read_if_present(j, "levels", c.levels, ctx);
  jsonutil::read_if_present(j, "anchors_per_level", c.anchors_per_level, ctx);
  jsonutil::read_if_present(j, "trunk_channels", c.trunk_channels, ctx);
  jsonutil::read_if_present(j, "lambda_conf", c.lambda_conf, ctx);
  jsonutil::read_if_present(j, "lambda_center", c.lambda_center, ctx);
  jsonutil::read_if_present(j, "lambda_width", c.lambda_width, ctx);
  jsonutil::read_if_present(j, "lambda_iou", c.lambda_iou, ctx);
  jsonutil::read_if_present(j, "lambda_actionness", c.lambda_actionness, ctx);
  jsonutil::read_if_present(j, "iou_threshold", c.iou_threshold, ctx);
  jsonutil::read_if_present(j, "seed", c.seed, ctx);
  if (j.contains("attention_levels")) {
    const auto& a = j["attention_levels"];
    if (a.is_string() && a.get<std::string>() == "all") {
      c.attention_levels.reset();
    } else if (a.is_array()) {
      c.attention_levels = a.get<std::vector<std::size_t>>();
    } else {
      throw ConfigError("model.attention_levels: expected \"all\" or a list of levels");
    }
  }
  c.validate();
  return c;
}

namespace {

std::string level_name(std::size_t i, const char* part) {
  return "level" + std::to_string(i) + "/" + part;
}

Tensor uniform_tensor(nn::Shape shape, double bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

void add_conv(nn::ParameterSet& ps, const std::string& prefix, std::size_t cout,
              std::size_t cin, std::size_t k, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k));
  ps.add(prefix + "/weight", uniform_tensor({cout, cin, k}, bound, rng));
  ps.add(prefix + "/bias", uniform_tensor({cout}, bound, rng));
}

}  // namespace

Model build_model(const ModelConfig& config) {
  config.validate();
  Model m{config, {}};
  std::mt19937_64 rng(config.seed);
  const std::size_t C = config.trunk_channels;
  const std::size_t M = config.anchors_per_level;
  auto& ps = m.params;
  add_conv(ps, "stem", C, config.input_D, 3, rng);
  for (std::size_t i = 1; i < config.levels; ++i) {
    add_conv(ps, level_name(i, "down"), C, C, 3, rng);
  }
  const double attn_bound = 1.0 / std::sqrt(static_cast<double>(C));
  for (std::size_t i = 0; i < config.levels; ++i) {
    if (!config.has_attention(i)) continue;
    for (const char* w : {"attention/wq", "attention/wk", "attention/wv", "attention/wo"}) {
      ps.add(level_name(i, w), uniform_tensor({C, C}, attn_bound, rng));
    }
  }
  for (std::size_t i = 0; i + 1 < config.levels; ++i) {
    add_conv(ps, level_name(i, "lateral"), C, C, 1, rng);
  }
  for (std::size_t i = 0; i < config.levels; ++i) {
    add_conv(ps, level_name(i, "head"), 3 * M, C, 1, rng);
    auto& bias = ps.get(level_name(i, "head/bias")).value;
    for (std::size_t k = 0; k < M; ++k) bias[k] = -2.0;
  }
  add_conv(ps, "actionness", 1, C, 1, rng);
  return m;
}

namespace {

using Binder = std::function<Var(const std::string&)>;

LevelPredictions forward_impl(const ModelConfig& cfg, nn::Tape& tape,
                              const Tensor& features, const Binder& bind) {
  if (features.rank() != 2 || features.dim(0) != cfg.input_T ||
      features.dim(1) != cfg.input_D) {
    throw DimensionError("forward: features " + nn::shape_string(features.shape()) +
                         " do not match model input [" + std::to_string(cfg.input_T) +
                         "x" + std::to_string(cfg.input_D) + "]");
  }
  const std::size_t M = cfg.anchors_per_level;
  const std::size_t N = cfg.levels;
  Tensor xt({cfg.input_D, cfg.input_T});
  for (std::size_t t = 0; t < cfg.input_T; ++t)
    for (std::size_t d = 0; d < cfg.input_D; ++d) xt.at(d, t) = features.at(t, d);
  Var x = tape.constant(std::move(xt));

  std::vector<Var> trunk;
  trunk.push_back(nn::relu(nn::conv1d(x, bind("stem/weight"), bind("stem/bias"), 1, 1)));
  for (std::size_t i = 1; i < N; ++i) {
    trunk.push_back(nn::relu(nn::conv1d(trunk.back(), bind(level_name(i, "down/weight")),
                                        bind(level_name(i, "down/bias")), 2, 1)));
  }
  for (std::size_t i = 0; i < N; ++i) {
    if (!cfg.has_attention(i)) continue;
    auto attn = nn::self_attention(nn::transpose(trunk[i]),
                                   bind(level_name(i, "attention/wq")),
                                   bind(level_name(i, "attention/wk")),
                                   bind(level_name(i, "attention/wv")),
                                   bind(level_name(i, "attention/wo")));
    trunk[i] = nn::transpose(attn.output);
  }
  std::vector<Var> merged(N);
  merged[N - 1] = trunk[N - 1];
  for (std::size_t i = N - 1; i-- > 0;) {
    Var lateral = nn::conv1d(trunk[i], bind(level_name(i, "lateral/weight")),
                             bind(level_name(i, "lateral/bias")), 1, 0);
    merged[i] = nn::add(lateral, nn::upsample_nearest2x(merged[i + 1]));
  }

  LevelPredictions out;
  out.pyramid = merged;
  for (std::size_t i = 0; i < N; ++i) {
    Var head = nn::conv1d(merged[i], bind(level_name(i, "head/weight")),
                          bind(level_name(i, "head/bias")), 1, 0);
    out.levels.push_back({nn::slice_rows(head, 0, M), nn::slice_rows(head, M, M),
                          nn::slice_rows(head, 2 * M, M)});
  }
  out.actionness =
      nn::conv1d(merged[0], bind("actionness/weight"), bind("actionness/bias"), 1, 0);
  return out;
}

}  // namespace

LevelPredictions forward(Model& model, nn::Tape& tape, const Tensor& features) {
  return forward_impl(model.config, tape, features, [&](const std::string& name) {
    return tape.parameter(model.params.get(name));
  });
}

LevelPredictions forward(const Model& model, nn::Tape& tape, const Tensor& features) {
  return forward_impl(model.config, tape, features, [&](const std::string& name) {
    return tape.constant(model.params.get(name).value);
  });
}

std::vector<AnchorCell> anchor_grid(const ModelConfig& config,
                                    const anchors::AnchorSet& anchors) {
  anchors.validate();
  if (anchors.num_levels() != config.levels ||
      anchors.per_level() != config.anchors_per_level) {
    throw ContractError("anchor set is " + std::to_string(anchors.num_levels()) + "x" +
                        std::to_string(anchors.per_level()) + " but the model expects " +
                        std::to_string(config.levels) + "x" +
                        std::to_string(config.anchors_per_level));
  }
  std::vector<AnchorCell> grid;
  for (std::size_t i = 0; i < config.levels; ++i) {
    const double s = config.level_stride(i);
    for (std::size_t j = 0; j < config.level_length(i); ++j) {
      for (std::size_t k = 0; k < config.anchors_per_level; ++k) {
        AnchorCell c;
        c.level = static_cast<int>(i);
        c.position = static_cast<int>(j);
        c.anchor = static_cast<int>(k);
        c.stride = s;
        c.anchor_width = anchors.width(i, k);
        c.prior = decode_cell(c, 0.0, 0.0);
        grid.push_back(c);
      }
    }
  }
  return grid;
}

TemporalSegment decode_cell_raw(const AnchorCell& cell, double center_logit,
                                double width_log) {
  const double center = (cell.position + nn::sigmoid(center_logit)) * cell.stride;
  const double width = cell.anchor_width * std::exp(width_log);
  return {center - 0.5 * width, center + 0.5 * width};
}

TemporalSegment decode_cell(const AnchorCell& cell, double center_logit,
                            double width_log) {
  const auto raw = decode_cell_raw(cell, center_logit, width_log);
  return {std::clamp(raw.start, 0.0, 1.0), std::clamp(raw.end, 0.0, 1.0)};
}

EncodedTarget encode_cell(const AnchorCell& cell, const TemporalSegment& target) {
  const double offset = target.center() / cell.stride - cell.position;
  if (!(offset > 0.0 && offset < 1.0)) {
    throw DomainError("target center lies outside the cell");
  }
  return {std::log(offset / (1.0 - offset)), std::log(target.length() / cell.anchor_width)};
}

std::vector<TemporalSegment> decoded_segments(const LevelPredictions& preds,
                                              const std::vector<AnchorCell>& grid) {
  std::vector<TemporalSegment> out;
  out.reserve(grid.size());
  for (const auto& c : grid) {
    const auto& lv = preds.levels.at(static_cast<std::size_t>(c.level));
    const auto a = static_cast<std::size_t>(c.anchor);
    const auto j = static_cast<std::size_t>(c.position);
    out.push_back(decode_cell(c, lv.center.value().at(a, j), lv.width.value().at(a, j)));
  }
  return out;
}

DecodeResult decode(const LevelPredictions& preds, const std::vector<AnchorCell>& grid,
                    const std::string& video_id, const std::string& source) {
  DecodeResult result;
  const auto segs = decoded_segments(preds, grid);
  for (std::size_t n = 0; n < grid.size(); ++n) {
    const auto& c = grid[n];
    if (!(segs[n].start < segs[n].end)) {
      ++result.dropped;
      continue;
    }
    const auto& lv = preds.levels[static_cast<std::size_t>(c.level)];
    io::ProposalRecord r;
    r.video_id = video_id;
    r.segment = segs[n];
    r.source = source;
    r.provenance = {c.level, c.position, c.anchor};
    r.set_stage(io::Stage::kRawConf,
                nn::sigmoid(lv.conf.value().at(static_cast<std::size_t>(c.anchor),
                                               static_cast<std::size_t>(c.position))));
    result.records.push_back(std::move(r));
  }
  return result;
}

std::vector<double> actionness_curve(const LevelPredictions& preds) {
  std::vector<double> out;
  for (double v : preds.actionness.value().data()) out.push_back(nn::sigmoid(v));
  return out;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  json cfg{{"kind", "rapnet"}, {"model", to_json(model.config)}};
  if (model.anchors) cfg["anchors"] = json::parse(anchors::anchors_to_json(*model.anchors));
  ckpt::write_checkpoint(path, cfg.dump(), model.params);
}

Model load_model(const std::filesystem::path& path) {
  auto ck = ckpt::read_checkpoint(path);
  json cfg;
  try {
    cfg = json::parse(ck.config_json);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": config blob is not JSON: " + e.what(), 12);
  }
  if (cfg.value("kind", "") != "rapnet" || !cfg.contains("model")) {
    throw FormatError(path.string() + ": not a rapnet checkpoint", 12);
  }
  Model m{model_config_from_json(cfg["model"]), std::move(ck.params), std::nullopt};
  if (cfg.contains("anchors")) m.anchors = anchors::anchors_from_json(cfg["anchors"].dump());
  const Model fresh = build_model(m.config);
  if (fresh.params.size() != m.params.size()) {
    throw FormatError(path.string() + ": parameter list does not match config", 12);
  }
  for (std::size_t i = 0; i < fresh.params.size(); ++i) {
    const auto& a = fresh.params.items()[i];
    const auto& b = m.params.items()[i];
    if (a.name != b.name || a.value.shape() != b.value.shape()) {
      throw FormatError(path.string() + ": parameter '" + b.name +
                            "' does not match the configured architecture",
                        12);
    }
  }
  return m;
}

}  // namespace rapnet::model
