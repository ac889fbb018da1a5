#include "rapnet/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "rapnet/checkpoint.hpp"
#include "rapnet/error.hpp"
#include "rapnet/json_util.hpp"
#include "rapnet/trainer.hpp"

namespace rapnet::post {

using io::ProposalRecord;
using nlohmann::json;

void NmsConfig::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("nms.sigma must be positive");
  if (max_kept < 1) throw ConfigError("nms.max_kept must be >= 1");
  if (!(score_floor >= 0.0)) throw ConfigError("nms.score_floor must be nonnegative");
}

void TagConfig::validate() const {
  if (thresholds.empty()) throw ConfigError("tag.thresholds must not be empty");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0 && thresholds[i] < 1.0)) {
      throw ConfigError("tag.thresholds must lie in (0, 1)");
    }
    if (i && !(thresholds[i] > thresholds[i - 1])) {
      throw ConfigError("tag.thresholds must be strictly ascending");
    }
  }
  if (!(merge_gap_ratio >= 0.0)) throw ConfigError("tag.merge_gap_ratio must be nonnegative");
  if (!(snap_window > 0.0 && snap_window < 1.0)) {
    throw ConfigError("tag.snap_window must lie in (0, 1)");
  }
}

void PemConfig::validate() const {
  if (n_inner < 1 || n_boundary < 1) throw ConfigError("pem sample counts must be >= 1");
  if (hidden < 1) throw ConfigError("pem.hidden must be >= 1");
  if (epochs < 0) throw ConfigError("pem.epochs must be >= 0");
  if (!(learning_rate >= 0.0)) throw ConfigError("pem.learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigError("pem.batch_size must be >= 1");
  if (proposals_per_video < 1) throw ConfigError("pem.proposals_per_video must be >= 1");
}

// ---------------------------------------------------------------------------
// Soft-NMS

std::vector<ProposalRecord> soft_nms(std::vector<ProposalRecord> proposals,
                                     const NmsConfig& cfg) {
  cfg.validate();
  std::vector<ProposalRecord> kept;
  std::vector<double> score(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) score[i] = proposals[i].score;
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    if (score[i] >= cfg.score_floor) live.push_back(i);
  }
  auto better = [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    const auto& sa = proposals[a].segment;
    const auto& sb = proposals[b].segment;
    if (sa.start != sb.start) return sa.start < sb.start;
    if (sa.end != sb.end) return sa.end < sb.end;
    return a < b;
  };
  while (!live.empty() && kept.size() < cfg.max_kept) {
    std::size_t best_pos = 0;
    for (std::size_t p = 1; p < live.size(); ++p) {
      if (better(live[p], live[best_pos])) best_pos = p;
    }
    const std::size_t best = live[best_pos];
    live.erase(live.begin() + static_cast<std::ptrdiff_t>(best_pos));
    ProposalRecord r = proposals[best];
    r.set_stage(io::Stage::kPostNms, score[best]);
    const TemporalSegment top = r.segment;
    kept.push_back(std::move(r));
    std::vector<std::size_t> next;
    next.reserve(live.size());
    for (std::size_t i : live) {
      const double iou = segment_iou(top, proposals[i].segment);
      score[i] *= std::exp(-(iou * iou) / cfg.sigma);
      if (score[i] >= cfg.score_floor) next.push_back(i);
    }
    live = std::move(next);
  }
  return kept;
}

// ---------------------------------------------------------------------------
// TAG

std::vector<TemporalSegment> tag_regions(std::span<const double> actionness,
                                         const TagConfig& cfg) {
  cfg.validate();
  const std::size_t T = actionness.size();
  std::set<std::pair<std::size_t, std::size_t>> pooled;
  for (double tau : cfg.thresholds) {
    std::vector<std::pair<std::size_t, std::size_t>> runs;
    for (std::size_t i = 0; i < T;) {
      if (actionness[i] >= tau) {
        std::size_t j = i;
        while (j < T && actionness[j] >= tau) ++j;
        runs.emplace_back(i, j);
        i = j;
      } else {
        ++i;
      }
    }
    if (runs.empty()) continue;
    pooled.insert(runs.begin(), runs.end());
    auto cur = runs.front();
    for (std::size_t r = 1; r < runs.size(); ++r) {
      const double gap = static_cast<double>(runs[r].first - cur.second);
      const double span = static_cast<double>(runs[r].second - cur.first);
      if (gap / span <= cfg.merge_gap_ratio) {
        cur.second = runs[r].second;
      } else {
        pooled.insert(cur);
        cur = runs[r];
      }
    }
    pooled.insert(cur);
  }
  std::vector<TemporalSegment> out;
  const double Td = static_cast<double>(T);
  for (const auto& [a, b] : pooled) {
    out.push_back({static_cast<double>(a) / Td, static_cast<double>(b) / Td});
  }
  return out;
}

namespace {

// Nearest boundary value within the window; ties go to the region with the
// highest IoU against the proposal, then to the smaller value.
std::optional<double> snap_one(double boundary, bool is_start, const TemporalSegment& proposal,
                               std::span<const TemporalSegment> regions, double window) {
  std::optional<double> best;
  double best_dist = 0.0;
  double best_iou = -1.0;
  for (const auto& r : regions) {
    const double v = is_start ? r.start : r.end;
    const double dist = std::abs(v - boundary);
    if (dist > window) continue;
    const double iou = segment_iou(r, proposal);
    const bool take = !best || dist < best_dist ||
                      (dist == best_dist && (iou > best_iou || (iou == best_iou && v < *best)));
    if (take) {
      best = v;
      best_dist = dist;
      best_iou = iou;
    }
  }
  return best;
}

}  // namespace

std::vector<ProposalRecord> snap_boundaries(std::vector<ProposalRecord> proposals,
                                            std::span<const TemporalSegment> regions,
                                            const TagConfig& cfg) {
  cfg.validate();
  for (auto& p : proposals) {
    const auto s = snap_one(p.segment.start, true, p.segment, regions, cfg.snap_window);
    const auto e = snap_one(p.segment.end, false, p.segment, regions, cfg.snap_window);
    TemporalSegment adjusted{s.value_or(p.segment.start), e.value_or(p.segment.end)};
    if (adjusted.valid()) p.segment = adjusted;
  }
  return proposals;
}

// ---------------------------------------------------------------------------
// PEM

double sample_actionness(std::span<const double> actionness, double t) {
  const std::size_t T = actionness.size();
  if (T == 0) throw ContractError("sample_actionness: empty curve");
  t = std::clamp(t, 0.0, 1.0);
  const double u = std::clamp(t * static_cast<double>(T) - 0.5, 0.0, static_cast<double>(T - 1));
  const auto lo = static_cast<std::size_t>(std::floor(u));
  const std::size_t hi = std::min(lo + 1, T - 1);
  const double frac = u - static_cast<double>(lo);
  return frac == 0.0 ? actionness[lo]
                     : actionness[lo] + frac * (actionness[hi] - actionness[lo]);
}

namespace {

void append_linspace(std::vector<double>& out, std::span<const double> curve, double a,
                     double b, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) {
    const double t = n == 1 ? a
                            : a + (b - a) * static_cast<double>(k) /
                                      static_cast<double>(n - 1);
    out.push_back(sample_actionness(curve, t));
  }
}

}  // namespace

std::vector<double> pem_features(std::span<const double> actionness, const TemporalSegment& p,
                                 const PemConfig& cfg) {
  const double d = std::max(0.0, p.end - p.start);
  std::vector<double> f;
  f.reserve(cfg.feature_length());
  append_linspace(f, actionness, p.start, p.end, cfg.n_inner);
  append_linspace(f, actionness, p.start - d / 5.0, p.start + d / 5.0, cfg.n_boundary);
  append_linspace(f, actionness, p.end - d / 5.0, p.end + d / 5.0, cfg.n_boundary);
  return f;
}

PemModel::PemModel(const PemConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t F = cfg_.feature_length();
  auto init = [&](nn::Shape shape, std::size_t fan_in) {
    nn::Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = dist(rng);
    return t;
  };
  params_.add("pem/fc1/weight", init({cfg_.hidden, F, 1}, F));
  params_.add("pem/fc1/bias", init({cfg_.hidden}, F));
  params_.add("pem/fc2/weight", init({1, cfg_.hidden, 1}, cfg_.hidden));
  params_.add("pem/fc2/bias", init({1}, cfg_.hidden));
}

PemModel PemModel::oracle(const PemConfig& cfg) {
  PemModel m(cfg);
  m.oracle_ = true;
  return m;
}

namespace {

nn::Tensor feature_matrix(const std::vector<std::vector<double>>& rows, std::size_t F) {
  nn::Tensor x({F, rows.size()});
  for (std::size_t n = 0; n < rows.size(); ++n) {
    if (rows[n].size() != F) {
      throw DimensionError("pem: feature row of length " + std::to_string(rows[n].size()) +
                           ", expected " + std::to_string(F));
    }
    for (std::size_t f = 0; f < F; ++f) x.at(f, n) = rows[n][f];
  }
  return x;
}

template <typename Bind>
nn::Var pem_forward(nn::Tape& tape, const nn::Tensor& x, Bind&& bind) {
  nn::Var in = tape.constant(x);
  nn::Var h = nn::relu(nn::conv1d(in, bind("pem/fc1/weight"), bind("pem/fc1/bias"), 1, 0));
  return nn::sigmoid(nn::conv1d(h, bind("pem/fc2/weight"), bind("pem/fc2/bias"), 1, 0));
}

}  // namespace

std::vector<double> PemModel::predict(const std::vector<std::vector<double>>& features) const {
  if (oracle_) throw ContractError("PemModel::predict called in oracle mode");
  if (features.empty()) return {};
  nn::Tape tape;
  auto out = pem_forward(tape, feature_matrix(features, cfg_.feature_length()),
                         [&](const char* n) { return tape.constant(params_.get(n).value); });
  const auto& v = out.value();
  return {v.data().begin(), v.data().end()};
}

nn::Var PemModel::loss(nn::Tape& tape, const std::vector<std::vector<double>>& features,
                       std::span<const double> targets) {
  if (features.size() != targets.size() || features.empty()) {
    throw ContractError("pem loss: need one target per feature row");
  }
  auto out = pem_forward(tape, feature_matrix(features, cfg_.feature_length()),
                         [&](const char* n) { return tape.parameter(params_.get(n)); });
  const std::size_t n = features.size();
  return nn::smooth_l1_sum(out, nn::Tensor({1, n}, {targets.begin(), targets.end()}),
                           nn::Tensor({1, n}, 1.0 / static_cast<double>(n)));
}

void PemModel::save(const std::filesystem::path& path) const {
  json cfg{{"kind", "pem"}, {"pem", to_json(cfg_)}};
  ckpt::write_checkpoint(path, cfg.dump(), params_);
}

PemModel PemModel::load(const std::filesystem::path& path) {
  auto ck = ckpt::read_checkpoint(path);
  const auto cfg = json::parse(ck.config_json);
  if (cfg.value("kind", "") != "pem") {
    throw FormatError(path.string() + ": not a PEM checkpoint", 12);
  }
  PemModel m(pem_config_from_json(cfg.at("pem")));
  for (auto& p : m.params_.items()) {
    const auto& stored = ck.params.get(p.name);
    if (stored.value.shape() != p.value.shape()) {
      throw FormatError(path.string() + ": shape mismatch for " + p.name, 12);
    }
    p.value = stored.value;
  }
  return m;
}

namespace {

double best_iou(const TemporalSegment& s, const std::vector<TemporalSegment>& gts) {
  double best = 0.0;
  for (const auto& g : gts) best = std::max(best, segment_iou(s, g));
  return best;
}

}  // namespace

std::vector<PemSample> pem_training_samples(const io::ProposalMap& proposals,
                                            const io::ActionnessMap& actionness,
                                            const io::AnnotationMap& gts, const PemConfig& cfg) {
  std::vector<PemSample> out;
  for (const auto& [vid, recs] : proposals) {
    const auto a = actionness.find(vid);
    const auto g = gts.find(vid);
    if (a == actionness.end() || g == gts.end() || g->second.segments.empty()) continue;
    auto sorted = recs;
    io::sort_by_rank(sorted);
    const std::size_t n = std::min(sorted.size(), cfg.proposals_per_video);
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back({pem_features(a->second, sorted[i].segment, cfg),
                     best_iou(sorted[i].segment, g->second.segments)});
    }
  }
  return out;
}

std::vector<double> train_pem(PemModel& pem, std::span<const PemSample> samples) {
  if (pem.oracle_mode()) throw ContractError("cannot train an oracle-mode PEM");
  std::vector<double> history;
  if (samples.empty()) return history;
  const auto& cfg = pem.config();
  train::TrainConfig tc;
  tc.learning_rate = cfg.learning_rate;
  tc.optimizer = train::OptimizerKind::kAdam;
  train::Optimizer opt(tc);
  std::mt19937_64 rng(cfg.seed + 17);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::vector<double>> feats;
      std::vector<double> targets;
      for (std::size_t i = start; i < end; ++i) {
        feats.push_back(samples[order[i]].features);
        targets.push_back(samples[order[i]].target);
      }
      pem.params().zero_grad();
      nn::Tape tape;
      auto l = pem.loss(tape, feats, targets);
      tape.backward(l);
      opt.step(pem.params());
      sum += l.value()[0];
      ++batches;
    }
    history.push_back(sum / static_cast<double>(batches));
  }
  return history;
}

RerankReport pem_rerank(const PemModel& pem, io::ProposalMap& proposals,
                        const io::ActionnessMap& actionness, const io::AnnotationMap* gts) {
  RerankReport report;
  if (pem.oracle_mode() && gts == nullptr) {
    throw ContractError("oracle-mode PEM needs ground truth");
  }
  for (auto& [vid, recs] : proposals) {
    std::vector<double> out;
    if (pem.oracle_mode()) {
      const auto g = gts->find(vid);
      const std::vector<TemporalSegment> none;
      const auto& segs = g == gts->end() ? none : g->second.segments;
      for (const auto& r : recs) out.push_back(best_iou(r.segment, segs));
    } else {
      const auto a = actionness.find(vid);
      if (a == actionness.end()) {
        report.missing_actionness.push_back(vid);
        continue;
      }
      std::vector<std::vector<double>> feats;
      for (const auto& r : recs) feats.push_back(pem_features(a->second, r.segment, pem.config()));
      out = pem.predict(feats);
    }
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const double raw = recs[i].stage_scores.raw_conf.value_or(recs[i].score);
      recs[i].set_stage(io::Stage::kPem, raw * out[i]);
    }
    io::sort_by_rank(recs);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Ensemble

io::ProposalMap ensemble_fuse(std::span<const io::ProposalMap> sources, const NmsConfig& cfg,
                              FuseReport* report) {
  if (sources.size() < 2) throw ContractError("ensemble_fuse needs at least two sources");
  std::set<std::string> videos;
  for (const auto& s : sources)
    for (const auto& [vid, _] : s) videos.insert(vid);
  io::ProposalMap fused;
  std::size_t single = 0;
  for (const auto& vid : videos) {
    std::vector<ProposalRecord> pool;
    std::size_t present = 0;
    for (std::size_t k = 0; k < sources.size(); ++k) {
      const auto it = sources[k].find(vid);
      if (it == sources[k].end()) continue;
      ++present;
      const auto& recs = it->second;
      if (recs.empty()) continue;
      double lo = recs.front().score;
      double hi = recs.front().score;
      for (const auto& r : recs) {
        lo = std::min(lo, r.score);
        hi = std::max(hi, r.score);
      }
      for (auto r : recs) {
        // A constant source carries no ranking; its scores pass through,
        // clamped to [0, 1].
        const double norm = hi > lo ? (r.score - lo) / (hi - lo) : std::clamp(r.score, 0.0, 1.0);
        r.score = norm;
        r.stage_scores = {};
        r.stage_scores.raw_conf = norm;
        r.source = "source" + std::to_string(k) + (r.source.empty() ? "" : ":" + r.source);
        pool.push_back(std::move(r));
      }
    }
    if (present == 1) {
      ++single;
      for (std::size_t k = 0; k < sources.size(); ++k) {
        const auto it = sources[k].find(vid);
        if (it != sources[k].end()) fused[vid] = it->second;
      }
      continue;
    }
    fused[vid] = soft_nms(std::move(pool), cfg);
  }
  if (report) report->single_source_videos = single;
  return fused;
}

// ---------------------------------------------------------------------------
// Config JSON

json to_json(const NmsConfig& c) {
  return {{"sigma", c.sigma}, {"score_floor", c.score_floor}, {"max_kept", c.max_kept}};
}

json to_json(const TagConfig& c) {
  return {{"thresholds", c.thresholds},
          {"merge_gap_ratio", c.merge_gap_ratio},
          {"snap_window", c.snap_window}};
}

json to_json(const PemConfig& c) {
  return {{"n_inner", c.n_inner},
          {"n_boundary", c.n_boundary},
          {"hidden", c.hidden},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"proposals_per_video", c.proposals_per_video},
          {"seed", c.seed}};
}

NmsConfig nms_config_from_json(const json& j) {
  jsonutil::reject_unknown_keys(j, {"sigma", "score_floor", "max_kept"}, "nms");
  NmsConfig c;
  jsonutil::read_if_present(j, "sigma", c.sigma, "nms");
  jsonutil::read_if_present(j, "score_floor", c.score_floor, "nms");
  jsonutil::read_if_present(j, "max_kept", c.max_kept, "nms");
  c.validate();
  return c;
}

TagConfig tag_config_from_json(const json& j) {
  jsonutil::reject_unknown_keys(j, {"thresholds", "merge_gap_ratio", "snap_window"}, "tag");
  TagConfig c;
  jsonutil::read_if_present(j, "thresholds", c.thresholds, "tag");
  jsonutil::read_if_present(j, "merge_gap_ratio", c.merge_gap_ratio, "tag");
  jsonutil::read_if_present(j, "snap_window", c.snap_window, "tag");
  c.validate();
  return c;
}

PemConfig pem_config_from_json(const json& j) {
  jsonutil::reject_unknown_keys(j,
                                {"n_inner", "n_boundary", "hidden", "epochs", "learning_rate",
                                 "batch_size", "proposals_per_video", "seed"},
                                "pem");
  PemConfig c;
  jsonutil::read_if_present(j, "n_inner", c.n_inner, "pem");
  jsonutil::read_if_present(j, "n_boundary", c.n_boundary, "pem");
  jsonutil::read_if_present(j, "hidden", c.hidden, "pem");
  jsonutil::read_if_present(j, "epochs", c.epochs, "pem");
  jsonutil::read_if_present(j, "learning_rate", c.learning_rate, "pem");
  jsonutil::read_if_present(j, "batch_size", c.batch_size, "pem");
  jsonutil::read_if_present(j, "proposals_per_video", c.proposals_per_video, "pem");
  jsonutil::read_if_present(j, "seed", c.seed, "pem");
  c.validate();
  return c;
}

}  // namespace rapnet::post
