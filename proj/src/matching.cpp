#include "rapnet/matching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "rapnet/data_io.hpp"
#include "rapnet/error.hpp"

namespace rapnet::match {

using model::AnchorCell;
using nn::Tensor;
using nn::Var;

std::size_t AssignmentResult::n_ignored() const {
  return static_cast<std::size_t>(std::count(ignored.begin(), ignored.end(), 1));
}

AssignmentResult assign_labels(const std::vector<AnchorCell>& grid,
                               std::span<const TemporalSegment> decoded,
                               std::span<const TemporalSegment> gts,
                               double iou_threshold) {
  if (grid.empty()) throw ContractError("assign_labels: empty anchor grid");
  if (decoded.size() != grid.size()) {
    throw ContractError("assign_labels: " + std::to_string(decoded.size()) +
                        " decoded segments for " + std::to_string(grid.size()) + " cells");
  }
  AssignmentResult r;
  r.negative.assign(grid.size(), 0);
  r.ignored.assign(grid.size(), 0);
  std::vector<std::uint8_t> used(grid.size(), 0);

  struct Pair {
    double iou;
    std::size_t cell;
    std::size_t gt;
  };
  std::vector<Pair> pairs;
  pairs.reserve(grid.size() * gts.size());
  for (std::size_t g = 0; g < gts.size(); ++g) {
    for (std::size_t n = 0; n < grid.size(); ++n) {
      pairs.push_back({segment_iou(grid[n].prior, gts[g]), n, g});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    return std::tuple(-a.iou, a.cell, a.gt) < std::tuple(-b.iou, b.cell, b.gt);
  });
  std::vector<std::uint8_t> gt_done(gts.size(), 0);
  std::size_t remaining = std::min(gts.size(), grid.size());
  for (const auto& p : pairs) {
    if (remaining == 0) break;
    if (gt_done[p.gt] || used[p.cell]) continue;
    gt_done[p.gt] = 1;
    used[p.cell] = 1;
    r.positives.push_back({p.cell, p.gt});
    --remaining;
  }
  std::sort(r.positives.begin(), r.positives.end(),
            [](const Positive& a, const Positive& b) { return a.cell < b.cell; });

  for (std::size_t n = 0; n < grid.size(); ++n) {
    if (used[n]) continue;
    double best = 0.0;
    for (const auto& g : gts) best = std::max(best, segment_iou(decoded[n], g));
    if (best > iou_threshold) {
      r.ignored[n] = 1;
    } else {
      r.negative[n] = 1;
    }
  }
  r.n_pos = r.positives.size();
  r.n_neg = static_cast<std::size_t>(std::count(r.negative.begin(), r.negative.end(), 1));
  return r;
}

LossBreakdown LossTerms::values() const {
  return {conf_pos.value()[0], conf_neg.value()[0], center.value()[0],
          width.value()[0],    iou.value()[0],      total.value()[0]};
}

double center_target(const AnchorCell& cell, const TemporalSegment& gt) {
  return std::clamp(gt.center() / cell.stride - cell.position, 0.0, 1.0);
}

double width_target(const AnchorCell& cell, const TemporalSegment& gt) {
  return std::log(gt.length() / cell.anchor_width);
}

namespace {

struct LevelPositive {
  std::size_t anchor;
  std::size_t position;
  const AnchorCell* cell;
  TemporalSegment gt;
};

// Sum over a level's positives of weight * (1 - IoU(decoded, gt)), with the
// decoded segment clamped to [0, 1].
Var iou_term(Var center, Var width, std::vector<LevelPositive> pos, double weight) {
  auto iou_and_grad = [](const LevelPositive& p, double cl, double wl, double* dcl,
                         double* dwl) {
    const double sig = nn::sigmoid(cl);
    const double s_cell = p.cell->stride;
    const double c = (p.cell->position + sig) * s_cell;
    const double w = p.cell->anchor_width * std::exp(wl);
    const double s0 = c - 0.5 * w;
    const double e0 = c + 0.5 * w;
    const double s = std::clamp(s0, 0.0, 1.0);
    const double e = std::clamp(e0, 0.0, 1.0);
    if (dcl) *dcl = 0.0;
    if (dwl) *dwl = 0.0;
    if (!(s < e)) return 0.0;
    const double inter = std::min(e, p.gt.end) - std::max(s, p.gt.start);
    if (inter <= 0.0) return 0.0;
    const double uni = (e - s) + p.gt.length() - inter;
    const double iou = inter / uni;
    if (dcl && dwl) {
      const double di_de = e < p.gt.end ? 1.0 : 0.0;
      const double di_ds = s > p.gt.start ? -1.0 : 0.0;
      const double du_de = 1.0 - di_de;
      const double du_ds = -1.0 - di_ds;
      const double diou_de = (di_de * uni - inter * du_de) / (uni * uni);
      const double diou_ds = (di_ds * uni - inter * du_ds) / (uni * uni);
      const double de_de0 = (e0 > 0.0 && e0 < 1.0) ? 1.0 : 0.0;
      const double ds_ds0 = (s0 > 0.0 && s0 < 1.0) ? 1.0 : 0.0;
      const double g_e0 = diou_de * de_de0;
      const double g_s0 = diou_ds * ds_ds0;
      const double dc_dcl = s_cell * sig * (1.0 - sig);
      const double dw_dwl = w;
      *dcl = (g_e0 + g_s0) * dc_dcl;
      *dwl = (0.5 * g_e0 - 0.5 * g_s0) * dw_dwl;
    }
    return iou;
  };

  double total = 0.0;
  for (const auto& p : pos) {
    const double iou = iou_and_grad(p, center.value().at(p.anchor, p.position),
                                    width.value().at(p.anchor, p.position), nullptr,
                                    nullptr);
    total += weight * (1.0 - iou);
  }
  return center.tape().record(
      "iou_loss", Tensor::scalar(total), {center, width},
      [center, width, pos = std::move(pos), weight, iou_and_grad](const Tensor& g,
                                                                  nn::Tape& tape) {
        Tensor gc(center.shape(), 0.0);
        Tensor gw(width.shape(), 0.0);
        for (const auto& p : pos) {
          double dcl = 0.0;
          double dwl = 0.0;
          iou_and_grad(p, center.value().at(p.anchor, p.position),
                       width.value().at(p.anchor, p.position), &dcl, &dwl);
          gc.at(p.anchor, p.position) += -weight * g[0] * dcl;
          gw.at(p.anchor, p.position) += -weight * g[0] * dwl;
        }
        tape.accumulate(center, gc);
        tape.accumulate(width, gw);
      });
}

Var sum_terms(nn::Tape& tape, const std::vector<Var>& terms) {
  if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
  return nn::weighted_sum(terms, std::vector<double>(terms.size(), 1.0));
}

}  // namespace

LossTerms compute_loss(const model::LevelPredictions& preds,
                       const std::vector<AnchorCell>& grid,
                       const AssignmentResult& assignment,
                       std::span<const TemporalSegment> gts, const LossWeights& weights) {
  if (preds.levels.empty()) throw ContractError("compute_loss: no prediction levels");
  nn::Tape& tape = preds.levels.front().conf.tape();
  if (assignment.negative.size() != grid.size() || assignment.ignored.size() != grid.size()) {
    throw ContractError("compute_loss: assignment does not match the anchor grid");
  }
  const std::size_t levels = preds.levels.size();
  const double inv_pos = assignment.n_pos ? 1.0 / static_cast<double>(assignment.n_pos) : 0.0;
  const double inv_neg = assignment.n_neg ? 1.0 / static_cast<double>(assignment.n_neg) : 0.0;

  std::vector<Tensor> pos_w, neg_w, ones, zeros, ctr_t, wid_t;
  std::vector<std::vector<LevelPositive>> level_pos(levels);
  for (std::size_t i = 0; i < levels; ++i) {
    const auto& shape = preds.levels[i].conf.shape();
    pos_w.emplace_back(shape, 0.0);
    neg_w.emplace_back(shape, 0.0);
    ones.emplace_back(shape, 1.0);
    zeros.emplace_back(shape, 0.0);
    ctr_t.emplace_back(shape, 0.0);
    wid_t.emplace_back(shape, 0.0);
  }
  for (std::size_t n = 0; n < grid.size(); ++n) {
    if (assignment.negative[n]) {
      const auto& c = grid[n];
      neg_w[static_cast<std::size_t>(c.level)].at(static_cast<std::size_t>(c.anchor),
                                                  static_cast<std::size_t>(c.position)) =
          inv_neg;
    }
  }
  for (const auto& p : assignment.positives) {
    const auto& c = grid.at(p.cell);
    const auto& gt = gts[p.gt];
    const auto i = static_cast<std::size_t>(c.level);
    const auto a = static_cast<std::size_t>(c.anchor);
    const auto j = static_cast<std::size_t>(c.position);
    pos_w[i].at(a, j) = inv_pos;
    ctr_t[i].at(a, j) = center_target(c, gt);
    wid_t[i].at(a, j) = width_target(c, gt);
    level_pos[i].push_back({a, j, &c, gt});
  }

  std::vector<Var> cp, cn, ce, wi, io;
  auto guarded = [](const char* term, auto&& fn) {
    try {
      return fn();
    } catch (const NumericError& e) {
      throw NumericError(std::string("loss term '") + term + "': " + e.what());
    }
  };
  for (std::size_t i = 0; i < levels; ++i) {
    const auto& lv = preds.levels[i];
    if (assignment.n_pos) {
      cp.push_back(guarded("conf_pos", [&] { return nn::bce_with_logits_sum(lv.conf, ones[i], pos_w[i]); }));
      ce.push_back(guarded("center", [&] { return nn::bce_with_logits_sum(lv.center, ctr_t[i], pos_w[i]); }));
      wi.push_back(guarded("width", [&] { return nn::smooth_l1_sum(lv.width, wid_t[i], pos_w[i]); }));
      io.push_back(guarded("iou", [&] { return iou_term(lv.center, lv.width, level_pos[i], inv_pos); }));
    }
    if (assignment.n_neg) {
      cn.push_back(guarded("conf_neg", [&] { return nn::bce_with_logits_sum(lv.conf, zeros[i], neg_w[i]); }));
    }
  }
  LossTerms t;
  t.conf_pos = sum_terms(tape, cp);
  t.conf_neg = sum_terms(tape, cn);
  t.center = sum_terms(tape, ce);
  t.width = sum_terms(tape, wi);
  t.iou = sum_terms(tape, io);
  t.total = guarded("total", [&] {
    // lambda_conf * (conf_pos + conf_neg) + lambda_c * center + ...
    return nn::weighted_sum({nn::add(t.conf_pos, t.conf_neg), t.center, t.width, t.iou},
                            {weights.conf, weights.center, weights.width, weights.iou});
  });
  return t;
}

Var actionness_loss(const model::LevelPredictions& preds,
                    std::span<const TemporalSegment> gts) {
  const auto& logits = preds.actionness.value();
  const std::size_t T = logits.size();
  const auto target = io::oracle_actionness(gts, T);
  return nn::bce_with_logits_sum(preds.actionness, Tensor(logits.shape(), target),
                                 Tensor(logits.shape(), 1.0 / static_cast<double>(T)));
}

}  // namespace rapnet::match
