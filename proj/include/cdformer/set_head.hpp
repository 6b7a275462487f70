#pragma once

#include <string>
#include <vector>

#include "cdformer/boxes.hpp"
#include "cdformer/hungarian.hpp"
#include "cdformer/obd.hpp"
#include "cdformer/ops.hpp"

namespace cdformer {

// Per object query: a box and one independent probability per support
// position (background placeholders included).
struct DetectionOutput {
  Tensor boxes;            // [M x 4], (cx, cy, w, h) in (0, 1)
  Tensor position_logits;  // [M x N]
  Tensor position_probs;   // sigmoid(position_logits)

  static DetectionOutput from_logits(Tensor boxes, Tensor logits) {
    Tensor probs = sigmoid(logits);
    return {std::move(boxes), std::move(logits), std::move(probs)};
  }
  std::size_t queries() const { return boxes.rows(); }
  std::size_t positions() const { return position_logits.cols(); }
  Box box(std::size_t q) const {
    return {boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)};
  }
};

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> labels;

  std::size_t size() const { return boxes.size(); }
};

struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

struct Detection {
  int class_id = -1;
  double score = 0.0;
  Box box;
  std::size_t query = 0;
};

namespace detail {

inline std::vector<std::size_t> label_positions(const GroundTruth& gt, const SupportSequence& s) {
  if (gt.labels.size() != gt.boxes.size()) {
    throw ShapeError("ground truth: " + std::to_string(gt.labels.size()) + " labels for " +
                     std::to_string(gt.boxes.size()) + " boxes");
  }
  std::vector<std::size_t> pos;
  pos.reserve(gt.labels.size());
  for (int label : gt.labels) {
    const int p = s.position_of(label);
    if (p < 0) {
      throw ConfigError("ground-truth label " + std::to_string(label) +
                        " has no class slot in the support sequence");
    }
    pos.push_back(static_cast<std::size_t>(p));
  }
  return pos;
}

}  // namespace detail

// cost[q][g] = -w_cls * p_q[pos(label_g)] + w_l1 * |b_q - b_g|_1
//              + w_giou * (1 - GIoU(b_q, b_g)).
// Placeholder columns never enter. Row-major [M x G].
inline std::vector<double> match_cost(const DetectionOutput& out, const GroundTruth& gt,
                                      const SupportSequence& s, const LossWeights& w) {
  const auto pos = detail::label_positions(gt, s);
  const std::size_t m = out.queries(), g = gt.size();
  if (out.positions() != s.length()) {
    throw ShapeError("match_cost: " + std::to_string(out.positions()) +
                     " position columns for a sequence of length " + std::to_string(s.length()));
  }
  std::vector<double> cost(m * g);
  for (std::size_t q = 0; q < m; ++q) {
    const Box bq = out.box(q);
    for (std::size_t k = 0; k < g; ++k) {
      const Box& bg = gt.boxes[k];
      const double l1 = std::abs(bq.cx - bg.cx) + std::abs(bq.cy - bg.cy) +
                        std::abs(bq.w - bg.w) + std::abs(bq.h - bg.h);
      cost[q * g + k] = -w.cls * out.position_probs.at(q, pos[k]) + w.l1 * l1 +
                        w.giou * (1.0 - giou(bq, bg));
    }
  }
  return cost;
}

struct SetLoss {
  Tensor total;
  double cls = 0.0;   // BCE, summed over positions and averaged over queries
  double l1 = 0.0;    // mean L1 over matched pairs
  double giou = 0.0;  // mean (1 - GIoU) over matched pairs
};

// Matched query: target 1 at its ground-truth class position, 0 elsewhere.
// Unmatched query: target 1 at every placeholder, 0 at class positions.
inline std::vector<double> classification_targets(const DetectionOutput& out,
                                                  const GroundTruth& gt,
                                                  const SupportSequence& s,
                                                  const MatchResult& match) {
  const auto pos = detail::label_positions(gt, s);
  const std::size_t m = out.queries(), n = out.positions();
  std::vector<double> targets(m * n, 0.0);
  std::vector<char> matched(m, 0);
  for (auto [q, k] : match.pairs) {
    targets[q * n + pos[k]] = 1.0;
    matched[q] = 1;
  }
  for (std::size_t q = 0; q < m; ++q) {
    if (matched[q]) continue;
    for (std::size_t j = 0; j < n; ++j)
      if (s.slots[j].is_placeholder()) targets[q * n + j] = 1.0;
  }
  return targets;
}

inline SetLoss set_loss(const DetectionOutput& out, const GroundTruth& gt,
                        const SupportSequence& s, const MatchResult& match, const LossWeights& w) {
  for (const auto& b : gt.boxes) {
    if (b.degenerate()) throw ShapeError("set_loss: degenerate ground-truth box");
  }
  if (out.positions() != s.length()) {
    throw ShapeError("set_loss: " + std::to_string(out.positions()) +
                     " position columns for a sequence of length " + std::to_string(s.length()));
  }
  const std::size_t m = out.queries();
  for (auto [q, k] : match.pairs) {
    if (q >= m || k >= gt.size()) throw ShapeError("set_loss: match pair out of range");
  }
  const auto targets = classification_targets(out, gt, s, match);
  Tensor cls = scale(bce_with_logits_sum(out.position_logits, targets),
                     1.0 / static_cast<double>(std::max<std::size_t>(m, 1)));

  SetLoss r;
  r.cls = cls.item();
  Tensor total = scale(cls, w.cls);
  if (!match.pairs.empty()) {
    std::vector<RowSource> rows;
    std::vector<double> target_boxes;
    for (auto [q, k] : match.pairs) {
      rows.push_back({out.boxes, q});
      for (double v : gt.boxes[k].as_array()) target_boxes.push_back(v);
    }
    const double inv = 1.0 / static_cast<double>(match.pairs.size());
    Tensor pred = stack_rows(rows, 4);
    Tensor target = Tensor::matrix(rows.size(), 4, std::move(target_boxes));
    Tensor l1 = scale(sum(abs(sub(pred, target))), inv);
    Tensor giou_term = scale(sum(add_scalar(neg(giou_rows(pred, target)), 1.0)), inv);
    r.l1 = l1.item();
    r.giou = giou_term.item();
    total = add(total, add(scale(l1, w.l1), scale(giou_term, w.giou)));
  }
  r.total = total;
  return r;
}

// Per query, the best class position's probability is the score; placeholder
// positions are never reported.
inline std::vector<Detection> decode_detections(const DetectionOutput& out,
                                                const SupportSequence& s,
                                                double score_threshold) {
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) {
    throw ConfigError("decode_detections: threshold must lie in [0, 1]");
  }
  std::vector<Detection> dets;
  for (std::size_t q = 0; q < out.queries(); ++q) {
    int best = -1;
    double best_p = -1.0;
    for (std::size_t n = 0; n < s.length(); ++n) {
      if (s.slots[n].is_placeholder()) continue;
      const double p = out.position_probs.at(q, n);
      if (p > best_p) {
        best_p = p;
        best = static_cast<int>(n);
      }
    }
    if (best < 0 || best_p < score_threshold) continue;
    dets.push_back({s.slots[static_cast<std::size_t>(best)].class_id, best_p, out.box(q), q});
  }
  return dets;
}

}  // namespace cdformer
