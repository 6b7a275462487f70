#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "cdformer/boxes.hpp"

namespace cdformer {

struct ScoredDetection {
  std::size_t episode = 0;
  int class_id = -1;
  double score = 0.0;
  Box box;
};

struct GtObject {
  std::size_t episode = 0;
  int class_id = -1;
  Box box;
};

// 0.50, 0.55, ..., 0.95
inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

// AP for a single class with COCO's 101-point interpolation. Detections are
// taken in descending score order (stable on ties) and each claims the
// unmatched ground truth of its episode with the highest IoU >= threshold.
inline double average_precision(const std::vector<ScoredDetection>& dets,
                                const std::vector<GtObject>& gts, double iou_threshold) {
  if (gts.empty()) return 0.0;
  for (const auto& d : dets) {
    if (!std::isfinite(d.score)) throw NumericError("average_precision: non-finite score");
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<char> used(gts.size(), 0);
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i : order) {
    const auto& d = dets[i];
    double best = iou_threshold;
    std::ptrdiff_t best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].episode != d.episode) continue;
      const double v = iou(d.box, gts[g].box);
      if (v >= best) {
        if (best_gt < 0 || v > best) {
          best = v;
          best_gt = static_cast<std::ptrdiff_t>(g);
        }
      }
    }
    if (best_gt >= 0) {
      used[static_cast<std::size_t>(best_gt)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  // Monotone precision envelope.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double total = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return total / 101.0;
}

// Rows: true class (last row BG); columns: predicted class (last column BG).
struct ConfusionMatrix {
  std::vector<int> classes;
  std::vector<std::vector<long>> counts;

  std::size_t bg() const { return classes.size(); }
  long total() const {
    long t = 0;
    for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
    return t;
  }
  std::vector<std::vector<double>> row_normalized() const {
    std::vector<std::vector<double>> out(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) {
      const double s = static_cast<double>(std::accumulate(counts[i].begin(), counts[i].end(), 0L));
      for (long c : counts[i]) out[i].push_back(s > 0 ? static_cast<double>(c) / s : 0.0);
    }
    return out;
  }
};

// Each detection (descending score) claims the unused ground truth of its
// episode with the best IoU >= threshold, regardless of class.
inline ConfusionMatrix confusion_matrix(const std::vector<ScoredDetection>& dets,
                                        const std::vector<GtObject>& gts,
                                        const std::vector<int>& classes, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw ConfigError("confusion_matrix: IoU threshold must lie in (0, 1)");
  }
  ConfusionMatrix cm;
  cm.classes = classes;
  const std::size_t k = classes.size();
  cm.counts.assign(k + 1, std::vector<long>(k + 1, 0));
  auto index_of = [&](int c) {
    auto it = std::find(classes.begin(), classes.end(), c);
    if (it == classes.end()) {
      throw ConfigError("confusion_matrix: class " + std::to_string(c) + " not in class list");
    }
    return static_cast<std::size_t>(it - classes.begin());
  };
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<char> used(gts.size(), 0);
  for (std::size_t i : order) {
    const auto& d = dets[i];
    double best = -1.0;
    std::ptrdiff_t best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].episode != d.episode) continue;
      const double v = iou(d.box, gts[g].box);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_gt = static_cast<std::ptrdiff_t>(g);
      }
    }
    const std::size_t pred = index_of(d.class_id);
    if (best_gt >= 0) {
      used[static_cast<std::size_t>(best_gt)] = 1;
      cm.counts[index_of(gts[static_cast<std::size_t>(best_gt)].class_id)][pred] += 1;
    } else {
      cm.counts[cm.bg()][pred] += 1;
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (!used[g]) cm.counts[index_of(gts[g].class_id)][cm.bg()] += 1;
  }
  return cm;
}

struct EvalReport {
  std::vector<int> classes;                // classes with at least one ground truth
  std::vector<double> thresholds;          // IoU thresholds
  std::vector<std::vector<double>> ap;     // [class][threshold]
  double map = 0.0;                        // mean over classes and thresholds
  double map50 = 0.0;                      // mean over classes at IoU 0.5
  ConfusionMatrix confusion;
  std::size_t episode_count = 0;
};

inline EvalReport evaluate_detections(const std::vector<ScoredDetection>& dets,
                                      const std::vector<GtObject>& gts,
                                      std::size_t episode_count,
                                      double confusion_score_threshold = 0.5,
                                      double confusion_iou_threshold = 0.5) {
  EvalReport r;
  r.episode_count = episode_count;
  r.thresholds = coco_iou_thresholds();
  std::map<int, std::pair<std::vector<ScoredDetection>, std::vector<GtObject>>> by_class;
  for (const auto& g : gts) by_class[g.class_id].second.push_back(g);
  for (const auto& d : dets) by_class[d.class_id].first.push_back(d);
  std::vector<int> all_classes;
  for (const auto& [c, v] : by_class) all_classes.push_back(c);
  for (const auto& [c, v] : by_class) {
    if (v.second.empty()) continue;
    r.classes.push_back(c);
    std::vector<double> row;
    for (double t : r.thresholds) row.push_back(average_precision(v.first, v.second, t));
    r.ap.push_back(std::move(row));
  }
  if (!r.ap.empty()) {
    double all = 0.0, at50 = 0.0;
    for (const auto& row : r.ap) {
      all += std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
      at50 += row.front();
    }
    r.map = all / static_cast<double>(r.ap.size());
    r.map50 = at50 / static_cast<double>(r.ap.size());
  }
  std::vector<ScoredDetection> confident;
  for (const auto& d : dets)
    if (d.score >= confusion_score_threshold) confident.push_back(d);
  r.confusion = confusion_matrix(confident, gts, all_classes, confusion_iou_threshold);
  return r;
}

}  // namespace cdformer
