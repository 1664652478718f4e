#pragma once

// Detection evaluation: greedy matching, all-point interpolated average
// precision, mAP@[.5:.95] and AP50 over the classes present in ground truth.
// Deterministic and invariant to test-image ordering (sort keys never depend
// on image index).

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "cdfsod/dataset.hpp"
#include "cdfsod/detector.hpp"

namespace cdfsod {

struct PRPoint {
  double recall = 0, precision = 0;
};

struct EvalDet {
  double score = 0;
  int image = 0;
  Box box;
  int cell = 0;
};

// One class at a time. Detections sorted by score descending; each matches
// the highest-IoU unmatched ground truth of its image at IoU >= thresh.
inline std::vector<PRPoint> match_and_pr(std::vector<EvalDet> dets,
                                         const std::vector<std::vector<Box>>& gts_per_image,
                                         double iou_thresh) {
  std::sort(dets.begin(), dets.end(), [](const EvalDet& a, const EvalDet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
    if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
    if (a.box.y2 != b.box.y2) return a.box.y2 < b.box.y2;
    return a.cell < b.cell;
  });
  int n_gt = 0;
  for (const auto& g : gts_per_image) n_gt += int(g.size());
  std::vector<std::vector<char>> used(gts_per_image.size());
  for (size_t i = 0; i < gts_per_image.size(); ++i) used[i].assign(gts_per_image[i].size(), 0);

  std::vector<PRPoint> curve;
  int tp = 0, fp = 0;
  for (const EvalDet& d : dets) {
    const auto& gts = gts_per_image[size_t(d.image)];
    int best = -1;
    double best_iou = iou_thresh;
    for (int j = 0; j < int(gts.size()); ++j) {
      if (used[size_t(d.image)][size_t(j)]) continue;
      double v = iou(d.box, gts[size_t(j)]);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best_iou = v;
        best = j;
      }
    }
    if (best >= 0) {
      used[size_t(d.image)][size_t(best)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    curve.push_back(PRPoint{n_gt > 0 ? double(tp) / n_gt : 0.0, double(tp) / (tp + fp)});
  }
  return curve;
}

// All-point interpolation: area under the precision envelope vs recall.
inline double average_precision(const std::vector<PRPoint>& curve) {
  if (curve.empty()) return 0.0;
  std::vector<double> env(curve.size());
  double run = 0;
  for (int i = int(curve.size()) - 1; i >= 0; --i) {
    run = std::max(run, curve[size_t(i)].precision);
    env[size_t(i)] = run;
  }
  double ap = 0, prev_recall = 0;
  for (size_t i = 0; i < curve.size(); ++i) {
    ap += (curve[i].recall - prev_recall) * env[i];
    prev_recall = curve[i].recall;
  }
  return ap;
}

struct MetricsRecord {
  double map = 0;   // mean over IoU thresholds 0.5:0.05:0.95 and classes
  double ap50 = 0;
  std::map<int, double> per_class;  // class id -> AP averaged over thresholds
  int n_images = 0, n_gts = 0, n_dets = 0;
};

inline const std::vector<double>& map_iou_thresholds() {
  static const std::vector<double> t{0.50, 0.55, 0.60, 0.65, 0.70, 0.75,
                                     0.80, 0.85, 0.90, 0.95};
  return t;
}

// Precomputed per-image detections path, shared by the real evaluator and
// test fixtures that bypass the model.
inline MetricsRecord evaluate_detections(const std::vector<std::vector<Detection>>& dets_per_image,
                                         const std::vector<LabeledImage>& testset) {
  MetricsRecord rec;
  rec.n_images = int(testset.size());
  std::map<int, std::vector<EvalDet>> class_dets;
  std::map<int, std::vector<std::vector<Box>>> class_gts;
  for (int i = 0; i < int(testset.size()); ++i) {
    for (int j = 0; j < int(testset[size_t(i)].boxes.size()); ++j) {
      int c = testset[size_t(i)].classes[size_t(j)];
      auto& g = class_gts[c];
      g.resize(testset.size());
      ++rec.n_gts;
    }
  }
  for (auto& [c, g] : class_gts) {
    g.resize(testset.size());
    for (int i = 0; i < int(testset.size()); ++i)
      for (int j = 0; j < int(testset[size_t(i)].boxes.size()); ++j)
        if (testset[size_t(i)].classes[size_t(j)] == c)
          g[size_t(i)].push_back(testset[size_t(i)].boxes[size_t(j)]);
  }
  for (int i = 0; i < int(dets_per_image.size()); ++i)
    for (const Detection& d : dets_per_image[size_t(i)]) {
      ++rec.n_dets;
      if (class_gts.count(d.class_id))
        class_dets[d.class_id].push_back(EvalDet{d.score, i, d.box, d.cell});
    }

  if (class_gts.empty()) return rec;
  const auto& thresholds = map_iou_thresholds();
  double map_sum = 0, ap50_sum = 0;
  for (const auto& [c, gts] : class_gts) {
    double class_sum = 0;
    for (double t : thresholds) {
      auto it = class_dets.find(c);
      double ap = average_precision(
          match_and_pr(it == class_dets.end() ? std::vector<EvalDet>{} : it->second, gts, t));
      class_sum += ap;
      if (t == 0.50) ap50_sum += ap;
    }
    rec.per_class[c] = class_sum / double(thresholds.size());
    map_sum += rec.per_class[c];
  }
  rec.map = map_sum / double(class_gts.size());
  rec.ap50 = ap50_sum / double(class_gts.size());
  return rec;
}

inline MetricsRecord evaluate(const ModelWeights& w, const std::vector<LabeledImage>& testset,
                              double decode_floor = 0.05) {
  if (testset.empty()) throw std::invalid_argument("evaluate: empty test set");
  std::vector<std::vector<Detection>> dets(testset.size());
  for (size_t i = 0; i < testset.size(); ++i)
    dets[i] = nms(decode(forward(w, testset[i].image), decode_floor), 0.5);
  return evaluate_detections(dets, testset);
}

}  // namespace cdfsod
