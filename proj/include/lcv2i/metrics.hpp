#pragma once

#include <algorithm>
#include <vector>

#include "lcv2i/comm.hpp"
#include "lcv2i/geometry.hpp"

namespace lcv2i {

// Average precision with all-point interpolation. Detections are ranked by
// score (ties: frame index, then cell index) and greedily matched per frame
// to the unmatched ground-truth box of highest IoU >= threshold.
inline double evaluate_ap(const std::vector<std::vector<Detection>>& detections_per_frame,
                          const std::vector<std::vector<Box2>>& gt_per_frame, double iou_thresh) {
  if (detections_per_frame.size() != gt_per_frame.size())
    throw DimensionError("evaluate_ap: frame count mismatch");
  std::size_t total_gt = 0;
  for (const auto& g : gt_per_frame) total_gt += g.size();
  if (total_gt == 0) throw ContractError("evaluate_ap: zero ground-truth boxes, AP undefined");

  struct Ranked {
    double score;
    std::size_t frame, cell, det;
  };
  std::vector<Ranked> ranked;
  for (std::size_t f = 0; f < detections_per_frame.size(); ++f)
    for (std::size_t d = 0; d < detections_per_frame[f].size(); ++d)
      ranked.push_back({detections_per_frame[f][d].score, f, detections_per_frame[f][d].cell, d});
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.frame != b.frame) return a.frame < b.frame;
    return a.cell < b.cell;
  });

  std::vector<std::vector<bool>> gt_used(gt_per_frame.size());
  for (std::size_t f = 0; f < gt_per_frame.size(); ++f)
    gt_used[f].assign(gt_per_frame[f].size(), false);

  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const auto& r : ranked) {
    const auto& det = detections_per_frame[r.frame][r.det];
    double best_iou = 0;
    std::size_t best_g = 0;
    bool found = false;
    for (std::size_t g = 0; g < gt_per_frame[r.frame].size(); ++g) {
      if (gt_used[r.frame][g]) continue;
      const double iou = box_iou(det.box, gt_per_frame[r.frame][g]);
      if (iou >= iou_thresh && iou > best_iou) {
        best_iou = iou;
        best_g = g;
        found = true;
      }
    }
    if (found) {
      gt_used[r.frame][best_g] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  // precision envelope, integrated over recall
  std::vector<double> envelope(precision.size());
  double running = 0;
  for (std::size_t i = precision.size(); i-- > 0;) {
    running = std::max(running, precision[i]);
    envelope[i] = running;
  }
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * envelope[i];
    prev_recall = recall[i];
  }
  return ap;
}

}  // namespace lcv2i
