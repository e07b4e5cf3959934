#pragma once
#include <array>
#include <vector>

#include "maskseg/criterion.hpp"
#include "maskseg/inference.hpp"
#include "maskseg/model.hpp"
#include "maskseg/scene.hpp"

namespace maskseg {

struct PqResult {
  double pq = 0.0, sq = 0.0, rq = 0.0;
  double pq_things = 0.0, pq_stuff = 0.0;
  int classes = 0, thing_classes = 0, stuff_classes = 0;
};

// Panoptic quality against disjoint ground-truth segments. Segments match
// when classes agree and IoU > 0.5; pixels outside every GT segment are void
// and excluded from IoU unions; predictions mostly over void are not counted
// as false positives. Per-class stats averaged over classes that occur.
PqResult pq_metric(const PanopticOutput& pred, const GroundTruthScene& gt,
                   const std::vector<bool>& is_thing_class);
// Same, aggregated over a set of scenes (per-class stats pooled first).
PqResult pq_metric_dataset(const std::vector<PanopticOutput>& preds,
                           const std::vector<GroundTruthScene>& gts,
                           const std::vector<bool>& is_thing_class);

// Per-class IoU over label maps (-1 = unlabeled), averaged over classes
// present in either map.
double miou_metric(const std::vector<int>& pred_labels, const std::vector<int>& gt_labels,
                   int num_classes);
double miou_metric_dataset(const std::vector<std::vector<int>>& preds,
                           const std::vector<std::vector<int>>& gts, int num_classes);

// Ground-truth semantic label map of a scene (-1 where void).
std::vector<int> semantic_labels_from_scene(const GroundTruthScene& scene);

// COCO-style mask AP: greedy confidence-ordered matching per class and IoU
// threshold, 101-point interpolated precision averaged over thresholds and
// classes with ground truth. The PR curve is anchored at (recall 0,
// precision 1) when any detection exists; no detections give 0.
double ap_metric(const std::vector<InstanceOutput>& dets,
                 const std::vector<std::vector<GtSegment>>& gts,
                 const std::vector<double>& iou_thresholds, int num_classes);
std::vector<double> default_iou_thresholds();  // 0.50, 0.55, ..., 0.95

struct Proposal {
  BinaryMask mask;
  double score = 0.0;
};

// Class-agnostic average recall: fraction of GT segments covered (IoU > 0.5)
// by the top-k proposals, averaged over scenes with at least one segment.
double ar_at_k(const std::vector<std::vector<Proposal>>& proposals,
               const std::vector<std::vector<GtSegment>>& gts, int k);

double mask_iou(const BinaryMask& a, const BinaryMask& b);

struct FgBgStats {
  std::array<double, 3> fg{}, bg{};       // per feature resolution 1/32, 1/16, 1/8
  std::array<long long, 3> samples{};     // (query, layer) pairs accumulated
  double fg_avg = 0.0, bg_avg = 0.0;      // mean of the per-resolution values
};

// Cumulative attention mass inside vs outside the matched GT mask, per
// feature resolution, averaged over matched queries and scenes. Matching runs
// on the final prediction set with uniform points.
FgBgStats attention_fg_stats(const Model& model, const std::vector<GroundTruthScene>& scenes,
                             const LossWeights& w, int k_points, uint64_t seed);

}  // namespace maskseg
