#pragma once
#include <utility>
#include <vector>

#include "maskseg/model.hpp"
#include "maskseg/rng.hpp"
#include "maskseg/scene.hpp"
#include "maskseg/tensor.hpp"

namespace maskseg {

struct PointSet {
  std::vector<double> coords;  // x0,y0,x1,y1,... in normalized [0,1]^2
  int count() const { return static_cast<int>(coords.size() / 2); }
};

struct LossWeights {
  double lambda_ce = 5.0;
  double lambda_dice = 5.0;
  double lambda_cls = 2.0;
  double no_object_weight = 0.1;
};

struct MatchAssignment {
  std::vector<std::pair<int, int>> pairs;  // (prediction index, gt index), injective both ways
  std::vector<int> unmatched_predictions;
};

// Instrumentation for the point-sampling memory claim: counts every bilinear
// point evaluation the loss performs on a mask map, and every sampler call.
// Attach a collector with set_point_accounting (nullptr detaches).
struct PointAccounting {
  long long point_reads = 0;
  long long uniform_sets = 0;
  long long importance_sets = 0;
};
void set_point_accounting(PointAccounting* acc);
PointAccounting* point_accounting();

// K i.i.d. uniform points in [0,1]^2; one shared set serves every
// (prediction, gt) pair of a matching step.
PointSet sample_points_uniform(int k, Rng& rng);

// PointRend-style importance sampling on a logit map: 3K uniform candidates,
// keep the 3K/4 most uncertain (score -|logit|), fill the rest uniformly.
PointSet sample_points_importance(const double* logits, int h, int w, int k, Rng& rng);

// Cell centers of an h x w grid, row-major; K = h*w. Replaces random points
// when the dense mask-loss ablation is active.
PointSet grid_center_points(int h, int w);

// Data-only bilinear reads of an [h x w] map at a PointSet (instrumented).
std::vector<double> sample_map_points(const double* map, int h, int w, const PointSet& pts);
// Differentiable counterpart on the tape (instrumented the same way).
Tensor sample_points_traced(const Tensor& map, const PointSet& pts);

// Plain (no-grad) point losses used when building matching costs; same
// formulas as bce_with_logits_mean / dice_from_logits.
double bce_points(const double* pred_logits, const double* gt, int k);
double dice_points(const double* pred_logits, const double* gt, int k);

// cost[i][j] = lambda_cls * (-softmax(class_logits_i)[label_j])
//            + lambda_ce * bce + lambda_dice * dice, point-sampled at `pts`.
// No gradient flows through this. Requires gts.size() <= N.
Tensor matching_cost(const SegmentPrediction& pred, const std::vector<GtSegment>& gts,
                     const PointSet& pts, const LossWeights& w);

// Min-cost injective assignment of ground truths to predictions
// (Kuhn-Munkres on the rectangular matrix). cost is [N x G], G <= N, finite.
MatchAssignment hungarian(const Tensor& cost);

struct LayerLossBreakdown {
  double cls = 0.0;   // mean weighted cross-entropy (before lambda_cls)
  double ce = 0.0;    // mean point bce over matched pairs
  double dice = 0.0;  // mean point dice over matched pairs
};

struct TotalLossResult {
  Tensor loss;  // scalar, on the active tape
  std::vector<LayerLossBreakdown> per_layer;
};

// Set-prediction loss over all prediction sets (3L+1 of them): per set,
// match with one shared uniform PointSet, then point-sampled bce+dice on
// per-pair importance points plus weighted classification. grid_points
// switches both phases to dense cell-center evaluation (mask-loss ablation).
// supervise_layer0 == false skips set 0 (still reported as zeros).
TotalLossResult total_loss(const std::vector<SegmentPrediction>& layer_preds,
                           const GroundTruthScene& gt, const LossWeights& w, int k_points,
                           Rng rng, bool supervise_layer0, bool grid_points);

}  // namespace maskseg
