#pragma once
#include <vector>

#include "maskseg/model.hpp"
#include "maskseg/scene.hpp"

namespace maskseg {

struct PanopticConfig {
  double object_score_threshold = 0.8;  // keep queries with max class prob above this
  double overlap_threshold = 0.8;       // surviving area / full mask area
  double mask_threshold = 0.5;
};

struct PanopticSegmentInfo {
  int id = 0;
  int class_id = 0;
  bool is_thing = true;
};

struct PanopticOutput {
  int h = 0, w = 0;
  std::vector<int> segment_ids;  // per pixel; -1 = void
  std::vector<PanopticSegmentInfo> segments;
};

struct InstanceDetection {
  BinaryMask mask;
  int class_id = 0;
  double confidence = 0.0;  // class prob x mask prob, in [0,1]
  int query = 0;
};
using InstanceOutput = std::vector<InstanceDetection>;

// Per-pixel argmax_c sum_i softmax(cls_i)[c] * sigmoid(mask_i), real classes
// only; mask logits are upsampled to (out_h, out_w) first. Every pixel gets a
// label.
std::vector<int> semantic_inference(const SegmentPrediction& pred, int out_h, int out_w);

// MaskFormer-style panoptic post-processing: confidence/overlap filtering,
// per-pixel winner assignment, stuff merging by class.
PanopticOutput panoptic_inference(const SegmentPrediction& pred, int out_h, int out_w,
                                  const std::vector<bool>& is_thing_class,
                                  const PanopticConfig& cfg = {});

// Ranked (query, thing class) candidates; confidence = class prob x mean
// foreground sigmoid (0 when no pixel clears the threshold). Ties broken by
// query then class index. Masks binarized at mask_threshold (strict).
InstanceOutput instance_inference(const SegmentPrediction& pred, int out_h, int out_w,
                                  const std::vector<bool>& is_thing_class, int top_k,
                                  double mask_threshold = 0.5);

}  // namespace maskseg
