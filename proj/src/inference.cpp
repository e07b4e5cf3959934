#include "maskseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "maskseg/kernels.hpp"

namespace maskseg {

namespace {

// Per-query class probabilities, softmax over all num_classes+1 logits.
std::vector<double> class_probs(const SegmentPrediction& pred) {
  int n = pred.class_logits.dim(0), nc = pred.class_logits.dim(1);
  std::vector<double> probs(pred.class_logits.size());
  kernels::softmax_rows(pred.class_logits.data(), probs.data(), n, nc, kMaskSentinel);
  return probs;
}

// Mask logits upsampled to image resolution, then sigmoid; [N x out_h*out_w].
std::vector<double> mask_probs_upsampled(const SegmentPrediction& pred, int out_h, int out_w) {
  int n = pred.class_logits.dim(0);
  std::vector<double> up(static_cast<size_t>(n) * out_h * out_w);
  kernels::bilinear_resize(pred.mask_logits.data(), up.data(), n, pred.mask_h, pred.mask_w,
                           out_h, out_w);
  kernels::sigmoid(up.data(), up.data(), up.size());
  return up;
}

}  // namespace

std::vector<int> semantic_inference(const SegmentPrediction& pred, int out_h, int out_w) {
  int n = pred.class_logits.dim(0), nc = pred.class_logits.dim(1);
  int k = nc - 1;  // real classes
  std::vector<double> probs = class_probs(pred);
  std::vector<double> masks = mask_probs_upsampled(pred, out_h, out_w);
  size_t hw = static_cast<size_t>(out_h) * out_w;
  // scores[c][p] = sum_i probs[i][c] * masks[i][p]
  std::vector<double> scores(static_cast<size_t>(k) * hw, 0.0);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c) {
      double pc = probs[static_cast<size_t>(i) * nc + c];
      const double* mi = masks.data() + static_cast<size_t>(i) * hw;
      double* sc = scores.data() + static_cast<size_t>(c) * hw;
      for (size_t p = 0; p < hw; ++p) sc[p] += pc * mi[p];
    }
  std::vector<int> labels(hw, 0);
  for (size_t p = 0; p < hw; ++p) {
    int best = 0;
    double bv = scores[p];
    for (int c = 1; c < k; ++c) {
      double v = scores[static_cast<size_t>(c) * hw + p];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    labels[p] = best;
  }
  return labels;
}

PanopticOutput panoptic_inference(const SegmentPrediction& pred, int out_h, int out_w,
                                  const std::vector<bool>& is_thing_class,
                                  const PanopticConfig& cfg) {
  int n = pred.class_logits.dim(0), nc = pred.class_logits.dim(1);
  int num_classes = nc - 1;
  if (static_cast<int>(is_thing_class.size()) != num_classes)
    throw std::invalid_argument("panoptic_inference: is_thing_class size mismatch");
  std::vector<double> probs = class_probs(pred);

  std::vector<int> keep;  // query indices that pass the confidence gate
  std::vector<double> keep_score;
  std::vector<int> keep_label;
  for (int i = 0; i < n; ++i) {
    const double* row = probs.data() + static_cast<size_t>(i) * nc;
    int label = 0;
    double score = row[0];
    for (int c = 1; c < nc; ++c)
      if (row[c] > score) {
        score = row[c];
        label = c;
      }
    if (label != num_classes && score > cfg.object_score_threshold) {
      keep.push_back(i);
      keep_score.push_back(score);
      keep_label.push_back(label);
    }
  }

  PanopticOutput out;
  out.h = out_h;
  out.w = out_w;
  size_t hw = static_cast<size_t>(out_h) * out_w;
  out.segment_ids.assign(hw, -1);
  if (keep.empty()) return out;

  std::vector<double> masks = mask_probs_upsampled(pred, out_h, out_w);
  // Per-pixel winner among kept queries by score-weighted mask probability.
  std::vector<int> winner(hw, -1);
  std::vector<double> winval(hw, -1.0);
  for (size_t kq = 0; kq < keep.size(); ++kq) {
    const double* mi = masks.data() + static_cast<size_t>(keep[kq]) * hw;
    for (size_t p = 0; p < hw; ++p) {
      double v = keep_score[kq] * mi[p];
      if (v > winval[p]) {
        winval[p] = v;
        winner[p] = static_cast<int>(kq);
      }
    }
  }

  std::map<int, int> stuff_segment_of_class;
  for (size_t kq = 0; kq < keep.size(); ++kq) {
    const double* mi = masks.data() + static_cast<size_t>(keep[kq]) * hw;
    long long original_area = 0, mask_area = 0;
    for (size_t p = 0; p < hw; ++p) {
      bool bin = mi[p] >= cfg.mask_threshold;
      original_area += bin;
      mask_area += bin && winner[p] == static_cast<int>(kq);
    }
    if (original_area == 0 || mask_area == 0) continue;
    if (static_cast<double>(mask_area) / static_cast<double>(original_area) < cfg.overlap_threshold)
      continue;
    int label = keep_label[kq];
    bool thing = is_thing_class[label];
    int seg_id;
    if (!thing && stuff_segment_of_class.count(label)) {
      seg_id = stuff_segment_of_class[label];  // merge stuff of equal class
    } else {
      seg_id = static_cast<int>(out.segments.size());
      out.segments.push_back({seg_id, label, thing});
      if (!thing) stuff_segment_of_class[label] = seg_id;
    }
    for (size_t p = 0; p < hw; ++p)
      if (winner[p] == static_cast<int>(kq) && mi[p] >= cfg.mask_threshold)
        out.segment_ids[p] = seg_id;
  }
  return out;
}

InstanceOutput instance_inference(const SegmentPrediction& pred, int out_h, int out_w,
                                  const std::vector<bool>& is_thing_class, int top_k,
                                  double mask_threshold) {
  int n = pred.class_logits.dim(0), nc = pred.class_logits.dim(1);
  int num_classes = nc - 1;
  if (static_cast<int>(is_thing_class.size()) != num_classes)
    throw std::invalid_argument("instance_inference: is_thing_class size mismatch");
  if (top_k <= 0) return {};
  std::vector<double> probs = class_probs(pred);
  std::vector<double> masks = mask_probs_upsampled(pred, out_h, out_w);
  size_t hw = static_cast<size_t>(out_h) * out_w;

  // Per-query binarized mask and mean foreground probability.
  std::vector<BinaryMask> bin(n);
  std::vector<double> mask_conf(n, 0.0);
  for (int i = 0; i < n; ++i) {
    bin[i] = BinaryMask(out_h, out_w);
    const double* mi = masks.data() + static_cast<size_t>(i) * hw;
    double s = 0.0;
    long long cnt = 0;
    for (size_t p = 0; p < hw; ++p)
      if (mi[p] > mask_threshold) {
        bin[i].v[p] = 1;
        s += mi[p];
        ++cnt;
      }
    mask_conf[i] = cnt > 0 ? s / static_cast<double>(cnt) : 0.0;
  }

  InstanceOutput dets;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < num_classes; ++c) {
      if (!is_thing_class[c]) continue;
      InstanceDetection d;
      d.mask = bin[i];
      d.class_id = c;
      d.confidence = probs[static_cast<size_t>(i) * nc + c] * mask_conf[i];
      d.query = i;
      dets.push_back(std::move(d));
    }
  std::stable_sort(dets.begin(), dets.end(), [](const InstanceDetection& a, const InstanceDetection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.query != b.query) return a.query < b.query;
    return a.class_id < b.class_id;
  });
  if (static_cast<int>(dets.size()) > top_k) dets.resize(top_k);
  return dets;
}

}  // namespace maskseg
