#include "maskseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "maskseg/kernels.hpp"

namespace maskseg {

namespace {

struct ClassStat {
  double iou_sum = 0.0;
  int tp = 0, fp = 0, fn = 0;
  bool occurs() const { return tp + fp + fn > 0; }
  double pq() const { return occurs() ? iou_sum / (tp + 0.5 * fp + 0.5 * fn) : 0.0; }
  double sq() const { return tp > 0 ? iou_sum / tp : 0.0; }
  double rq() const { return occurs() ? tp / (tp + 0.5 * fp + 0.5 * fn) : 0.0; }
};

// Accumulate one scene into per-class panoptic stats.
void pq_accumulate(const PanopticOutput& pred, const GroundTruthScene& gt,
                   const std::vector<bool>& is_thing_class, std::map<int, ClassStat>& stats,
                   std::map<int, bool>& class_is_thing) {
  size_t hw = static_cast<size_t>(gt.height) * gt.width;
  if (pred.segment_ids.size() != hw)
    throw std::invalid_argument("pq: prediction/ground truth size mismatch");
  int g = static_cast<int>(gt.segments.size());
  std::vector<int> gt_ids(hw, -1);
  for (int j = 0; j < g; ++j)
    for (size_t p = 0; p < hw; ++p)
      if (gt.segments[j].mask.v[p]) {
        if (gt_ids[p] != -1) throw std::invalid_argument("pq: overlapping ground-truth masks");
        gt_ids[p] = j;
      }

  int np = static_cast<int>(pred.segments.size());
  std::vector<long long> pred_area(np, 0), gt_area(g, 0), pred_void(np, 0);
  // intersections keyed by pred_id * (g+1) + (gt_id+1)
  std::map<long long, long long> inter;
  for (size_t p = 0; p < hw; ++p) {
    int pi = pred.segment_ids[p];
    int gi = gt_ids[p];
    if (gi >= 0) ++gt_area[gi];
    if (pi >= 0) {
      ++pred_area[pi];
      if (gi < 0) ++pred_void[pi];
      else ++inter[static_cast<long long>(pi) * (g + 1) + gi + 1];
    }
  }
  for (int j = 0; j < g; ++j) class_is_thing[gt.segments[j].class_id] = gt.segments[j].is_thing;
  for (int i = 0; i < np; ++i) {
    int c = pred.segments[i].class_id;
    if (!class_is_thing.count(c))
      class_is_thing[c] = c < static_cast<int>(is_thing_class.size()) ? is_thing_class[c] : true;
  }

  std::vector<char> pred_matched(np, 0), gt_matched(g, 0);
  for (auto [key, in] : inter) {
    int pi = static_cast<int>(key / (g + 1));
    int gi = static_cast<int>(key % (g + 1)) - 1;
    if (pred.segments[pi].class_id != gt.segments[gi].class_id) continue;
    double uni = static_cast<double>(pred_area[pi] + gt_area[gi] - in - pred_void[pi]);
    double iou = uni > 0.0 ? static_cast<double>(in) / uni : 0.0;
    if (iou > 0.5) {
      // IoU > 0.5 matches are unique because masks on both sides are disjoint.
      ClassStat& cs = stats[pred.segments[pi].class_id];
      cs.iou_sum += iou;
      ++cs.tp;
      pred_matched[pi] = 1;
      gt_matched[gi] = 1;
    }
  }
  for (int j = 0; j < g; ++j)
    if (!gt_matched[j]) ++stats[gt.segments[j].class_id].fn;
  for (int i = 0; i < np; ++i) {
    if (pred_matched[i]) continue;
    // Predictions mostly over void do not count as false positives.
    if (pred_void[i] * 2 > pred_area[i]) continue;
    ++stats[pred.segments[i].class_id].fp;
  }
}

PqResult pq_from_stats(const std::map<int, ClassStat>& stats,
                       const std::map<int, bool>& class_is_thing) {
  PqResult r;
  double pq_th = 0.0, pq_st = 0.0;
  for (const auto& [c, cs] : stats) {
    if (!cs.occurs()) continue;
    ++r.classes;
    r.pq += cs.pq();
    r.sq += cs.sq();
    r.rq += cs.rq();
    if (class_is_thing.at(c)) {
      ++r.thing_classes;
      pq_th += cs.pq();
    } else {
      ++r.stuff_classes;
      pq_st += cs.pq();
    }
  }
  if (r.classes > 0) {
    r.pq /= r.classes;
    r.sq /= r.classes;
    r.rq /= r.classes;
  }
  r.pq_things = r.thing_classes > 0 ? pq_th / r.thing_classes : 0.0;
  r.pq_stuff = r.stuff_classes > 0 ? pq_st / r.stuff_classes : 0.0;
  return r;
}

}  // namespace

PqResult pq_metric(const PanopticOutput& pred, const GroundTruthScene& gt,
                   const std::vector<bool>& is_thing_class) {
  std::map<int, ClassStat> stats;
  std::map<int, bool> kinds;
  pq_accumulate(pred, gt, is_thing_class, stats, kinds);
  return pq_from_stats(stats, kinds);
}

PqResult pq_metric_dataset(const std::vector<PanopticOutput>& preds,
                           const std::vector<GroundTruthScene>& gts,
                           const std::vector<bool>& is_thing_class) {
  if (preds.size() != gts.size()) throw std::invalid_argument("pq: dataset size mismatch");
  std::map<int, ClassStat> stats;
  std::map<int, bool> kinds;
  for (size_t i = 0; i < preds.size(); ++i)
    pq_accumulate(preds[i], gts[i], is_thing_class, stats, kinds);
  return pq_from_stats(stats, kinds);
}

double miou_metric(const std::vector<int>& pred_labels, const std::vector<int>& gt_labels,
                   int num_classes) {
  return miou_metric_dataset({pred_labels}, {gt_labels}, num_classes);
}

double miou_metric_dataset(const std::vector<std::vector<int>>& preds,
                           const std::vector<std::vector<int>>& gts, int num_classes) {
  if (preds.size() != gts.size()) throw std::invalid_argument("miou: dataset size mismatch");
  std::vector<long long> inter(num_classes, 0), uni(num_classes, 0);
  for (size_t s = 0; s < preds.size(); ++s) {
    if (preds[s].size() != gts[s].size()) throw std::invalid_argument("miou: label map size mismatch");
    for (size_t p = 0; p < preds[s].size(); ++p) {
      int a = preds[s][p], b = gts[s][p];
      if (a == b && a >= 0) {
        ++inter[a];
        ++uni[a];
      } else {
        if (a >= 0) ++uni[a];
        if (b >= 0) ++uni[b];
      }
    }
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c)
    if (uni[c] > 0) {
      sum += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
      ++present;
    }
  return present > 0 ? sum / present : 0.0;
}

std::vector<int> semantic_labels_from_scene(const GroundTruthScene& scene) {
  size_t hw = static_cast<size_t>(scene.height) * scene.width;
  std::vector<int> labels(hw, -1);
  for (const auto& seg : scene.segments)
    for (size_t p = 0; p < hw; ++p)
      if (seg.mask.v[p]) labels[p] = seg.class_id;
  return labels;
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("mask_iou: size mismatch");
  long long in = 0, un = 0;
  for (size_t p = 0; p < a.v.size(); ++p) {
    bool x = a.v[p], y = b.v[p];
    in += x && y;
    un += x || y;
  }
  return un > 0 ? static_cast<double>(in) / static_cast<double>(un) : 0.0;
}

std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

double ap_metric(const std::vector<InstanceOutput>& dets,
                 const std::vector<std::vector<GtSegment>>& gts,
                 const std::vector<double>& iou_thresholds, int num_classes) {
  if (dets.size() != gts.size()) throw std::invalid_argument("ap: dataset size mismatch");
  int images = static_cast<int>(dets.size());
  double ap_sum = 0.0;
  int counted_classes = 0;
  for (int c = 0; c < num_classes; ++c) {
    long long npig = 0;
    for (const auto& g : gts)
      for (const auto& seg : g) npig += seg.class_id == c;
    if (npig == 0) continue;
    ++counted_classes;

    // Pool detections of this class, globally ordered by confidence.
    struct Det {
      double conf;
      int img, idx;
    };
    std::vector<Det> pool;
    for (int im = 0; im < images; ++im)
      for (size_t d = 0; d < dets[im].size(); ++d)
        if (dets[im][d].class_id == c) pool.push_back({dets[im][d].confidence, im, static_cast<int>(d)});
    std::stable_sort(pool.begin(), pool.end(), [](const Det& a, const Det& b) {
      if (a.conf != b.conf) return a.conf > b.conf;
      if (a.img != b.img) return a.img < b.img;
      return a.idx < b.idx;
    });

    double thr_sum = 0.0;
    for (double t : iou_thresholds) {
      // Greedy per-image matching in confidence order.
      std::vector<std::vector<char>> gt_used(images);
      for (int im = 0; im < images; ++im) gt_used[im].assign(gts[im].size(), 0);
      std::vector<char> is_tp(pool.size(), 0);
      for (size_t d = 0; d < pool.size(); ++d) {
        const InstanceDetection& det = dets[pool[d].img][pool[d].idx];
        const auto& img_gts = gts[pool[d].img];
        int best = -1;
        double best_iou = t;  // must reach the threshold
        for (size_t j = 0; j < img_gts.size(); ++j) {
          if (img_gts[j].class_id != c || gt_used[pool[d].img][j]) continue;
          double iou = mask_iou(det.mask, img_gts[j].mask);
          if (iou >= best_iou) {
            best_iou = iou;
            best = static_cast<int>(j);
          }
        }
        if (best >= 0) {
          gt_used[pool[d].img][best] = 1;
          is_tp[d] = 1;
        }
      }
      // Operating points; anchored at (recall 0, precision 1) when any
      // detection exists.
      std::vector<double> rec, prec;
      if (!pool.empty()) {
        rec.push_back(0.0);
        prec.push_back(1.0);
      }
      long long tp = 0, fp = 0;
      for (size_t d = 0; d < pool.size(); ++d) {
        if (is_tp[d]) ++tp;
        else ++fp;
        rec.push_back(static_cast<double>(tp) / static_cast<double>(npig));
        prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      }
      double acc = 0.0;
      for (int ri = 0; ri <= 100; ++ri) {
        double r = ri / 100.0;
        double best_p = 0.0;
        for (size_t k = 0; k < rec.size(); ++k)
          if (rec[k] >= r - 1e-12) best_p = std::max(best_p, prec[k]);
        acc += best_p;
      }
      thr_sum += acc / 101.0;
    }
    ap_sum += thr_sum / static_cast<double>(iou_thresholds.size());
  }
  return counted_classes > 0 ? ap_sum / counted_classes : 0.0;
}

double ar_at_k(const std::vector<std::vector<Proposal>>& proposals,
               const std::vector<std::vector<GtSegment>>& gts, int k) {
  if (proposals.size() != gts.size()) throw std::invalid_argument("ar: dataset size mismatch");
  double sum = 0.0;
  int images = 0;
  for (size_t im = 0; im < proposals.size(); ++im) {
    int g = static_cast<int>(gts[im].size());
    if (g == 0) continue;
    ++images;
    if (k <= 0) continue;
    std::vector<int> order(proposals[im].size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return proposals[im][a].score > proposals[im][b].score;
    });
    if (static_cast<int>(order.size()) > k) order.resize(k);
    std::vector<char> used(g, 0);
    int matched = 0;
    for (int pi : order) {
      int best = -1;
      double best_iou = 0.5;  // strict: must exceed 0.5
      for (int j = 0; j < g; ++j) {
        if (used[j]) continue;
        double iou = mask_iou(proposals[im][pi].mask, gts[im][j].mask);
        if (iou > best_iou) {
          best_iou = iou;
          best = j;
        }
      }
      if (best >= 0) {
        used[best] = 1;
        ++matched;
      }
    }
    sum += static_cast<double>(matched) / static_cast<double>(g);
  }
  return images > 0 ? sum / images : 0.0;
}

FgBgStats attention_fg_stats(const Model& model, const std::vector<GroundTruthScene>& scenes,
                             const LossWeights& w, int k_points, uint64_t seed) {
  FgBgStats stats;
  std::array<double, 3> fg_sum{}, bg_sum{};
  std::array<long long, 3> count{};
  Rng root(seed);
  for (size_t si = 0; si < scenes.size(); ++si) {
    const GroundTruthScene& scene = scenes[si];
    if (scene.segments.empty()) continue;
    std::vector<AttentionRecord> records;
    ForwardOptions opts;
    opts.attention_out = &records;
    ForwardResult fwd = model.forward(scene.image, opts);
    const SegmentPrediction& last = fwd.predictions.back();

    Rng scene_rng = root.split(si);
    Rng match_rng = scene_rng.split(0);
    PointSet pts = sample_points_uniform(k_points, match_rng);
    MatchAssignment match = hungarian(matching_cost(last, scene.segments, pts, w));

    for (const auto& rec : records) {
      size_t cells = static_cast<size_t>(rec.h) * rec.w;
      for (auto [qi, gj] : match.pairs) {
        // Foreground = matched GT mask resized to this feature resolution.
        std::vector<double> gt_map(scene.segments[gj].mask.v.size());
        for (size_t p = 0; p < gt_map.size(); ++p)
          gt_map[p] = scene.segments[gj].mask.v[p] ? 1.0 : 0.0;
        std::vector<double> resized(cells);
        kernels::bilinear_resize(gt_map.data(), resized.data(), 1, scene.height, scene.width,
                                 rec.h, rec.w);
        double fg = 0.0, bg = 0.0;
        const double* row = rec.weights.data() + static_cast<size_t>(qi) * cells;
        for (size_t p = 0; p < cells; ++p) {
          if (resized[p] >= 0.5) fg += row[p];
          else bg += row[p];
        }
        fg_sum[rec.scale_index] += fg;
        bg_sum[rec.scale_index] += bg;
        ++count[rec.scale_index];
      }
    }
  }
  for (int s = 0; s < 3; ++s) {
    stats.samples[s] = count[s];
    if (count[s] > 0) {
      stats.fg[s] = fg_sum[s] / count[s];
      stats.bg[s] = bg_sum[s] / count[s];
    }
  }
  stats.fg_avg = (stats.fg[0] + stats.fg[1] + stats.fg[2]) / 3.0;
  stats.bg_avg = (stats.bg[0] + stats.bg[1] + stats.bg[2]) / 3.0;
  return stats;
}

}  // namespace maskseg
