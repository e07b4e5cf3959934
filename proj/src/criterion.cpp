#include "maskseg/criterion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "maskseg/kernels.hpp"

namespace maskseg {

namespace {

PointAccounting* g_accounting = nullptr;

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<double> mask_to_double(const BinaryMask& m) {
  std::vector<double> out(m.v.size());
  for (size_t i = 0; i < m.v.size(); ++i) out[i] = m.v[i] ? 1.0 : 0.0;
  return out;
}

}  // namespace

void set_point_accounting(PointAccounting* acc) { g_accounting = acc; }
PointAccounting* point_accounting() { return g_accounting; }

PointSet sample_points_uniform(int k, Rng& rng) {
  if (k < 1) throw std::invalid_argument("sample_points_uniform: k must be >= 1");
  PointSet p;
  p.coords.resize(2 * static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    p.coords[2 * i] = rng.uniform();
    p.coords[2 * i + 1] = rng.uniform();
  }
  if (g_accounting) ++g_accounting->uniform_sets;
  return p;
}

PointSet sample_points_importance(const double* logits, int h, int w, int k, Rng& rng) {
  if (k < 1) throw std::invalid_argument("sample_points_importance: k must be >= 1");
  int n_cand = 3 * k;
  std::vector<double> cand(2 * static_cast<size_t>(n_cand));
  std::vector<double> score(n_cand);
  for (int i = 0; i < n_cand; ++i) {
    double x = rng.uniform(), y = rng.uniform();
    cand[2 * i] = x;
    cand[2 * i + 1] = y;
    score[i] = -std::abs(kernels::sample_bilinear(logits, h, w, x * w - 0.5, y * h - 0.5));
  }
  if (g_accounting) g_accounting->point_reads += n_cand;
  int n_importance = (3 * k) / 4;
  std::vector<int> order(n_cand);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return score[a] > score[b]; });
  PointSet p;
  p.coords.reserve(2 * static_cast<size_t>(k));
  for (int i = 0; i < n_importance; ++i) {
    p.coords.push_back(cand[2 * order[i]]);
    p.coords.push_back(cand[2 * order[i] + 1]);
  }
  for (int i = n_importance; i < k; ++i) {
    p.coords.push_back(rng.uniform());
    p.coords.push_back(rng.uniform());
  }
  if (g_accounting) ++g_accounting->importance_sets;
  return p;
}

PointSet grid_center_points(int h, int w) {
  PointSet p;
  p.coords.reserve(2 * static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      p.coords.push_back((x + 0.5) / w);
      p.coords.push_back((y + 0.5) / h);
    }
  return p;
}

std::vector<double> sample_map_points(const double* map, int h, int w, const PointSet& pts) {
  int k = pts.count();
  std::vector<double> out(k);
  for (int i = 0; i < k; ++i)
    out[i] = kernels::sample_bilinear(map, h, w, pts.coords[2 * i] * w - 0.5,
                                      pts.coords[2 * i + 1] * h - 0.5);
  if (g_accounting) g_accounting->point_reads += k;
  return out;
}

Tensor sample_points_traced(const Tensor& map, const PointSet& pts) {
  if (g_accounting) g_accounting->point_reads += pts.count();
  return sample_points(map, pts.coords);
}

double bce_points(const double* pred_logits, const double* gt, int k) {
  double s = 0.0;
  for (int i = 0; i < k; ++i)
    s += std::max(pred_logits[i], 0.0) - pred_logits[i] * gt[i] + softplus(-std::abs(pred_logits[i]));
  return s / k;
}

double dice_points(const double* pred_logits, const double* gt, int k) {
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (int i = 0; i < k; ++i) {
    double s = sigmoid_scalar(pred_logits[i]);
    inter += s * gt[i];
    sp += s;
    st += gt[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0);
}

Tensor matching_cost(const SegmentPrediction& pred, const std::vector<GtSegment>& gts,
                     const PointSet& pts, const LossWeights& w) {
  int n = pred.class_logits.dim(0);
  int g = static_cast<int>(gts.size());
  if (g > n) throw std::invalid_argument("matching_cost: more ground-truth segments than queries");
  int k = pts.count();
  Tensor cost = Tensor::zeros({n, g});
  if (g == 0) return cost;

  // Class probabilities (plain softmax over the K+1 logits).
  int nc = pred.class_logits.dim(1);
  std::vector<double> probs(pred.class_logits.size());
  kernels::softmax_rows(pred.class_logits.data(), probs.data(), n, nc, kMaskSentinel);

  std::vector<std::vector<double>> pred_pts(n), gt_pts(g);
  for (int i = 0; i < n; ++i)
    pred_pts[i] = sample_map_points(pred.mask_logits.data() + static_cast<size_t>(i) * pred.mask_h * pred.mask_w,
                                    pred.mask_h, pred.mask_w, pts);
  std::vector<std::vector<double>> gt_maps(g);
  for (int j = 0; j < g; ++j) {
    gt_maps[j] = mask_to_double(gts[j].mask);
    gt_pts[j] = sample_map_points(gt_maps[j].data(), gts[j].mask.h, gts[j].mask.w, pts);
  }

  // The target-independent parts of bce/dice are hoisted out of the pair
  // loop: bce(i,j) = A_i - dot(p_i, g_j)/K and dice needs only sig_i sums.
  std::vector<std::vector<double>> sig(n);
  std::vector<double> bce_base(n), sig_sum(n), gt_sum(g);
  for (int i = 0; i < n; ++i) {
    sig[i].resize(k);
    double base = 0.0, sp = 0.0;
    for (int q = 0; q < k; ++q) {
      double p = pred_pts[i][q];
      base += std::max(p, 0.0) + softplus(-std::abs(p));
      double s = sigmoid_scalar(p);
      sig[i][q] = s;
      sp += s;
    }
    bce_base[i] = base / k;
    sig_sum[i] = sp;
  }
  for (int j = 0; j < g; ++j) {
    double s = 0.0;
    for (int q = 0; q < k; ++q) s += gt_pts[j][q];
    gt_sum[j] = s;
  }

  double* pc = cost.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < g; ++j) {
      double c_cls = -probs[static_cast<size_t>(i) * nc + gts[j].class_id];
      double dot_pg = 0.0, dot_sg = 0.0;
      for (int q = 0; q < k; ++q) {
        dot_pg += pred_pts[i][q] * gt_pts[j][q];
        dot_sg += sig[i][q] * gt_pts[j][q];
      }
      double c_ce = bce_base[i] - dot_pg / k;
      double c_dice = 1.0 - (2.0 * dot_sg + 1.0) / (sig_sum[i] + gt_sum[j] + 1.0);
      pc[static_cast<size_t>(i) * g + j] =
          w.lambda_cls * c_cls + w.lambda_ce * c_ce + w.lambda_dice * c_dice;
    }
  return cost;
}

MatchAssignment hungarian(const Tensor& cost) {
  if (cost.rank() != 2) throw std::invalid_argument("hungarian: cost must be 2-D [N x G]");
  int n = cost.dim(0), g = cost.dim(1);
  if (g > n) throw std::invalid_argument("hungarian: needs G <= N");
  MatchAssignment out;
  if (g == 0) {
    out.unmatched_predictions.resize(n);
    std::iota(out.unmatched_predictions.begin(), out.unmatched_predictions.end(), 0);
    return out;
  }
  const double* pc = cost.data();
  for (size_t i = 0; i < cost.size(); ++i)
    if (!std::isfinite(pc[i])) throw std::invalid_argument("hungarian: non-finite cost entry");

  // Kuhn-Munkres with potentials; rows = ground truths (1..g),
  // columns = predictions (1..n), g <= n.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(g + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  auto c = [&](int row, int col) { return pc[static_cast<size_t>(col - 1) * g + (row - 1)]; };
  for (int i = 1; i <= g; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j)
        if (!used[j]) {
          double cur = c(i0, j) - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> gt_of_pred(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j]) gt_of_pred[j - 1] = p[j] - 1;
  for (int j = 0; j < n; ++j) {
    if (gt_of_pred[j] >= 0) out.pairs.emplace_back(j, gt_of_pred[j]);
    else out.unmatched_predictions.push_back(j);
  }
  return out;
}

namespace {

Tensor set_loss(const SegmentPrediction& pred, const GroundTruthScene& gt,
                const std::vector<std::vector<double>>& gt_maps, const LossWeights& w,
                int k_points, Rng& rng, bool grid_points, LayerLossBreakdown* bd) {
  int n = pred.class_logits.dim(0);
  int g = static_cast<int>(gt.segments.size());
  PointSet match_pts =
      grid_points ? grid_center_points(pred.mask_h, pred.mask_w)
                  : [&] {
                      Rng r = rng.split(0);
                      return sample_points_uniform(k_points, r);
                    }();
  Tensor cost = matching_cost(pred, gt.segments, match_pts, w);
  MatchAssignment match = hungarian(cost);

  // Classification: matched queries carry their ground-truth label, everything
  // else is "no object" at reduced weight; per-query mean over N.
  std::vector<int> targets(n, pred.class_logits.dim(1) - 1);
  std::vector<double> weights(n, w.no_object_weight);
  for (auto [i, j] : match.pairs) {
    targets[i] = gt.segments[j].class_id;
    weights[i] = 1.0;
  }
  Tensor cls = cross_entropy_rows(pred.class_logits, targets, weights, n);
  if (bd) bd->cls = cls.value();
  Tensor total = scale(cls, w.lambda_cls);

  if (!match.pairs.empty()) {
    Tensor mask_sum;
    double ce_sum = 0.0, dice_sum = 0.0;
    int pair_index = 0;
    for (auto [i, j] : match.pairs) {
      const double* row = pred.mask_logits.data() + static_cast<size_t>(i) * pred.mask_h * pred.mask_w;
      PointSet pts = grid_points ? match_pts : [&] {
        Rng r = rng.split(1 + pair_index);
        return sample_points_importance(row, pred.mask_h, pred.mask_w, k_points, r);
      }();
      ++pair_index;
      Tensor pred_map = reshape(slice_rows(pred.mask_logits, i, 1), {pred.mask_h, pred.mask_w});
      Tensor pred_pts = sample_points_traced(pred_map, pts);
      const GtSegment& seg = gt.segments[j];
      std::vector<double> gt_vals = sample_map_points(gt_maps[j].data(), seg.mask.h, seg.mask.w, pts);
      Tensor gt_t = Tensor::from({pts.count()}, std::move(gt_vals));
      Tensor ce = bce_with_logits_mean(pred_pts, gt_t);
      Tensor dc = dice_from_logits(pred_pts, gt_t);
      ce_sum += ce.value();
      dice_sum += dc.value();
      Tensor pair_loss = add(scale(ce, w.lambda_ce), scale(dc, w.lambda_dice));
      mask_sum = mask_sum.defined() ? add(mask_sum, pair_loss) : pair_loss;
    }
    if (bd) {
      bd->ce = ce_sum / static_cast<double>(match.pairs.size());
      bd->dice = dice_sum / static_cast<double>(match.pairs.size());
    }
    total = add(total, scale(mask_sum, 1.0 / static_cast<double>(g)));
  }
  return total;
}

}  // namespace

TotalLossResult total_loss(const std::vector<SegmentPrediction>& layer_preds,
                           const GroundTruthScene& gt, const LossWeights& w, int k_points,
                           Rng rng, bool supervise_layer0, bool grid_points) {
  if (layer_preds.empty()) throw std::invalid_argument("total_loss: no prediction sets");
  if (static_cast<int>(gt.segments.size()) > layer_preds[0].class_logits.dim(0))
    throw std::invalid_argument("total_loss: more ground-truth segments than queries");
  std::vector<std::vector<double>> gt_maps;
  gt_maps.reserve(gt.segments.size());
  for (const auto& s : gt.segments) gt_maps.push_back(mask_to_double(s.mask));

  TotalLossResult res;
  res.per_layer.resize(layer_preds.size());
  Tensor sum;
  for (size_t s = 0; s < layer_preds.size(); ++s) {
    if (s == 0 && !supervise_layer0) continue;
    Rng layer_rng = rng.split(s);
    Tensor ls = set_loss(layer_preds[s], gt, gt_maps, w, k_points, layer_rng, grid_points,
                         &res.per_layer[s]);
    sum = sum.defined() ? add(sum, ls) : ls;
  }
  res.loss = sum;
  return res;
}

}  // namespace maskseg
