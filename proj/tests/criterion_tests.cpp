#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "maskseg/criterion.hpp"
#include "oracles.hpp"

using namespace maskseg;

namespace {

// Hand-built prediction: masks at native (h x w), classes over nc+1 logits.
SegmentPrediction make_prediction(int n, int nc, int h, int w) {
  SegmentPrediction p;
  p.class_logits = Tensor::zeros({n, nc + 1});
  p.mask_logits = Tensor::zeros({n, h * w});
  p.mask_h = h;
  p.mask_w = w;
  return p;
}

GtSegment make_segment(int h, int w, int y0, int y1, int x0, int x1, int cls, bool thing = true) {
  GtSegment seg;
  seg.mask = BinaryMask(h, w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) seg.mask.set(y, x, 1);
  seg.class_id = cls;
  seg.is_thing = thing;
  return seg;
}

}  // namespace

TEST_CASE("uniform point sampling: determinism, range, mean") {
  Rng a(5), b(5);
  PointSet p1 = sample_points_uniform(1, a);
  PointSet p2 = sample_points_uniform(1, b);
  CHECK(p1.coords == p2.coords);

  Rng rng(6);
  PointSet big = sample_points_uniform(100000, rng);
  double mx = 0, my = 0;
  for (int i = 0; i < big.count(); ++i) {
    CHECK(big.coords[2 * i] >= 0.0);
    CHECK(big.coords[2 * i] < 1.0);
    CHECK(big.coords[2 * i + 1] >= 0.0);
    CHECK(big.coords[2 * i + 1] < 1.0);
    mx += big.coords[2 * i];
    my += big.coords[2 * i + 1];
  }
  CHECK(mx / big.count() == doctest::Approx(0.5).epsilon(0.02));
  CHECK(my / big.count() == doctest::Approx(0.5).epsilon(0.02));
  CHECK_THROWS_AS(sample_points_uniform(0, rng), std::invalid_argument);
}

TEST_CASE("importance sampling concentrates on the uncertain band") {
  // logits: zero (maximally uncertain) on rows 5..10, +-10 elsewhere
  int h = 16, w = 16;
  std::vector<double> logits(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      logits[y * w + x] = (y >= 5 && y <= 10) ? 0.0 : (y < 5 ? 10.0 : -10.0);
  Rng rng(7);
  int k = 1024;
  PointSet pts = sample_points_importance(logits.data(), h, w, k, rng);
  CHECK(pts.count() == k);
  int in_band = 0;
  for (int i = 0; i < k; ++i) {
    CHECK(pts.coords[2 * i] >= 0.0);
    CHECK(pts.coords[2 * i] <= 1.0);
    double y = pts.coords[2 * i + 1] * h;
    if (y >= 4.5 && y <= 11.5) ++in_band;
  }
  CHECK(in_band >= (3 * k) / 4);

  // all-ties map still yields k valid points
  std::vector<double> flat(static_cast<size_t>(h) * w, 0.25);
  Rng r2(8);
  PointSet tie = sample_points_importance(flat.data(), h, w, 64, r2);
  CHECK(tie.count() == 64);

  Rng r3(9), r4(9);
  PointSet d1 = sample_points_importance(logits.data(), h, w, 32, r3);
  PointSet d2 = sample_points_importance(logits.data(), h, w, 32, r4);
  CHECK(d1.coords == d2.coords);
}

TEST_CASE("point_sample: constants, cell centers, midpoints") {
  Tensor constant = Tensor::full({3, 4}, 2.5);
  PointSet pts;
  pts.coords = {0.1, 0.9, 0.5, 0.5, 0.99, 0.01};
  Tensor s = sample_points(constant, pts.coords);
  for (size_t i = 0; i < s.size(); ++i) CHECK(s.data()[i] == 2.5);

  Tensor grid = Tensor::from({2, 2}, {0.0, 1.0, 2.0, 3.0});
  // exact centers of each cell
  Tensor centers = sample_points(grid, {0.25, 0.25, 0.75, 0.25, 0.25, 0.75, 0.75, 0.75});
  CHECK(centers.data()[0] == 0.0);
  CHECK(centers.data()[1] == 1.0);
  CHECK(centers.data()[2] == 2.0);
  CHECK(centers.data()[3] == 3.0);
  // midpoint between the (0,0) and (0,1) cells
  Tensor mid = sample_points(grid, {0.5, 0.25});
  CHECK(mid.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("dice loss frozen values") {
  int k = 100;
  std::vector<double> gt(k, 0.0);
  for (int i = 0; i < 50; ++i) gt[i] = 1.0;
  std::vector<double> perfect(k);
  for (int i = 0; i < k; ++i) perfect[i] = gt[i] > 0.5 ? 50.0 : -50.0;
  CHECK(dice_points(perfect.data(), gt.data(), k) < 1e-3);

  std::vector<double> allneg(k, -50.0);
  CHECK(dice_points(allneg.data(), gt.data(), k) ==
        doctest::Approx(1.0 - 1.0 / 51.0).epsilon(1e-12));

  std::vector<double> zeros(k, 0.0), ones(k, 1.0);
  CHECK(dice_points(zeros.data(), ones.data(), k) ==
        doctest::Approx(1.0 - 101.0 / 151.0).epsilon(1e-12));

  // tensor op agrees with the plain form
  Tensor pt = Tensor::from({k}, zeros);
  Tensor tt = Tensor::from({k}, ones);
  CHECK(dice_from_logits(pt, tt).value() ==
        doctest::Approx(dice_points(zeros.data(), ones.data(), k)).epsilon(1e-12));
}

TEST_CASE("bce loss frozen values and symmetry") {
  double zero = 0.0, one = 1.0, fifty = 50.0;
  CHECK(bce_points(&zero, &one, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce_points(&fifty, &one, 1) < 1e-8);
  Rng rng(10);
  for (int i = 0; i < 50; ++i) {
    double p = rng.uniform(-8, 8);
    double neg = -p, zero_t = 0.0, one_t = 1.0;
    CHECK(bce_points(&p, &one_t, 1) == bce_points(&neg, &zero_t, 1));
  }
  Tensor pt = Tensor::from({1}, {0.0});
  Tensor tt = Tensor::from({1}, {1.0});
  CHECK(bce_with_logits_mean(pt, tt).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("point losses decrease monotonically toward the target") {
  Rng rng(11);
  int k = 64;
  std::vector<double> gt(k);
  for (auto& g : gt) g = rng.uniform() < 0.5 ? 1.0 : 0.0;
  double prev_bce = 1e9, prev_dice = 1e9;
  for (double t = -4.0; t <= 4.01; t += 0.5) {
    std::vector<double> logits(k);
    for (int i = 0; i < k; ++i) logits[i] = (gt[i] > 0.5 ? t : -t);
    double b = bce_points(logits.data(), gt.data(), k);
    double d = dice_points(logits.data(), gt.data(), k);
    CHECK(b <= prev_bce + 1e-12);
    CHECK(d <= prev_dice + 1e-12);
    prev_bce = b;
    prev_dice = d;
  }
}

TEST_CASE("matching cost: dominance, empty case, numeric case, errors") {
  int h = 8, w = 8, nc = 3;
  SegmentPrediction pred = make_prediction(3, nc, h, w);
  std::vector<GtSegment> gts;
  gts.push_back(make_segment(h, w, 0, 4, 0, 8, 1));
  gts.push_back(make_segment(h, w, 4, 8, 0, 8, 2));
  // query 0 reproduces gt 0 exactly with a confident class
  for (int p = 0; p < h * w; ++p) {
    pred.mask_logits.data()[p] = gts[0].mask.v[p] ? 30.0 : -30.0;
    pred.mask_logits.data()[h * w + p] = -5.0;
    pred.mask_logits.data()[2 * h * w + p] = 5.0;
  }
  pred.class_logits.data()[0 * (nc + 1) + 1] = 12.0;
  Rng rng(12);
  PointSet pts = sample_points_uniform(512, rng);
  LossWeights wts;
  Tensor cost = matching_cost(pred, gts, pts, wts);
  REQUIRE(cost.shape() == Shape{3, 2});
  CHECK(cost.data()[0 * 2 + 0] < cost.data()[1 * 2 + 0]);
  CHECK(cost.data()[0 * 2 + 0] < cost.data()[2 * 2 + 0]);

  // direct evaluation of the formula on a tiny numeric case
  SegmentPrediction small = make_prediction(2, 1, 2, 2);
  small.class_logits = Tensor::from({2, 2}, {1.0, -1.0, 0.0, 0.5});
  small.mask_logits = Tensor::from({2, 4}, {2.0, -2.0, 1.0, 0.5, -1.0, 3.0, 0.0, -0.5});
  std::vector<GtSegment> small_gt;
  small_gt.push_back(make_segment(2, 2, 0, 1, 0, 2, 0));
  PointSet centers = grid_center_points(2, 2);
  Tensor small_cost = matching_cost(small, small_gt, centers, wts);
  for (int i = 0; i < 2; ++i) {
    const double* row = small.mask_logits.data() + i * 4;
    std::vector<double> gt_vals = {1.0, 1.0, 0.0, 0.0};
    double expect = wts.lambda_cls * -(std::exp(small.class_logits.data()[i * 2 + 0]) /
                                       (std::exp(small.class_logits.data()[i * 2 + 0]) +
                                        std::exp(small.class_logits.data()[i * 2 + 1]))) +
                    wts.lambda_ce * bce_points(row, gt_vals.data(), 4) +
                    wts.lambda_dice * dice_points(row, gt_vals.data(), 4);
    CHECK(small_cost.data()[i] == doctest::Approx(expect).epsilon(1e-9));
  }

  Tensor empty_cost = matching_cost(pred, {}, pts, wts);
  CHECK(empty_cost.shape() == Shape{3, 0});
  MatchAssignment empty_match = hungarian(empty_cost);
  CHECK(empty_match.pairs.empty());
  CHECK(empty_match.unmatched_predictions.size() == 3);

  std::vector<GtSegment> too_many(4, gts[0]);
  CHECK_THROWS_AS(matching_cost(pred, too_many, pts, wts), std::invalid_argument);
}

TEST_CASE("hungarian: hand cases and brute-force oracle") {
  Tensor one = Tensor::from({1, 1}, {0.4});
  MatchAssignment m1 = hungarian(one);
  REQUIRE(m1.pairs.size() == 1);
  CHECK(m1.pairs[0] == std::pair<int, int>{0, 0});

  Tensor diag = Tensor::from({3, 3}, {0, 1, 1, 1, 0, 1, 1, 1, 0});
  MatchAssignment md = hungarian(diag);
  for (auto [i, j] : md.pairs) CHECK(i == j);

  Rng rng(13);
  for (int trial = 0; trial < 1000; ++trial) {
    int n = 1 + rng.uniform_int(6);
    int g = 1 + rng.uniform_int(n);
    Tensor cost = oracles::random_tensor({n, g}, rng, 0.0, 1.0);
    MatchAssignment m = hungarian(cost);
    REQUIRE(static_cast<int>(m.pairs.size()) == g);
    // injectivity
    std::vector<char> used_pred(n, 0), used_gt(g, 0);
    for (auto [i, j] : m.pairs) {
      CHECK(!used_pred[i]);
      CHECK(!used_gt[j]);
      used_pred[i] = used_gt[j] = 1;
    }
    // total in ground-truth order, same summation order as the oracle
    std::vector<double> by_gt(g);
    for (auto [i, j] : m.pairs) by_gt[j] = cost.data()[static_cast<size_t>(i) * g + j];
    double total = 0;
    for (int j = 0; j < g; ++j) total += by_gt[j];
    double best = oracles::brute_force_assignment(cost);
    CHECK(total == doctest::Approx(best).epsilon(1e-12));
  }

  Tensor bad = Tensor::from({2, 1}, {0.0, std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(hungarian(bad), std::invalid_argument);
  CHECK_THROWS_AS(hungarian(Tensor::zeros({2, 3})), std::invalid_argument);
}

TEST_CASE("total_loss: no-object-only reduction with zero ground truth") {
  int h = 4, w = 4, nc = 2, n = 3;
  SegmentPrediction pred = make_prediction(n, nc, h, w);
  Rng rng(14);
  pred.class_logits = oracles::random_tensor({n, nc + 1}, rng);
  GroundTruthScene scene;
  scene.height = 8;
  scene.width = 8;
  scene.image = Tensor::zeros({3, 8, 8});
  LossWeights wts;
  TotalLossResult res = total_loss({pred}, scene, wts, 16, Rng(1), true, false);
  // expected: lambda_cls * mean_i w_no_object * (-log softmax[no-object])
  double expect = 0;
  for (int i = 0; i < n; ++i) {
    const double* row = pred.class_logits.data() + i * (nc + 1);
    double m = std::max({row[0], row[1], row[2]});
    double lse = m + std::log(std::exp(row[0] - m) + std::exp(row[1] - m) + std::exp(row[2] - m));
    expect += wts.no_object_weight * (lse - row[nc]);
  }
  expect = wts.lambda_cls * expect / n;
  CHECK(res.loss.value() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("total_loss: near-zero for perfect predictions") {
  // Dense route on a two-segment scene: cell-center evaluation sees exact
  // logits and labels everywhere.
  int h = 16, w = 16, nc = 2, n = 2;
  SegmentPrediction pred = make_prediction(n, nc, h, w);
  GroundTruthScene scene;
  scene.height = h;
  scene.width = w;
  scene.image = Tensor::zeros({3, h, w});
  scene.segments.push_back(make_segment(h, w, 0, 16, 0, 8, 0));
  scene.segments.push_back(make_segment(h, w, 0, 16, 8, 16, 1, false));
  for (int p = 0; p < h * w; ++p) {
    pred.mask_logits.data()[p] = scene.segments[0].mask.v[p] ? 50.0 : -50.0;
    pred.mask_logits.data()[h * w + p] = scene.segments[1].mask.v[p] ? 50.0 : -50.0;
  }
  pred.class_logits.data()[0 * 3 + 0] = 50.0;
  pred.class_logits.data()[1 * 3 + 1] = 50.0;
  TotalLossResult res = total_loss({pred, pred}, scene, LossWeights{}, 128, Rng(3), true,
                                   /*grid_points=*/true);
  CHECK(res.loss.value() < 1e-3);
  CHECK(res.per_layer[0].ce < 1e-4);
  CHECK(res.per_layer[0].dice < 1e-2);

  // Point route with importance sampling: boundary-free scene (one segment
  // covering the whole grid), so every sampled point is unambiguous.
  SegmentPrediction full = make_prediction(1, nc, h, w);
  std::fill(full.mask_logits.vec().begin(), full.mask_logits.vec().end(), 50.0);
  full.class_logits.data()[0] = 50.0;
  GroundTruthScene cover;
  cover.height = h;
  cover.width = w;
  cover.image = Tensor::zeros({3, h, w});
  cover.segments.push_back(make_segment(h, w, 0, h, 0, w, 0));
  TotalLossResult res2 = total_loss({full}, cover, LossWeights{}, 128, Rng(4), true, false);
  CHECK(res2.loss.value() < 1e-3);
}

TEST_CASE("total_loss is non-negative on random inputs") {
  Rng rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    int h = 8, w = 8, nc = 3, n = 5;
    SegmentPrediction pred = make_prediction(n, nc, h, w);
    pred.class_logits = oracles::random_tensor({n, nc + 1}, rng);
    pred.mask_logits = oracles::random_tensor({n, h * w}, rng, -4, 4);
    pred.mask_h = h;
    pred.mask_w = w;
    GroundTruthScene scene = oracles::random_tiny_scene(rng, 16, 16, 3, nc, 2);
    if (static_cast<int>(scene.segments.size()) > n) continue;
    TotalLossResult res = total_loss({pred}, scene, LossWeights{}, 32,
                                     Rng(trial), true, false);
    CHECK(res.loss.value() >= 0.0);
  }
}

TEST_CASE("rng call accounting: one uniform set per matching, importance per pair") {
  int h = 8, w = 8, nc = 2, n = 4;
  Rng rng(16);
  SegmentPrediction pred = make_prediction(n, nc, h, w);
  pred.class_logits = oracles::random_tensor({n, nc + 1}, rng);
  pred.mask_logits = oracles::random_tensor({n, h * w}, rng);
  GroundTruthScene scene;
  scene.height = 16;
  scene.width = 16;
  scene.image = Tensor::zeros({3, 16, 16});
  scene.segments.push_back(make_segment(16, 16, 0, 8, 0, 16, 0));
  scene.segments.push_back(make_segment(16, 16, 8, 16, 0, 16, 1, false));

  PointAccounting acc;
  set_point_accounting(&acc);
  int sets = 3, k = 64, g = 2;
  std::vector<SegmentPrediction> preds(sets, pred);
  total_loss(preds, scene, LossWeights{}, k, Rng(5), true, false);
  set_point_accounting(nullptr);

  CHECK(acc.uniform_sets == sets);
  CHECK(acc.importance_sets == sets * g);
  // reads: matching (n + g) * k per set; final per pair 3k candidates + k pred + k gt
  long long expect = static_cast<long long>(sets) * ((n + g) * k + g * (3 * k + 2 * k));
  CHECK(acc.point_reads == expect);
}

TEST_CASE("point loss at grid centers equals the dense full-mask loss") {
  // 16x16 masks, prediction at the same resolution
  int h = 16, w = 16, nc = 2, n = 3;
  Rng rng(17);
  SegmentPrediction pred = make_prediction(n, nc, h, w);
  pred.class_logits = oracles::random_tensor({n, nc + 1}, rng);
  pred.mask_logits = oracles::random_tensor({n, h * w}, rng, -3, 3);
  GroundTruthScene scene;
  scene.height = h;
  scene.width = w;
  scene.image = Tensor::zeros({3, h, w});
  scene.segments.push_back(make_segment(h, w, 0, 9, 0, 16, 0));
  scene.segments.push_back(make_segment(h, w, 9, 16, 0, 16, 1, false));

  TotalLossResult res = total_loss({pred}, scene, LossWeights{}, h * w, Rng(6), true,
                                   /*grid_points=*/true);

  // Independent dense evaluation over the full grid.
  LossWeights wts;
  int g = static_cast<int>(scene.segments.size());
  Tensor cost = matching_cost(pred, scene.segments, grid_center_points(h, w), wts);
  MatchAssignment match = hungarian(cost);
  double cls = 0;
  std::vector<int> target(n, nc);
  std::vector<double> weight(n, wts.no_object_weight);
  for (auto [i, j] : match.pairs) {
    target[i] = scene.segments[j].class_id;
    weight[i] = 1.0;
  }
  for (int i = 0; i < n; ++i) {
    const double* row = pred.class_logits.data() + i * (nc + 1);
    double m = row[0];
    for (int c = 1; c <= nc; ++c) m = std::max(m, row[c]);
    double s = 0;
    for (int c = 0; c <= nc; ++c) s += std::exp(row[c] - m);
    cls += weight[i] * (m + std::log(s) - row[target[i]]);
  }
  cls /= n;
  double mask = 0;
  for (auto [i, j] : match.pairs) {
    const double* logits = pred.mask_logits.data() + static_cast<size_t>(i) * h * w;
    std::vector<double> gt_vals(h * w);
    for (int p = 0; p < h * w; ++p) gt_vals[p] = scene.segments[j].mask.v[p] ? 1.0 : 0.0;
    mask += wts.lambda_ce * bce_points(logits, gt_vals.data(), h * w) +
            wts.lambda_dice * dice_points(logits, gt_vals.data(), h * w);
  }
  double expect = wts.lambda_cls * cls + mask / g;
  CHECK(res.loss.value() == doctest::Approx(expect).epsilon(1e-6));
}
