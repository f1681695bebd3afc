#include <cmath>

#include "doctest.h"
#include "dpnet/metrics.hpp"

using namespace dpnet;

namespace {

Tensor random_image(size_t H, size_t W, uint64_t seed, double lo = 0.0,
                    double hi = 1.0) {
  Rng rng(seed);
  return tensor_create({3, H, W}, Init::uniform(lo, hi), &rng);
}

}  // namespace

TEST_CASE("psnr pins: uniform 0.1 offset gives exactly 20 dB") {
  Tensor a = random_image(8, 8, 1, 0.0, 0.8);
  Tensor b = a.clone();
  for (double& v : b.values_mut()) v += 0.1;
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-6));
  CHECK(psnr(a, b, 2.0) ==
        doctest::Approx(20.0 + 20.0 * std::log10(2.0)).epsilon(1e-9));
  CHECK(std::isinf(psnr(a, a)));
  CHECK(psnr(a, a) > 0);
  CHECK_THROWS_AS(psnr(a, Tensor::zeros({3, 8, 9})), ShapeError);
  CHECK_THROWS_AS(psnr(a, b, 0.0), NumericError);
}

TEST_CASE("ssim is 1 on identical images and symmetric in its arguments") {
  Tensor a = random_image(24, 24, 2);
  Tensor b = random_image(24, 24, 3);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ssim(a, a, SsimMode::Block8) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  CHECK(ssim(a, b, SsimMode::Block8) ==
        doctest::Approx(ssim(b, a, SsimMode::Block8)).epsilon(1e-12));
  CHECK(ssim(a, b) < 1.0);
}

TEST_CASE("ssim matches the closed form on constant images") {
  const double ca = 0.3, cb = 0.6, c1 = 1e-4;
  Tensor a = Tensor::full({3, 16, 16}, ca);
  Tensor b = Tensor::full({3, 16, 16}, cb);
  // Zero variance: the structure factor drops out entirely.
  const double expect = (2 * ca * cb + c1) / (ca * ca + cb * cb + c1);
  CHECK(ssim(a, b) == doctest::Approx(expect).epsilon(1e-9));
  CHECK(ssim(a, b, SsimMode::Block8) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("ssim rejects undersized or misaligned inputs") {
  Tensor small = random_image(8, 8, 4);
  CHECK_NOTHROW(ssim(small, small, SsimMode::Block8));
  CHECK_THROWS_AS(ssim(small, small), DataError);  // below the 11x11 window
  Tensor odd = random_image(12, 12, 5);
  CHECK_THROWS_AS(ssim(odd, odd, SsimMode::Block8), DataError);
  CHECK_THROWS_AS(ssim(small, odd), ShapeError);
}

TEST_CASE("uiqm is zero on flat images, finite on noise, strict on size") {
  Tensor flat = Tensor::full({3, 16, 16}, 0.5);
  CHECK(uiqm(flat) == 0.0);
  const double v = uiqm(random_image(16, 16, 6));
  CHECK(std::isfinite(v));
  CHECK_THROWS_AS(uiqm(random_image(4, 4, 7)), DataError);
  CHECK_THROWS_AS(uiqm(Tensor::zeros({1, 16, 16})), ShapeError);
}

TEST_CASE("iou pins overlap ratios and rejects degenerate boxes") {
  CHECK(iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) ==
        doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(iou(Box{0, 0, 1, 1}, Box{2, 2, 3, 3}) == 0.0);
  CHECK(iou(Box{0, 0, 4, 4}, Box{1, 1, 2, 2}) ==
        doctest::Approx(1.0 / 16.0).epsilon(1e-12));
  CHECK(iou(Box{0, 0, 2, 2}, Box{0, 0, 2, 2}) == 1.0);
  CHECK_THROWS_AS(iou(Box{1, 0, 1, 2}, Box{0, 0, 2, 2}), DataError);
  CHECK_THROWS_AS(iou(Box{0, 0, 2, 2}, Box{0, 3, 2, 1}), DataError);
}

TEST_CASE("average precision pins the false-positive-first sequence") {
  std::vector<std::vector<ScoredBox>> preds = {
      {{Box{50, 50, 60, 60}, 0.9},   // misses the ground truth
       {Box{10, 10, 20, 20}, 0.4}}};  // exact hit, lower score
  std::vector<std::vector<Box>> gts = {{Box{10, 10, 20, 20}}};
  CHECK(average_precision(preds, gts, 0.5) ==
        doctest::Approx(0.5).epsilon(1e-12));

  // Swap the scores: the hit now comes first, so the envelope is perfect
  // up to full recall.
  preds[0][0].score = 0.4;
  preds[0][1].score = 0.9;
  CHECK(average_precision(preds, gts, 0.5) ==
        doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("average precision edge cases: no preds, no gt, rescaled scores") {
  std::vector<std::vector<Box>> gts = {{Box{0, 0, 5, 5}}, {}};
  std::vector<std::vector<ScoredBox>> none = {{}, {}};
  CHECK(average_precision(none, gts, 0.5) == 0.0);
  CHECK_THROWS_AS(average_precision(none, {{}, {}}, 0.5), DataError);
  CHECK_THROWS_AS(average_precision(none, {{}}, 0.5), ShapeError);

  std::vector<std::vector<ScoredBox>> preds = {
      {{Box{0, 0, 5, 5}, 0.7}, {Box{9, 9, 12, 12}, 0.3}},
      {{Box{1, 1, 4, 4}, 0.5}}};
  const double base = average_precision(preds, gts, 0.5);
  for (auto& im : preds)
    for (auto& p : im) p.score = 0.1 + 0.4 * p.score;  // order-preserving
  CHECK(average_precision(preds, gts, 0.5) ==
        doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("average precision agrees with a brute-force oracle") {
  for (uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed * 7 + 1);
    const size_t n_img = 3;
    std::vector<std::vector<Box>> gts(n_img);
    std::vector<std::vector<ScoredBox>> preds(n_img);
    size_t total_gt = 0;
    for (size_t im = 0; im < n_img; ++im) {
      const size_t ng = rng.next_u64() % 4;
      for (size_t g = 0; g < ng; ++g) {
        const double x0 = rng.uniform(0.0, 20.0), y0 = rng.uniform(0.0, 20.0);
        gts[im].push_back({x0, y0, x0 + rng.uniform(2.0, 10.0),
                           y0 + rng.uniform(2.0, 10.0)});
        ++total_gt;
      }
      const size_t np = rng.next_u64() % 6;
      for (size_t p = 0; p < np; ++p) {
        Box b;
        if (!gts[im].empty() && rng.uniform() < 0.6) {
          const Box& g = gts[im][rng.next_u64() % gts[im].size()];
          const double j = rng.uniform(-2.0, 2.0), k = rng.uniform(-2.0, 2.0);
          b = {g.x0 + j, g.y0 + k, g.x1 + j * 0.5, g.y1 + k * 0.5};
        } else {
          const double x0 = rng.uniform(0.0, 20.0),
                       y0 = rng.uniform(0.0, 20.0);
          b = {x0, y0, x0 + rng.uniform(2.0, 10.0),
               y0 + rng.uniform(2.0, 10.0)};
        }
        preds[im].push_back({b, rng.uniform()});
      }
    }
    if (total_gt == 0) {
      gts[0].push_back({1, 1, 5, 5});
      ++total_gt;
    }

    const double got = average_precision(preds, gts, 0.5);

    // Oracle: greedy matching in global score order, then integrate as the
    // sum over recall levels of the best precision at or beyond each level.
    struct Row {
      double score;
      size_t img, idx;
    };
    std::vector<Row> order;
    for (size_t im = 0; im < n_img; ++im)
      for (size_t j = 0; j < preds[im].size(); ++j)
        order.push_back({preds[im][j].score, im, j});
    std::sort(order.begin(), order.end(), [](const Row& a, const Row& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.img != b.img) return a.img < b.img;
      return a.idx < b.idx;
    });
    std::vector<std::vector<bool>> used(n_img);
    for (size_t im = 0; im < n_img; ++im)
      used[im].assign(gts[im].size(), false);
    std::vector<double> prec, rec;
    size_t tp = 0;
    for (size_t r = 0; r < order.size(); ++r) {
      const Box& pb = preds[order[r].img][order[r].idx].box;
      double best = 0;
      size_t bg = gts[order[r].img].size();
      for (size_t g = 0; g < gts[order[r].img].size(); ++g) {
        if (used[order[r].img][g]) continue;
        const double v = box_iou(pb, gts[order[r].img][g]);
        if (v > best) {
          best = v;
          bg = g;
        }
      }
      if (bg < gts[order[r].img].size() && best >= 0.5) {
        used[order[r].img][bg] = true;
        ++tp;
      }
      prec.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
      rec.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    }
    double expect = 0;
    for (size_t k = 1; k <= tp; ++k) {
      const double level = static_cast<double>(k) / total_gt;
      double bestp = 0;
      for (size_t i = 0; i < prec.size(); ++i)
        if (rec[i] >= level - 1e-15) bestp = std::max(bestp, prec[i]);
      expect += bestp / static_cast<double>(total_gt);
    }
    CHECK(std::abs(got - expect) <= 1e-9);
  }
}

TEST_CASE("mean average precision skips classes without ground truth") {
  std::vector<std::vector<Detection>> dets(1);
  std::vector<std::vector<Annotation>> gts(1);
  gts[0].push_back({0, Box{10, 10, 20, 20}});
  dets[0].push_back({Box{10, 10, 20, 20}, 0, 0.9, 0});
  // Class 1 has predictions but no ground truth; class 2 has neither.
  dets[0].push_back({Box{30, 30, 40, 40}, 1, 0.8, 1});
  CHECK(mean_average_precision(dets, gts, 3) ==
        doctest::Approx(1.0).epsilon(1e-12));

  // Add a second class with one hit and one miss among two ground truths.
  gts[0].push_back({1, Box{30, 30, 40, 40}});
  gts[0].push_back({1, Box{60, 60, 70, 70}});
  const double expect = (1.0 + 0.5) / 2.0;
  CHECK(mean_average_precision(dets, gts, 3) ==
        doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(mean_average_precision(dets, {}, 3), ShapeError);
}
