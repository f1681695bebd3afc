#include "dpnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dpnet {
namespace {

std::vector<double> to_gray_values(const Tensor& img) {
  const auto& s = img.shape();
  if (s.size() != 3 || s[0] != 3)
    throw ShapeError("metrics: expected a [3,H,W] image, got " + shape_str(s));
  const size_t hw = s[1] * s[2];
  const double* v = img.values().data();
  std::vector<double> g(hw);
  for (size_t i = 0; i < hw; ++i)
    g[i] = 0.299 * v[i] + 0.587 * v[hw + i] + 0.114 * v[2 * hw + i];
  return g;
}

struct WindowStats {
  double mx, my, vx, vy, cxy;
};

double ssim_from_stats(const WindowStats& w) {
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const double num = (2 * w.mx * w.my + c1) * (2 * w.cxy + c2);
  const double den =
      (w.mx * w.mx + w.my * w.my + c1) * (w.vx + w.vy + c2);
  return num / den;
}

double ssim_block8_plain(const std::vector<double>& x,
                         const std::vector<double>& y, size_t H, size_t W) {
  if (H % 8 != 0 || W % 8 != 0)
    throw DataError("ssim: block mode needs H and W divisible by 8");
  double acc = 0;
  size_t blocks = 0;
  for (size_t by = 0; by < H; by += 8)
    for (size_t bx = 0; bx < W; bx += 8) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (size_t j = 0; j < 8; ++j)
        for (size_t i = 0; i < 8; ++i) {
          const double a = x[(by + j) * W + bx + i];
          const double b = y[(by + j) * W + bx + i];
          sx += a;
          sy += b;
          sxx += a * a;
          syy += b * b;
          sxy += a * b;
        }
      const double n = 64.0;
      WindowStats w;
      w.mx = sx / n;
      w.my = sy / n;
      w.vx = sxx / n - w.mx * w.mx;
      w.vy = syy / n - w.my * w.my;
      w.cxy = sxy / n - w.mx * w.my;
      acc += ssim_from_stats(w);
      ++blocks;
    }
  return acc / static_cast<double>(blocks);
}

double ssim_gauss11_plain(const std::vector<double>& x,
                          const std::vector<double>& y, size_t H, size_t W) {
  constexpr size_t kWin = 11;
  if (H < kWin || W < kWin)
    throw DataError("ssim: image smaller than the 11x11 window");
  double k[kWin];
  double ksum = 0;
  for (size_t i = 0; i < kWin; ++i) {
    const double d = static_cast<double>(i) - 5.0;
    k[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    ksum += k[i];
  }
  for (size_t i = 0; i < kWin; ++i) k[i] /= ksum;

  // Separable filtering, valid positions only.
  const size_t Wv = W - kWin + 1, Hv = H - kWin + 1;
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> tmp(H * Wv), out(Hv * Wv);
    for (size_t r = 0; r < H; ++r)
      for (size_t c = 0; c < Wv; ++c) {
        double s = 0;
        for (size_t i = 0; i < kWin; ++i) s += k[i] * src[r * W + c + i];
        tmp[r * Wv + c] = s;
      }
    for (size_t r = 0; r < Hv; ++r)
      for (size_t c = 0; c < Wv; ++c) {
        double s = 0;
        for (size_t i = 0; i < kWin; ++i) s += k[i] * tmp[(r + i) * Wv + c];
        out[r * Wv + c] = s;
      }
    return out;
  };
  std::vector<double> xx(H * W), yy(H * W), xy(H * W);
  for (size_t i = 0; i < H * W; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  auto mx = filter(x), my = filter(y);
  auto mxx = filter(xx), myy = filter(yy), mxy = filter(xy);
  double acc = 0;
  for (size_t i = 0; i < mx.size(); ++i) {
    WindowStats w;
    w.mx = mx[i];
    w.my = my[i];
    w.vx = mxx[i] - mx[i] * mx[i];
    w.vy = myy[i] - my[i] * my[i];
    w.cxy = mxy[i] - mx[i] * my[i];
    acc += ssim_from_stats(w);
  }
  return acc / static_cast<double>(mx.size());
}

// Mean of the middle (1 - 2*alpha) fraction after sorting.
double trimmed_mean(std::vector<double> v, double alpha) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  const size_t t = static_cast<size_t>(std::floor(alpha * n));
  double s = 0;
  size_t c = 0;
  for (size_t i = t; i + t < n; ++i) {
    s += v[i];
    ++c;
  }
  return c ? s / static_cast<double>(c) : 0.0;
}

double variance_about(const std::vector<double>& v, double mu) {
  double s = 0;
  for (double x : v) s += (x - mu) * (x - mu);
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Block log ratio of max to min ("enhancement measure") over 8x8 blocks.
double block_eme(const std::vector<double>& img, size_t H, size_t W) {
  const size_t bh = H / 8, bw = W / 8;
  if (bh == 0 || bw == 0) throw DataError("uiqm: image smaller than 8x8");
  double acc = 0;
  for (size_t by = 0; by < bh; ++by)
    for (size_t bx = 0; bx < bw; ++bx) {
      double mn = std::numeric_limits<double>::infinity(), mx = -mn;
      for (size_t j = 0; j < 8; ++j)
        for (size_t i = 0; i < 8; ++i) {
          const double v = img[(by * 8 + j) * W + bx * 8 + i];
          mn = std::min(mn, v);
          mx = std::max(mx, v);
        }
      if (mn > 0) acc += std::log(mx / mn);
    }
  return 2.0 / static_cast<double>(bh * bw) * acc;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b, double maxval) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape())
    throw ShapeError("psnr: shape mismatch");
  if (maxval <= 0) throw NumericError("psnr: maxval must be positive");
  const double* x = a.values().data();
  const double* y = b.values().data();
  double mse = 0;
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) mse += (x[i] - y[i]) * (x[i] - y[i]);
  mse /= static_cast<double>(n);
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(maxval * maxval / mse);
}

double ssim(const Tensor& a, const Tensor& b, SsimMode mode) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape())
    throw ShapeError("ssim: shape mismatch");
  const size_t H = a.shape()[1], W = a.shape()[2];
  auto ga = to_gray_values(a), gb = to_gray_values(b);
  return mode == SsimMode::Block8 ? ssim_block8_plain(ga, gb, H, W)
                                  : ssim_gauss11_plain(ga, gb, H, W);
}

double uiqm(const Tensor& img) {
  const auto& s = img.shape();
  if (s.size() != 3 || s[0] != 3)
    throw ShapeError("uiqm: expected a [3,H,W] image");
  const size_t H = s[1], W = s[2], hw = H * W;
  const double* v = img.values().data();
  // Work on a 0..255 intensity scale.
  std::vector<double> R(hw), G(hw), B(hw);
  for (size_t i = 0; i < hw; ++i) {
    R[i] = 255.0 * v[i];
    G[i] = 255.0 * v[hw + i];
    B[i] = 255.0 * v[2 * hw + i];
  }

  // Colorfulness: opponent channels with asymmetric-trim statistics.
  std::vector<double> rg(hw), yb(hw);
  for (size_t i = 0; i < hw; ++i) {
    rg[i] = R[i] - G[i];
    yb[i] = (R[i] + G[i]) / 2.0 - B[i];
  }
  const double mu_rg = trimmed_mean(rg, 0.1);
  const double mu_yb = trimmed_mean(yb, 0.1);
  const double var_rg = variance_about(rg, mu_rg);
  const double var_yb = variance_about(yb, mu_yb);
  const double uicm = -0.0268 * std::sqrt(mu_rg * mu_rg + mu_yb * mu_yb) +
                      0.1586 * std::sqrt(var_rg + var_yb);

  // Sharpness: Sobel-magnitude-weighted channels scored by block EME.
  auto sobel_weighted = [&](const std::vector<double>& C) {
    std::vector<double> w(hw, 0.0);
    for (size_t y = 1; y + 1 < H; ++y)
      for (size_t x = 1; x + 1 < W; ++x) {
        auto p = [&](size_t yy, size_t xx) { return C[yy * W + xx]; };
        const double gx = p(y - 1, x + 1) + 2 * p(y, x + 1) + p(y + 1, x + 1) -
                          p(y - 1, x - 1) - 2 * p(y, x - 1) - p(y + 1, x - 1);
        const double gy = p(y + 1, x - 1) + 2 * p(y + 1, x) + p(y + 1, x + 1) -
                          p(y - 1, x - 1) - 2 * p(y - 1, x) - p(y - 1, x + 1);
        w[y * W + x] = std::sqrt(gx * gx + gy * gy) * C[y * W + x];
      }
    return w;
  };
  const double uism = 0.299 * block_eme(sobel_weighted(R), H, W) +
                      0.587 * block_eme(sobel_weighted(G), H, W) +
                      0.114 * block_eme(sobel_weighted(B), H, W);

  // Contrast: Michelson-contrast entropy over 8x8 luma blocks.
  std::vector<double> luma(hw);
  for (size_t i = 0; i < hw; ++i)
    luma[i] = 0.299 * R[i] + 0.587 * G[i] + 0.114 * B[i];
  const size_t bh = H / 8, bw = W / 8;
  if (bh == 0 || bw == 0) throw DataError("uiqm: image smaller than 8x8");
  double conm = 0;
  for (size_t by = 0; by < bh; ++by)
    for (size_t bx = 0; bx < bw; ++bx) {
      double mn = std::numeric_limits<double>::infinity(), mx = -mn;
      for (size_t j = 0; j < 8; ++j)
        for (size_t i = 0; i < 8; ++i) {
          const double x = luma[(by * 8 + j) * W + bx * 8 + i];
          mn = std::min(mn, x);
          mx = std::max(mx, x);
        }
      if (mx + mn <= 0) continue;
      const double m = (mx - mn) / (mx + mn);
      if (m > 0) conm += m * std::log(m);
    }
  const double uiconm = -conm / static_cast<double>(bh * bw);

  return 0.0282 * uicm + 0.2953 * uism + 3.5753 * uiconm;
}

double iou(const Box& a, const Box& b) {
  if (a.x1 <= a.x0 || a.y1 <= a.y0 || b.x1 <= b.x0 || b.y1 <= b.y0)
    throw DataError("iou: degenerate box (needs x_max > x_min, y_max > y_min)");
  return box_iou(a, b);
}

double average_precision(
    const std::vector<std::vector<ScoredBox>>& preds_per_image,
    const std::vector<std::vector<Box>>& gts_per_image, double iou_thresh) {
  if (preds_per_image.size() != gts_per_image.size())
    throw ShapeError("average_precision: image count mismatch");
  size_t total_gt = 0;
  for (const auto& g : gts_per_image) total_gt += g.size();
  if (total_gt == 0)
    throw DataError("average_precision: no ground-truth boxes for the class");

  struct Pred {
    double score;
    size_t img, idx;
  };
  std::vector<Pred> order;
  for (size_t im = 0; im < preds_per_image.size(); ++im)
    for (size_t j = 0; j < preds_per_image[im].size(); ++j)
      order.push_back({preds_per_image[im][j].score, im, j});
  std::sort(order.begin(), order.end(), [](const Pred& a, const Pred& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.img != b.img) return a.img < b.img;
    return a.idx < b.idx;
  });

  std::vector<std::vector<bool>> used(gts_per_image.size());
  for (size_t im = 0; im < gts_per_image.size(); ++im)
    used[im].assign(gts_per_image[im].size(), false);

  std::vector<double> prec, rec;
  size_t tp = 0, fp = 0;
  for (const auto& p : order) {
    const Box& pb = preds_per_image[p.img][p.idx].box;
    const auto& gts = gts_per_image[p.img];
    double best = 0;
    size_t best_g = gts.size();
    for (size_t g = 0; g < gts.size(); ++g) {
      if (used[p.img][g]) continue;
      const double v = box_iou(pb, gts[g]);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gts.size() && best >= iou_thresh) {
      used[p.img][best_g] = true;
      ++tp;
    } else {
      ++fp;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }
  if (prec.empty()) return 0.0;
  // Precision envelope, integrated over all recall change points.
  for (size_t i = prec.size() - 1; i-- > 0;)
    prec[i] = std::max(prec[i], prec[i + 1]);
  double ap = 0, prev_r = 0;
  for (size_t i = 0; i < prec.size(); ++i) {
    ap += (rec[i] - prev_r) * prec[i];
    prev_r = rec[i];
  }
  return ap;
}

double mean_average_precision(
    const std::vector<std::vector<Detection>>& dets_per_image,
    const std::vector<std::vector<Annotation>>& gts_per_image,
    size_t num_classes, double iou_thresh) {
  if (dets_per_image.size() != gts_per_image.size())
    throw ShapeError("mean_average_precision: image count mismatch");
  double sum = 0;
  size_t classes_with_gt = 0;
  for (size_t k = 0; k < num_classes; ++k) {
    std::vector<std::vector<ScoredBox>> preds(dets_per_image.size());
    std::vector<std::vector<Box>> gts(gts_per_image.size());
    size_t total_gt = 0;
    for (size_t im = 0; im < dets_per_image.size(); ++im) {
      for (const auto& d : dets_per_image[im])
        if (d.class_id == static_cast<int>(k))
          preds[im].push_back({d.box, d.score});
      for (const auto& a : gts_per_image[im])
        if (a.class_id == static_cast<int>(k)) {
          gts[im].push_back(a.box);
          ++total_gt;
        }
    }
    if (total_gt == 0) continue;  // class absent from ground truth
    ++classes_with_gt;
    sum += average_precision(preds, gts, iou_thresh);
  }
  return classes_with_gt ? sum / static_cast<double>(classes_with_gt) : 0.0;
}

}  // namespace dpnet
