#include "dpnet/losses.hpp"

#include <cmath>

#include "dpnet/autodiff.hpp"

namespace dpnet {
namespace {

Tensor const_tensor(Shape s, std::vector<double> v) {
  return make_tensor(std::move(s), std::move(v));
}

// Grayscale conversion [N,3,H,W] -> [N,1,H,W] using BT.601 luma weights.
Tensor to_gray(const Tensor& x) {
  Tensor p = permute(x, {1, 0, 2, 3});  // [3,N,H,W]
  Tensor r = slice0(p, 0, 1);
  Tensor g = slice0(p, 1, 1);
  Tensor b = slice0(p, 2, 1);
  Tensor gray = add(add(mul_scalar(r, 0.299), mul_scalar(g, 0.587)),
                    mul_scalar(b, 0.114));
  return permute(gray, {1, 0, 2, 3});  // [N,1,H,W]
}

}  // namespace

LossParams LossParams::from_config(const Config& cfg) {
  LossParams p;
  p.focal_alpha = cfg.get_double("loss.focal_alpha");
  p.focal_gamma = cfg.get_double("loss.focal_gamma");
  p.smooth_l1_beta = cfg.get_double("loss.smooth_l1_beta");
  p.enh_mode = cfg.get_string("loss.enh_mode");
  p.w_det = cfg.get_double("loss.w_det");
  p.w_enh = cfg.get_double("loss.w_enh");
  p.pos_iou = cfg.get_double("loss.pos_iou");
  p.neg_iou = cfg.get_double("loss.neg_iou");
  if (p.neg_iou > p.pos_iou)
    throw ConfigError("loss.neg_iou must not exceed loss.pos_iou");
  return p;
}

AnchorTargets match_anchors(const Anchors& anchors,
                            const std::vector<Annotation>& gts,
                            const ModelSpec& spec, double pos_iou,
                            double neg_iou) {
  const size_t n = anchors.total();
  AnchorTargets t;
  t.label.assign(n, -1);
  t.delta.assign(n, {0, 0, 0, 0});
  if (gts.empty()) return t;

  std::vector<double> best_iou(n, 0.0);
  std::vector<size_t> best_gt(n, 0);
  std::vector<double> gt_best_iou(gts.size(), 0.0);
  std::vector<size_t> gt_best_anchor(gts.size(), 0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t g = 0; g < gts.size(); ++g) {
      const double v = box_iou(anchors.boxes[i], gts[g].box);
      if (v > best_iou[i]) {  // strict: ties keep the lowest gt index
        best_iou[i] = v;
        best_gt[i] = g;
      }
      if (v > gt_best_iou[g]) {  // ties keep the lowest anchor index
        gt_best_iou[g] = v;
        gt_best_anchor[g] = i;
      }
    }
    if (best_iou[i] >= pos_iou)
      t.label[i] = gts[best_gt[i]].class_id;
    else if (best_iou[i] >= neg_iou)
      t.label[i] = -2;  // ignored band
  }
  // Every ground-truth box gets its best-overlapping anchor even when that
  // overlap is below the positive threshold; an anchor already assigned to a
  // higher-overlap box keeps its assignment.
  for (size_t g = 0; g < gts.size(); ++g) {
    if (gt_best_iou[g] <= 0.0) continue;
    const size_t i = gt_best_anchor[g];
    if (t.label[i] >= 0 && best_iou[i] > gt_best_iou[g]) continue;
    t.label[i] = gts[g].class_id;
    best_iou[i] = gt_best_iou[g];
    best_gt[i] = g;
  }
  for (size_t i = 0; i < n; ++i) {
    if (t.label[i] < 0) continue;
    ++t.num_pos;
    const Box& ab = anchors.boxes[i];
    const Box& gb = gts[best_gt[i]].box;
    const double aw = ab.width(), ah = ab.height();
    const double acx = (ab.x0 + ab.x1) / 2, acy = (ab.y0 + ab.y1) / 2;
    const double gw = gb.width(), gh = gb.height();
    const double gcx = (gb.x0 + gb.x1) / 2, gcy = (gb.y0 + gb.y1) / 2;
    t.delta[i] = {(gcx - acx) / aw / spec.bbox_std[0],
                  (gcy - acy) / ah / spec.bbox_std[1],
                  std::log(gw / aw) / spec.bbox_std[2],
                  std::log(gh / ah) / spec.bbox_std[3]};
  }
  return t;
}

Tensor focal_loss(const Tensor& cls_logits, const AnchorTargets& t,
                  double alpha, double gamma) {
  const auto& s = cls_logits.shape();
  if (s.size() != 2 || s[0] != t.label.size())
    throw ShapeError("focal_loss: logits shape " + shape_str(s) +
                     " does not match " + std::to_string(t.label.size()) +
                     " anchors");
  const size_t M = s[0], K = s[1];
  std::vector<double> y(M * K, 0.0), at(M * K, 1.0 - alpha),
      valid(M * K, 1.0);
  for (size_t i = 0; i < M; ++i) {
    if (t.label[i] == -2) {
      for (size_t k = 0; k < K; ++k) valid[i * K + k] = 0.0;
      continue;
    }
    if (t.label[i] >= 0) {
      const size_t k = static_cast<size_t>(t.label[i]);
      if (k >= K) throw ShapeError("focal_loss: class id out of range");
      y[i * K + k] = 1.0;
      at[i * K + k] = alpha;
    }
  }
  Tensor yt = const_tensor({M, K}, std::move(y));
  Tensor att = const_tensor({M, K}, std::move(at));
  Tensor vt = const_tensor({M, K}, std::move(valid));
  Tensor one = Tensor::full({M, K}, 1.0);

  Tensor p = sigmoid(cls_logits);
  Tensor pt = add(mul(p, yt), mul(sub(one, p), sub(one, yt)));
  Tensor ptc = clamp(pt, 1e-12, 1.0 - 1e-12);
  Tensor focal = pow_scalar(sub(one, ptc), gamma);
  Tensor elem = neg(mul(mul(att, focal), log(ptc)));
  Tensor total = reduce_sum(mul(elem, vt));  // scalar [1]
  const double denom = static_cast<double>(std::max<size_t>(1, t.num_pos));
  return mul_scalar(total, 1.0 / denom);
}

Tensor smooth_l1_loss(const Tensor& box_deltas, const AnchorTargets& t,
                      double beta) {
  const auto& s = box_deltas.shape();
  if (s.size() != 2 || s[1] != 4 || s[0] != t.label.size())
    throw ShapeError("smooth_l1_loss: expected [" +
                     std::to_string(t.label.size()) + ",4] deltas, got " +
                     shape_str(s));
  if (beta <= 0) throw NumericError("smooth_l1_loss: beta must be positive");
  const size_t M = s[0];
  std::vector<double> pos(M, 0.0), target(M * 4, 0.0);
  for (size_t i = 0; i < M; ++i) {
    if (t.label[i] < 0) continue;
    pos[i] = 1.0;
    for (size_t j = 0; j < 4; ++j) target[i * 4 + j] = t.delta[i][j];
  }
  Tensor post = const_tensor({M, 1}, std::move(pos));
  Tensor tgt = const_tensor({M, 4}, std::move(target));

  Tensor r = mul(sub(box_deltas, tgt), post);  // broadcast mask over columns
  Tensor ar = abs(r);
  // Freeze the quadratic/linear branch per element; the loss is C1 at the
  // switch point so the frozen-branch gradient is exact.
  const auto& av = ar.values();
  std::vector<double> quad(av.size()), lin(av.size());
  for (size_t i = 0; i < av.size(); ++i) {
    const bool q = av[i] < beta;
    if (kink::active()) kink::observe(q);
    quad[i] = q ? 1.0 : 0.0;
    lin[i] = q ? 0.0 : 1.0;
  }
  Tensor quadt = const_tensor({M, 4}, std::move(quad));
  Tensor lint = const_tensor({M, 4}, std::move(lin));
  Tensor qpart = mul_scalar(mul(square(r), quadt), 0.5 / beta);
  Tensor lpart = mul(add_scalar(ar, -0.5 * beta), lint);
  Tensor total = reduce_sum(add(qpart, lpart));
  const double denom = static_cast<double>(std::max<size_t>(1, t.num_pos));
  return mul_scalar(total, 1.0 / denom);
}

Tensor ssim_block8(const Tensor& a, const Tensor& b) {
  const auto& s = a.shape();
  if (s.size() != 4 || s[1] != 3)
    throw ShapeError("ssim_block8: expected [N,3,H,W] inputs");
  if (b.shape() != s) throw ShapeError("ssim_block8: shape mismatch");
  if (s[2] % 8 != 0 || s[3] % 8 != 0)
    throw ShapeError("ssim_block8: H and W must be divisible by 8");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Tensor ga = to_gray(a), gb = to_gray(b);
  auto bmean = [](const Tensor& x) {
    return mul_scalar(block_sum(x, 8), 1.0 / 64.0);
  };
  Tensor mx = bmean(ga), my = bmean(gb);
  Tensor mxx = bmean(square(ga)), myy = bmean(square(gb));
  Tensor mxy = bmean(mul(ga, gb));
  Tensor vx = sub(mxx, square(mx));
  Tensor vy = sub(myy, square(my));
  Tensor cxy = sub(mxy, mul(mx, my));
  Tensor num = mul(add_scalar(mul_scalar(mul(mx, my), 2.0), c1),
                   add_scalar(mul_scalar(cxy, 2.0), c2));
  Tensor den = mul(add_scalar(add(square(mx), square(my)), c1),
                   add_scalar(add(vx, vy), c2));
  return reduce_mean(div(num, den));
}

Tensor enhancement_loss(const Tensor& pred, const Tensor& ref,
                        const std::string& mode) {
  if (!pred.defined() || !ref.defined() || pred.shape() != ref.shape())
    throw ShapeError("enhancement_loss: prediction/reference shape mismatch");
  Tensor l1 = reduce_mean(abs(sub(pred, ref)));
  if (mode == "l1") return l1;
  if (mode == "l1+ssim") {
    Tensor ssim = ssim_block8(pred, ref);
    Tensor one = Tensor::full({1}, 1.0);
    return add(l1, mul_scalar(sub(one, ssim), 0.5));
  }
  throw ConfigError("enhancement_loss: unknown mode '" + mode + "'");
}

LossBreakdown joint_loss(const Model& m, const SharedParams& u,
                         const EnhanceParams& ep, const DetectParams& dp,
                         const Batch& batch, const LossParams& lp, BnMode mode,
                         const std::string& split_tag) {
  const auto& s = batch.degraded.shape();
  if (s.size() != 4 || s[1] != 3)
    throw ShapeError("joint_loss: expected [B,3,H,W] batch");
  const size_t B = s[0], H = s[2], W = s[3];
  if (batch.anns.size() != B)
    throw ShapeError("joint_loss: annotation count does not match batch");

  Tensor feat = m.shared_forward(batch.degraded, u);  // single shared pass
  Tensor enh_pred = m.enhance_forward(feat, ep, mode);
  auto det_outs = m.detect_forward(feat, dp);

  Anchors anchors = make_anchors(H, W, m.spec);
  const size_t A = m.spec.anchors_per_cell(), K = m.spec.num_classes;
  Tensor cls_sum, box_sum;
  for (size_t bi = 0; bi < B; ++bi) {
    std::vector<Tensor> cls_parts, box_parts;
    for (const auto& lo : det_outs) {
      cls_parts.push_back(flatten_head(slice0(lo.cls, bi, 1), A, K));
      box_parts.push_back(flatten_head(slice0(lo.box, bi, 1), A, 4));
    }
    Tensor cls_flat = cls_parts.size() == 1 ? cls_parts[0] : concat0(cls_parts);
    Tensor box_flat = box_parts.size() == 1 ? box_parts[0] : concat0(box_parts);
    AnchorTargets t =
        match_anchors(anchors, batch.anns[bi], m.spec, lp.pos_iou, lp.neg_iou);
    Tensor fc = focal_loss(cls_flat, t, lp.focal_alpha, lp.focal_gamma);
    Tensor sl = smooth_l1_loss(box_flat, t, lp.smooth_l1_beta);
    cls_sum = cls_sum.defined() ? add(cls_sum, fc) : fc;
    box_sum = box_sum.defined() ? add(box_sum, sl) : sl;
  }
  const double invb = 1.0 / static_cast<double>(B);
  LossBreakdown out;
  out.split_tag = split_tag;
  out.det_cls = mul_scalar(mul_scalar(cls_sum, invb), lp.w_det);
  out.det_box = mul_scalar(mul_scalar(box_sum, invb), lp.w_det);
  out.enh = mul_scalar(enhancement_loss(enh_pred, batch.reference, lp.enh_mode),
                       lp.w_enh);
  out.total = add(add(out.det_cls, out.det_box), out.enh);
  return out;
}

}  // namespace dpnet
