// Training objectives: focal classification loss, smooth-L1 box regression
// on matched anchors, enhancement reconstruction loss, and their weighted
// joint combination evaluated through the shared feature module.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "dpnet/model.hpp"

namespace dpnet {

struct LossParams {
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double smooth_l1_beta = 1.0 / 9.0;
  std::string enh_mode = "l1";  // l1 | l1+ssim
  double w_det = 1.0;
  double w_enh = 1.0;
  double pos_iou = 0.5;
  double neg_iou = 0.4;
  static LossParams from_config(const Config& cfg);
};

struct AnchorTargets {
  // Per anchor: class id >= 0 for positives, -1 background, -2 ignored.
  std::vector<int> label;
  // Normalized (dx,dy,dw,dh) regression targets; zero for non-positives.
  std::vector<std::array<double, 4>> delta;
  size_t num_pos = 0;
};

AnchorTargets match_anchors(const Anchors& anchors,
                            const std::vector<Annotation>& gts,
                            const ModelSpec& spec, double pos_iou,
                            double neg_iou);

// cls_logits: [M,K] rows aligned with the anchor order.
Tensor focal_loss(const Tensor& cls_logits, const AnchorTargets& t,
                  double alpha, double gamma);

// box_deltas: [M,4] rows aligned with the anchor order.
Tensor smooth_l1_loss(const Tensor& box_deltas, const AnchorTargets& t,
                      double beta);

// Mean SSIM between two [N,3,H,W] batches, built from differentiable ops on
// grayscale 8x8 statistics. H and W must be divisible by 8.
Tensor ssim_block8(const Tensor& a, const Tensor& b);

Tensor enhancement_loss(const Tensor& pred, const Tensor& ref,
                        const std::string& mode);

struct Batch {
  Tensor degraded;  // [B,3,H,W]
  Tensor reference;
  std::vector<std::vector<Annotation>> anns;  // one list per image
};

struct LossBreakdown {
  // Already weighted; total is their exact sum.
  Tensor det_cls, det_box, enh, total;
  std::string split_tag;
};

// Evaluates the joint objective with explicit parameter structs so callers
// can substitute updated lower-level weights. The shared module runs once
// and feeds both subnets.
LossBreakdown joint_loss(const Model& m, const SharedParams& u,
                         const EnhanceParams& ep, const DetectParams& dp,
                         const Batch& batch, const LossParams& lp, BnMode mode,
                         const std::string& split_tag);

}  // namespace dpnet
