// Image quality and detection quality metrics on plain values (no autodiff).
#pragma once

#include <vector>

#include "dpnet/image_io.hpp"
#include "dpnet/model.hpp"

namespace dpnet {

// Peak signal-to-noise ratio in dB; +infinity for identical inputs.
double psnr(const Tensor& a, const Tensor& b, double maxval = 1.0);

enum class SsimMode { Gaussian11, Block8 };

// Structural similarity on the grayscale conversion of [3,H,W] images.
// Gaussian11 uses an 11x11 sigma-1.5 window over fully-valid positions;
// Block8 uses non-overlapping 8x8 blocks (H, W divisible by 8).
double ssim(const Tensor& a, const Tensor& b,
            SsimMode mode = SsimMode::Gaussian11);

// Underwater image quality measure (colorfulness, sharpness, contrast blend)
// for a [3,H,W] image with values in [0,1].
double uiqm(const Tensor& img);

// Strict IoU used by evaluation: throws DataError on degenerate boxes.
double iou(const Box& a, const Box& b);

// All-point interpolated average precision for one class. Each inner vector
// holds one image's predictions/ground truths.
struct ScoredBox {
  Box box;
  double score = 0;
};
double average_precision(
    const std::vector<std::vector<ScoredBox>>& preds_per_image,
    const std::vector<std::vector<Box>>& gts_per_image, double iou_thresh);

// Mean AP over classes that have at least one ground-truth box.
double mean_average_precision(
    const std::vector<std::vector<Detection>>& dets_per_image,
    const std::vector<std::vector<Annotation>>& gts_per_image,
    size_t num_classes, double iou_thresh = 0.5);

}  // namespace dpnet
