// Whole-split evaluation: detection quality on degraded inputs plus image
// quality of the enhanced outputs against the clean references.
#pragma once

#include <string>
#include <vector>

#include "dpnet/dataset.hpp"
#include "dpnet/model.hpp"

namespace dpnet {

struct EvalReport {
  size_t images = 0;
  double map50 = 0.0;
  std::vector<double> per_class_ap;  // classes with no ground truth hold -1
  double mean_psnr_degraded = 0.0;
  double mean_psnr_enhanced = 0.0;
  double psnr_gain_ge2_frac = 0.0;  // fraction of images improved by >= 2 dB
  double mean_ssim_enhanced = 0.0;
  double mean_uiqm_degraded = 0.0;
  double mean_uiqm_enhanced = 0.0;
};

EvalReport evaluate_split(const Model& m, const std::vector<Sample>& samples);

std::string eval_report_text(const EvalReport& r);

}  // namespace dpnet
