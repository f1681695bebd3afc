#include "dpnet/evaluate.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "dpnet/metrics.hpp"

namespace dpnet {

EvalReport evaluate_split(const Model& m, const std::vector<Sample>& samples) {
  EvalReport r;
  r.images = samples.size();
  if (samples.empty()) return r;

  std::vector<std::vector<Detection>> dets_per_image;
  std::vector<std::vector<Annotation>> gts_per_image;
  dets_per_image.reserve(samples.size());
  gts_per_image.reserve(samples.size());

  size_t gained = 0;
  for (const auto& s : samples) {
    InferResult out = infer(m, s.degraded, InferMode::Both);
    dets_per_image.push_back(std::move(out.dets));
    gts_per_image.push_back(s.anns);

    const double p_deg = psnr(s.degraded, s.reference);
    const double p_enh = psnr(out.enhanced, s.reference);
    r.mean_psnr_degraded += p_deg;
    r.mean_psnr_enhanced += p_enh;
    if (p_enh - p_deg >= 2.0) ++gained;
    r.mean_ssim_enhanced += ssim(out.enhanced, s.reference);
    r.mean_uiqm_degraded += uiqm(s.degraded);
    r.mean_uiqm_enhanced += uiqm(out.enhanced);
  }
  const double n = static_cast<double>(samples.size());
  r.mean_psnr_degraded /= n;
  r.mean_psnr_enhanced /= n;
  r.mean_ssim_enhanced /= n;
  r.mean_uiqm_degraded /= n;
  r.mean_uiqm_enhanced /= n;
  r.psnr_gain_ge2_frac = static_cast<double>(gained) / n;

  const size_t K = m.spec.num_classes;
  r.map50 = mean_average_precision(dets_per_image, gts_per_image, K, 0.5);
  r.per_class_ap.assign(K, -1.0);
  for (size_t c = 0; c < K; ++c) {
    std::vector<std::vector<ScoredBox>> preds(samples.size());
    std::vector<std::vector<Box>> gts(samples.size());
    size_t n_gt = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
      for (const auto& d : dets_per_image[i])
        if (d.class_id == static_cast<int>(c))
          preds[i].push_back({d.box, d.score});
      for (const auto& a : gts_per_image[i])
        if (a.class_id == static_cast<int>(c)) {
          gts[i].push_back(a.box);
          ++n_gt;
        }
    }
    if (n_gt > 0) r.per_class_ap[c] = average_precision(preds, gts, 0.5);
  }
  return r;
}

std::string eval_report_text(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "images\t" << r.images << "\n";
  os << "map50\t" << r.map50 << "\n";
  for (size_t c = 0; c < r.per_class_ap.size(); ++c) {
    os << "ap.class" << c << "\t";
    if (r.per_class_ap[c] < 0)
      os << "no_ground_truth";
    else
      os << r.per_class_ap[c];
    os << "\n";
  }
  os << "psnr.degraded.mean\t" << r.mean_psnr_degraded << "\n";
  os << "psnr.enhanced.mean\t" << r.mean_psnr_enhanced << "\n";
  os << "psnr.gain_ge2db.frac\t" << r.psnr_gain_ge2_frac << "\n";
  os << "ssim.enhanced.mean\t" << r.mean_ssim_enhanced << "\n";
  os << "uiqm.degraded.mean\t" << r.mean_uiqm_degraded << "\n";
  os << "uiqm.enhanced.mean\t" << r.mean_uiqm_enhanced << "\n";
  return os.str();
}

}  // namespace dpnet
