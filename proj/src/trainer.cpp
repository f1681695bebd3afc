#include "dpnet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "dpnet/autodiff.hpp"
#include "dpnet/image_io.hpp"
#include "dpnet/ops.hpp"

namespace dpnet {

namespace fs = std::filesystem;

UpperMode upper_mode_from_string(const std::string& s) {
  if (s == "first_order") return UpperMode::FirstOrder;
  if (s == "unrolled_exact") return UpperMode::UnrolledExact;
  if (s == "unrolled_fd") return UpperMode::UnrolledFd;
  throw ConfigError("unknown upper mode '" + s + "'");
}

double decayed_lr(double base, double decay, std::uint64_t epoch) {
  return base * std::pow(decay, static_cast<double>(epoch));
}

Batch make_batch(const std::vector<Sample>& samples,
                 const std::vector<size_t>& idx) {
  if (idx.empty()) throw ConfigError("make_batch: empty index list");
  const Shape& s0 = samples.at(idx[0]).degraded.shape();
  const size_t B = idx.size(), C = s0[0], H = s0[1], W = s0[2];
  Batch b;
  b.degraded = Tensor::zeros({B, C, H, W});
  b.reference = Tensor::zeros({B, C, H, W});
  const size_t per = C * H * W;
  for (size_t i = 0; i < B; ++i) {
    const Sample& s = samples.at(idx[i]);
    if (s.degraded.shape() != s0 || s.reference.shape() != s0)
      throw ShapeError("make_batch: mixed image shapes in one batch");
    std::memcpy(b.degraded.values_mut().data() + i * per,
                s.degraded.values().data(), per * sizeof(double));
    std::memcpy(b.reference.values_mut().data() + i * per,
                s.reference.values().data(), per * sizeof(double));
    b.anns.push_back(s.anns);
  }
  return b;
}

namespace {

std::vector<Tensor> ref_tensors(const std::vector<ParamRef>& refs) {
  std::vector<Tensor> v;
  v.reserve(refs.size());
  for (const auto& r : refs) v.push_back(r.t);
  return v;
}

double l2_norm(const std::vector<Tensor>& ts) {
  double s = 0;
  for (const auto& t : ts)
    for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

// w + c*g evaluated outside the tape; result is a fresh constant tensor.
std::vector<Tensor> axpy_const(const std::vector<Tensor>& w,
                               const std::vector<Tensor>& g, double c) {
  RecordGuard guard(false);
  std::vector<Tensor> out;
  out.reserve(w.size());
  for (size_t i = 0; i < w.size(); ++i)
    out.push_back(add(w[i], mul_scalar(g[i], c)).detach());
  return out;
}

std::vector<Tensor> hyper_first_order(const Model& m, const LossFn& val_loss,
                                      const std::vector<Tensor>& u,
                                      double* val_out) {
  Tape::active().reset();
  Tensor lv = val_loss(m.shared, m.enh, m.det, BnMode::TrainNoUpdate);
  if (val_out) *val_out = lv.item();
  auto gu = grad(lv, u);
  Tape::active().reset();
  return gu;
}

std::vector<Tensor> hyper_unrolled_exact(const Model& m,
                                         const LossFn& train_loss,
                                         const LossFn& val_loss,
                                         const std::vector<Tensor>& u,
                                         double eta, double* val_out) {
  Tape::active().reset();
  Tensor lt = train_loss(m.shared, m.enh, m.det, BnMode::TrainNoUpdate);
  auto w = ref_tensors(m.params_lower());
  auto gw = grad(lt, w, /*create_graph=*/true);
  // Virtual lower update recorded on the same tape, so the validation pass
  // differentiates through it back into the shared parameters.
  std::vector<Tensor> w2;
  w2.reserve(w.size());
  for (size_t i = 0; i < w.size(); ++i)
    w2.push_back(sub(w[i], mul_scalar(gw[i], eta)));
  EnhanceParams e2;
  DetectParams d2;
  m.lower_from_vec(w2, e2, d2);
  Tensor lv = val_loss(m.shared, e2, d2, BnMode::TrainNoUpdate);
  if (val_out) *val_out = lv.item();
  auto gu = grad(lv, u);
  Tape::active().reset();
  return gu;
}

std::vector<Tensor> hyper_unrolled_fd(const Model& m, const LossFn& train_loss,
                                      const LossFn& val_loss,
                                      const std::vector<Tensor>& u, double eta,
                                      double* val_out) {
  // Lower-level gradient at the current point.
  Tape::active().reset();
  Tensor lt = train_loss(m.shared, m.enh, m.det, BnMode::TrainNoUpdate);
  auto w = ref_tensors(m.params_lower());
  auto gw = grad(lt, w);
  Tape::active().reset();

  // Validation pass at the virtually updated lower weights; they are fresh
  // leaves so the same traversal yields the response direction v.
  auto w2 = axpy_const(w, gw, -eta);
  for (auto& t : w2) t.set_requires_grad(true);
  EnhanceParams e2;
  DetectParams d2;
  m.lower_from_vec(w2, e2, d2);
  Tensor lv = val_loss(m.shared, e2, d2, BnMode::TrainNoUpdate);
  if (val_out) *val_out = lv.item();
  std::vector<Tensor> probes = u;
  probes.insert(probes.end(), w2.begin(), w2.end());
  auto g = grad(lv, probes);
  Tape::active().reset();
  std::vector<Tensor> direct(g.begin(), g.begin() + u.size());
  std::vector<Tensor> v(g.begin() + u.size(), g.end());

  const double vnorm = l2_norm(v);
  if (vnorm < 1e-12) return direct;
  const double eps = 0.01 / vnorm;

  // Central difference of the train gradient wrt the shared params along v.
  auto wp = axpy_const(w, v, eps);
  auto wm = axpy_const(w, v, -eps);
  EnhanceParams ep;
  DetectParams dp;
  m.lower_from_vec(wp, ep, dp);
  Tensor ltp = train_loss(m.shared, ep, dp, BnMode::TrainNoUpdate);
  auto gup = grad(ltp, u);
  Tape::active().reset();
  EnhanceParams em;
  DetectParams dm;
  m.lower_from_vec(wm, em, dm);
  Tensor ltm = train_loss(m.shared, em, dm, BnMode::TrainNoUpdate);
  auto gum = grad(ltm, u);
  Tape::active().reset();

  const double scale = eta / (2.0 * eps);
  RecordGuard guard(false);
  std::vector<Tensor> out;
  out.reserve(u.size());
  for (size_t i = 0; i < u.size(); ++i)
    out.push_back(
        sub(direct[i], mul_scalar(sub(gup[i], gum[i]), scale)).detach());
  return out;
}

}  // namespace

std::vector<Tensor> hypergradient(const Model& m, const LossFn& train_loss,
                                  const LossFn& val_loss,
                                  const HyperOptions& opt, double* val_out) {
  auto u = ref_tensors(m.params_shared());
  switch (opt.mode) {
    case UpperMode::FirstOrder:
      return hyper_first_order(m, val_loss, u, val_out);
    case UpperMode::UnrolledExact: {
      const size_t n = count_params(m.params_lower());
      if (n > opt.unroll_param_limit)
        throw ConfigError(
            "unrolled_exact would differentiate through " + std::to_string(n) +
            " lower-level parameters, above trainer.unroll_param_limit (" +
            std::to_string(opt.unroll_param_limit) +
            "); use trainer.upper_mode=unrolled_fd for models this size");
      return hyper_unrolled_exact(m, train_loss, val_loss, u, opt.eta,
                                  val_out);
    }
    case UpperMode::UnrolledFd:
      return hyper_unrolled_fd(m, train_loss, val_loss, u, opt.eta, val_out);
  }
  throw ConfigError("unknown upper mode");
}

Trainer::Trainer(Model& m, Dataset& data, const Config& cfg)
    : m_(m), data_(data), cfg_(cfg), lp_(LossParams::from_config(cfg)) {
  hyper_.mode = upper_mode_from_string(cfg.get_string("trainer.upper_mode"));
  hyper_.eta = cfg.get_double("trainer.unroll_eta");
  hyper_.unroll_param_limit =
      static_cast<size_t>(cfg.get_int("trainer.unroll_param_limit"));

  const auto& train = data_.split(Split::Train);
  if (train.empty()) throw ConfigError("training requires a train split");

  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("trainer.seed"));
  rng_ = Rng(Rng::derive(seed, 901, 0));

  if (data_.split(Split::Val).empty()) {
    // Hold out a validation slice from the train split deterministically.
    val_from_holdout_ = true;
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng holdout_rng(Rng::derive(seed, 900, 0));
    holdout_rng.shuffle(order);
    const double frac = cfg.get_double("trainer.val_fraction");
    size_t n_val = static_cast<size_t>(
        std::llround(frac * static_cast<double>(train.size())));
    n_val = std::max<size_t>(1, std::min(n_val, train.size() - 1));
    val_idx_.assign(order.begin(), order.begin() + n_val);
    train_idx_.assign(order.begin() + n_val, order.end());
    std::sort(val_idx_.begin(), val_idx_.end());
    std::sort(train_idx_.begin(), train_idx_.end());
  } else {
    val_from_holdout_ = false;
    train_idx_.resize(train.size());
    for (size_t i = 0; i < train_idx_.size(); ++i) train_idx_[i] = i;
    val_idx_.clear();
  }
}

const Sample& Trainer::train_sample(size_t i) const {
  return data_.split(Split::Train).at(i);
}

const Sample& Trainer::val_sample(size_t i) const {
  if (val_from_holdout_)
    return data_.split(Split::Train).at(val_idx_.at(i));
  return data_.split(Split::Val).at(i);
}

size_t Trainer::val_count() const {
  return val_from_holdout_ ? val_idx_.size() : data_.split(Split::Val).size();
}

LossBreakdown Trainer::lower_step(const Batch& batch, double lr) {
  ++step_;
  Tape::active().reset();
  LossBreakdown lb =
      joint_loss(m_, m_.shared, m_.enh, m_.det, batch, lp_, BnMode::Train,
                 "train");
  auto w_refs = m_.params_lower();
  auto gw = grad(lb.total, ref_tensors(w_refs));
  Tape::active().reset();
  adam_step(w_refs, gw, adam_, lr, step_, step_);
  return lb;
}

void Trainer::upper_step(const Batch& train_batch, const Batch& val_batch,
                         double lr) {
  if (step_ == 0) ++step_;
  LossFn tr = [&](const SharedParams& su, const EnhanceParams& ep,
                  const DetectParams& dp, BnMode mode) {
    return joint_loss(m_, su, ep, dp, train_batch, lp_, mode, "train").total;
  };
  LossFn va = [&](const SharedParams& su, const EnhanceParams& ep,
                  const DetectParams& dp, BnMode mode) {
    return joint_loss(m_, su, ep, dp, val_batch, lp_, mode, "val").total;
  };
  double val_value = 0;
  auto gu = hypergradient(m_, tr, va, hyper_, &val_value);
  auto u_refs = m_.params_shared();
  adam_step(u_refs, gu, adam_, lr, step_, step_);
  last_val_loss_ = val_value;
}

namespace {

std::string render_row(const EpochRow& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << r.epoch << '\t' << r.lr_lower << '\t' << r.lr_upper << '\t'
     << r.train_total << '\t' << r.train_det_cls << '\t' << r.train_det_box
     << '\t' << r.train_enh << '\t' << r.val_total << '\t' << r.test.map50
     << '\t' << r.test.mean_psnr_degraded << '\t' << r.test.mean_psnr_enhanced
     << '\t' << r.test.psnr_gain_ge2_frac << '\t' << r.test.mean_ssim_enhanced
     << '\t' << r.test.mean_uiqm_degraded << '\t' << r.test.mean_uiqm_enhanced
     << '\t' << r.seconds << '\n';
  return os.str();
}

constexpr const char* kMetricsHeader =
    "epoch\tlr_lower\tlr_upper\ttrain_total\ttrain_det_cls\ttrain_det_box\t"
    "train_enh\tval_total\ttest_map50\ttest_psnr_degraded\t"
    "test_psnr_enhanced\ttest_psnr_gain_frac\ttest_ssim\t"
    "test_uiqm_degraded\ttest_uiqm_enhanced\tseconds\n";

}  // namespace

std::vector<EpochRow> Trainer::run(const std::string& out_dir,
                                   const std::string& resume_path,
                                   std::uint64_t stop_after_epochs) {
  fs::create_directories(out_dir);
  const auto digest = cfg_.digest();
  const std::string ckpt_path = out_dir + "/checkpoint.bin";
  const std::string metrics_path = out_dir + "/metrics.tsv";

  std::uint64_t start_epoch = 0;
  std::vector<std::string> kept_rows;
  if (!resume_path.empty()) {
    LoadReport rep = load_checkpoint(resume_path, m_, &adam_, digest,
                                     /*require_digest_match=*/true);
    if (!rep.has_optimizer || !rep.has_progress)
      throw DataError(
          "checkpoint lacks the optimizer and progress state needed to "
          "resume: " +
          resume_path);
    step_ = rep.progress.step;
    start_epoch = rep.progress.epoch;
    rng_.set_state(rep.progress.rng_state);
    if (fs::exists(metrics_path)) {
      std::ifstream in(metrics_path);
      std::string line;
      bool first = true;
      while (std::getline(in, line)) {
        if (first) {
          first = false;
          continue;
        }
        if (line.empty()) continue;
        const std::uint64_t ep = std::strtoull(line.c_str(), nullptr, 10);
        if (ep >= 1 && ep <= start_epoch) kept_rows.push_back(line + "\n");
      }
    }
  }

  const std::uint64_t epochs =
      static_cast<std::uint64_t>(cfg_.get_int("trainer.epochs"));
  const size_t B = static_cast<size_t>(cfg_.get_int("trainer.batch_size"));
  if (B == 0) throw ConfigError("trainer.batch_size must be >= 1");
  const double lr_lo_base = cfg_.get_double("trainer.lr");
  const double lr_up_base = cfg_.get_double("trainer.lr_upper");
  const double decay = cfg_.get_double("trainer.lr_decay");

  std::vector<EpochRow> rows;
  const auto& train = data_.split(Split::Train);
  for (std::uint64_t e = start_epoch; e < epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRow row;
    row.epoch = e + 1;
    row.lr_lower = decayed_lr(lr_lo_base, decay, e);
    row.lr_upper = decayed_lr(lr_up_base, decay, e);

    std::vector<size_t> order = train_idx_;
    rng_.shuffle(order);
    const size_t nv = val_count();

    size_t iters = 0;
    for (size_t start = 0; start < order.size(); start += B) {
      const size_t n = std::min(B, order.size() - start);
      std::vector<size_t> tb_idx(order.begin() + start,
                                 order.begin() + start + n);
      std::vector<size_t> vb_idx;
      vb_idx.reserve(n);
      for (size_t k = 0; k < n; ++k) {
        const size_t d = rng_.uniform_index(nv);
        vb_idx.push_back(val_from_holdout_ ? val_idx_[d] : d);
      }
      Batch tb = make_batch(train, tb_idx);
      Batch vb = make_batch(
          val_from_holdout_ ? train : data_.split(Split::Val), vb_idx);

      LossBreakdown lb = lower_step(tb, row.lr_lower);
      upper_step(tb, vb, row.lr_upper);

      row.train_total += lb.total.item();
      row.train_det_cls += lb.det_cls.item();
      row.train_det_box += lb.det_box.item();
      row.train_enh += lb.enh.item();
      row.val_total += last_val_loss_;
      ++iters;
    }
    const double ni = static_cast<double>(std::max<size_t>(1, iters));
    row.train_total /= ni;
    row.train_det_cls /= ni;
    row.train_det_box /= ni;
    row.train_enh /= ni;
    row.val_total /= ni;

    row.test = evaluate_split(m_, data_.split(Split::Test));
    const auto t1 = std::chrono::steady_clock::now();
    row.seconds = std::chrono::duration<double>(t1 - t0).count();
    rows.push_back(row);

    std::string tsv(kMetricsHeader);
    for (const auto& line : kept_rows) tsv += line;
    for (const auto& rr : rows) tsv += render_row(rr);
    atomic_write(metrics_path, tsv);

    TrainProgress progress{step_, e + 1, rng_.state()};
    save_checkpoint(ckpt_path, m_, &adam_, &progress, digest);
    quantize_state_f32(m_, &adam_);

    std::cout << "epoch " << (e + 1) << "/" << epochs << std::fixed
              << std::setprecision(4) << " train=" << row.train_total
              << " val=" << row.val_total << " map50=" << row.test.map50
              << " psnr=" << row.test.mean_psnr_enhanced << std::defaultfloat
              << " (" << std::setprecision(1) << row.seconds << "s)"
              << std::setprecision(6) << std::endl;
    if (stop_after_epochs > 0 && rows.size() >= stop_after_epochs) break;
  }
  return rows;
}

}  // namespace dpnet
