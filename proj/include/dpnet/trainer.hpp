// Bilevel cooperative training. Each iteration first fits the enhancement
// and detection weights (lower level) to a train batch, then moves the
// shared feature module (upper level) along a hypergradient of the
// validation objective that accounts for the lower level's one-step
// response to the shared weights.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dpnet/checkpoint.hpp"
#include "dpnet/config.hpp"
#include "dpnet/dataset.hpp"
#include "dpnet/evaluate.hpp"
#include "dpnet/losses.hpp"
#include "dpnet/model.hpp"
#include "dpnet/optim.hpp"

namespace dpnet {

enum class UpperMode { FirstOrder, UnrolledExact, UnrolledFd };
UpperMode upper_mode_from_string(const std::string& s);

// Loss evaluated at explicit parameter structs so hypergradient passes can
// substitute virtual lower-level weights without touching the model.
using LossFn = std::function<Tensor(const SharedParams&, const EnhanceParams&,
                                    const DetectParams&, BnMode)>;

struct HyperOptions {
  UpperMode mode = UpperMode::UnrolledFd;
  double eta = 0.002;  // virtual gradient-descent step for the lower level
  size_t unroll_param_limit = 150000;  // exact mode refuses larger models
};

// d(val_loss at one-step-updated lower weights)/d(shared params), aligned
// with m.params_shared() order. FirstOrder keeps only the direct term;
// UnrolledExact differentiates through the virtual update; UnrolledFd
// approximates the response term with central differences. All internal
// passes run with BnMode::TrainNoUpdate.
std::vector<Tensor> hypergradient(const Model& m, const LossFn& train_loss,
                                  const LossFn& val_loss,
                                  const HyperOptions& opt,
                                  double* val_loss_out = nullptr);

// lr schedule: base * decay^epoch (0-based epoch).
double decayed_lr(double base, double decay, std::uint64_t epoch);

Batch make_batch(const std::vector<Sample>& samples,
                 const std::vector<size_t>& idx);

struct EpochRow {
  std::uint64_t epoch = 0;  // 1-based, row written after the epoch completes
  double lr_lower = 0, lr_upper = 0;
  double train_total = 0, train_det_cls = 0, train_det_box = 0, train_enh = 0;
  double val_total = 0;
  EvalReport test;
  double seconds = 0;
};

class Trainer {
 public:
  Trainer(Model& m, Dataset& data, const Config& cfg);

  // Full run: trains cfg trainer.epochs epochs, evaluating the test split and
  // writing <out_dir>/checkpoint.bin + <out_dir>/metrics.tsv after each one.
  // resume_path restores weights, moments, step count, epoch, and data order.
  // stop_after_epochs > 0 ends the session early after that many completed
  // epochs (simulating an interruption; the config is unchanged).
  std::vector<EpochRow> run(const std::string& out_dir,
                            const std::string& resume_path = "",
                            std::uint64_t stop_after_epochs = 0);

  // Single steps, exposed for tests of partition discipline.
  LossBreakdown lower_step(const Batch& batch, double lr);
  void upper_step(const Batch& train_batch, const Batch& val_batch, double lr);

  std::uint64_t step() const { return step_; }
  double last_val_loss() const { return last_val_loss_; }
  Rng& rng() { return rng_; }
  const std::vector<size_t>& train_indices() const { return train_idx_; }
  const std::vector<size_t>& val_holdout() const { return val_idx_; }
  const Sample& val_sample(size_t i) const;
  const Sample& train_sample(size_t i) const;
  size_t val_count() const;

 private:
  Model& m_;
  Dataset& data_;
  Config cfg_;
  LossParams lp_;
  HyperOptions hyper_;
  AdamState adam_;
  Rng rng_;
  std::uint64_t step_ = 0;
  double last_val_loss_ = 0;
  bool val_from_holdout_ = false;
  std::vector<size_t> train_idx_;  // indices into the train split
  std::vector<size_t> val_idx_;    // holdout indices when val split is empty
};

}  // namespace dpnet
