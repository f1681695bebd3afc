#include "dpnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace dpnet {
namespace {

struct Probe {
  double value = 0.0;
  std::uint64_t signature = 0;
};

Probe eval_plain(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  RecordGuard untracked(false);
  kink::begin();
  Tensor out = f(inputs);
  Probe p;
  p.signature = kink::end();
  if (!out.defined() || out.numel() != 1)
    throw ShapeError("gradcheck: function must return a scalar tensor");
  p.value = out.item();
  if (!std::isfinite(p.value))
    throw NumericError("gradcheck: non-finite function value");
  return p;
}

}  // namespace

GradCheckResult gradcheck(const ScalarFn& f, std::vector<Tensor> inputs, double h) {
  if (inputs.empty()) throw Error("gradcheck: no inputs");
  if (!(h > 0.0)) throw NumericError("gradcheck: step must be positive");

  // Two identical evaluations must agree bitwise or finite differences of
  // this function are meaningless.
  Probe base1 = eval_plain(f, inputs);
  Probe base2 = eval_plain(f, inputs);
  if (base1.value != base2.value || base1.signature != base2.signature)
    throw NumericError("gradcheck: function is not deterministic, oracle invalid");

  // Reverse-mode gradients.
  Tape::active().reset();
  for (Tensor& t : inputs) t.set_requires_grad(true);
  std::vector<Tensor> grads;
  {
    RecordGuard rec(true);
    Tensor loss = f(inputs);
    if (!loss.defined() || loss.numel() != 1)
      throw ShapeError("gradcheck: function must return a scalar tensor");
    grads = grad(loss, inputs, false);
  }

  GradCheckResult res;
  char buf[160];
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& vals = inputs[i].values_mut();
    const auto& gv = grads[i].values();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double saved = vals[j];
      vals[j] = saved + h;
      Probe plus = eval_plain(f, inputs);
      vals[j] = saved - h;
      Probe minus = eval_plain(f, inputs);
      vals[j] = saved;
      if (plus.signature != minus.signature) {
        ++res.skipped;
        continue;
      }
      const double fd = (plus.value - minus.value) / (2.0 * h);
      const double ad = gv[j];
      // Below the 1e-6 denominator floor the comparison is absolute: central
      // differences of an O(1) loss carry ~1e-11 rounding noise, so elements
      // with near-zero gradients would otherwise fail on noise alone.
      const double rel = std::fabs(ad - fd) /
                         std::max({std::fabs(ad), std::fabs(fd), 1e-6});
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        std::snprintf(buf, sizeof(buf),
                      "input %zu elem %zu: reverse=%.12g fd=%.12g rel=%.3g", i, j,
                      ad, fd, rel);
        res.worst = buf;
      }
    }
  }
  return res;
}

}  // namespace dpnet
