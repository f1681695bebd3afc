#include "dpnet/optim.hpp"

#include <cmath>
#include <sstream>

#include "dpnet/common.hpp"

namespace dpnet {
namespace {

void check_shape(const Tensor& a, const Tensor& b, const std::string& what) {
  if (a.shape() != b.shape())
    throw ShapeError("shape mismatch for " + what);
}

}  // namespace

AdamSlot& AdamState::slot_for(const ParamRef& p) {
  auto it = slots.find(p.name);
  if (it == slots.end()) {
    AdamSlot s{Tensor::zeros(p.t.shape()), Tensor::zeros(p.t.shape())};
    it = slots.emplace(p.name, std::move(s)).first;
  } else {
    check_shape(it->second.m, p.t, "adam moment " + p.name);
  }
  return it->second;
}

void adam_step(const std::vector<ParamRef>& params,
               const std::vector<Tensor>& grads, AdamState& st, double lr,
               std::uint64_t t, std::uint64_t iteration, double beta1,
               double beta2, double eps) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (t == 0) throw ConfigError("adam_step: step index must be >= 1");

  // Validate every gradient before mutating anything, so a bad batch leaves
  // parameters and moments untouched.
  for (size_t i = 0; i < params.size(); ++i) {
    check_shape(params[i].t, grads[i], "gradient for " + params[i].name);
    for (double g : grads[i].values()) {
      if (!std::isfinite(g)) {
        std::ostringstream os;
        os << "non-finite gradient in parameter '" << params[i].name
           << "' at iteration " << iteration;
        throw NumericError(os.str());
      }
    }
  }

  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    AdamSlot& s = st.slot_for(params[i]);
    auto& m = s.m.values_mut();
    auto& v = s.v.values_mut();
    Tensor wt = params[i].t;  // handle copy; shares the parameter storage
    auto& w = wt.values_mut();
    const auto& g = grads[i].values();
    for (size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      w[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace dpnet
