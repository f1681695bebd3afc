// Adam optimizer with named per-parameter moment slots.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "dpnet/model.hpp"

namespace dpnet {

struct AdamSlot {
  Tensor m, v;
};

struct AdamState {
  std::map<std::string, AdamSlot> slots;
  AdamSlot& slot_for(const ParamRef& p);
};

// One Adam update over `params` with gradients aligned by index. `t` is the
// 1-based global step used for bias correction; `iteration` only labels
// error messages. Rejects non-finite gradients before touching any state.
void adam_step(const std::vector<ParamRef>& params,
               const std::vector<Tensor>& grads, AdamState& st, double lr,
               std::uint64_t t, std::uint64_t iteration, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

}  // namespace dpnet
