#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dpnet/autodiff.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

// Scalar-valued function of several tensors; must return a one-element tensor.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // elements straddling a non-smooth branch
  std::string worst;        // description of the worst element

  bool ok(double tol) const { return checked > 0 && max_rel_err <= tol; }
};

// Compares reverse-mode gradients of f against central finite differences for
// every element of every input. Elements whose +h / -h evaluations take
// different branches through relu/abs/clamp are skipped rather than compared.
// Throws NumericError if f is not bitwise deterministic (two identical
// baseline evaluations disagree), since the difference oracle is then invalid.
GradCheckResult gradcheck(const ScalarFn& f, std::vector<Tensor> inputs,
                          double h = 1e-4);

}  // namespace dpnet
