#include "dpnet/tensor.hpp"

#include <cmath>

namespace dpnet {

Tensor make_tensor(Shape s, std::vector<double> v) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(s);
  d->values = std::move(v);
  return Tensor(std::move(d));
}

Tensor Tensor::zeros(const Shape& s) {
  return make_tensor(s, std::vector<double>(shape_numel(s), 0.0));
}

Tensor Tensor::full(const Shape& s, double v) {
  return make_tensor(s, std::vector<double>(shape_numel(s), v));
}

Tensor Tensor::from_values(const Shape& s, std::vector<double> v) {
  if (shape_numel(s) != v.size())
    throw ShapeError("from_values: " + shape_str(s) + " holds " +
                     std::to_string(shape_numel(s)) + " elements, got " +
                     std::to_string(v.size()));
  return make_tensor(s, std::move(v));
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a single-element tensor, shape " + shape_str(shape()));
  return d_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != rank()) throw ShapeError("at(): index rank mismatch");
  auto st = row_major_strides(shape());
  std::size_t off = 0, i = 0;
  for (std::size_t v : idx) {
    if (v >= shape()[i]) throw ShapeError("at(): index out of range");
    off += v * st[i++];
  }
  return d_->values[off];
}

Tensor& Tensor::set_requires_grad(bool on) {
  d_->requires_grad = on;
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (d_->grad.empty()) throw Error("grad(): no gradient accumulated");
  return d_->grad;
}

void Tensor::zero_grad() { d_->grad.clear(); }

void Tensor::accumulate_grad(const std::vector<double>& g) {
  if (g.size() != numel()) throw ShapeError("accumulate_grad: size mismatch");
  if (d_->grad.empty()) d_->grad.assign(numel(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) d_->grad[i] += g[i];
}

Tensor Tensor::detach() const {
  auto d = std::make_shared<TensorData>();
  d->shape = d_->shape;
  d->values = d_->values;  // copy keeps later in-place edits isolated
  return Tensor(std::move(d));
}

Tensor Tensor::clone() const { return detach(); }

bool Tensor::all_finite() const {
  for (double v : d_->values)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::check_finite(const char* context) const {
  if (!all_finite())
    throw NumericError(std::string(context) + ": non-finite values in tensor " +
                       shape_str(shape()));
}

Tensor tensor_create(const Shape& shape, const Init& init, Rng* rng) {
  if (shape.empty()) throw ShapeError("tensor_create: empty shape");
  for (std::size_t e : shape)
    if (e == 0) throw ShapeError("tensor_create: zero extent in " + shape_str(shape));
  std::size_t n = shape_numel(shape);
  std::vector<double> v(n, 0.0);
  switch (init.kind) {
    case Init::Kind::Zeros:
      break;
    case Init::Kind::Constant:
      if (!std::isfinite(init.value)) throw NumericError("tensor_create: non-finite constant");
      std::fill(v.begin(), v.end(), init.value);
      break;
    case Init::Kind::Uniform: {
      if (!std::isfinite(init.lo) || !std::isfinite(init.hi) || !(init.lo < init.hi))
        throw NumericError("tensor_create: bad uniform range");
      if (!rng) throw Error("tensor_create: uniform init needs an rng");
      for (double& x : v) x = rng->uniform(init.lo, init.hi);
      break;
    }
    case Init::Kind::Kaiming: {
      if (init.fan_in == 0) throw ShapeError("tensor_create: kaiming fan_in must be positive");
      if (!rng) throw Error("tensor_create: kaiming init needs an rng");
      double bound = std::sqrt(6.0 / static_cast<double>(init.fan_in));
      for (double& x : v) x = rng->uniform(-bound, bound);
      break;
    }
  }
  return make_tensor(shape, std::move(v));
}

}  // namespace dpnet
