// Dense N-d tensor of doubles, row-major, value-semantics handle over shared
// storage. Gradients and tape linkage live on the storage so autodiff can see
// every alias of a parameter.
#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <vector>

#include "dpnet/common.hpp"
#include "dpnet/rng.hpp"

namespace dpnet {

struct TensorData {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation
  // Tape linkage; stale when tape_gen differs from the active generation.
  std::int64_t node = -1;
  std::uint64_t tape_gen = 0;
};

struct Init {
  enum class Kind { Zeros, Constant, Uniform, Kaiming };
  Kind kind = Kind::Zeros;
  double value = 0.0;   // Constant
  double lo = 0.0;      // Uniform
  double hi = 1.0;      // Uniform
  std::size_t fan_in = 0;  // Kaiming

  static Init zeros() { return {}; }
  static Init constant(double v) { return {Kind::Constant, v, 0, 1, 0}; }
  static Init uniform(double lo, double hi) { return {Kind::Uniform, 0, lo, hi, 0}; }
  static Init kaiming(std::size_t fan_in) { return {Kind::Kaiming, 0, 0, 1, fan_in}; }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, double v);
  static Tensor from_values(const Shape& s, std::vector<double> v);
  static Tensor scalar(double v) { return full({1}, v); }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t numel() const { return d_->values.size(); }
  const std::vector<double>& values() const { return d_->values; }
  // Mutating stored values is only sound for tensors not recorded on the
  // active tape (parameters between steps, freshly created tensors).
  std::vector<double>& values_mut() { return d_->values; }
  double item() const;
  double at(std::initializer_list<std::size_t> idx) const;

  Tensor& set_requires_grad(bool on);
  bool requires_grad() const { return d_->requires_grad; }
  bool has_grad() const { return d_ && !d_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();
  void accumulate_grad(const std::vector<double>& g);

  // Same values, fresh identity: not a graph node, no grad requirement.
  Tensor detach() const;
  // Deep copy of values, fresh identity.
  Tensor clone() const;

  const std::shared_ptr<TensorData>& data() const { return d_; }
  TensorData* raw() const { return d_.get(); }

  bool all_finite() const;
  void check_finite(const char* context) const;

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
  friend Tensor make_tensor(Shape, std::vector<double>);
};

Tensor make_tensor(Shape s, std::vector<double> v);

// Validating factory: rejects zero extents and malformed init parameters.
// rng may be null for Zeros/Constant.
Tensor tensor_create(const Shape& shape, const Init& init, Rng* rng);

}  // namespace dpnet
