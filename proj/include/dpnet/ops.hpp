// Differentiable tensor operations. Exactly the set the model and losses
// need: pointwise arithmetic, reductions, shape movement, 2-d convolution
// with its two gradient kernels, nearest upsampling, block pooling and
// batchnorm. Every op validates shapes and records a backward rule on the
// active tape; none mutates its inputs.
#pragma once

#include <optional>
#include <vector>

#include "dpnet/autodiff.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

// Binary ops require equal shapes, or b broadcastable to a's shape along
// extent-1 axes (no rank promotion).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // |b| must be nonzero everywhere

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& a);     // subgradient at 0 is 0
Tensor sigmoid(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor log(const Tensor& a);      // requires a > 0 elementwise
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);     // requires a >= 0; gradient needs a > 0
Tensor abs(const Tensor& a);      // subgradient at 0 is 0
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor pow_scalar(const Tensor& a, double p);  // a > 0 unless p is a non-negative integer

Tensor broadcast_to(const Tensor& a, const Shape& target);

// axes empty means all axes (result shape [1]); otherwise axes must be
// sorted, unique and in range.
Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes = {},
                  bool keepdim = false);
Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes = {},
                   bool keepdim = false);

Tensor reshape(const Tensor& a, const Shape& s);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor slice0(const Tensor& a, std::size_t start, std::size_t len);
Tensor embed0(const Tensor& a, std::size_t start, std::size_t total);
Tensor concat0(const std::vector<Tensor>& parts);

// x: [N,C,H,W]. Integer scale factor.
Tensor upsample_nearest(const Tensor& x, int factor);
// Non-overlapping b-by-b sum pooling; H and W must be divisible by b.
Tensor block_sum(const Tensor& x, int b);

// x: [N,Ci,H,W], w: [Co,Ci,kh,kw], bias: [Co] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding);
// Gradient of conv2d w.r.t. its input, as a first-class op (the three conv
// kernels are closed under differentiation, which is what makes recorded
// backward passes differentiable again).
Tensor conv2d_input_grad(const Tensor& dy, const Tensor& w, int stride,
                         int padding, std::size_t H, std::size_t W);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& dy, int stride,
                          int padding, std::size_t kh, std::size_t kw);

// Constant masks (never recorded, never require grad).
Tensor gt_scalar_mask(const Tensor& a, double c);
Tensor lt_scalar_mask(const Tensor& a, double c);
Tensor sign_mask(const Tensor& a);
Tensor inside_mask(const Tensor& a, double lo, double hi);

enum class BinOp { Add, Sub, Mul, Div };
enum class UnOp { Relu, Sigmoid, Neg, Square };
enum class ReduceOp { Sum, Mean };

Tensor pointwise_binary(const Tensor& a, const Tensor& b, BinOp op);
Tensor pointwise_unary(const Tensor& a, UnOp op);
Tensor reduce(const Tensor& a, ReduceOp op, const std::vector<int>& axes = {},
              bool keepdim = false);

enum class BnMode { Train, TrainNoUpdate, Eval };

// Composed from primitives, so its gradient (and second-order behaviour)
// comes from the tape. Train modes normalize by biased batch statistics over
// (N,H,W); Train additionally folds the unbiased batch variance into the
// running buffers in place. Population N*H*W must be at least 2 in train
// modes.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, BnMode mode,
                   double eps = 1e-5, double momentum = 0.1);

}  // namespace dpnet
