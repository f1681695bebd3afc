#include "dpnet/ops.hpp"

#include <cmath>
#include <cstring>

#include "conv_kernels.hpp"

namespace dpnet {
namespace {

Tensor make_op(const char* name, const std::vector<Tensor>& inputs, Shape oshape,
               std::vector<double> ovals, Vjp vjp) {
  Tensor out = make_tensor(std::move(oshape), std::move(ovals));
  return Tape::active().record(name, inputs, std::move(out), std::move(vjp));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

bool is_broadcastable_to(const Shape& from, const Shape& to) {
  if (from.size() != to.size()) return false;
  for (std::size_t i = 0; i < from.size(); ++i)
    if (from[i] != to[i] && from[i] != 1) return false;
  return true;
}

// Effective strides for reading `in` at positions of an `out`-shaped
// iteration: zero along expanded axes.
std::vector<std::size_t> effective_strides(const Shape& in, const Shape& out) {
  auto st = row_major_strides(in);
  for (std::size_t i = 0; i < in.size(); ++i)
    if (in[i] == 1 && out[i] != 1) st[i] = 0;
  return st;
}

// Row-major odometer walk over `shape`, calling f(offset) where offset is
// accumulated from `strides` (which may contain zeros).
template <typename F>
void odometer_walk(const Shape& shape, const std::vector<std::size_t>& strides,
                   F&& f) {
  const std::size_t rank = shape.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  const std::size_t total = shape_numel(shape);
  for (std::size_t i = 0; i < total; ++i) {
    f(off);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      off += strides[ax];
      if (idx[ax] < shape[ax]) break;
      off -= strides[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
}

std::vector<int> normalize_axes(const char* op, const std::vector<int>& axes,
                                std::size_t rank) {
  std::vector<int> ax = axes;
  if (ax.empty()) {
    ax.resize(rank);
    for (std::size_t i = 0; i < rank; ++i) ax[i] = static_cast<int>(i);
    return ax;
  }
  for (std::size_t i = 0; i < ax.size(); ++i) {
    if (ax[i] < 0 || ax[i] >= static_cast<int>(rank))
      throw ShapeError(std::string(op) + ": axis out of range");
    if (i && ax[i] <= ax[i - 1])
      throw ShapeError(std::string(op) + ": axes must be sorted and unique");
  }
  return ax;
}

enum class Red { Sum, Mean };

Tensor reduce_impl(const Tensor& a, const std::vector<int>& axes_in, bool keepdim,
                   Red kind) {
  const char* name = kind == Red::Sum ? "reduce_sum" : "reduce_mean";
  const Shape& ish = a.shape();
  std::vector<int> axes = normalize_axes(name, axes_in, ish.size());
  std::vector<char> reduced(ish.size(), 0);
  for (int ax : axes) reduced[ax] = 1;

  Shape keep = ish;
  for (int ax : axes) keep[ax] = 1;
  Shape oshape;
  if (keepdim) {
    oshape = keep;
  } else {
    for (std::size_t i = 0; i < ish.size(); ++i)
      if (!reduced[i]) oshape.push_back(ish[i]);
    if (oshape.empty()) oshape.push_back(1);
  }

  // Outer walk over kept axes, inner gather over reduced axes, pairwise sum
  // per cell for stable accuracy.
  Shape outer_shape, inner_shape;
  std::vector<std::size_t> outer_strides, inner_strides;
  auto st = row_major_strides(ish);
  for (std::size_t i = 0; i < ish.size(); ++i) {
    if (reduced[i]) {
      inner_shape.push_back(ish[i]);
      inner_strides.push_back(st[i]);
    } else {
      outer_shape.push_back(ish[i]);
      outer_strides.push_back(st[i]);
    }
  }
  if (outer_shape.empty()) {
    outer_shape.push_back(1);
    outer_strides.push_back(0);
  }
  const std::size_t inner_n = shape_numel(inner_shape);
  const double scale = kind == Red::Mean ? 1.0 / static_cast<double>(inner_n) : 1.0;

  const auto& av = a.values();
  std::vector<double> ov;
  ov.reserve(shape_numel(oshape));
  thread_local std::vector<double> scratch;
  scratch.resize(inner_n);
  odometer_walk(outer_shape, outer_strides, [&](std::size_t base) {
    std::size_t k = 0;
    odometer_walk(inner_shape, inner_strides,
                  [&](std::size_t ioff) { scratch[k++] = av[base + ioff]; });
    ov.push_back(pairwise_sum(scratch.data(), inner_n) * scale);
  });

  Shape keep_copy = keep;
  double inv = scale;
  return make_op(name, {a}, std::move(oshape), std::move(ov),
                 [a, keep_copy, inv, kind](const Tensor& g, const std::vector<bool>&)
                     -> std::vector<Tensor> {
                   Tensor gk = reshape(g, keep_copy);
                   Tensor gb = broadcast_to(gk, a.shape());
                   if (kind == Red::Mean) gb = mul_scalar(gb, inv);
                   return {gb};
                 });
}

using BinFn = double (*)(double, double);

Tensor binary_same(const char* name, const Tensor& a, const Tensor& b, BinFn f,
                   Vjp vjp) {
  require_same_shape(name, a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i], bv[i]);
  return make_op(name, {a, b}, a.shape(), std::move(ov), std::move(vjp));
}

Tensor broadcast_rhs(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return b;
  if (!is_broadcastable_to(b.shape(), a.shape()))
    throw ShapeError(std::string(op) + ": " + shape_str(b.shape()) +
                     " does not broadcast to " + shape_str(a.shape()));
  return broadcast_to(b, a.shape());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b0) {
  Tensor b = broadcast_rhs("add", a, b0);
  return binary_same(
      "add", a, b, [](double x, double y) { return x + y; },
      [](const Tensor& g, const std::vector<bool>& need) -> std::vector<Tensor> {
        return {need[0] ? g : Tensor(), need[1] ? g : Tensor()};
      });
}

Tensor sub(const Tensor& a, const Tensor& b0) {
  Tensor b = broadcast_rhs("sub", a, b0);
  return binary_same(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](const Tensor& g, const std::vector<bool>& need) -> std::vector<Tensor> {
        return {need[0] ? g : Tensor(), need[1] ? neg(g) : Tensor()};
      });
}

Tensor mul(const Tensor& a, const Tensor& b0) {
  Tensor b = broadcast_rhs("mul", a, b0);
  return binary_same(
      "mul", a, b, [](double x, double y) { return x * y; },
      [a, b](const Tensor& g, const std::vector<bool>& need) -> std::vector<Tensor> {
        return {need[0] ? mul(g, b) : Tensor(), need[1] ? mul(g, a) : Tensor()};
      });
}

Tensor div(const Tensor& a, const Tensor& b0) {
  Tensor b = broadcast_rhs("div", a, b0);
  require_same_shape("div", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (double v : bv)
    if (v == 0.0) throw NumericError("div: zero divisor");
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] / bv[i];
  Tensor out = make_tensor(a.shape(), std::move(ov));
  return Tape::active().record(
      "div", {a, b}, out,
      [b, out](const Tensor& g, const std::vector<bool>& need) -> std::vector<Tensor> {
        std::vector<Tensor> r(2);
        if (need[0]) r[0] = div(g, b);
        if (need[1]) r[1] = neg(div(mul(g, out), b));
        return r;
      });
}

Tensor relu(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  if (kink::active()) {
    for (std::size_t i = 0; i < av.size(); ++i) {
      kink::observe(av[i] > 0.0);
      ov[i] = av[i] > 0.0 ? av[i] : 0.0;
    }
  } else {
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
  }
  return make_op("relu", {a}, a.shape(), std::move(ov),
                 [a](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                   return {mul(g, gt_scalar_mask(a, 0.0))};
                 });
}

Tensor sigmoid(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    double x = av[i];
    if (x >= 0.0) {
      ov[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      double e = std::exp(x);
      ov[i] = e / (1.0 + e);
    }
  }
  Tensor out = make_tensor(a.shape(), std::move(ov));
  return Tape::active().record(
      "sigmoid", {a}, out,
      [out](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
        return {mul(g, mul(out, add_scalar(neg(out), 1.0)))};
      });
}

Tensor neg(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = -av[i];
  return make_op("neg", {a}, a.shape(), std::move(ov),
                 [](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                   return {neg(g)};
                 });
}

Tensor square(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * av[i];
  return make_op("square", {a}, a.shape(), std::move(ov),
                 [a](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                   return {mul(g, mul_scalar(a, 2.0))};
                 });
}

Tensor log(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (!(av[i] > 0.0)) throw NumericError("log: non-positive input");
    ov[i] = std::log(av[i]);
  }
  return make_op("log", {a}, a.shape(), std::move(ov),
                 [a](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                   return {div(g, a)};
                 });
}

Tensor exp(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = std::exp(av[i]);
  Tensor out = make_tensor(a.shape(), std::move(ov));
  return Tape::active().record(
      "exp", {a}, out,
      [out](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
        return {mul(g, out)};
      });
}

Tensor sqrt(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i] < 0.0) throw NumericError("sqrt: negative input");
    ov[i] = std::sqrt(av[i]);
  }
  Tensor out = make_tensor(a.shape(), std::move(ov));
  return Tape::active().record(
      "sqrt", {a}, out,
      [out](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
        return {div(mul_scalar(g, 0.5), out)};
      });
}

Tensor abs(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  if (kink::active()) {
    for (std::size_t i = 0; i < av.size(); ++i) {
      kink::observe(av[i] > 0.0);
      ov[i] = std::fabs(av[i]);
    }
  } else {
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = std::fabs(av[i]);
  }
  return make_op("abs", {a}, a.shape(), std::move(ov),
                 [a](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                   return {mul(g, sign_mask(a))};
                 });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo < hi)) throw NumericError("clamp: lo must be below hi");
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  if (kink::active()) {
    for (std::size_t i = 0; i < av.size(); ++i) {
      kink::observe(av[i] > lo);
      kink::observe(av[i] < hi);
      ov[i] = av[i] < lo ? lo : (av[i] > hi ? hi : av[i]);
    }
  } else {
    for (std::size_t i = 0; i < av.size(); ++i)
      ov[i] = av[i] < lo ? lo : (av[i] > hi ? hi : av[i]);
  }
  return make_op("clamp", {a}, a.shape(), std::move(ov),
                 [a, lo, hi](const Tensor& g, const std::vector<bool>&)
                     -> std::vector<Tensor> {
                   return {mul(g, inside_mask(a, lo, hi))};
                 });
}

Tensor pow_scalar(const Tensor& a, double p) {
  if (!std::isfinite(p)) throw NumericError("pow_scalar: non-finite exponent");
  bool integral_nonneg = p >= 0.0 && p == std::floor(p);
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (!integral_nonneg && !(av[i] > 0.0))
      throw NumericError("pow_scalar: non-positive base with non-integer exponent");
    ov[i] = std::pow(av[i], p);
  }
  return make_op("pow_scalar", {a}, a.shape(), std::move(ov),
                 [a, p](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                   if (p == 0.0) return {Tensor::zeros(a.shape())};
                   return {mul(g, mul_scalar(pow_scalar(a, p - 1.0), p))};
                 });
}

Tensor add_scalar(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw NumericError("add_scalar: non-finite constant");
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + c;
  return make_op("add_scalar", {a}, a.shape(), std::move(ov),
                 [](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                   return {g};
                 });
}

Tensor mul_scalar(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw NumericError("mul_scalar: non-finite constant");
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * c;
  return make_op("mul_scalar", {a}, a.shape(), std::move(ov),
                 [c](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                   return {mul_scalar(g, c)};
                 });
}

Tensor broadcast_to(const Tensor& a, const Shape& target) {
  if (a.shape() == target) return a;
  if (!is_broadcastable_to(a.shape(), target))
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " -> " +
                     shape_str(target));
  auto est = effective_strides(a.shape(), target);
  const auto& av = a.values();
  std::vector<double> ov;
  ov.reserve(shape_numel(target));
  odometer_walk(target, est, [&](std::size_t off) { ov.push_back(av[off]); });

  std::vector<int> bcast_axes;
  for (std::size_t i = 0; i < target.size(); ++i)
    if (a.shape()[i] == 1 && target[i] != 1) bcast_axes.push_back(static_cast<int>(i));
  return make_op("broadcast_to", {a}, target, std::move(ov),
                 [bcast_axes](const Tensor& g, const std::vector<bool>&)
                     -> std::vector<Tensor> {
                   return {reduce_sum(g, bcast_axes, true)};
                 });
}

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes, bool keepdim) {
  return reduce_impl(a, axes, keepdim, Red::Sum);
}

Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes, bool keepdim) {
  return reduce_impl(a, axes, keepdim, Red::Mean);
}

Tensor reshape(const Tensor& a, const Shape& s) {
  if (shape_numel(s) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(s) +
                     " changes element count");
  for (std::size_t e : s)
    if (e == 0) throw ShapeError("reshape: zero extent");
  std::vector<double> ov = a.values();
  return make_op("reshape", {a}, s, std::move(ov),
                 [a](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                   return {reshape(g, a.shape())};
                 });
}

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  const std::size_t rank = a.rank();
  if (axes.size() != rank) throw ShapeError("permute: axes rank mismatch");
  std::vector<char> seen(rank, 0);
  for (int ax : axes) {
    if (ax < 0 || ax >= static_cast<int>(rank) || seen[ax])
      throw ShapeError("permute: invalid axes");
    seen[ax] = 1;
  }
  Shape oshape(rank);
  for (std::size_t k = 0; k < rank; ++k) oshape[k] = a.shape()[axes[k]];
  auto ist = row_major_strides(a.shape());
  std::vector<std::size_t> est(rank);
  for (std::size_t k = 0; k < rank; ++k) est[k] = ist[axes[k]];
  const auto& av = a.values();
  std::vector<double> ov;
  ov.reserve(av.size());
  odometer_walk(oshape, est, [&](std::size_t off) { ov.push_back(av[off]); });

  std::vector<int> inv(rank);
  for (std::size_t k = 0; k < rank; ++k) inv[axes[k]] = static_cast<int>(k);
  return make_op("permute", {a}, std::move(oshape), std::move(ov),
                 [inv](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                   return {permute(g, inv)};
                 });
}

Tensor slice0(const Tensor& a, std::size_t start, std::size_t len) {
  const Shape& ish = a.shape();
  if (len == 0 || start + len > ish[0]) throw ShapeError("slice0: range out of bounds");
  Shape oshape = ish;
  oshape[0] = len;
  std::size_t row = a.numel() / ish[0];
  std::vector<double> ov(len * row);
  std::memcpy(ov.data(), a.values().data() + start * row, ov.size() * sizeof(double));
  std::size_t total = ish[0];
  return make_op("slice0", {a}, std::move(oshape), std::move(ov),
                 [start, total](const Tensor& g, const std::vector<bool>&)
                     -> std::vector<Tensor> {
                   return {embed0(g, start, total)};
                 });
}

Tensor embed0(const Tensor& a, std::size_t start, std::size_t total) {
  const Shape& ish = a.shape();
  if (start + ish[0] > total) throw ShapeError("embed0: range out of bounds");
  Shape oshape = ish;
  oshape[0] = total;
  std::size_t row = a.numel() / ish[0];
  std::vector<double> ov(total * row, 0.0);
  std::memcpy(ov.data() + start * row, a.values().data(),
              a.numel() * sizeof(double));
  std::size_t len = ish[0];
  return make_op("embed0", {a}, std::move(oshape), std::move(ov),
                 [start, len](const Tensor& g, const std::vector<bool>&)
                     -> std::vector<Tensor> {
                   return {slice0(g, start, len)};
                 });
}

Tensor concat0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat0: no parts");
  const Shape& first = parts[0].shape();
  std::size_t total0 = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size())
      throw ShapeError("concat0: rank mismatch");
    for (std::size_t i = 1; i < first.size(); ++i)
      if (p.shape()[i] != first[i]) throw ShapeError("concat0: trailing shape mismatch");
    total0 += p.shape()[0];
  }
  Shape oshape = first;
  oshape[0] = total0;
  std::vector<double> ov;
  ov.reserve(shape_numel(oshape));
  for (const Tensor& p : parts)
    ov.insert(ov.end(), p.values().begin(), p.values().end());

  std::vector<std::size_t> lens;
  for (const Tensor& p : parts) lens.push_back(p.shape()[0]);
  return make_op("concat0", parts, std::move(oshape), std::move(ov),
                 [lens](const Tensor& g, const std::vector<bool>& need)
                     -> std::vector<Tensor> {
                   std::vector<Tensor> out(lens.size());
                   std::size_t off = 0;
                   for (std::size_t i = 0; i < lens.size(); ++i) {
                     if (need[i]) out[i] = slice0(g, off, lens[i]);
                     off += lens[i];
                   }
                   return out;
                 });
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest: expects [N,C,H,W]");
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  const Shape& s = x.shape();
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  const std::size_t f = static_cast<std::size_t>(factor);
  Shape oshape{N, C, H * f, W * f};
  const auto& xv = x.values();
  std::vector<double> ov(shape_numel(oshape));
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* src = xv.data() + nc * H * W;
    double* dst = ov.data() + nc * H * f * W * f;
    for (std::size_t y = 0; y < H; ++y) {
      double* row0 = dst + y * f * W * f;
      for (std::size_t xx = 0; xx < W; ++xx) {
        double v = src[y * W + xx];
        for (std::size_t j = 0; j < f; ++j) row0[xx * f + j] = v;
      }
      for (std::size_t i = 1; i < f; ++i)
        std::memcpy(row0 + i * W * f, row0, W * f * sizeof(double));
    }
  }
  return make_op("upsample_nearest", {x}, std::move(oshape), std::move(ov),
                 [factor](const Tensor& g, const std::vector<bool>&)
                     -> std::vector<Tensor> {
                   return {block_sum(g, factor)};
                 });
}

Tensor block_sum(const Tensor& x, int b) {
  if (x.rank() != 4) throw ShapeError("block_sum: expects [N,C,H,W]");
  if (b < 1) throw ShapeError("block_sum: block must be >= 1");
  const Shape& s = x.shape();
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  const std::size_t bb = static_cast<std::size_t>(b);
  if (H % bb || W % bb)
    throw ShapeError("block_sum: spatial extent not divisible by block");
  Shape oshape{N, C, H / bb, W / bb};
  const auto& xv = x.values();
  std::vector<double> ov(shape_numel(oshape), 0.0);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* src = xv.data() + nc * H * W;
    double* dst = ov.data() + nc * (H / bb) * (W / bb);
    for (std::size_t y = 0; y < H; ++y) {
      double* drow = dst + (y / bb) * (W / bb);
      const double* srow = src + y * W;
      for (std::size_t xx = 0; xx < W; ++xx) drow[xx / bb] += srow[xx];
    }
  }
  return make_op("block_sum", {x}, std::move(oshape), std::move(ov),
                 [b](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                   return {upsample_nearest(g, b)};
                 });
}

namespace {

convk::ConvDims conv_dims(const char* op, const Shape& xs, const Shape& ws,
                          int stride, int padding) {
  if (xs.size() != 4 || ws.size() != 4)
    throw ShapeError(std::string(op) + ": expects 4-d input and kernel");
  if (stride < 1) throw ShapeError(std::string(op) + ": stride must be >= 1");
  if (padding < 0) throw ShapeError(std::string(op) + ": negative padding");
  if (xs[1] != ws[1])
    throw ShapeError(std::string(op) + ": channel mismatch, input " +
                     shape_str(xs) + " kernel " + shape_str(ws));
  convk::ConvDims d;
  d.n = xs[0];
  d.ci = xs[1];
  d.h = xs[2];
  d.w = xs[3];
  d.co = ws[0];
  d.kh = ws[2];
  d.kw = ws[3];
  d.stride = stride;
  d.padding = padding;
  const std::size_t p = static_cast<std::size_t>(padding);
  if (d.h + 2 * p < d.kh || d.w + 2 * p < d.kw)
    throw ShapeError(std::string(op) + ": kernel larger than padded input");
  d.ho = (d.h + 2 * p - d.kh) / static_cast<std::size_t>(stride) + 1;
  d.wo = (d.w + 2 * p - d.kw) / static_cast<std::size_t>(stride) + 1;
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding) {
  convk::ConvDims d = conv_dims("conv2d", x.shape(), w.shape(), stride, padding);
  const double* bp = nullptr;
  if (bias.defined()) {
    if (bias.shape() != Shape{d.co})
      throw ShapeError("conv2d: bias shape must be [out_channels]");
    bp = bias.values().data();
  }
  Shape oshape{d.n, d.co, d.ho, d.wo};
  std::vector<double> ov(shape_numel(oshape));
  convk::forward(d, x.values().data(), w.values().data(), bp, ov.data());

  int s = stride, p = padding;
  std::size_t H = d.h, W = d.w, kh = d.kh, kw = d.kw;
  if (bias.defined()) {
    return make_op("conv2d", {x, w, bias}, std::move(oshape), std::move(ov),
                   [x, w, s, p, H, W, kh, kw](const Tensor& g,
                                              const std::vector<bool>& need)
                       -> std::vector<Tensor> {
                     std::vector<Tensor> out(3);
                     if (need[0]) out[0] = conv2d_input_grad(g, w, s, p, H, W);
                     if (need[1]) out[1] = conv2d_weight_grad(x, g, s, p, kh, kw);
                     if (need[2]) out[2] = reduce_sum(g, {0, 2, 3}, false);
                     return out;
                   });
  }
  return make_op("conv2d", {x, w}, std::move(oshape), std::move(ov),
                 [x, w, s, p, H, W, kh, kw](const Tensor& g,
                                            const std::vector<bool>& need)
                     -> std::vector<Tensor> {
                   std::vector<Tensor> out(2);
                   if (need[0]) out[0] = conv2d_input_grad(g, w, s, p, H, W);
                   if (need[1]) out[1] = conv2d_weight_grad(x, g, s, p, kh, kw);
                   return out;
                 });
}

Tensor conv2d_input_grad(const Tensor& dy, const Tensor& w, int stride,
                         int padding, std::size_t H, std::size_t W) {
  Shape xs{dy.shape()[0], w.shape()[1], H, W};
  convk::ConvDims d = conv_dims("conv2d_input_grad", xs, w.shape(), stride, padding);
  if (dy.shape() != Shape{d.n, d.co, d.ho, d.wo})
    throw ShapeError("conv2d_input_grad: upstream shape " + shape_str(dy.shape()) +
                     " inconsistent with geometry");
  std::vector<double> ov(shape_numel(xs));
  convk::input_grad(d, dy.values().data(), w.values().data(), ov.data());
  int s = stride, p = padding;
  std::size_t kh = d.kh, kw = d.kw;
  return make_op("conv2d_input_grad", {dy, w}, xs, std::move(ov),
                 [dy, w, s, p, kh, kw](const Tensor& g, const std::vector<bool>& need)
                     -> std::vector<Tensor> {
                   std::vector<Tensor> out(2);
                   if (need[0]) out[0] = conv2d(g, w, Tensor(), s, p);
                   if (need[1]) out[1] = conv2d_weight_grad(g, dy, s, p, kh, kw);
                   return out;
                 });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& dy, int stride,
                          int padding, std::size_t kh, std::size_t kw) {
  Shape ws{dy.shape()[1], x.shape()[1], kh, kw};
  convk::ConvDims d = conv_dims("conv2d_weight_grad", x.shape(), ws, stride, padding);
  if (dy.shape() != Shape{d.n, d.co, d.ho, d.wo})
    throw ShapeError("conv2d_weight_grad: upstream shape " + shape_str(dy.shape()) +
                     " inconsistent with geometry");
  std::vector<double> ov(shape_numel(ws));
  convk::weight_grad(d, x.values().data(), dy.values().data(), ov.data());
  int s = stride, p = padding;
  std::size_t H = d.h, W = d.w;
  return make_op("conv2d_weight_grad", {x, dy}, ws, std::move(ov),
                 [x, dy, s, p, H, W](const Tensor& g, const std::vector<bool>& need)
                     -> std::vector<Tensor> {
                   std::vector<Tensor> out(2);
                   if (need[0]) out[0] = conv2d_input_grad(dy, g, s, p, H, W);
                   if (need[1]) out[1] = conv2d(x, g, Tensor(), s, p);
                   return out;
                 });
}

Tensor gt_scalar_mask(const Tensor& a, double c) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] > c ? 1.0 : 0.0;
  return make_tensor(a.shape(), std::move(ov));
}

Tensor lt_scalar_mask(const Tensor& a, double c) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] < c ? 1.0 : 0.0;
  return make_tensor(a.shape(), std::move(ov));
}

Tensor sign_mask(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i)
    ov[i] = av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0);
  return make_tensor(a.shape(), std::move(ov));
}

Tensor inside_mask(const Tensor& a, double lo, double hi) {
  const auto& av = a.values();
  std::vector<double> ov(av.size());
  for (std::size_t i = 0; i < av.size(); ++i)
    ov[i] = (av[i] > lo && av[i] < hi) ? 1.0 : 0.0;
  return make_tensor(a.shape(), std::move(ov));
}

Tensor pointwise_binary(const Tensor& a, const Tensor& b, BinOp op) {
  switch (op) {
    case BinOp::Add: return add(a, b);
    case BinOp::Sub: return sub(a, b);
    case BinOp::Mul: return mul(a, b);
    case BinOp::Div: return div(a, b);
  }
  throw Error("pointwise_binary: bad op");
}

Tensor pointwise_unary(const Tensor& a, UnOp op) {
  switch (op) {
    case UnOp::Relu: return relu(a);
    case UnOp::Sigmoid: return sigmoid(a);
    case UnOp::Neg: return neg(a);
    case UnOp::Square: return square(a);
  }
  throw Error("pointwise_unary: bad op");
}

Tensor reduce(const Tensor& a, ReduceOp op, const std::vector<int>& axes,
              bool keepdim) {
  return op == ReduceOp::Sum ? reduce_sum(a, axes, keepdim)
                             : reduce_mean(a, axes, keepdim);
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, BnMode mode,
                   double eps, double momentum) {
  if (x.rank() != 4) throw ShapeError("batchnorm2d: expects [N,C,H,W]");
  const std::size_t C = x.shape()[1];
  Shape cs{C};
  if (gamma.shape() != cs || beta.shape() != cs || running_mean.shape() != cs ||
      running_var.shape() != cs)
    throw ShapeError("batchnorm2d: parameter shapes must be [C]");
  Shape c4{1, C, 1, 1};
  Tensor g4 = reshape(gamma, c4);
  Tensor b4 = reshape(beta, c4);

  if (mode == BnMode::Eval) {
    Tensor m4 = reshape(running_mean, c4);
    Tensor s4 = sqrt(add_scalar(reshape(running_var, c4), eps));
    return add(mul(div(sub(x, m4), s4), g4), b4);
  }

  const std::size_t pop = x.shape()[0] * x.shape()[2] * x.shape()[3];
  if (pop < 2)
    throw NumericError("batchnorm2d: train-mode population below 2");
  Tensor mu = reduce_mean(x, {0, 2, 3}, true);
  Tensor xc = sub(x, mu);
  Tensor var = reduce_mean(square(xc), {0, 2, 3}, true);
  Tensor y = add(mul(div(xc, sqrt(add_scalar(var, eps))), g4), b4);

  if (mode == BnMode::Train) {
    const double n = static_cast<double>(pop);
    const double unbias = n / (n - 1.0);
    auto& rm = running_mean.values_mut();
    auto& rv = running_var.values_mut();
    const auto& mv = mu.values();
    const auto& vv = var.values();
    for (std::size_t c = 0; c < C; ++c) {
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mv[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * vv[c] * unbias;
    }
  }
  return y;
}

}  // namespace dpnet
