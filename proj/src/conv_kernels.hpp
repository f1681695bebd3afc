// Raw convolution kernels (values only, no autodiff). Lowered to a patch
// matrix and a dense matrix product.
#pragma once

#include <cstddef>

namespace dpnet::convk {

struct ConvDims {
  std::size_t n, ci, h, w;    // input
  std::size_t co, kh, kw;     // kernel
  std::size_t ho, wo;         // output
  int stride, padding;
};

// y[n,co,ho,wo]; bias may be null.
void forward(const ConvDims& d, const double* x, const double* wgt,
             const double* bias, double* y);
// dx[n,ci,h,w] from dy[n,co,ho,wo].
void input_grad(const ConvDims& d, const double* dy, const double* wgt,
                double* dx);
// dw[co,ci,kh,kw] from x and dy.
void weight_grad(const ConvDims& d, const double* x, const double* dy,
                 double* dw);

}  // namespace dpnet::convk
