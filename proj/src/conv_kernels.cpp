#include "conv_kernels.hpp"

#include <Eigen/Dense>
#include <cstring>
#include <vector>

namespace dpnet::convk {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// Per-sample padded copy and patch matrix, reused across calls.
thread_local std::vector<double> tl_pad;
thread_local std::vector<double> tl_col;
thread_local std::vector<double> tl_colg;

void pad_sample(const ConvDims& d, const double* x, double* xp, std::size_t hp,
                std::size_t wp) {
  std::memset(xp, 0, d.ci * hp * wp * sizeof(double));
  for (std::size_t c = 0; c < d.ci; ++c)
    for (std::size_t y = 0; y < d.h; ++y)
      std::memcpy(xp + (c * hp + y + d.padding) * wp + d.padding,
                  x + (c * d.h + y) * d.w, d.w * sizeof(double));
}

// col layout: [ci*kh*kw, ho*wo] row-major.
void im2col(const ConvDims& d, const double* xp, std::size_t hp, std::size_t wp,
            double* col) {
  const std::size_t owo = d.ho * d.wo;
  std::size_t r = 0;
  for (std::size_t c = 0; c < d.ci; ++c)
    for (std::size_t u = 0; u < d.kh; ++u)
      for (std::size_t v = 0; v < d.kw; ++v, ++r) {
        double* dst = col + r * owo;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const double* src = xp + (c * hp + oy * d.stride + u) * wp + v;
          if (d.stride == 1) {
            std::memcpy(dst, src, d.wo * sizeof(double));
            dst += d.wo;
          } else {
            for (std::size_t ox = 0; ox < d.wo; ++ox)
              *dst++ = src[ox * d.stride];
          }
        }
      }
}

void col2im_add(const ConvDims& d, const double* col, double* xp, std::size_t hp,
                std::size_t wp) {
  const std::size_t owo = d.ho * d.wo;
  std::size_t r = 0;
  for (std::size_t c = 0; c < d.ci; ++c)
    for (std::size_t u = 0; u < d.kh; ++u)
      for (std::size_t v = 0; v < d.kw; ++v, ++r) {
        const double* src = col + r * owo;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          double* dst = xp + (c * hp + oy * d.stride + u) * wp + v;
          if (d.stride == 1) {
            for (std::size_t ox = 0; ox < d.wo; ++ox) dst[ox] += src[ox];
          } else {
            for (std::size_t ox = 0; ox < d.wo; ++ox)
              dst[ox * d.stride] += src[ox];
          }
          src += d.wo;
        }
      }
}

}  // namespace

void forward(const ConvDims& d, const double* x, const double* wgt,
             const double* bias, double* y) {
  const std::size_t hp = d.h + 2 * d.padding, wp = d.w + 2 * d.padding;
  const std::size_t kk = d.ci * d.kh * d.kw, owo = d.ho * d.wo;
  tl_pad.resize(d.ci * hp * wp);
  tl_col.resize(kk * owo);
  CMapMat wm(wgt, static_cast<Eigen::Index>(d.co), static_cast<Eigen::Index>(kk));
  for (std::size_t n = 0; n < d.n; ++n) {
    pad_sample(d, x + n * d.ci * d.h * d.w, tl_pad.data(), hp, wp);
    im2col(d, tl_pad.data(), hp, wp, tl_col.data());
    CMapMat cm(tl_col.data(), static_cast<Eigen::Index>(kk),
               static_cast<Eigen::Index>(owo));
    MapMat ym(y + n * d.co * owo, static_cast<Eigen::Index>(d.co),
              static_cast<Eigen::Index>(owo));
    ym.noalias() = wm * cm;
    if (bias) {
      for (std::size_t co = 0; co < d.co; ++co) {
        double b = bias[co];
        double* row = y + (n * d.co + co) * owo;
        for (std::size_t i = 0; i < owo; ++i) row[i] += b;
      }
    }
  }
}

void input_grad(const ConvDims& d, const double* dy, const double* wgt,
                double* dx) {
  const std::size_t hp = d.h + 2 * d.padding, wp = d.w + 2 * d.padding;
  const std::size_t kk = d.ci * d.kh * d.kw, owo = d.ho * d.wo;
  tl_pad.resize(d.ci * hp * wp);
  tl_colg.resize(kk * owo);
  CMapMat wm(wgt, static_cast<Eigen::Index>(d.co), static_cast<Eigen::Index>(kk));
  for (std::size_t n = 0; n < d.n; ++n) {
    CMapMat dym(dy + n * d.co * owo, static_cast<Eigen::Index>(d.co),
                static_cast<Eigen::Index>(owo));
    MapMat gm(tl_colg.data(), static_cast<Eigen::Index>(kk),
              static_cast<Eigen::Index>(owo));
    gm.noalias() = wm.transpose() * dym;
    std::memset(tl_pad.data(), 0, tl_pad.size() * sizeof(double));
    col2im_add(d, tl_colg.data(), tl_pad.data(), hp, wp);
    double* xn = dx + n * d.ci * d.h * d.w;
    for (std::size_t c = 0; c < d.ci; ++c)
      for (std::size_t y = 0; y < d.h; ++y)
        std::memcpy(xn + (c * d.h + y) * d.w,
                    tl_pad.data() + (c * hp + y + d.padding) * wp + d.padding,
                    d.w * sizeof(double));
  }
}

void weight_grad(const ConvDims& d, const double* x, const double* dy,
                 double* dw) {
  const std::size_t hp = d.h + 2 * d.padding, wp = d.w + 2 * d.padding;
  const std::size_t kk = d.ci * d.kh * d.kw, owo = d.ho * d.wo;
  tl_pad.resize(d.ci * hp * wp);
  tl_col.resize(kk * owo);
  MapMat dwm(dw, static_cast<Eigen::Index>(d.co), static_cast<Eigen::Index>(kk));
  dwm.setZero();
  for (std::size_t n = 0; n < d.n; ++n) {
    pad_sample(d, x + n * d.ci * d.h * d.w, tl_pad.data(), hp, wp);
    im2col(d, tl_pad.data(), hp, wp, tl_col.data());
    CMapMat cm(tl_col.data(), static_cast<Eigen::Index>(kk),
               static_cast<Eigen::Index>(owo));
    CMapMat dym(dy + n * d.co * owo, static_cast<Eigen::Index>(d.co),
                static_cast<Eigen::Index>(owo));
    dwm.noalias() += dym * cm.transpose();
  }
}

}  // namespace dpnet::convk
