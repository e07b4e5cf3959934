#pragma once
#include <algorithm>
#include <cmath>

// Scalar helpers shared by the serial and OpenMP kernel translation units.
// Both loop nests must produce bitwise-identical per-element arithmetic, so
// anything beyond a trivial expression lives here.
namespace maskseg::kernels::detail {

// a + t*(b-a): exact for a == b and for t == 0, which is what makes
// bilinear_resize exact on constant and same-size inputs.
inline double lerp(double a, double b, double t) { return a + t * (b - a); }

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Source pixel coordinate for output index i, align-corners-false.
inline double src_coord(int i, int in_extent, int out_extent) {
  return (static_cast<double>(i) + 0.5) * static_cast<double>(in_extent) /
             static_cast<double>(out_extent) -
         0.5;
}

inline double bilinear_at(const double* __restrict__ map, int h, int w, double px, double py) {
  int x0 = static_cast<int>(std::floor(px));
  int y0 = static_cast<int>(std::floor(py));
  double fx = px - x0;
  double fy = py - y0;
  int ix0 = clampi(x0, 0, w - 1);
  int ix1 = clampi(x0 + 1, 0, w - 1);
  int iy0 = clampi(y0, 0, h - 1);
  int iy1 = clampi(y0 + 1, 0, h - 1);
  double top = lerp(map[iy0 * w + ix0], map[iy0 * w + ix1], fx);
  double bot = lerp(map[iy1 * w + ix0], map[iy1 * w + ix1], fx);
  return lerp(top, bot, fy);
}

inline int ceil_div(int a, int b) { return a > 0 ? (a + b - 1) / b : a / b; }
inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

// Output rows touching valid input rows for a given kernel offset:
// 0 <= o*stride - pad + k < extent.
inline void conv_out_range(int extent, int out_extent, int k, int stride, int pad, int& lo,
                           int& hi) {
  lo = std::max(0, ceil_div(pad - k, stride));
  hi = std::min(out_extent - 1, floor_div(extent - 1 + pad - k, stride));
}

// Convolutions run as im2col + matmul. The column matrix is
// [ci*kh*kw x oh*ow] with rows ordered (ci, ky, kx), so every output element
// accumulates its contributions in that fixed order in both the serial and
// OpenMP paths.

// Fill column rows for one input channel (rows ic*kh*kw .. +kh*kw-1).
inline void im2col_channel(const double* __restrict__ x, double* __restrict__ col, int h, int wd,
                           int kh, int kw, int stride, int pad, int oh, int ow, int ic) {
  const double* __restrict__ xc = x + static_cast<size_t>(ic) * h * wd;
  size_t p = static_cast<size_t>(oh) * ow;
  int r = ic * kh * kw;
  for (int ky = 0; ky < kh; ++ky) {
    int oy_lo, oy_hi;
    conv_out_range(h, oh, ky, stride, pad, oy_lo, oy_hi);
    for (int kx = 0; kx < kw; ++kx, ++r) {
      int ox_lo, ox_hi;
      conv_out_range(wd, ow, kx, stride, pad, ox_lo, ox_hi);
      double* __restrict__ crow = col + static_cast<size_t>(r) * p;
      for (size_t i = 0; i < p; ++i) crow[i] = 0.0;
      for (int oy = oy_lo; oy <= oy_hi; ++oy) {
        const double* __restrict__ xrow =
            xc + static_cast<size_t>(oy * stride - pad + ky) * wd - pad + kx;
        double* __restrict__ dst = crow + static_cast<size_t>(oy) * ow;
        if (stride == 1) {
          for (int ox = ox_lo; ox <= ox_hi; ++ox) dst[ox] = xrow[ox];
        } else {
          for (int ox = ox_lo; ox <= ox_hi; ++ox) dst[ox] = xrow[ox * stride];
        }
      }
    }
  }
}

// dx[ic] += scatter of the column-gradient rows of one input channel.
inline void col2im_acc_channel(const double* __restrict__ dcol, double* __restrict__ dx, int h,
                               int wd, int kh, int kw, int stride, int pad, int oh, int ow,
                               int ic) {
  double* __restrict__ dxc = dx + static_cast<size_t>(ic) * h * wd;
  size_t p = static_cast<size_t>(oh) * ow;
  int r = ic * kh * kw;
  for (int ky = 0; ky < kh; ++ky) {
    int oy_lo, oy_hi;
    conv_out_range(h, oh, ky, stride, pad, oy_lo, oy_hi);
    for (int kx = 0; kx < kw; ++kx, ++r) {
      int ox_lo, ox_hi;
      conv_out_range(wd, ow, kx, stride, pad, ox_lo, ox_hi);
      const double* __restrict__ crow = dcol + static_cast<size_t>(r) * p;
      for (int oy = oy_lo; oy <= oy_hi; ++oy) {
        double* __restrict__ dxrow =
            dxc + static_cast<size_t>(oy * stride - pad + ky) * wd - pad + kx;
        const double* __restrict__ src = crow + static_cast<size_t>(oy) * ow;
        if (stride == 1) {
          for (int ox = ox_lo; ox <= ox_hi; ++ox) dxrow[ox] += src[ox];
        } else {
          for (int ox = ox_lo; ox <= ox_hi; ++ox) dxrow[ox * stride] += src[ox];
        }
      }
    }
  }
}

// Returns false if the whole row equals the sentinel.
inline bool softmax_row(const double* __restrict__ x, double* __restrict__ y, int cols, double sentinel) {
  double m = x[0];
  for (int j = 1; j < cols; ++j) m = std::max(m, x[j]);
  if (m == sentinel) return false;
  double s = 0.0;
  for (int j = 0; j < cols; ++j) {
    double e = (x[j] == sentinel) ? 0.0 : std::exp(x[j] - m);
    y[j] = e;
    s += e;
  }
  double inv = 1.0 / s;
  for (int j = 0; j < cols; ++j) y[j] *= inv;
  return true;
}

}  // namespace maskseg::kernels::detail
