#include <cstring>
#include <vector>

#include "kernels_impl.hpp"
#include "maskseg/kernels.hpp"

// Reference implementations. Plain loops, no threading; the OpenMP variants
// must match these bitwise.
namespace maskseg::kernels {

using namespace detail;

void matmul_nn_serial(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* __restrict__ ci = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) ci[j] = 0.0;
    const double* __restrict__ ai = a + static_cast<size_t>(i) * k;
    for (int l = 0; l < k; ++l) {
      double av = ai[l];
      const double* __restrict__ bl = b + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

void matmul_nt_serial(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* __restrict__ ai = a + static_cast<size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const double* __restrict__ bj = b + static_cast<size_t>(j) * k;
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += ai[l] * bj[l];
      c[static_cast<size_t>(i) * n + j] = s;
    }
  }
}

void matmul_tn_serial(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* __restrict__ ci = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) ci[j] = 0.0;
    for (int l = 0; l < k; ++l) {
      double av = a[static_cast<size_t>(l) * m + i];
      const double* __restrict__ bl = b + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

void conv2d_forward_serial(const double* __restrict__ x, const double* __restrict__ w, const double* __restrict__ b, double* __restrict__ out,
                           int ci, int h, int wd, int co, int kh, int kw, int stride, int pad,
                           int oh, int ow) {
  int l = ci * kh * kw;
  size_t p = static_cast<size_t>(oh) * ow;
  std::vector<double> col(static_cast<size_t>(l) * p);
  for (int ic = 0; ic < ci; ++ic)
    im2col_channel(x, col.data(), h, wd, kh, kw, stride, pad, oh, ow, ic);
  matmul_nn_serial(w, col.data(), out, co, l, static_cast<int>(p));
  if (b)
    for (int c = 0; c < co; ++c) {
      double* __restrict__ oc = out + static_cast<size_t>(c) * p;
      for (size_t i = 0; i < p; ++i) oc[i] += b[c];
    }
}

void conv2d_backward_input_serial(const double* __restrict__ g, const double* __restrict__ w, double* __restrict__ dx,
                                  int ci, int h, int wd, int co, int kh, int kw, int stride,
                                  int pad, int oh, int ow) {
  int l = ci * kh * kw;
  size_t p = static_cast<size_t>(oh) * ow;
  std::vector<double> dcol(static_cast<size_t>(l) * p);
  matmul_tn_serial(w, g, dcol.data(), l, co, static_cast<int>(p));
  for (int ic = 0; ic < ci; ++ic)
    col2im_acc_channel(dcol.data(), dx, h, wd, kh, kw, stride, pad, oh, ow, ic);
}

void conv2d_backward_weight_serial(const double* __restrict__ g, const double* __restrict__ x, double* __restrict__ dw, double* __restrict__ db,
                                   int ci, int h, int wd, int co, int kh, int kw, int stride,
                                   int pad, int oh, int ow) {
  int l = ci * kh * kw;
  size_t p = static_cast<size_t>(oh) * ow;
  std::vector<double> col(static_cast<size_t>(l) * p);
  for (int ic = 0; ic < ci; ++ic)
    im2col_channel(x, col.data(), h, wd, kh, kw, stride, pad, oh, ow, ic);
  std::vector<double> tmp(static_cast<size_t>(co) * l);
  matmul_nt_serial(g, col.data(), tmp.data(), co, static_cast<int>(p), l);
  for (size_t i = 0; i < tmp.size(); ++i) dw[i] += tmp[i];
  if (db)
    for (int c = 0; c < co; ++c) {
      const double* __restrict__ gc = g + static_cast<size_t>(c) * p;
      double s = 0.0;
      for (size_t i = 0; i < p; ++i) s += gc[i];
      db[c] += s;
    }
}



void bilinear_resize_serial(const double* __restrict__ src, double* __restrict__ dst, int c, int h, int w, int oh, int ow) {
  if (oh == h && ow == w) {
    std::memcpy(dst, src, static_cast<size_t>(c) * h * w * sizeof(double));
    return;
  }
  for (int ch = 0; ch < c; ++ch) {
    const double* __restrict__ sc = src + static_cast<size_t>(ch) * h * w;
    double* dc = dst + static_cast<size_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      double py = src_coord(oy, h, oh);
      for (int ox = 0; ox < ow; ++ox)
        dc[oy * ow + ox] = bilinear_at(sc, h, w, src_coord(ox, w, ow), py);
    }
  }
}

bool softmax_rows_serial(const double* __restrict__ x, double* __restrict__ y, int rows, int cols, double sentinel) {
  bool ok = true;
  for (int r = 0; r < rows; ++r)
    if (!softmax_row(x + static_cast<size_t>(r) * cols, y + static_cast<size_t>(r) * cols, cols,
                     sentinel))
      ok = false;
  return ok;
}

void relu_serial(const double* __restrict__ x, double* __restrict__ y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void sigmoid_serial(const double* __restrict__ x, double* __restrict__ y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = sigmoid_scalar(x[i]);
}

void gelu_serial(const double* __restrict__ x, double* __restrict__ y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = gelu_scalar(x[i]);
}

void add_serial(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

void mul_serial(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

double sample_bilinear(const double* __restrict__ map, int h, int w, double px, double py) {
  return bilinear_at(map, h, w, px, py);
}

}  // namespace maskseg::kernels
