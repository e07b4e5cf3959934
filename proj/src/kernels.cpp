#include "maskseg/kernels.hpp"

#include <cstdlib>

namespace maskseg::kernels {

namespace {
bool initial_mode() {
  const char* e = std::getenv("MASKSEG_SERIAL");
  return !(e && e[0] == '1');
}
bool g_parallel = initial_mode();
}  // namespace

bool parallel_enabled() { return g_parallel; }
void set_parallel(bool on) { g_parallel = on; }

void matmul_nn(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n) {
  g_parallel ? matmul_nn_parallel(a, b, c, m, k, n) : matmul_nn_serial(a, b, c, m, k, n);
}
void matmul_nt(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n) {
  g_parallel ? matmul_nt_parallel(a, b, c, m, k, n) : matmul_nt_serial(a, b, c, m, k, n);
}
void matmul_tn(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n) {
  g_parallel ? matmul_tn_parallel(a, b, c, m, k, n) : matmul_tn_serial(a, b, c, m, k, n);
}

void conv2d_forward(const double* __restrict__ x, const double* __restrict__ w, const double* __restrict__ b, double* __restrict__ out, int ci,
                    int h, int wd, int co, int kh, int kw, int stride, int pad, int oh, int ow) {
  g_parallel
      ? conv2d_forward_parallel(x, w, b, out, ci, h, wd, co, kh, kw, stride, pad, oh, ow)
      : conv2d_forward_serial(x, w, b, out, ci, h, wd, co, kh, kw, stride, pad, oh, ow);
}

void conv2d_backward_input(const double* __restrict__ g, const double* __restrict__ w, double* __restrict__ dx, int ci, int h, int wd,
                           int co, int kh, int kw, int stride, int pad, int oh, int ow) {
  g_parallel
      ? conv2d_backward_input_parallel(g, w, dx, ci, h, wd, co, kh, kw, stride, pad, oh, ow)
      : conv2d_backward_input_serial(g, w, dx, ci, h, wd, co, kh, kw, stride, pad, oh, ow);
}

void conv2d_backward_weight(const double* __restrict__ g, const double* __restrict__ x, double* __restrict__ dw, double* __restrict__ db, int ci,
                            int h, int wd, int co, int kh, int kw, int stride, int pad, int oh,
                            int ow) {
  g_parallel
      ? conv2d_backward_weight_parallel(g, x, dw, db, ci, h, wd, co, kh, kw, stride, pad, oh, ow)
      : conv2d_backward_weight_serial(g, x, dw, db, ci, h, wd, co, kh, kw, stride, pad, oh, ow);
}

void bilinear_resize(const double* __restrict__ src, double* __restrict__ dst, int c, int h, int w, int oh, int ow) {
  g_parallel ? bilinear_resize_parallel(src, dst, c, h, w, oh, ow)
             : bilinear_resize_serial(src, dst, c, h, w, oh, ow);
}

bool softmax_rows(const double* __restrict__ x, double* __restrict__ y, int rows, int cols, double sentinel) {
  return g_parallel ? softmax_rows_parallel(x, y, rows, cols, sentinel)
                    : softmax_rows_serial(x, y, rows, cols, sentinel);
}

void relu(const double* __restrict__ x, double* __restrict__ y, size_t n) {
  g_parallel ? relu_parallel(x, y, n) : relu_serial(x, y, n);
}
void sigmoid(const double* __restrict__ x, double* __restrict__ y, size_t n) {
  g_parallel ? sigmoid_parallel(x, y, n) : sigmoid_serial(x, y, n);
}
void gelu(const double* __restrict__ x, double* __restrict__ y, size_t n) {
  g_parallel ? gelu_parallel(x, y, n) : gelu_serial(x, y, n);
}
void add(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ y, size_t n) {
  g_parallel ? add_parallel(a, b, y, n) : add_serial(a, b, y, n);
}
void mul(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ y, size_t n) {
  g_parallel ? mul_parallel(a, b, y, n) : mul_serial(a, b, y, n);
}

}  // namespace maskseg::kernels
