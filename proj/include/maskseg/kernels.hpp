#pragma once
#include <cstddef>

// Raw dense f64 inner loops. Every kernel comes in a serial reference form
// and an OpenMP form that partitions independent output elements across
// threads; per-element summation order is identical in both, so results are
// bitwise equal regardless of thread count. The unsuffixed entry points
// dispatch on the global mode (default: parallel; MASKSEG_SERIAL=1 in the
// environment or set_parallel(false) forces the reference path).
namespace maskseg::kernels {

bool parallel_enabled();
void set_parallel(bool on);

// c[m x n] = a[m x k] * b[k x n]
void matmul_nn_serial(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n);
void matmul_nn_parallel(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n);
void matmul_nn(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n);

// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt_serial(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n);
void matmul_nt_parallel(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n);
void matmul_nt(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n);

// c[m x n] = a[k x m]^T * b[k x n]
void matmul_tn_serial(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n);
void matmul_tn_parallel(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n);
void matmul_tn(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n);

// out[co x oh x ow] = conv(x[ci x h x w], w[co x ci x kh x kw]) + b[co]
// b may be null.
void conv2d_forward_serial(const double* __restrict__ x, const double* __restrict__ w, const double* __restrict__ b, double* __restrict__ out,
                           int ci, int h, int wd, int co, int kh, int kw, int stride, int pad,
                           int oh, int ow);
void conv2d_forward_parallel(const double* __restrict__ x, const double* __restrict__ w, const double* __restrict__ b, double* __restrict__ out,
                             int ci, int h, int wd, int co, int kh, int kw, int stride, int pad,
                             int oh, int ow);
void conv2d_forward(const double* __restrict__ x, const double* __restrict__ w, const double* __restrict__ b, double* __restrict__ out,
                    int ci, int h, int wd, int co, int kh, int kw, int stride, int pad,
                    int oh, int ow);

// dx[ci x h x w] += gather of g[co x oh x ow] against w; pure gather, no races.
void conv2d_backward_input_serial(const double* __restrict__ g, const double* __restrict__ w, double* __restrict__ dx,
                                  int ci, int h, int wd, int co, int kh, int kw, int stride,
                                  int pad, int oh, int ow);
void conv2d_backward_input_parallel(const double* __restrict__ g, const double* __restrict__ w, double* __restrict__ dx,
                                    int ci, int h, int wd, int co, int kh, int kw, int stride,
                                    int pad, int oh, int ow);
void conv2d_backward_input(const double* __restrict__ g, const double* __restrict__ w, double* __restrict__ dx,
                           int ci, int h, int wd, int co, int kh, int kw, int stride,
                           int pad, int oh, int ow);

// dw[co x ci x kh x kw] += x ⋆ g; db[co] += sum(g[co]); db may be null.
void conv2d_backward_weight_serial(const double* __restrict__ g, const double* __restrict__ x, double* __restrict__ dw, double* __restrict__ db,
                                   int ci, int h, int wd, int co, int kh, int kw, int stride,
                                   int pad, int oh, int ow);
void conv2d_backward_weight_parallel(const double* __restrict__ g, const double* __restrict__ x, double* __restrict__ dw, double* __restrict__ db,
                                     int ci, int h, int wd, int co, int kh, int kw, int stride,
                                     int pad, int oh, int ow);
void conv2d_backward_weight(const double* __restrict__ g, const double* __restrict__ x, double* __restrict__ dw, double* __restrict__ db,
                            int ci, int h, int wd, int co, int kh, int kw, int stride,
                            int pad, int oh, int ow);

// Channelwise bilinear resize, align-corners-false. Exact copy when sizes match.
void bilinear_resize_serial(const double* __restrict__ src, double* __restrict__ dst, int c, int h, int w, int oh, int ow);
void bilinear_resize_parallel(const double* __restrict__ src, double* __restrict__ dst, int c, int h, int w, int oh, int ow);
void bilinear_resize(const double* __restrict__ src, double* __restrict__ dst, int c, int h, int w, int oh, int ow);

// Row softmax with max subtraction. Entries equal to the mask sentinel map to
// exactly 0. Returns false if some row is entirely sentinel (output undefined
// there); callers turn that into an error.
bool softmax_rows_serial(const double* __restrict__ x, double* __restrict__ y, int rows, int cols, double sentinel);
bool softmax_rows_parallel(const double* __restrict__ x, double* __restrict__ y, int rows, int cols, double sentinel);
bool softmax_rows(const double* __restrict__ x, double* __restrict__ y, int rows, int cols, double sentinel);

// Elementwise maps.
void relu_serial(const double* __restrict__ x, double* __restrict__ y, size_t n);
void relu_parallel(const double* __restrict__ x, double* __restrict__ y, size_t n);
void relu(const double* __restrict__ x, double* __restrict__ y, size_t n);
void sigmoid_serial(const double* __restrict__ x, double* __restrict__ y, size_t n);
void sigmoid_parallel(const double* __restrict__ x, double* __restrict__ y, size_t n);
void sigmoid(const double* __restrict__ x, double* __restrict__ y, size_t n);
void gelu_serial(const double* __restrict__ x, double* __restrict__ y, size_t n);
void gelu_parallel(const double* __restrict__ x, double* __restrict__ y, size_t n);
void gelu(const double* __restrict__ x, double* __restrict__ y, size_t n);
void add_serial(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ y, size_t n);
void add_parallel(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ y, size_t n);
void add(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ y, size_t n);
void mul_serial(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ y, size_t n);
void mul_parallel(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ y, size_t n);
void mul(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ y, size_t n);

// Bilinear point read at continuous pixel coords (px, py), indices clamped.
double sample_bilinear(const double* __restrict__ map, int h, int w, double px, double py);

}  // namespace maskseg::kernels
