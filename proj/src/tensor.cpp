#include "maskseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "maskseg/kernels.hpp"

namespace maskseg {

namespace {

thread_local Tape* g_active_tape = nullptr;

void check_finite(const TensorImpl& t, const char* op) {
  for (double v : t.data)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
}

[[noreturn]] void shape_error(const char* op) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

double phi_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

struct PoolDims {
  int c, h, w, oh, ow;
};

PoolDims pool_dims(const Tensor& x, int k, int stride, const char* op) {
  if (x.rank() != 3) shape_error(op);
  PoolDims d;
  d.c = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  if (d.h < k || d.w < k) shape_error(op);
  d.oh = (d.h - k) / stride + 1;
  d.ow = (d.w - k) / stride + 1;
  return d;
}

}  // namespace

size_t numel(const Shape& s) {
  size_t n = 1;
  for (int e : s) {
    if (e < 0) throw std::invalid_argument("negative extent");
    n *= static_cast<size_t>(e);
  }
  return n;
}

Tensor wrap_impl(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

Tensor Tensor::zeros(Shape shape) {
  auto impl = std::make_shared<TensorImpl>();
  size_t n = numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(n, 0.0);
  return wrap_impl(std::move(impl));
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.impl()->data.begin(), t.impl()->data.end(), v);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  if (numel(shape) != data.size()) throw std::invalid_argument("from: data/shape mismatch");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return wrap_impl(std::move(impl));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::value() const {
  if (size() != 1) throw std::invalid_argument("value: tensor is not scalar");
  return impl_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (!impl_->grad.empty()) return impl_->grad;
  return std::vector<double>(impl_->size(), 0.0);
}

// ---------------- Tape ----------------

Tape::Tape() {
  if (g_active_tape) throw std::logic_error("Tape: another tape is already recording");
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

bool Tape::recording() { return g_active_tape != nullptr; }

void Tape::record(std::function<void()> fn) {
  if (g_active_tape) g_active_tape->records_.push_back(std::move(fn));
}

void Tape::backward(const Tensor& loss) {
  if (used_) throw std::logic_error("Tape: backward already ran on this recording");
  if (loss.size() != 1) throw std::invalid_argument("Tape: backward needs a scalar loss");
  used_ = true;
  auto impl = loss.impl();
  impl->ensure_grad();
  impl->grad[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
}

namespace {

// Common op tail: finiteness check plus backward registration.
void finish_op(Tensor& out, const char* name, bool any_grad, std::function<void()> backward) {
  check_finite(*out.impl(), name);
  if (Tape::recording() && any_grad) {
    out.set_requires_grad(true);
    Tape::record(std::move(backward));
  }
}

bool grad_wanted(const Tensor& t) { return t.requires_grad(); }

// Accumulate g (flat) into target grad, optionally scaled.
void axpy(std::vector<double>& dst, const std::vector<double>& src, double s = 1.0) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

}  // namespace


// ---------------- elementwise ----------------

namespace {

enum class BinKind { AB, AScalarB, ABScalar };

BinKind bin_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (same_shape(a, b)) return BinKind::AB;
  if (a.size() == 1) return BinKind::AScalarB;
  if (b.size() == 1) return BinKind::ABScalar;
  shape_error(op);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  BinKind k = bin_kind(a, b, "add");
  Tensor out = Tensor::zeros(k == BinKind::AScalarB ? b.shape() : a.shape());
  size_t n = out.size();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  if (k == BinKind::AB) kernels::add(pa, pb, po, n);
  else if (k == BinKind::ABScalar)
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[0];
  else
    for (size_t i = 0; i < n; ++i) po[i] = pa[0] + pb[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  finish_op(out, "add", grad_wanted(a) || grad_wanted(b), [ai, bi, oi] {
    if (oi->grad.empty()) return;
    if (ai->requires_grad) {
      ai->ensure_grad();
      if (ai->size() == 1)
        for (double g : oi->grad) ai->grad[0] += g;
      else
        axpy(ai->grad, oi->grad);
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      if (bi->size() == 1)
        for (double g : oi->grad) bi->grad[0] += g;
      else
        axpy(bi->grad, oi->grad);
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  BinKind k = bin_kind(a, b, "sub");
  Tensor out = Tensor::zeros(k == BinKind::AScalarB ? b.shape() : a.shape());
  size_t n = out.size();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  if (k == BinKind::AB)
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  else if (k == BinKind::ABScalar)
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[0];
  else
    for (size_t i = 0; i < n; ++i) po[i] = pa[0] - pb[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  finish_op(out, "sub", grad_wanted(a) || grad_wanted(b), [ai, bi, oi] {
    if (oi->grad.empty()) return;
    if (ai->requires_grad) {
      ai->ensure_grad();
      if (ai->size() == 1)
        for (double g : oi->grad) ai->grad[0] += g;
      else
        axpy(ai->grad, oi->grad);
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      if (bi->size() == 1)
        for (double g : oi->grad) bi->grad[0] -= g;
      else
        axpy(bi->grad, oi->grad, -1.0);
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  BinKind k = bin_kind(a, b, "mul");
  Tensor out = Tensor::zeros(k == BinKind::AScalarB ? b.shape() : a.shape());
  size_t n = out.size();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  if (k == BinKind::AB) kernels::mul(pa, pb, po, n);
  else if (k == BinKind::ABScalar)
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[0];
  else
    for (size_t i = 0; i < n; ++i) po[i] = pa[0] * pb[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  finish_op(out, "mul", grad_wanted(a) || grad_wanted(b), [ai, bi, oi] {
    if (oi->grad.empty()) return;
    const auto& g = oi->grad;
    if (ai->requires_grad) {
      ai->ensure_grad();
      if (ai->size() == 1) {
        double s = 0.0;
        for (size_t i = 0; i < g.size(); ++i) s += g[i] * bi->data[i];
        ai->grad[0] += s;
      } else if (bi->size() == 1) {
        for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bi->data[0];
      } else {
        for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bi->data[i];
      }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      if (bi->size() == 1) {
        double s = 0.0;
        for (size_t i = 0; i < g.size(); ++i) s += g[i] * ai->data[i];
        bi->grad[0] += s;
      } else if (ai->size() == 1) {
        for (size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * ai->data[0];
      } else {
        for (size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * ai->data[i];
      }
    }
  });
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  BinKind k = bin_kind(a, b, "div");
  Tensor out = Tensor::zeros(k == BinKind::AScalarB ? b.shape() : a.shape());
  size_t n = out.size();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  if (k == BinKind::AB)
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  else if (k == BinKind::ABScalar)
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[0];
  else
    for (size_t i = 0; i < n; ++i) po[i] = pa[0] / pb[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  finish_op(out, "div", grad_wanted(a) || grad_wanted(b), [ai, bi, oi] {
    if (oi->grad.empty()) return;
    const auto& g = oi->grad;
    auto bval = [&](size_t i) { return bi->size() == 1 ? bi->data[0] : bi->data[i]; };
    auto aval = [&](size_t i) { return ai->size() == 1 ? ai->data[0] : ai->data[i]; };
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) {
        double d = g[i] / bval(i);
        if (ai->size() == 1) ai->grad[0] += d;
        else ai->grad[i] += d;
      }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) {
        double bv = bval(i);
        double d = -g[i] * aval(i) / (bv * bv);
        if (bi->size() == 1) bi->grad[0] += d;
        else bi->grad[i] += d;
      }
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * s;
  auto ai = a.impl(), oi = out.impl();
  finish_op(out, "scale", grad_wanted(a), [ai, oi, s] {
    if (oi->grad.empty() || !ai->requires_grad) return;
    ai->ensure_grad();
    axpy(ai->grad, oi->grad, s);
  });
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (size_t i = 0; i < a.size(); ++i) po[i] = pa[i] + s;
  auto ai = a.impl(), oi = out.impl();
  finish_op(out, "add_scalar", grad_wanted(a), [ai, oi] {
    if (oi->grad.empty() || !ai->requires_grad) return;
    ai->ensure_grad();
    axpy(ai->grad, oi->grad);
  });
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  kernels::relu(x.data(), out.data(), x.size());
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "relu", grad_wanted(x), [xi, oi] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < oi->grad.size(); ++i)
      if (xi->data[i] > 0.0) xi->grad[i] += oi->grad[i];
  });
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  kernels::gelu(x.data(), out.data(), x.size());
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "gelu", grad_wanted(x), [xi, oi] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < oi->grad.size(); ++i) {
      double v = xi->data[i];
      double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      xi->grad[i] += oi->grad[i] * (cdf + v * phi_pdf(v));
    }
  });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  kernels::sigmoid(x.data(), out.data(), x.size());
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "sigmoid", grad_wanted(x), [xi, oi] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < oi->grad.size(); ++i) {
      double y = oi->data[i];
      xi->grad[i] += oi->grad[i] * y * (1.0 - y);
    }
  });
  return out;
}

// ---------------- linear algebra ----------------

namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) shape_error(op);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) shape_error("matmul");
  Tensor out = Tensor::zeros({m, n});
  kernels::matmul_nn(a.data(), b.data(), out.data(), m, k, n);
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  finish_op(out, "matmul", grad_wanted(a) || grad_wanted(b), [ai, bi, oi, m, k, n] {
    if (oi->grad.empty()) return;
    if (ai->requires_grad) {
      ai->ensure_grad();
      std::vector<double> tmp(static_cast<size_t>(m) * k);
      kernels::matmul_nt(oi->grad.data(), bi->data.data(), tmp.data(), m, n, k);
      axpy(ai->grad, tmp);
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      std::vector<double> tmp(static_cast<size_t>(k) * n);
      kernels::matmul_tn(ai->data.data(), oi->grad.data(), tmp.data(), k, m, n);
      axpy(bi->grad, tmp);
    }
  });
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) shape_error("matmul_nt");
  Tensor out = Tensor::zeros({m, n});
  kernels::matmul_nt(a.data(), b.data(), out.data(), m, k, n);
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  finish_op(out, "matmul_nt", grad_wanted(a) || grad_wanted(b), [ai, bi, oi, m, k, n] {
    if (oi->grad.empty()) return;
    if (ai->requires_grad) {
      ai->ensure_grad();
      std::vector<double> tmp(static_cast<size_t>(m) * k);
      kernels::matmul_nn(oi->grad.data(), bi->data.data(), tmp.data(), m, n, k);
      axpy(ai->grad, tmp);
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      std::vector<double> tmp(static_cast<size_t>(n) * k);
      kernels::matmul_tn(oi->grad.data(), ai->data.data(), tmp.data(), n, m, k);
      axpy(bi->grad, tmp);
    }
  });
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_tn");
  require_2d(b, "matmul_tn");
  int k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) shape_error("matmul_tn");
  Tensor out = Tensor::zeros({m, n});
  kernels::matmul_tn(a.data(), b.data(), out.data(), m, k, n);
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  finish_op(out, "matmul_tn", grad_wanted(a) || grad_wanted(b), [ai, bi, oi, m, k, n] {
    if (oi->grad.empty()) return;
    if (ai->requires_grad) {
      ai->ensure_grad();
      std::vector<double> tmp(static_cast<size_t>(k) * m);
      kernels::matmul_nt(bi->data.data(), oi->grad.data(), tmp.data(), k, n, m);
      axpy(ai->grad, tmp);
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      std::vector<double> tmp(static_cast<size_t>(k) * n);
      kernels::matmul_nn(ai->data.data(), oi->grad.data(), tmp.data(), k, m, n);
      axpy(bi->grad, tmp);
    }
  });
  return out;
}

Tensor transpose2d(const Tensor& x) {
  require_2d(x, "transpose2d");
  int r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({c, r});
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) po[static_cast<size_t>(j) * r + i] = px[static_cast<size_t>(i) * c + j];
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "transpose2d", grad_wanted(x), [xi, oi, r, c] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        xi->grad[static_cast<size_t>(i) * c + j] += oi->grad[static_cast<size_t>(j) * r + i];
  });
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_2d(x, "add_rowvec");
  if (v.rank() != 1 && !(v.rank() == 2 && v.dim(0) == 1)) shape_error("add_rowvec");
  int r = x.dim(0), c = x.dim(1);
  if (static_cast<int>(v.size()) != c) shape_error("add_rowvec");
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  const double* pv = v.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) po[static_cast<size_t>(i) * c + j] = px[static_cast<size_t>(i) * c + j] + pv[j];
  auto xi = x.impl(), vi = v.impl(), oi = out.impl();
  finish_op(out, "add_rowvec", grad_wanted(x) || grad_wanted(v), [xi, vi, oi, r, c] {
    if (oi->grad.empty()) return;
    if (xi->requires_grad) {
      xi->ensure_grad();
      axpy(xi->grad, oi->grad);
    }
    if (vi->requires_grad) {
      vi->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) vi->grad[j] += oi->grad[static_cast<size_t>(i) * c + j];
    }
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------- shape ----------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape");
  Tensor out = Tensor::from(std::move(shape), x.vec());
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "reshape", grad_wanted(x), [xi, oi] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    axpy(xi->grad, oi->grad);
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  int r = parts[0].dim(0);
  int total = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.dim(0) != r) shape_error("concat_cols");
    total += p.dim(1);
    any_grad = any_grad || p.requires_grad();
  }
  Tensor out = Tensor::zeros({r, total});
  double* po = out.data();
  int off = 0;
  for (const auto& p : parts) {
    int c = p.dim(1);
    const double* pp = p.data();
    for (int i = 0; i < r; ++i)
      std::memcpy(po + static_cast<size_t>(i) * total + off, pp + static_cast<size_t>(i) * c,
                  static_cast<size_t>(c) * sizeof(double));
    off += c;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  auto oi = out.impl();
  finish_op(out, "concat_cols", any_grad, [impls, oi, r, total] {
    if (oi->grad.empty()) return;
    int off2 = 0;
    for (auto& pi : impls) {
      int c = pi->shape[1];
      if (pi->requires_grad) {
        pi->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            pi->grad[static_cast<size_t>(i) * c + j] += oi->grad[static_cast<size_t>(i) * total + off2 + j];
      }
      off2 += c;
    }
  });
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int len) {
  require_2d(x, "slice_cols");
  int r = x.dim(0), c = x.dim(1);
  if (start < 0 || len < 1 || start + len > c) shape_error("slice_cols");
  Tensor out = Tensor::zeros({r, len});
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i)
    std::memcpy(po + static_cast<size_t>(i) * len, px + static_cast<size_t>(i) * c + start,
                static_cast<size_t>(len) * sizeof(double));
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "slice_cols", grad_wanted(x), [xi, oi, r, c, start, len] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < len; ++j)
        xi->grad[static_cast<size_t>(i) * c + start + j] += oi->grad[static_cast<size_t>(i) * len + j];
  });
  return out;
}

Tensor slice_rows(const Tensor& x, int start, int len) {
  require_2d(x, "slice_rows");
  int r = x.dim(0), c = x.dim(1);
  if (start < 0 || len < 1 || start + len > r) shape_error("slice_rows");
  Tensor out = Tensor::zeros({len, c});
  std::memcpy(out.data(), x.data() + static_cast<size_t>(start) * c,
              static_cast<size_t>(len) * c * sizeof(double));
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "slice_rows", grad_wanted(x), [xi, oi, c, start, len] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int i = 0; i < len; ++i)
      for (int j = 0; j < c; ++j)
        xi->grad[static_cast<size_t>(start + i) * c + j] += oi->grad[static_cast<size_t>(i) * c + j];
  });
  return out;
}

// ---------------- softmax / layer norm ----------------

Tensor softmax_last(const Tensor& x) {
  if (x.rank() < 1) shape_error("softmax_last");
  int cols = x.dim(x.rank() - 1);
  int rows = static_cast<int>(x.size()) / cols;
  Tensor out = Tensor::zeros(x.shape());
  if (!kernels::softmax_rows(x.data(), out.data(), rows, cols, kMaskSentinel))
    throw std::runtime_error("softmax_last: a slice is entirely masked");
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "softmax_last", grad_wanted(x), [xi, oi, rows, cols] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int r = 0; r < rows; ++r) {
      const double* y = oi->data.data() + static_cast<size_t>(r) * cols;
      const double* g = oi->grad.data() + static_cast<size_t>(r) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += y[j] * g[j];
      double* dx = xi->grad.data() + static_cast<size_t>(r) * cols;
      for (int j = 0; j < cols; ++j) dx[j] += y[j] * (g[j] - dot);
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1) shape_error("layer_norm");
  int c = x.dim(x.rank() - 1);
  int rows = static_cast<int>(x.size()) / c;
  if (static_cast<int>(gain.size()) != c || static_cast<int>(bias.size()) != c)
    shape_error("layer_norm");
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* po = out.data();
  for (int r = 0; r < rows; ++r) {
    const double* row = px + static_cast<size_t>(r) * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += row[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= c;
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int j = 0; j < c; ++j) {
      double xh = (row[j] - mean) * is;
      (*xhat)[static_cast<size_t>(r) * c + j] = xh;
      po[static_cast<size_t>(r) * c + j] = xh * pg[j] + pb[j];
    }
  }
  auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
  finish_op(out, "layer_norm",
            grad_wanted(x) || grad_wanted(gain) || grad_wanted(bias),
            [xi, gi, bi, oi, xhat, inv_std, rows, c] {
              if (oi->grad.empty()) return;
              if (gi->requires_grad) gi->ensure_grad();
              if (bi->requires_grad) bi->ensure_grad();
              if (xi->requires_grad) xi->ensure_grad();
              for (int r = 0; r < rows; ++r) {
                const double* g = oi->grad.data() + static_cast<size_t>(r) * c;
                const double* xh = xhat->data() + static_cast<size_t>(r) * c;
                if (gi->requires_grad)
                  for (int j = 0; j < c; ++j) gi->grad[j] += g[j] * xh[j];
                if (bi->requires_grad)
                  for (int j = 0; j < c; ++j) bi->grad[j] += g[j];
                if (xi->requires_grad) {
                  double m1 = 0.0, m2 = 0.0;
                  for (int j = 0; j < c; ++j) {
                    double dxh = g[j] * gi->data[j];
                    m1 += dxh;
                    m2 += dxh * xh[j];
                  }
                  m1 /= c;
                  m2 /= c;
                  double is = (*inv_std)[r];
                  double* dx = xi->grad.data() + static_cast<size_t>(r) * c;
                  for (int j = 0; j < c; ++j) {
                    double dxh = g[j] * gi->data[j];
                    dx[j] += is * (dxh - m1 - xh[j] * m2);
                  }
                }
              }
            });
  return out;
}

// ---------------- spatial ----------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4) shape_error("conv2d");
  int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci) shape_error("conv2d");
  bool has_bias = b.defined();
  if (has_bias && static_cast<int>(b.size()) != co) shape_error("conv2d");
  int oh = (h + 2 * pad - kh) / stride + 1;
  int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) shape_error("conv2d");
  Tensor out = Tensor::zeros({co, oh, ow});
  kernels::conv2d_forward(x.data(), w.data(), has_bias ? b.data() : nullptr, out.data(), ci, h,
                          wd, co, kh, kw, stride, pad, oh, ow);
  auto xi = x.impl(), wi = w.impl(), oi = out.impl();
  auto bimpl = has_bias ? b.impl() : nullptr;
  bool any = grad_wanted(x) || grad_wanted(w) || (has_bias && grad_wanted(b));
  finish_op(out, "conv2d", any, [xi, wi, bimpl, oi, ci, h, wd, co, kh, kw, stride, pad, oh, ow] {
    if (oi->grad.empty()) return;
    if (xi->requires_grad) {
      xi->ensure_grad();
      kernels::conv2d_backward_input(oi->grad.data(), wi->data.data(), xi->grad.data(), ci, h,
                                     wd, co, kh, kw, stride, pad, oh, ow);
    }
    if (wi->requires_grad || (bimpl && bimpl->requires_grad)) {
      wi->ensure_grad();
      double* db = nullptr;
      if (bimpl && bimpl->requires_grad) {
        bimpl->ensure_grad();
        db = bimpl->grad.data();
      }
      kernels::conv2d_backward_weight(oi->grad.data(), xi->data.data(), wi->grad.data(), db, ci,
                                      h, wd, co, kh, kw, stride, pad, oh, ow);
    }
  });
  return out;
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  if (x.rank() != 3) shape_error("bilinear_resize");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < 1 || w < 1 || out_h < 1 || out_w < 1)
    throw std::invalid_argument("bilinear_resize: zero-sized map");
  Tensor out = Tensor::zeros({c, out_h, out_w});
  kernels::bilinear_resize(x.data(), out.data(), c, h, w, out_h, out_w);
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "bilinear_resize", grad_wanted(x), [xi, oi, c, h, w, out_h, out_w] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int ch = 0; ch < c; ++ch) {
      const double* g = oi->grad.data() + static_cast<size_t>(ch) * out_h * out_w;
      double* dx = xi->grad.data() + static_cast<size_t>(ch) * h * w;
      for (int oy = 0; oy < out_h; ++oy) {
        double py = (oy + 0.5) * static_cast<double>(h) / out_h - 0.5;
        int y0 = static_cast<int>(std::floor(py));
        double fy = py - y0;
        int iy0 = std::clamp(y0, 0, h - 1), iy1 = std::clamp(y0 + 1, 0, h - 1);
        for (int ox = 0; ox < out_w; ++ox) {
          double px = (ox + 0.5) * static_cast<double>(w) / out_w - 0.5;
          int x0 = static_cast<int>(std::floor(px));
          double fx = px - x0;
          int ix0 = std::clamp(x0, 0, w - 1), ix1 = std::clamp(x0 + 1, 0, w - 1);
          double gv = g[oy * out_w + ox];
          dx[iy0 * w + ix0] += gv * (1.0 - fy) * (1.0 - fx);
          dx[iy0 * w + ix1] += gv * (1.0 - fy) * fx;
          dx[iy1 * w + ix0] += gv * fy * (1.0 - fx);
          dx[iy1 * w + ix1] += gv * fy * fx;
        }
      }
    }
  });
  return out;
}

Tensor max_pool2d(const Tensor& x, int k, int stride) {
  PoolDims d = pool_dims(x, k, stride, "max_pool2d");
  Tensor out = Tensor::zeros({d.c, d.oh, d.ow});
  auto arg = std::make_shared<std::vector<int>>(out.size());
  const double* px = x.data();
  double* po = out.data();
  for (int c = 0; c < d.c; ++c) {
    const double* xc = px + static_cast<size_t>(c) * d.h * d.w;
    for (int oy = 0; oy < d.oh; ++oy)
      for (int ox = 0; ox < d.ow; ++ox) {
        int best = (oy * stride) * d.w + ox * stride;
        double bv = xc[best];
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            int idx = (oy * stride + ky) * d.w + ox * stride + kx;
            if (xc[idx] > bv) {
              bv = xc[idx];
              best = idx;
            }
          }
        size_t o = (static_cast<size_t>(c) * d.oh + oy) * d.ow + ox;
        po[o] = bv;
        (*arg)[o] = best;
      }
  }
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "max_pool2d", grad_wanted(x), [xi, oi, arg, d] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    size_t per = static_cast<size_t>(d.oh) * d.ow;
    for (int c = 0; c < d.c; ++c)
      for (size_t i = 0; i < per; ++i) {
        size_t o = static_cast<size_t>(c) * per + i;
        xi->grad[static_cast<size_t>(c) * d.h * d.w + (*arg)[o]] += oi->grad[o];
      }
  });
  return out;
}

Tensor avg_pool2d(const Tensor& x, int k, int stride) {
  PoolDims d = pool_dims(x, k, stride, "avg_pool2d");
  Tensor out = Tensor::zeros({d.c, d.oh, d.ow});
  const double* px = x.data();
  double* po = out.data();
  double inv = 1.0 / (k * k);
  for (int c = 0; c < d.c; ++c) {
    const double* xc = px + static_cast<size_t>(c) * d.h * d.w;
    for (int oy = 0; oy < d.oh; ++oy)
      for (int ox = 0; ox < d.ow; ++ox) {
        double s = 0.0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) s += xc[(oy * stride + ky) * d.w + ox * stride + kx];
        po[(static_cast<size_t>(c) * d.oh + oy) * d.ow + ox] = s * inv;
      }
  }
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "avg_pool2d", grad_wanted(x), [xi, oi, d, k, stride, inv] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (int c = 0; c < d.c; ++c)
      for (int oy = 0; oy < d.oh; ++oy)
        for (int ox = 0; ox < d.ow; ++ox) {
          double g = oi->grad[(static_cast<size_t>(c) * d.oh + oy) * d.ow + ox] * inv;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx)
              xi->grad[static_cast<size_t>(c) * d.h * d.w + (oy * stride + ky) * d.w + ox * stride + kx] += g;
        }
  });
  return out;
}

Tensor sample_points(const Tensor& map, const std::vector<double>& coords) {
  if (map.rank() != 2) shape_error("sample_points");
  if (coords.size() % 2 != 0) throw std::invalid_argument("sample_points: odd coord list");
  int h = map.dim(0), w = map.dim(1);
  int n = static_cast<int>(coords.size() / 2);
  Tensor out = Tensor::zeros({n});
  double* po = out.data();
  const double* pm = map.data();
  for (int i = 0; i < n; ++i) {
    double px = coords[2 * i] * w - 0.5;
    double py = coords[2 * i + 1] * h - 0.5;
    po[i] = kernels::sample_bilinear(pm, h, w, px, py);
  }
  auto mi = map.impl(), oi = out.impl();
  auto saved = std::make_shared<std::vector<double>>(coords);
  finish_op(out, "sample_points", grad_wanted(map), [mi, oi, saved, h, w, n] {
    if (oi->grad.empty() || !mi->requires_grad) return;
    mi->ensure_grad();
    for (int i = 0; i < n; ++i) {
      double px = (*saved)[2 * i] * w - 0.5;
      double py = (*saved)[2 * i + 1] * h - 0.5;
      int x0 = static_cast<int>(std::floor(px));
      int y0 = static_cast<int>(std::floor(py));
      double fx = px - x0, fy = py - y0;
      int ix0 = std::clamp(x0, 0, w - 1), ix1 = std::clamp(x0 + 1, 0, w - 1);
      int iy0 = std::clamp(y0, 0, h - 1), iy1 = std::clamp(y0 + 1, 0, h - 1);
      double g = oi->grad[i];
      mi->grad[iy0 * w + ix0] += g * (1.0 - fy) * (1.0 - fx);
      mi->grad[iy0 * w + ix1] += g * (1.0 - fy) * fx;
      mi->grad[iy1 * w + ix0] += g * fy * (1.0 - fx);
      mi->grad[iy1 * w + ix1] += g * fy * fx;
    }
  });
  return out;
}

// ---------------- reductions / losses ----------------

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) s += x.data()[i];
  Tensor out = Tensor::scalar(s);
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "sum_all", grad_wanted(x), [xi, oi] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (auto& g : xi->grad) g += oi->grad[0];
  });
  return out;
}

Tensor mean_all(const Tensor& x) {
  if (x.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) s += x.data()[i];
  double inv = 1.0 / static_cast<double>(x.size());
  Tensor out = Tensor::scalar(s * inv);
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "mean_all", grad_wanted(x), [xi, oi, inv] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (auto& g : xi->grad) g += oi->grad[0] * inv;
  });
  return out;
}

Tensor bce_with_logits_mean(const Tensor& pred_logits, const Tensor& target) {
  if (!same_shape(pred_logits, target)) shape_error("bce_with_logits_mean");
  size_t n = pred_logits.size();
  if (n == 0) throw std::invalid_argument("bce_with_logits_mean: empty input");
  const double* p = pred_logits.data();
  const double* t = target.data();
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += std::max(p[i], 0.0) - p[i] * t[i] + softplus(-std::abs(p[i]));
  double inv = 1.0 / static_cast<double>(n);
  Tensor out = Tensor::scalar(s * inv);
  auto pi = pred_logits.impl(), ti = target.impl(), oi = out.impl();
  finish_op(out, "bce_with_logits_mean", grad_wanted(pred_logits), [pi, ti, oi, inv] {
    if (oi->grad.empty() || !pi->requires_grad) return;
    pi->ensure_grad();
    double g = oi->grad[0] * inv;
    for (size_t i = 0; i < pi->size(); ++i)
      pi->grad[i] += g * (sigmoid_scalar(pi->data[i]) - ti->data[i]);
  });
  return out;
}

Tensor dice_from_logits(const Tensor& pred_logits, const Tensor& target) {
  if (!same_shape(pred_logits, target)) shape_error("dice_from_logits");
  size_t n = pred_logits.size();
  if (n == 0) throw std::invalid_argument("dice_from_logits: empty input");
  const double* p = pred_logits.data();
  const double* t = target.data();
  auto sig = std::make_shared<std::vector<double>>(n);
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double s = sigmoid_scalar(p[i]);
    (*sig)[i] = s;
    inter += s * t[i];
    sp += s;
    st += t[i];
  }
  double num = 2.0 * inter + 1.0;
  double den = sp + st + 1.0;
  Tensor out = Tensor::scalar(1.0 - num / den);
  auto pi = pred_logits.impl(), ti = target.impl(), oi = out.impl();
  finish_op(out, "dice_from_logits", grad_wanted(pred_logits), [pi, ti, oi, sig, num, den] {
    if (oi->grad.empty() || !pi->requires_grad) return;
    pi->ensure_grad();
    double g = oi->grad[0];
    double den2 = den * den;
    for (size_t i = 0; i < pi->size(); ++i) {
      double s = (*sig)[i];
      double dds = (2.0 * ti->data[i] * den - num) / den2;  // d(num/den)/ds_i
      pi->grad[i] += g * (-dds) * s * (1.0 - s);
    }
  });
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<double>& weights, double divisor) {
  if (logits.rank() != 2) shape_error("cross_entropy_rows");
  int r = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(targets.size()) != r || static_cast<int>(weights.size()) != r)
    shape_error("cross_entropy_rows");
  if (divisor <= 0.0) throw std::invalid_argument("cross_entropy_rows: divisor must be > 0");
  const double* p = logits.data();
  auto probs = std::make_shared<std::vector<double>>(logits.size());
  double total = 0.0;
  for (int i = 0; i < r; ++i) {
    if (targets[i] < 0 || targets[i] >= c)
      throw std::invalid_argument("cross_entropy_rows: target out of range");
    const double* row = p + static_cast<size_t>(i) * c;
    double m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += std::exp(row[j] - m);
    double lse = m + std::log(s);
    for (int j = 0; j < c; ++j) (*probs)[static_cast<size_t>(i) * c + j] = std::exp(row[j] - m) / s;
    total += weights[i] * (lse - row[targets[i]]);
  }
  Tensor out = Tensor::scalar(total / divisor);
  auto li = logits.impl(), oi = out.impl();
  auto tgt = std::make_shared<std::vector<int>>(targets);
  auto wts = std::make_shared<std::vector<double>>(weights);
  finish_op(out, "cross_entropy_rows", grad_wanted(logits), [li, oi, probs, tgt, wts, divisor, r, c] {
    if (oi->grad.empty() || !li->requires_grad) return;
    li->ensure_grad();
    double g = oi->grad[0] / divisor;
    for (int i = 0; i < r; ++i) {
      double w = (*wts)[i] * g;
      for (int j = 0; j < c; ++j) {
        double d = (*probs)[static_cast<size_t>(i) * c + j] - (j == (*tgt)[i] ? 1.0 : 0.0);
        li->grad[static_cast<size_t>(i) * c + j] += w * d;
      }
    }
  });
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (p == 0.0) return x;
  auto mask = std::make_shared<std::vector<double>>(x.size());
  double keep = 1.0 / (1.0 - p);
  for (size_t i = 0; i < x.size(); ++i) (*mask)[i] = rng.uniform() >= p ? keep : 0.0;
  Tensor out = Tensor::zeros(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * (*mask)[i];
  auto xi = x.impl(), oi = out.impl();
  finish_op(out, "dropout", grad_wanted(x), [xi, oi, mask] {
    if (oi->grad.empty() || !xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < xi->size(); ++i) xi->grad[i] += oi->grad[i] * (*mask)[i];
  });
  return out;
}

// ---------------- gradient checking ----------------

namespace {

double grad_check_impl(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps,
                       const std::vector<size_t>& coords) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be > 0");
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor y = f(x);
    if (y.size() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
    tape.backward(y);
    analytic = x.grad();
  }
  x.zero_grad();
  double max_rel = 0.0;
  double* px = x.data();
  for (size_t i : coords) {
    double saved = px[i];
    px[i] = saved + eps;
    double fp = f(x).value();
    px[i] = saved - eps;
    double fm = f(x).value();
    px[i] = saved;
    double fd = (fp - fm) / (2.0 * eps);
    double denom = std::max({1.0, std::abs(analytic[i]), std::abs(fd)});
    max_rel = std::max(max_rel, std::abs(analytic[i] - fd) / denom);
  }
  return max_rel;
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
  std::vector<size_t> coords(x.size());
  for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  return grad_check_impl(f, std::move(x), eps, coords);
}

double grad_check_sampled(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps,
                          int max_coords, Rng& rng) {
  size_t n = x.size();
  std::vector<size_t> coords;
  if (static_cast<size_t>(max_coords) >= n) {
    coords.resize(n);
    for (size_t i = 0; i < n; ++i) coords[i] = i;
  } else {
    for (int i = 0; i < max_coords; ++i) coords.push_back(rng.next_u64() % n);
  }
  return grad_check_impl(f, std::move(x), eps, coords);
}

}  // namespace maskseg
