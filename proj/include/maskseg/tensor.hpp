#pragma once
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "maskseg/rng.hpp"

namespace maskseg {

// Additive attention-mask sentinel. The most-negative *finite* double stands
// in for -inf so that masked softmax scores never produce NaN; softmax maps
// entries equal to the sentinel to exactly 0.
inline constexpr double kMaskSentinel = -std::numeric_limits<double>::max();

using Shape = std::vector<int>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  size_t size() const { return data.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// Dense row-major f64 tensor. Value-semantics handle onto a shared buffer;
// ops always allocate fresh outputs, so aliasing never bites.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  int dim(size_t i) const { return impl_->shape[i]; }
  size_t rank() const { return impl_->shape.size(); }
  size_t size() const { return impl_->size(); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }
  double value() const;  // scalar tensors only

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }
  // Gradient accumulated by the last backward passes; zeros if none reached it.
  std::vector<double> grad() const;
  void zero_grad() {
    if (impl_) impl_->grad.clear();
  }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor wrap_impl(std::shared_ptr<TensorImpl>);
};

Tensor wrap_impl(std::shared_ptr<TensorImpl> impl);

// Reverse-mode tape. Constructing a Tape makes it the active recorder for
// this thread (nesting is an error); ops append backward closures while it is
// active. backward() replays them in exact reverse recording order, once.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);  // loss must be scalar; single use
  size_t num_records() const { return records_.size(); }

  static bool recording();
  static void record(std::function<void()> fn);

 private:
  std::vector<std::function<void()>> records_;
  bool used_ = false;
};

// ---- elementwise / scalar ----
// Binary elementwise ops accept equal shapes, or a 1-element tensor on either
// side which broadcasts.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k]·[k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a · b^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T · b
Tensor transpose2d(const Tensor& x);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x·w + row-broadcast b
Tensor add_rowvec(const Tensor& x, const Tensor& v);               // [r x c] + [c]

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, int start, int len);
Tensor slice_rows(const Tensor& x, int start, int len);

// ---- normalization / attention ----
// Softmax over the last dimension, max-subtracted. Entries equal to
// kMaskSentinel become exactly 0; a slice that is all-sentinel is an error.
Tensor softmax_last(const Tensor& x);
// Per-row layer norm over the last dimension with learnable gain/bias [c].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// ---- spatial (rank-3 [c x h x w]) ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
Tensor max_pool2d(const Tensor& x, int k, int stride);
Tensor avg_pool2d(const Tensor& x, int k, int stride);

// Bilinear reads of a [h x w] map at K continuous points, coords normalized
// to [0,1]^2 (x right, y down), align-corners-false. coords = x0,y0,x1,y1,...
Tensor sample_points(const Tensor& map, const std::vector<double>& coords);

// ---- reductions / losses ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// Mean binary cross-entropy in logit space (stable); target carries no grad.
Tensor bce_with_logits_mean(const Tensor& pred_logits, const Tensor& target);
// 1 - (2·Σσ(p)g + 1) / (Σσ(p) + Σg + 1)
Tensor dice_from_logits(const Tensor& pred_logits, const Tensor& target);
// Σ_i w_i·(logsumexp(row_i) - row_i[t_i]) / divisor
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<double>& weights, double divisor);

// Inverted dropout; draws one uniform per element from rng.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// ---- verification ----
// Max relative error between the tape gradient of scalar f and central
// differences, over all coordinates of x (or a random subset for the sampled
// variant). Relative error uses denominator max(1, |a|, |fd|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps);
double grad_check_sampled(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps,
                          int max_coords, Rng& rng);

size_t numel(const Shape& s);

}  // namespace maskseg
