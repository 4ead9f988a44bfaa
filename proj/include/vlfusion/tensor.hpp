#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vlfusion/rng.hpp"

namespace vlfusion {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};
}  // namespace detail

// Dense row-major tensor of doubles. Value-semantics handle: copies share
// the underlying buffer. Leaf tensors (parameters, inputs) may be mutated
// through mutable_data(); anything produced by an op while a Tape is
// active is part of that tape's graph and is treated as immutable.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t numel() const { return impl_->numel(); }
  int rows() const;
  int cols() const;
  bool is_scalar() const { return numel() == 1; }

  double value() const;  // scalar tensors only
  double at(int i) const { return impl_->data[static_cast<std::size_t>(i)]; }
  double at(int i, int j) const { return impl_->data[static_cast<std::size_t>(i) * cols() + j]; }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  // gradient of the last backward() pass; empty span if never reached
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() {
    if (impl_ && !impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  }

  // stable identity of the shared buffer
  const void* id() const { return impl_.get(); }

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Construction makes it the active tape for this
// thread (define-by-run: every op on grad-requiring tensors records its
// backward rule here, in execution order, which is a topological order of
// the graph). backward() runs the rules in reverse; a second backward()
// on the same tape throws.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);
  std::size_t size() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* active();

  // internal: used by ops
  void record(std::function<void()> backward_step);

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// Convenience: run backward on the currently active tape.
void backward(const Tensor& loss);

// ---- ops -------------------------------------------------------------
// All ops validate shapes and report both offending shapes on mismatch.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// broadcast a length-n row vector over every row of an [m x n] matrix
Tensor add_rowvec(const Tensor& a, const Tensor& v);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-12);
Tensor cross_entropy_from_logits(const Tensor& logits,
                                 const std::vector<int>& targets);
// mean elementwise binary cross-entropy between sigmoid(logits) and targets
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);
Tensor embedding_gather(const Tensor& table, const std::vector<int>& indices);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a);

// ---- optimizer --------------------------------------------------------

// Adaptive-moment gradient descent with bias correction.
class AdamOptimizer {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  explicit AdamOptimizer(std::vector<Tensor> params, Options opts = {});

  // applies one update from the accumulated gradients, then zeroes them
  void step();

  std::int64_t step_count() const { return step_count_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  // restore state saved in a checkpoint
  void restore(std::int64_t step_count, std::vector<std::vector<double>> m,
               std::vector<std::vector<double>> v);

 private:
  std::vector<Tensor> params_;
  Options opts_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t step_count_ = 0;
};

}  // namespace vlfusion
