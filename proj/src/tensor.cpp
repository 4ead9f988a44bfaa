#include "vlfusion/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace vlfusion {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace {

std::size_t checked_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimension must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

thread_local Tape* g_active_tape = nullptr;

bool taped(const Tensor& t) { return g_active_tape != nullptr && t.requires_grad(); }

// marks the output as grad-carrying and records the backward step
void record(Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  g_active_tape->record(std::move(fn));
}

}  // namespace

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  const std::size_t n = checked_numel(shape);
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data.assign(n, fill);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  const std::size_t n = checked_numel(shape);
  if (n != values.size()) {
    throw std::invalid_argument("tensor data size " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t(shape, 0.0, requires_grad);
  for (double& x : t.mutable_data()) x = rng.normal() * stddev;
  return t;
}

int Tensor::rows() const {
  require_2d(*this, "rows");
  return impl_->shape[0];
}

int Tensor::cols() const {
  require_2d(*this, "cols");
  return impl_->shape[1];
}

double Tensor::value() const {
  if (!is_scalar()) {
    throw std::invalid_argument("value(): tensor is not scalar, shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_step) {
  ops_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || !loss.is_scalar()) {
    throw std::invalid_argument("backward: loss must be a defined scalar tensor");
  }
  if (consumed_) {
    throw std::logic_error("backward: tape already consumed; build a fresh tape");
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss is not connected to the tape");
  }
  consumed_ = true;
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw std::logic_error("backward: no active tape");
  t->backward(loss);
}

// ---- ops ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out(Shape{m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = out.mutable_data().data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double aik = pa[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = pb + kk * n;
      double* crow = pc + i * n;
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  if (taped(a) || taped(b)) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record(out, [ai, bi, oi, m, k, n]() {
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        // dA += dC . B^T
        for (int i = 0; i < m; ++i) {
          for (int kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* grow = g + i * n;
            const double* brow = bi->data.data() + kk * n;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ai->grad[i * k + kk] += acc;
          }
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        // dB += A^T . dC
        for (int i = 0; i < m; ++i) {
          const double* arow = ai->data.data() + i * k;
          const double* grow = g + i * n;
          for (int kk = 0; kk < k; ++kk) {
            const double aik = arow[kk];
            if (aik == 0.0) continue;
            double* brow = bi->grad.data() + kk * n;
            for (int j = 0; j < n; ++j) brow[j] += aik * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int m = a.rows(), n = a.cols();
  Tensor out(Shape{n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.mutable_data()[j * m + i] = a.data()[i * n + j];
  if (taped(a)) {
    auto ai = a.impl(), oi = out.impl();
    record(out, [ai, oi, m, n]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ai->grad[i * n + j] += oi->grad[j * m + i];
    });
  }
  return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  require_same_shape(a, b, name);
  Tensor out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = fwd(a.data()[i], b.data()[i]);
  if (taped(a) || taped(b)) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record(out, [ai, bi, oi, n, bwd]() {
      for (std::size_t i = 0; i < n; ++i) bwd(*ai, *bi, i, oi->grad[i]);
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](detail::TensorImpl& ai, detail::TensorImpl& bi, std::size_t i, double g) {
        if (ai.requires_grad) {
          ai.ensure_grad();
          ai.grad[i] += g;
        }
        if (bi.requires_grad) {
          bi.ensure_grad();
          bi.grad[i] += g;
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](detail::TensorImpl& ai, detail::TensorImpl& bi, std::size_t i, double g) {
        if (ai.requires_grad) {
          ai.ensure_grad();
          ai.grad[i] += g;
        }
        if (bi.requires_grad) {
          bi.ensure_grad();
          bi.grad[i] -= g;
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](detail::TensorImpl& ai, detail::TensorImpl& bi, std::size_t i, double g) {
        if (ai.requires_grad) {
          ai.ensure_grad();
          ai.grad[i] += g * bi.data[i];
        }
        if (bi.requires_grad) {
          bi.ensure_grad();
          bi.grad[i] += g * ai.data[i];
        }
      });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] * s;
  if (taped(a)) {
    auto ai = a.impl(), oi = out.impl();
    record(out, [ai, oi, n, s]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * s;
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require_2d(a, "add_rowvec");
  if (v.ndim() != 1 || v.shape()[0] != a.cols()) {
    throw std::invalid_argument("add_rowvec: vector shape " + shape_str(v.shape()) +
                                " does not match matrix " + shape_str(a.shape()));
  }
  const int m = a.rows(), n = a.cols();
  Tensor out(a.shape());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.mutable_data()[i * n + j] = a.data()[i * n + j] + v.data()[j];
  if (taped(a) || taped(v)) {
    auto ai = a.impl(), vi = v.impl(), oi = out.impl();
    record(out, [ai, vi, oi, m, n]() {
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < static_cast<std::size_t>(m) * n; ++i) ai->grad[i] += oi->grad[i];
      }
      if (vi->requires_grad) {
        vi->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) vi->grad[j] += oi->grad[i * n + j];
      }
    });
  }
  return out;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& a) {
  Tensor out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a.data()[i];
    out.mutable_data()[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  if (taped(a)) {
    auto ai = a.impl(), oi = out.impl();
    record(out, [ai, oi, n]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double x = ai->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        ai->grad[i] += oi->grad[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Tensor out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a.data()[i];
    out.mutable_data()[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                     : std::exp(x) / (1.0 + std::exp(x));
  }
  if (taped(a)) {
    auto ai = a.impl(), oi = out.impl();
    record(out, [ai, oi, n]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double y = oi->data[i];
        ai->grad[i] += oi->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  require_2d(a, "softmax_rows");
  const int m = a.rows(), n = a.cols();
  for (double x : a.data()) {
    if (!std::isfinite(x)) {
      throw std::domain_error("softmax_rows: non-finite input entry");
    }
  }
  Tensor out(a.shape());
  for (int i = 0; i < m; ++i) {
    const double* row = a.data().data() + i * n;
    double* orow = out.mutable_data().data() + i * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= denom;
  }
  if (taped(a)) {
    auto ai = a.impl(), oi = out.impl();
    record(out, [ai, oi, m, n]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const double* y = oi->data.data() + i * n;
        const double* g = oi->grad.data() + i * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += y[j] * g[j];
        for (int j = 0; j < n; ++j) ai->grad[i * n + j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d(x, "layer_norm");
  const int m = x.rows(), n = x.cols();
  if (gain.ndim() != 1 || gain.shape()[0] != n || bias.ndim() != 1 || bias.shape()[0] != n) {
    throw std::invalid_argument("layer_norm: gain/bias must be length-" + std::to_string(n) +
                                " vectors, got " + shape_str(gain.shape()) + " and " +
                                shape_str(bias.shape()));
  }
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  Tensor out(x.shape());
  std::vector<double> inv_sigma(m), mu(m);
  for (int i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += row[j];
    mu[i] = s / n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = row[j] - mu[i];
      var += d * d;
    }
    var /= n;
    inv_sigma[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) {
      out.mutable_data()[i * n + j] = gain.data()[j] * (row[j] - mu[i]) * inv_sigma[i] + bias.data()[j];
    }
  }
  if (taped(x) || taped(gain) || taped(bias)) {
    auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
    record(out, [xi, gi, bi, oi, m, n, mu, inv_sigma]() {
      for (int i = 0; i < m; ++i) {
        const double* row = xi->data.data() + i * n;
        const double* g = oi->grad.data() + i * n;
        if (gi->requires_grad || bi->requires_grad) {
          if (gi->requires_grad) gi->ensure_grad();
          if (bi->requires_grad) bi->ensure_grad();
          for (int j = 0; j < n; ++j) {
            const double xhat = (row[j] - mu[i]) * inv_sigma[i];
            if (gi->requires_grad) gi->grad[j] += g[j] * xhat;
            if (bi->requires_grad) bi->grad[j] += g[j];
          }
        }
        if (xi->requires_grad) {
          xi->ensure_grad();
          // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_sigma
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int j = 0; j < n; ++j) {
            const double xhat = (row[j] - mu[i]) * inv_sigma[i];
            const double dxhat = g[j] * gi->data[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
          }
          mean_dxhat /= n;
          mean_dxhat_xhat /= n;
          for (int j = 0; j < n; ++j) {
            const double xhat = (row[j] - mu[i]) * inv_sigma[i];
            const double dxhat = g[j] * gi->data[j];
            xi->grad[i * n + j] += (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_sigma[i];
          }
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy_from_logits(const Tensor& logits, const std::vector<int>& targets) {
  require_2d(logits, "cross_entropy_from_logits");
  const int m = logits.rows(), n = logits.cols();
  if (static_cast<int>(targets.size()) != m) {
    throw std::invalid_argument("cross_entropy_from_logits: expected " + std::to_string(m) +
                                " targets, got " + std::to_string(targets.size()));
  }
  for (int t : targets) {
    if (t < 0 || t >= n) {
      throw std::out_of_range("cross_entropy_from_logits: target index " + std::to_string(t) +
                              " outside [0, " + std::to_string(n) + ")");
    }
  }
  // keep the softmax for the backward rule
  std::vector<double> probs(static_cast<std::size_t>(m) * n);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    const double* row = logits.data().data() + i * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
    const double log_denom = std::log(denom) + mx;
    for (int j = 0; j < n; ++j) probs[i * n + j] = std::exp(row[j] - log_denom);
    total += log_denom - row[targets[i]];
  }
  Tensor out = Tensor::scalar(total / m);
  if (taped(logits)) {
    auto li = logits.impl(), oi = out.impl();
    record(out, [li, oi, m, n, targets, probs = std::move(probs)]() {
      if (!li->requires_grad) return;
      li->ensure_grad();
      const double g = oi->grad[0] / m;
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          li->grad[i * n + j] += g * (probs[i * n + j] - (j == targets[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  const std::size_t n = logits.numel();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = logits.data()[i];
    const double t = targets.data()[i];
    // max(x,0) - t*x + log(1 + exp(-|x|))
    total += std::max(x, 0.0) - t * x + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  if (taped(logits) || taped(targets)) {
    auto li = logits.impl(), ti = targets.impl(), oi = out.impl();
    record(out, [li, ti, oi, n]() {
      const double g = oi->grad[0] / static_cast<double>(n);
      if (li->requires_grad) {
        li->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const double x = li->data[i];
          const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
          li->grad[i] += g * (s - ti->data[i]);
        }
      }
      if (ti->requires_grad) {
        ti->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ti->grad[i] += g * (-li->data[i]);
      }
    });
  }
  return out;
}

Tensor embedding_gather(const Tensor& table, const std::vector<int>& indices) {
  require_2d(table, "embedding_gather");
  const int v = table.rows(), h = table.cols();
  for (int idx : indices) {
    if (idx < 0 || idx >= v) {
      throw std::out_of_range("embedding_gather: index " + std::to_string(idx) + " outside [0, " +
                              std::to_string(v) + ")");
    }
  }
  const int m = static_cast<int>(indices.size());
  if (m == 0) throw std::invalid_argument("embedding_gather: empty index list");
  Tensor out(Shape{m, h});
  for (int i = 0; i < m; ++i) {
    const double* src = table.data().data() + static_cast<std::size_t>(indices[i]) * h;
    std::copy(src, src + h, out.mutable_data().data() + static_cast<std::size_t>(i) * h);
  }
  if (taped(table)) {
    auto ti = table.impl(), oi = out.impl();
    record(out, [ti, oi, indices, m, h]() {
      if (!ti->requires_grad) return;
      ti->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const double* g = oi->grad.data() + static_cast<std::size_t>(i) * h;
        double* dst = ti->grad.data() + static_cast<std::size_t>(indices[i]) * h;
        for (int j = 0; j < h; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_2d(a, "concat_cols");
  require_2d(b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("concat_cols: row counts differ, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  const int m = a.rows(), p = a.cols(), q = b.cols();
  Tensor out(Shape{m, p + q});
  for (int i = 0; i < m; ++i) {
    std::copy(a.data().data() + static_cast<std::size_t>(i) * p,
              a.data().data() + static_cast<std::size_t>(i + 1) * p,
              out.mutable_data().data() + static_cast<std::size_t>(i) * (p + q));
    std::copy(b.data().data() + static_cast<std::size_t>(i) * q,
              b.data().data() + static_cast<std::size_t>(i + 1) * q,
              out.mutable_data().data() + static_cast<std::size_t>(i) * (p + q) + p);
  }
  if (taped(a) || taped(b)) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record(out, [ai, bi, oi, m, p, q]() {
      for (int i = 0; i < m; ++i) {
        const double* g = oi->grad.data() + static_cast<std::size_t>(i) * (p + q);
        if (ai->requires_grad) {
          ai->ensure_grad();
          for (int j = 0; j < p; ++j) ai->grad[i * p + j] += g[j];
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          for (int j = 0; j < q; ++j) bi->grad[i * q + j] += g[p + j];
        }
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no tensors given");
  const int n = parts[0].cols();
  int m = 0;
  for (const Tensor& t : parts) {
    require_2d(t, "concat_rows");
    if (t.cols() != n) {
      throw std::invalid_argument("concat_rows: column counts differ, " +
                                  shape_str(parts[0].shape()) + " vs " + shape_str(t.shape()));
    }
    m += t.rows();
  }
  Tensor out(Shape{m, n});
  std::size_t off = 0;
  bool any_grad = false;
  for (const Tensor& t : parts) {
    std::copy(t.data().begin(), t.data().end(), out.mutable_data().begin() + off);
    off += t.numel();
    any_grad = any_grad || taped(t);
  }
  if (any_grad) {
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const Tensor& t : parts) impls.push_back(t.impl());
    auto oi = out.impl();
    record(out, [impls = std::move(impls), oi]() {
      std::size_t off2 = 0;
      for (auto& pi : impls) {
        if (pi->requires_grad) {
          pi->ensure_grad();
          for (std::size_t i = 0; i < pi->data.size(); ++i) pi->grad[i] += oi->grad[off2 + i];
        }
        off2 += pi->data.size();
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int start, int len) {
  require_2d(a, "slice_cols");
  const int m = a.rows(), n = a.cols();
  if (start < 0 || len <= 0 || start + len > n) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") outside " + shape_str(a.shape()));
  }
  Tensor out(Shape{m, len});
  for (int i = 0; i < m; ++i) {
    std::copy(a.data().data() + static_cast<std::size_t>(i) * n + start,
              a.data().data() + static_cast<std::size_t>(i) * n + start + len,
              out.mutable_data().data() + static_cast<std::size_t>(i) * len);
  }
  if (taped(a)) {
    auto ai = a.impl(), oi = out.impl();
    record(out, [ai, oi, m, n, start, len]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j) ai->grad[i * n + start + j] += oi->grad[i * len + j];
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  const std::size_t n = a.numel();
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  if (taped(a)) {
    auto ai = a.impl(), oi = out.impl();
    record(out, [ai, oi, n]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const double g = oi->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) ai->grad[i] += g;
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor out = Tensor::scalar(s);
  if (taped(a)) {
    auto ai = a.impl(), oi = out.impl();
    record(out, [ai, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const double g = oi->grad[0];
      for (double& x : ai->grad) x += g;
    });
  }
  return out;
}

// ---- optimizer ----------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, Options opts)
    : params_(std::move(params)), opts_(opts) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamOptimizer::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_count_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    auto g = p.grad();
    if (g.empty()) continue;  // disconnected parameter: gradient is zero
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      m_[k][i] = opts_.beta1 * m_[k][i] + (1.0 - opts_.beta1) * g[i];
      v_[k][i] = opts_.beta2 * v_[k][i] + (1.0 - opts_.beta2) * g[i] * g[i];
      const double mhat = m_[k][i] / bc1;
      const double vhat = v_[k][i] / bc2;
      data[i] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
    }
    p.zero_grad();
  }
}

void AdamOptimizer::restore(std::int64_t step_count, std::vector<std::vector<double>> m,
                            std::vector<std::vector<double>> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw std::invalid_argument("AdamOptimizer::restore: moment count mismatch");
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (m[k].size() != params_[k].numel() || v[k].size() != params_[k].numel()) {
      throw std::invalid_argument("AdamOptimizer::restore: moment size mismatch");
    }
  }
  step_count_ = step_count;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace vlfusion
