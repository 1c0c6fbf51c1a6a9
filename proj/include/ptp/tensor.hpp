// Minimal dense 2-D tensors with tape-free reverse-mode autodiff.
//
// Every Tensor is a row-major [rows x cols] matrix. Operations record their
// parents and a backward closure; `backward(loss)` walks the graph in reverse
// topological order. Leaves created with requires_grad=true (parameters)
// accumulate gradients across calls until zero_grad().
//
// T = float for training, T = double for finite-difference checks.
#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "ptp/common.hpp"

namespace ptp {

namespace detail {

template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) c[i * ldc + j] = beta == T(0) ? T(0) : beta * c[i * ldc + j];
    }
    return;
  }
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    static_assert(std::is_same_v<T, double>, "tensor scalar must be float or double");
    cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

}  // namespace detail

template <typename T>
struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  std::size_t size() const { return value.size(); }
  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(int rows, int cols, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value.assign(static_cast<std::size_t>(rows) * cols, T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor from(int rows, int cols, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != static_cast<std::size_t>(rows) * cols) {
      throw Error("Tensor::from: " + std::to_string(values.size()) + " values for shape [" +
                  std::to_string(rows) + "x" + std::to_string(cols) + "]");
    }
    auto t = zeros(0, 0, requires_grad);
    t.node_->rows = rows;
    t.node_->cols = cols;
    t.node_->value = std::move(values);
    return t;
  }
  static Tensor scalar(T v) { return from(1, 1, {v}); }

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T item() const { return node_->value.at(0); }
  T at(int r, int c) const { return node_->value[static_cast<std::size_t>(r) * cols() + c]; }
  std::span<const T> row(int r) const {
    return {node_->value.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())};
  }

  /// Gradient (zeros if none has been accumulated yet).
  std::span<T> grad() { return {node_->grad_buffer(), node_->value.size()}; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(int rows, int cols, std::initializer_list<Tensor<T>> parents) {
  auto t = Tensor<T>::zeros(rows, cols);
  for (const auto& p : parents) {
    if (p.requires_grad()) t.node()->requires_grad = true;
    t.node()->parents.push_back(p.shared());
  }
  return t;
}

template <typename T>
Tensor<T> make_result(int rows, int cols, const std::vector<Tensor<T>>& parents) {
  auto t = Tensor<T>::zeros(rows, cols);
  for (const auto& p : parents) {
    if (p.requires_grad()) t.node()->requires_grad = true;
    t.node()->parents.push_back(p.shared());
  }
  return t;
}

inline void check(bool ok, const std::string& what) {
  if (!ok) throw Error(what);
}

template <typename T>
std::string shape_str(const Tensor<T>& t) {
  return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar (1x1) tensor.
template <typename T>
void backward(const Tensor<T>& loss, T seed = T(1)) {
  detail::check(loss.size() == 1, "backward: loss must be a scalar");
  if (!loss.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward && !(*it)->grad.empty()) (*it)->backward();
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.cols() == b.rows(),
                "matmul: shape mismatch " + detail::shape_str(a) + " x " + detail::shape_str(b));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  auto out = detail::make_result<T>(m, n, {a, b});
  detail::gemm<T>(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0),
                  out.data().data(), n);
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    o->backward = [o, pa, pb, m, n, k]() {
      if (pa->requires_grad) {
        detail::gemm<T>(false, true, m, k, n, T(1), o->grad.data(), n, pb->value.data(), n, T(1),
                        pa->grad_buffer(), k);
      }
      if (pb->requires_grad) {
        detail::gemm<T>(true, false, k, n, m, T(1), pa->value.data(), k, o->grad.data(), n, T(1),
                        pb->grad_buffer(), n);
      }
    };
  }
  return out;
}

/// x[m,in] * w[in,out] + bias[1,out] (bias optional).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  detail::check(x.cols() == w.rows(),
                "linear: input " + detail::shape_str(x) + " vs weight " + detail::shape_str(w));
  const int m = x.rows(), k = x.cols(), n = w.cols();
  const bool has_bias = bias.defined();
  if (has_bias) detail::check(bias.rows() == 1 && bias.cols() == n, "linear: bias shape");
  auto out = has_bias ? detail::make_result<T>(m, n, {x, w, bias}) : detail::make_result<T>(m, n, {x, w});
  T* y = out.data().data();
  if (has_bias) {
    for (int i = 0; i < m; ++i) std::copy(bias.data().begin(), bias.data().end(), y + i * n);
  }
  detail::gemm<T>(false, false, m, n, k, T(1), x.data().data(), k, w.data().data(), n,
                  has_bias ? T(1) : T(0), y, n);
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* px = x.node();
    Node<T>* pw = w.node();
    Node<T>* pb = has_bias ? bias.node() : nullptr;
    o->backward = [o, px, pw, pb, m, n, k]() {
      if (px->requires_grad) {
        detail::gemm<T>(false, true, m, k, n, T(1), o->grad.data(), n, pw->value.data(), n, T(1),
                        px->grad_buffer(), k);
      }
      if (pw->requires_grad) {
        detail::gemm<T>(true, false, k, n, m, T(1), px->value.data(), k, o->grad.data(), n, T(1),
                        pw->grad_buffer(), n);
      }
      if (pb && pb->requires_grad) {
        T* gb = pb->grad_buffer();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) gb[j] += o->grad[static_cast<std::size_t>(i) * n + j];
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(),
                "add: shape mismatch " + detail::shape_str(a) + " + " + detail::shape_str(b));
  auto out = detail::make_result<T>(a.rows(), a.cols(), {a, b});
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    o->backward = [o, pa, pb]() {
      for (Node<T>* p : {pa, pb}) {
        if (!p->requires_grad) continue;
        T* g = p->grad_buffer();
        for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
      }
    };
  }
  return out;
}

/// x[m,n] + row[1,n] broadcast over rows.
template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row) {
  detail::check(row.rows() == 1 && row.cols() == x.cols(),
                "add_row: " + detail::shape_str(x) + " + " + detail::shape_str(row));
  const int m = x.rows(), n = x.cols();
  auto out = detail::make_result<T>(m, n, {x, row});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      out.data()[static_cast<std::size_t>(i) * n + j] = x.data()[static_cast<std::size_t>(i) * n + j] + row.data()[j];
    }
  }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* px = x.node();
    Node<T>* pr = row.node();
    o->backward = [o, px, pr, m, n]() {
      if (px->requires_grad) {
        T* g = px->grad_buffer();
        for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
      }
      if (pr->requires_grad) {
        T* g = pr->grad_buffer();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) g[j] += o->grad[static_cast<std::size_t>(i) * n + j];
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(),
                "mul: shape mismatch " + detail::shape_str(a) + " * " + detail::shape_str(b));
  auto out = detail::make_result<T>(a.rows(), a.cols(), {a, b});
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    o->backward = [o, pa, pb]() {
      if (pa->requires_grad) {
        T* g = pa->grad_buffer();
        for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        T* g = pb->grad_buffer();
        for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i] * pa->value[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto out = detail::make_result<T>(a.rows(), a.cols(), {a});
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* pa = a.node();
    o->backward = [o, pa, s]() {
      T* g = pa->grad_buffer();
      for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i] * s;
    };
  }
  return out;
}

namespace detail {

template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  auto out = make_result<T>(x.rows(), x.cols(), {x});
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = f(x.data()[i]);
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* px = x.node();
    o->backward = [o, px, df]() {
      T* g = px->grad_buffer();
      for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i] * df(px->value[i]);
    };
  }
  return out;
}

}  // namespace detail

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return detail::unary<T>(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T v) { return T(0.5) * (T(1) + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T v) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) - s);
      });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

/// Sigmoid-gated linear unit: silu(gate) * up.
template <typename T>
Tensor<T> swiglu(const Tensor<T>& gate, const Tensor<T>& up) {
  return mul(silu(gate), up);
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const int m = x.rows(), n = x.cols();
  detail::check(gain.size() == static_cast<std::size_t>(n) && bias.size() == static_cast<std::size_t>(n),
                "layer_norm: parameter width must be " + std::to_string(n));
  auto out = detail::make_result<T>(m, n, {x, gain, bias});
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const T* xr = x.data().data() + static_cast<std::size_t>(i) * n;
    T mean = 0;
    for (int j = 0; j < n; ++j) mean += xr[j];
    mean /= T(n);
    T var = 0;
    for (int j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < n; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * n + j;
      (*xhat)[k] = (xr[j] - mean) * is;
      out.data()[k] = (*xhat)[k] * gain.data()[j] + bias.data()[j];
    }
  }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* px = x.node();
    Node<T>* pg = gain.node();
    Node<T>* pb = bias.node();
    o->backward = [o, px, pg, pb, xhat, inv_std, m, n]() {
      for (int i = 0; i < m; ++i) {
        const T* dy = o->grad.data() + static_cast<std::size_t>(i) * n;
        const T* xh = xhat->data() + static_cast<std::size_t>(i) * n;
        if (pg->requires_grad || pb->requires_grad) {
          T* gg = pg->requires_grad ? pg->grad_buffer() : nullptr;
          T* gb = pb->requires_grad ? pb->grad_buffer() : nullptr;
          for (int j = 0; j < n; ++j) {
            if (gg) gg[j] += dy[j] * xh[j];
            if (gb) gb[j] += dy[j];
          }
        }
        if (px->requires_grad) {
          T sum_d = 0, sum_dx = 0;
          for (int j = 0; j < n; ++j) {
            const T d = dy[j] * pg->value[static_cast<std::size_t>(j)];
            sum_d += d;
            sum_dx += d * xh[j];
          }
          T* gx = px->grad_buffer() + static_cast<std::size_t>(i) * n;
          const T is = (*inv_std)[static_cast<std::size_t>(i)];
          for (int j = 0; j < n; ++j) {
            const T d = dy[j] * pg->value[static_cast<std::size_t>(j)];
            gx[j] += is * (d - sum_d / T(n) - xh[j] * sum_dx / T(n));
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-6)) {
  const int m = x.rows(), n = x.cols();
  detail::check(gain.size() == static_cast<std::size_t>(n), "rms_norm: gain width must be " + std::to_string(n));
  auto out = detail::make_result<T>(m, n, {x, gain});
  auto inv_rms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const T* xr = x.data().data() + static_cast<std::size_t>(i) * n;
    T ss = 0;
    for (int j = 0; j < n; ++j) ss += xr[j] * xr[j];
    const T ir = T(1) / std::sqrt(ss / T(n) + eps);
    (*inv_rms)[static_cast<std::size_t>(i)] = ir;
    for (int j = 0; j < n; ++j) out.data()[static_cast<std::size_t>(i) * n + j] = xr[j] * ir * gain.data()[j];
  }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* px = x.node();
    Node<T>* pg = gain.node();
    o->backward = [o, px, pg, inv_rms, m, n]() {
      for (int i = 0; i < m; ++i) {
        const T* dy = o->grad.data() + static_cast<std::size_t>(i) * n;
        const T* xr = px->value.data() + static_cast<std::size_t>(i) * n;
        const T ir = (*inv_rms)[static_cast<std::size_t>(i)];
        if (pg->requires_grad) {
          T* gg = pg->grad_buffer();
          for (int j = 0; j < n; ++j) gg[j] += dy[j] * xr[j] * ir;
        }
        if (px->requires_grad) {
          T dot = 0;
          for (int j = 0; j < n; ++j) dot += dy[j] * pg->value[static_cast<std::size_t>(j)] * xr[j];
          T* gx = px->grad_buffer() + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) {
            gx[j] += ir * dy[j] * pg->value[static_cast<std::size_t>(j)] - xr[j] * ir * ir * ir * dot / T(n);
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax and attention

/// Row-wise softmax.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const int m = x.rows(), n = x.cols();
  auto out = detail::make_result<T>(m, n, {x});
  for (int i = 0; i < m; ++i) {
    const T* xr = x.data().data() + static_cast<std::size_t>(i) * n;
    T* yr = out.data().data() + static_cast<std::size_t>(i) * n;
    const T mx = *std::max_element(xr, xr + n);
    T sum = 0;
    for (int j = 0; j < n; ++j) sum += (yr[j] = std::exp(xr[j] - mx));
    for (int j = 0; j < n; ++j) yr[j] /= sum;
  }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* px = x.node();
    o->backward = [o, px, m, n]() {
      T* gx = px->grad_buffer();
      for (int i = 0; i < m; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * n;
        T dot = 0;
        for (int j = 0; j < n; ++j) dot += o->grad[base + j] * o->value[base + j];
        for (int j = 0; j < n; ++j) gx[base + j] += o->value[base + j] * (o->grad[base + j] - dot);
      }
    };
  }
  return out;
}

struct AttentionOptions {
  int heads = 1;
  bool causal = false;
  std::vector<char> key_valid;  // empty: every key may be attended
};

/// Multi-head scaled dot-product attention over q[Tq,D], k[Tk,D], v[Tk,D].
/// Masked (query, key) pairs get exactly zero weight; a query with no
/// admissible key produces a zero row.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionOptions& opt) {
  const int tq = q.rows(), tk = k.rows(), d = q.cols(), h = opt.heads;
  detail::check(k.cols() == d && v.cols() == d && v.rows() == tk, "attention: q/k/v shape mismatch");
  detail::check(h > 0 && d % h == 0, "attention: width not divisible by heads");
  detail::check(opt.key_valid.empty() || static_cast<int>(opt.key_valid.size()) == tk,
                "attention: key mask length mismatch");
  const int dh = d / h;
  const T sc = T(1) / std::sqrt(T(dh));
  auto out = detail::make_result<T>(tq, d, {q, k, v});
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(h) * tq * tk);
  std::vector<char> allowed(static_cast<std::size_t>(tq) * tk, 1);
  for (int i = 0; i < tq; ++i) {
    for (int j = 0; j < tk; ++j) {
      bool ok = opt.key_valid.empty() || opt.key_valid[static_cast<std::size_t>(j)];
      if (opt.causal && j > i + (tk - tq)) ok = false;
      allowed[static_cast<std::size_t>(i) * tk + j] = ok;
    }
  }
  for (int hh = 0; hh < h; ++hh) {
    T* p = probs->data() + static_cast<std::size_t>(hh) * tq * tk;
    detail::gemm<T>(false, true, tq, tk, dh, sc, q.data().data() + hh * dh, d, k.data().data() + hh * dh, d, T(0),
                    p, tk);
    for (int i = 0; i < tq; ++i) {
      T* row = p + static_cast<std::size_t>(i) * tk;
      const char* ok = allowed.data() + static_cast<std::size_t>(i) * tk;
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < tk; ++j) {
        if (ok[j]) mx = std::max(mx, row[j]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) {
        std::fill(row, row + tk, T(0));
        continue;
      }
      T sum = 0;
      for (int j = 0; j < tk; ++j) sum += (row[j] = ok[j] ? std::exp(row[j] - mx) : T(0));
      for (int j = 0; j < tk; ++j) row[j] /= sum;
    }
    detail::gemm<T>(false, false, tq, dh, tk, T(1), p, tk, v.data().data() + hh * dh, d, T(0),
                    out.data().data() + hh * dh, d);
  }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* pq = q.node();
    Node<T>* pk = k.node();
    Node<T>* pv = v.node();
    o->backward = [o, pq, pk, pv, probs, tq, tk, d, h, dh, sc]() {
      std::vector<T> dp(static_cast<std::size_t>(tq) * tk);
      for (int hh = 0; hh < h; ++hh) {
        const T* p = probs->data() + static_cast<std::size_t>(hh) * tq * tk;
        const T* dout = o->grad.data() + hh * dh;
        if (pv->requires_grad) {
          detail::gemm<T>(true, false, tk, dh, tq, T(1), p, tk, dout, d, T(1), pv->grad_buffer() + hh * dh, d);
        }
        if (!pq->requires_grad && !pk->requires_grad) continue;
        detail::gemm<T>(false, true, tq, tk, dh, T(1), dout, d, pv->value.data() + hh * dh, d, T(0), dp.data(), tk);
        for (int i = 0; i < tq; ++i) {
          T* dr = dp.data() + static_cast<std::size_t>(i) * tk;
          const T* pr = p + static_cast<std::size_t>(i) * tk;
          T dot = 0;
          for (int j = 0; j < tk; ++j) dot += dr[j] * pr[j];
          for (int j = 0; j < tk; ++j) dr[j] = pr[j] * (dr[j] - dot);
        }
        if (pq->requires_grad) {
          detail::gemm<T>(false, false, tq, dh, tk, sc, dp.data(), tk, pk->value.data() + hh * dh, d, T(1),
                          pq->grad_buffer() + hh * dh, d);
        }
        if (pk->requires_grad) {
          detail::gemm<T>(true, false, tk, dh, tq, sc, dp.data(), tk, pq->value.data() + hh * dh, d, T(1),
                          pk->grad_buffer() + hh * dh, d);
        }
      }
    };
  }
  return out;
}

/// Rotary position embedding applied per head to interleaved pairs
/// (2i, 2i+1), angle = (offset + row) * base^(-2i/head_dim).
template <typename T>
Tensor<T> rotary(const Tensor<T>& x, int heads, double base, int offset = 0) {
  const int t = x.rows(), d = x.cols();
  detail::check(heads > 0 && d % heads == 0 && (d / heads) % 2 == 0, "rotary: head dim must be even");
  const int dh = d / heads;
  auto cs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(t) * dh);  // cos, sin interleaved
  for (int r = 0; r < t; ++r) {
    for (int i = 0; i < dh / 2; ++i) {
      const double theta = std::pow(base, -2.0 * i / dh);
      const double ang = static_cast<double>(offset + r) * theta;
      (*cs)[static_cast<std::size_t>(r) * dh + 2 * i] = static_cast<T>(std::cos(ang));
      (*cs)[static_cast<std::size_t>(r) * dh + 2 * i + 1] = static_cast<T>(std::sin(ang));
    }
  }
  auto out = detail::make_result<T>(t, d, {x});
  for (int r = 0; r < t; ++r) {
    for (int hh = 0; hh < heads; ++hh) {
      for (int i = 0; i < dh / 2; ++i) {
        const std::size_t k = static_cast<std::size_t>(r) * d + hh * dh + 2 * i;
        const T c = (*cs)[static_cast<std::size_t>(r) * dh + 2 * i];
        const T s = (*cs)[static_cast<std::size_t>(r) * dh + 2 * i + 1];
        const T x0 = x.data()[k], x1 = x.data()[k + 1];
        out.data()[k] = x0 * c - x1 * s;
        out.data()[k + 1] = x0 * s + x1 * c;
      }
    }
  }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* px = x.node();
    o->backward = [o, px, cs, t, d, dh, heads]() {
      T* g = px->grad_buffer();
      for (int r = 0; r < t; ++r) {
        for (int hh = 0; hh < heads; ++hh) {
          for (int i = 0; i < dh / 2; ++i) {
            const std::size_t k = static_cast<std::size_t>(r) * d + hh * dh + 2 * i;
            const T c = (*cs)[static_cast<std::size_t>(r) * dh + 2 * i];
            const T s = (*cs)[static_cast<std::size_t>(r) * dh + 2 * i + 1];
            const T g0 = o->grad[k], g1 = o->grad[k + 1];
            g[k] += g0 * c + g1 * s;
            g[k + 1] += -g0 * s + g1 * c;
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Indexing

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  const int n = table.cols();
  for (const int id : ids) {
    detail::check(id >= 0 && id < table.rows(), "embedding: id " + std::to_string(id) + " out of range");
  }
  auto out = detail::make_result<T>(static_cast<int>(ids.size()), n, {table});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto src = table.row(ids[i]);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* pt = table.node();
    o->backward = [o, pt, ids, n]() {
      T* g = pt->grad_buffer();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(ids[i]) * n + j] += o->grad[i * n + j];
      }
    };
  }
  return out;
}

/// out[i] = x[idx[i]]; indices may repeat (gradients accumulate).
template <typename T>
Tensor<T> select_rows(const Tensor<T>& x, const std::vector<int>& idx) {
  return embedding(x, idx);
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  detail::check(!parts.empty(), "concat_rows: no inputs");
  const int n = parts.front().cols();
  int m = 0;
  for (const auto& p : parts) {
    detail::check(p.cols() == n, "concat_rows: column mismatch");
    m += p.rows();
  }
  auto out = detail::make_result<T>(m, n, parts);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.size();
  }
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    o->backward = [o]() {
      std::size_t off2 = 0;
      for (const auto& p : o->parents) {
        if (p->requires_grad) {
          T* g = p->grad_buffer();
          for (std::size_t i = 0; i < p->size(); ++i) g[i] += o->grad[off2 + i];
        }
        off2 += p->size();
      }
    };
  }
  return out;
}

/// Mean over all rows -> [1, cols].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  const int m = x.rows(), n = x.cols();
  detail::check(m > 0, "mean_rows: empty input");
  auto out = detail::make_result<T>(1, n, {x});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.data()[j] += x.data()[static_cast<std::size_t>(i) * n + j];
  }
  for (int j = 0; j < n; ++j) out.data()[j] /= T(m);
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* px = x.node();
    o->backward = [o, px, m, n]() {
      T* g = px->grad_buffer();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(i) * n + j] += o->grad[static_cast<std::size_t>(j)] / T(m);
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses (scalar outputs)

/// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  const int m = logits.rows(), n = logits.cols();
  detail::check(static_cast<int>(targets.size()) == m, "cross_entropy: target count mismatch");
  detail::check(m > 0, "cross_entropy: empty input");
  auto out = detail::make_result<T>(1, 1, {logits});
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  T total = 0;
  for (int i = 0; i < m; ++i) {
    detail::check(targets[static_cast<std::size_t>(i)] >= 0 && targets[static_cast<std::size_t>(i)] < n,
                  "cross_entropy: target out of range");
    const T* xr = logits.data().data() + static_cast<std::size_t>(i) * n;
    T* pr = probs->data() + static_cast<std::size_t>(i) * n;
    const T mx = *std::max_element(xr, xr + n);
    T sum = 0;
    for (int j = 0; j < n; ++j) sum += (pr[j] = std::exp(xr[j] - mx));
    for (int j = 0; j < n; ++j) pr[j] /= sum;
    total += std::log(sum) + mx - xr[targets[static_cast<std::size_t>(i)]];
  }
  out.data()[0] = total / T(m);
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* pl = logits.node();
    o->backward = [o, pl, probs, targets, m, n]() {
      T* g = pl->grad_buffer();
      const T go = o->grad[0] / T(m);
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          const std::size_t k = static_cast<std::size_t>(i) * n + j;
          g[k] += go * ((*probs)[k] - (j == targets[static_cast<std::size_t>(i)] ? T(1) : T(0)));
        }
      }
    };
  }
  return out;
}

/// Mean squared error against constant targets (mean over every element).
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const std::vector<T>& target) {
  detail::check(target.size() == pred.size(), "mse: target size mismatch");
  detail::check(pred.size() > 0, "mse: empty input");
  auto out = detail::make_result<T>(1, 1, {pred});
  T total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred.data()[i] - target[i];
    total += d * d;
  }
  const T count = T(pred.size());
  out.data()[0] = total / count;
  if (out.requires_grad()) {
    Node<T>* o = out.node();
    Node<T>* pp = pred.node();
    o->backward = [o, pp, target, count]() {
      T* g = pp->grad_buffer();
      for (std::size_t i = 0; i < target.size(); ++i) g[i] += o->grad[0] * T(2) * (pp->value[i] - target[i]) / count;
    };
  }
  return out;
}

/// Row-wise log-softmax values (no graph).
template <typename T>
std::vector<T> log_softmax_row(std::span<const T> row) {
  std::vector<T> out(row.size());
  const T mx = *std::max_element(row.begin(), row.end());
  T sum = 0;
  for (const T v : row) sum += std::exp(v - mx);
  const T lse = std::log(sum) + mx;
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = row[j] - lse;
  return out;
}

/// Converts a tensor's values to another scalar type (no graph).
template <typename U, typename T>
std::vector<U> convert_values(const Tensor<T>& t) {
  return std::vector<U>(t.data().begin(), t.data().end());
}

}  // namespace ptp
