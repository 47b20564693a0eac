#pragma once

// Small define-by-run autograd engine backed by Eigen GEMMs.
//
// Design rules that the rest of the project relies on:
//  - Tensors are contiguous row-major; the last dimension is the feature
//    axis, everything before it flattens to rows.
//  - Parallel kernels only ever partition OUTPUT elements (never reduction
//    dims), so results are bitwise deterministic for any thread count.
//  - Reductions that feed losses/normalizers accumulate in double.

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "cwm/errors.hpp"

namespace cwm::nn {

int num_threads();
void set_num_threads(int n);

namespace detail {

inline int& thread_count_ref() {
  static int n = 2;
  return n;
}

}  // namespace detail

inline int num_threads() { return detail::thread_count_ref(); }

inline void set_num_threads(int n) {
  detail::thread_count_ref() = std::max(1, n);
#ifdef _OPENMP
  omp_set_num_threads(detail::thread_count_ref());
#endif
}

// f(i) over i in [0, n); static partition.
template <class F>
void parallel_for(int n, F&& f) {
#ifdef _OPENMP
  if (num_threads() > 1 && n > 1) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
#endif
  for (int i = 0; i < n; ++i) f(i);
}

// ---------------------------------------------------------------------------
// GEMM helpers (raw row-major buffers, optional row stride on inputs)
// ---------------------------------------------------------------------------

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<EMat<S>, 0, Eigen::OuterStride<>>;
template <class S>
using CMapM = Eigen::Map<const EMat<S>, 0, Eigen::OuterStride<>>;

// C(m,n) = A(m,k) * B(k,n); rows of C partitioned across threads.
template <class S>
void gemm_nn(const S* a, int lda, const S* b, int ldb, S* c, int ldc, int m, int k, int n,
             bool accumulate = false) {
  const int nt = (static_cast<int64_t>(m) * k * n > 65536) ? std::min(num_threads(), m) : 1;
  parallel_for(nt, [&](int t) {
    const int r0 = static_cast<int>(static_cast<int64_t>(m) * t / nt);
    const int r1 = static_cast<int>(static_cast<int64_t>(m) * (t + 1) / nt);
    if (r0 >= r1) return;
    CMapM<S> A(a + static_cast<int64_t>(r0) * lda, r1 - r0, k, Eigen::OuterStride<>(lda));
    CMapM<S> B(b, k, n, Eigen::OuterStride<>(ldb));
    MapM<S> C(c + static_cast<int64_t>(r0) * ldc, r1 - r0, n, Eigen::OuterStride<>(ldc));
    if (accumulate)
      C.noalias() += A * B;
    else
      C.noalias() = A * B;
  });
}

// C(m,n) = A(m,k) * B(n,k)^T
template <class S>
void gemm_nt(const S* a, int lda, const S* b, int ldb, S* c, int ldc, int m, int k, int n,
             bool accumulate = false) {
  const int nt = (static_cast<int64_t>(m) * k * n > 65536) ? std::min(num_threads(), m) : 1;
  parallel_for(nt, [&](int t) {
    const int r0 = static_cast<int>(static_cast<int64_t>(m) * t / nt);
    const int r1 = static_cast<int>(static_cast<int64_t>(m) * (t + 1) / nt);
    if (r0 >= r1) return;
    CMapM<S> A(a + static_cast<int64_t>(r0) * lda, r1 - r0, k, Eigen::OuterStride<>(lda));
    CMapM<S> B(b, n, k, Eigen::OuterStride<>(ldb));
    MapM<S> C(c + static_cast<int64_t>(r0) * ldc, r1 - r0, n, Eigen::OuterStride<>(ldc));
    if (accumulate)
      C.noalias() += A * B.transpose();
    else
      C.noalias() = A * B.transpose();
  });
}

// C(k,n) = A(m,k)^T * B(m,n); columns of C partitioned across threads so the
// reduction over m keeps a fixed order.
template <class S>
void gemm_tn(const S* a, int lda, const S* b, int ldb, S* c, int ldc, int m, int k, int n,
             bool accumulate = false) {
  const int nt = (static_cast<int64_t>(m) * k * n > 65536) ? std::min(num_threads(), n) : 1;
  parallel_for(nt, [&](int t) {
    const int c0 = static_cast<int>(static_cast<int64_t>(n) * t / nt);
    const int c1 = static_cast<int>(static_cast<int64_t>(n) * (t + 1) / nt);
    if (c0 >= c1) return;
    CMapM<S> A(a, m, k, Eigen::OuterStride<>(lda));
    CMapM<S> B(b + c0, m, c1 - c0, Eigen::OuterStride<>(ldb));
    MapM<S> C(c + c0, k, c1 - c0, Eigen::OuterStride<>(ldc));
    if (accumulate)
      C.noalias() += A.transpose() * B;
    else
      C.noalias() = A.transpose() * B;
  });
}

// ---------------------------------------------------------------------------
// Autograd node and tensor handle
// ---------------------------------------------------------------------------

template <class S>
struct NodeT {
  std::vector<int> shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated on demand, same size as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<NodeT<S>>> parents;
  std::function<void(NodeT<S>&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

// When grad mode is off, ops skip recording parents/backward closures.
bool grad_enabled();

namespace detail {
inline bool& grad_mode_ref() {
  static thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_ref(); }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode_ref()) { detail::grad_mode_ref() = false; }
  ~NoGradGuard() { detail::grad_mode_ref() = prev; }
};

template <class S>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<NodeT<S>> n) : n_(std::move(n)) {}

  static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<NodeT<S>>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), S(0));
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from(std::vector<int> shape, std::vector<S> data, bool requires_grad = false) {
    auto n = std::make_shared<NodeT<S>>();
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw DimensionError("TensorT::from: data size does not match shape");
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int64_t numel() const { return n_->numel(); }
  int cols() const { return n_->shape.back(); }
  int rows() const { return static_cast<int>(numel() / cols()); }

  S* data() { return n_->value.data(); }
  const S* data() const { return n_->value.data(); }
  S* grad() {
    n_->ensure_grad();
    return n_->grad.data();
  }
  const std::vector<S>& grad_vec() const { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
  }

  S item() const {
    if (numel() != 1) throw DimensionError("item(): tensor is not a scalar");
    return n_->value[0];
  }

  std::shared_ptr<NodeT<S>> node() const { return n_; }

  static int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

 private:
  std::shared_ptr<NodeT<S>> n_;
};

namespace detail {

template <class S>
std::shared_ptr<NodeT<S>> make_node(std::vector<int> shape,
                                    std::initializer_list<TensorT<S>> parents) {
  auto n = std::make_shared<NodeT<S>>();
  n->shape = std::move(shape);
  n->value.resize(static_cast<size_t>(TensorT<S>::shape_numel(n->shape)));
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p.defined() && p.node()->requires_grad) n->requires_grad = true;
    if (n->requires_grad)
      for (const auto& p : parents)
        if (p.defined()) n->parents.push_back(p.node());
  }
  return n;
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Creation order is not tracked, so
// ordering comes from an iterative post-order DFS over parents.
template <class S>
void backward(const TensorT<S>& loss) {
  if (loss.numel() != 1) throw DimensionError("backward: loss must be scalar");
  auto root = loss.node();
  if (!root->requires_grad) return;
  root->ensure_grad();
  root->grad[0] = S(1);

  std::vector<NodeT<S>*> order;
  std::vector<std::pair<NodeT<S>*, size_t>> stack;
  std::unordered_set<const NodeT<S>*> seen;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      NodeT<S>* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // order is post-order (parents before children); run children first.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<S>* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) throw DimensionError("add: shape mismatch");
  auto n = detail::make_node<S>(a.shape(), {a, b});
  const int64_t m = a.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S* out = n->value.data();
  for (int64_t i = 0; i < m; ++i) out[i] = pa[i] + pb[i];
  if (n->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    n->backward_fn = [an, bn, m](NodeT<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t i = 0; i < m; ++i) an->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t i = 0; i < m; ++i) bn->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
      }
    };
  }
  return TensorT<S>(n);
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) throw DimensionError("mul: shape mismatch");
  auto n = detail::make_node<S>(a.shape(), {a, b});
  const int64_t m = a.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S* out = n->value.data();
  for (int64_t i = 0; i < m; ++i) out[i] = pa[i] * pb[i];
  if (n->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    n->backward_fn = [an, bn, m](NodeT<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          an->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * bn->value[static_cast<size_t>(i)];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          bn->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * an->value[static_cast<size_t>(i)];
      }
    };
  }
  return TensorT<S>(n);
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, double s) {
  auto n = detail::make_node<S>(a.shape(), {a});
  const int64_t m = a.numel();
  const S* pa = a.data();
  S* out = n->value.data();
  const S fs = static_cast<S>(s);
  for (int64_t i = 0; i < m; ++i) out[i] = pa[i] * fs;
  if (n->requires_grad) {
    auto an = a.node();
    n->backward_fn = [an, m, fs](NodeT<S>& self) {
      an->ensure_grad();
      for (int64_t i = 0; i < m; ++i) an->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * fs;
    };
  }
  return TensorT<S>(n);
}

// y = x W + b;  x: [..., in], W: [in, out], b: [out] (optional)
template <class S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b = {}) {
  const int in = x.cols();
  if (w.ndim() != 2 || w.dim(0) != in) throw DimensionError("linear: weight shape mismatch");
  const int out = w.dim(1);
  const int rows = x.rows();
  std::vector<int> oshape = x.shape();
  oshape.back() = out;
  auto n = b.defined() ? detail::make_node<S>(oshape, {x, w, b})
                       : detail::make_node<S>(oshape, {x, w});
  gemm_nn(x.data(), in, w.data(), out, n->value.data(), out, rows, in, out);
  if (b.defined()) {
    if (b.numel() != out) throw DimensionError("linear: bias shape mismatch");
    S* y = n->value.data();
    const S* pb = b.data();
    parallel_for(rows, [&](int r) {
      S* row = y + static_cast<int64_t>(r) * out;
      for (int c = 0; c < out; ++c) row[c] += pb[c];
    });
  }
  if (n->requires_grad) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    n->backward_fn = [xn, wn, bn, rows, in, out](NodeT<S>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        gemm_nt(self.grad.data(), out, wn->value.data(), out, xn->grad.data(), in, rows, out, in,
                /*accumulate=*/true);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        gemm_tn(xn->value.data(), in, self.grad.data(), out, wn->grad.data(), out, rows, in, out,
                /*accumulate=*/true);
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        parallel_for(out, [&](int c) {
          double acc = 0.0;
          for (int r = 0; r < rows; ++r) acc += self.grad[static_cast<size_t>(r) * out + c];
          bn->grad[static_cast<size_t>(c)] += static_cast<S>(acc);
        });
      }
    };
  }
  return TensorT<S>(n);
}

template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      double eps = 1e-5) {
  const int d = x.cols();
  const int rows = x.rows();
  if (gamma.numel() != d || beta.numel() != d) throw DimensionError("layer_norm: affine shape mismatch");
  auto n = detail::make_node<S>(x.shape(), {x, gamma, beta});
  auto stats = std::make_shared<std::vector<S>>(static_cast<size_t>(rows) * 2);  // mean, inv_std
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* out = n->value.data();
  parallel_for(rows, [&](int r) {
    const S* row = px + static_cast<int64_t>(r) * d;
    double mean = 0.0;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) {
      const double t = row[c] - mean;
      var += t * t;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[static_cast<size_t>(r) * 2] = static_cast<S>(mean);
    (*stats)[static_cast<size_t>(r) * 2 + 1] = static_cast<S>(inv);
    S* orow = out + static_cast<int64_t>(r) * d;
    for (int c = 0; c < d; ++c)
      orow[c] = static_cast<S>((row[c] - mean) * inv) * pg[c] + pb[c];
  });
  if (n->requires_grad) {
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    n->backward_fn = [xn, gn, bn, stats, rows, d](NodeT<S>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        parallel_for(rows, [&](int r) {
          const S mean = (*stats)[static_cast<size_t>(r) * 2];
          const S inv = (*stats)[static_cast<size_t>(r) * 2 + 1];
          const S* xrow = xn->value.data() + static_cast<int64_t>(r) * d;
          const S* grow = self.grad.data() + static_cast<int64_t>(r) * d;
          double sum_gy = 0.0, sum_gyx = 0.0;
          for (int c = 0; c < d; ++c) {
            const double gy = static_cast<double>(grow[c]) * gn->value[static_cast<size_t>(c)];
            const double xh = (xrow[c] - mean) * inv;
            sum_gy += gy;
            sum_gyx += gy * xh;
          }
          S* gx = xn->grad.data() + static_cast<int64_t>(r) * d;
          for (int c = 0; c < d; ++c) {
            const double gy = static_cast<double>(grow[c]) * gn->value[static_cast<size_t>(c)];
            const double xh = (xrow[c] - mean) * inv;
            gx[c] += static_cast<S>((gy - sum_gy / d - xh * sum_gyx / d) * inv);
          }
        });
      }
      if (gn->requires_grad || bn->requires_grad) {
        gn->ensure_grad();
        bn->ensure_grad();
        parallel_for(d, [&](int c) {
          double gsum = 0.0, bsum = 0.0;
          for (int r = 0; r < rows; ++r) {
            const S mean = (*stats)[static_cast<size_t>(r) * 2];
            const S inv = (*stats)[static_cast<size_t>(r) * 2 + 1];
            const double xh = (xn->value[static_cast<size_t>(r) * d + c] - mean) * inv;
            const double gy = self.grad[static_cast<size_t>(r) * d + c];
            gsum += gy * xh;
            bsum += gy;
          }
          gn->grad[static_cast<size_t>(c)] += static_cast<S>(gsum);
          bn->grad[static_cast<size_t>(c)] += static_cast<S>(bsum);
        });
      }
    };
  }
  return TensorT<S>(n);
}

namespace detail {

// Elementwise loops are chunked across threads; each chunk writes a
// disjoint output range.
template <class S, class Fn>
void parallel_elements(int64_t m, Fn&& fn) {
  const int chunks = m > 16384 ? num_threads() : 1;
  parallel_for(chunks, [&](int c) {
    const int64_t lo = m * c / chunks;
    const int64_t hi = m * (c + 1) / chunks;
    for (int64_t i = lo; i < hi; ++i) fn(i);
  });
}

template <class S, class FwdFn, class GradFn>
TensorT<S> unary_op(const TensorT<S>& x, FwdFn fwd, GradFn grad_from_x) {
  auto n = make_node<S>(x.shape(), {x});
  const int64_t m = x.numel();
  const S* px = x.data();
  S* out = n->value.data();
  parallel_elements<S>(m, [&](int64_t i) { out[i] = fwd(px[i]); });
  if (n->requires_grad) {
    auto xn = x.node();
    n->backward_fn = [xn, m, grad_from_x](NodeT<S>& self) {
      xn->ensure_grad();
      S* gx = xn->grad.data();
      const S* g = self.grad.data();
      const S* xv = xn->value.data();
      parallel_elements<S>(m, [&](int64_t i) { gx[i] += g[i] * grad_from_x(xv[i]); });
    };
  }
  return TensorT<S>(n);
}

}  // namespace detail

// Activations compute in the tensor's own precision (tanhf/expf for the
// float instantiation); the double instantiation drives gradient checks.
template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
  // tanh approximation
  auto fwd = [](S v) {
    return S(0.5) * v * (S(1) + std::tanh(S(0.7978845608028654) * (v + S(0.044715) * v * v * v)));
  };
  auto grad = [](S v) {
    const S u = S(0.7978845608028654) * (v + S(0.044715) * v * v * v);
    const S th = std::tanh(u);
    const S du = S(0.7978845608028654) * (S(1) + S(3.0 * 0.044715) * v * v);
    return S(0.5) * (S(1) + th) + S(0.5) * v * (S(1) - th * th) * du;
  };
  return detail::unary_op(x, fwd, grad);
}

template <class S>
TensorT<S> silu(const TensorT<S>& x) {
  auto fwd = [](S v) { return v / (S(1) + std::exp(-v)); };
  auto grad = [](S v) {
    const S sg = S(1) / (S(1) + std::exp(-v));
    return sg * (S(1) + v * (S(1) - sg));
  };
  return detail::unary_op(x, fwd, grad);
}

template <class S>
TensorT<S> tanh_act(const TensorT<S>& x) {
  auto fwd = [](S v) { return std::tanh(v); };
  auto grad = [](S v) {
    const S t = std::tanh(v);
    return S(1) - t * t;
  };
  return detail::unary_op(x, fwd, grad);
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  auto fwd = [](S v) { return S(1) / (S(1) + std::exp(-v)); };
  auto grad = [](S v) {
    const S sg = S(1) / (S(1) + std::exp(-v));
    return sg * (S(1) - sg);
  };
  return detail::unary_op(x, fwd, grad);
}

// Attention mask shared across batch and heads; allow[q*tk + k] != 0 means
// query q may attend key k.
struct AttnMask {
  int tq = 0, tk = 0;
  std::vector<uint8_t> allow;

  static AttnMask full(int tq, int tk) {
    AttnMask m;
    m.tq = tq;
    m.tk = tk;
    m.allow.assign(static_cast<size_t>(tq) * tk, 1);
    return m;
  }
};

// Multi-head scaled dot-product attention. q: [B, Tq, D], k/v: [B, Tk, D].
// Head h uses feature slice [h*hd, (h+1)*hd). Probabilities are retained
// for the backward pass; save_probs (when non-null) receives a copy laid
// out as [B, H, Tq, Tk].
template <class S>
TensorT<S> attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v, int n_heads,
                     const AttnMask* mask = nullptr, std::vector<S>* save_probs = nullptr) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3)
    throw DimensionError("attention: expects [B, T, D] inputs");
  const int B = q.dim(0), tq = q.dim(1), d = q.dim(2);
  const int tk = k.dim(1);
  if (k.dim(0) != B || v.dim(0) != B || v.dim(1) != tk || k.dim(2) != d || v.dim(2) != d)
    throw DimensionError("attention: k/v shape mismatch");
  if (d % n_heads != 0) throw DimensionError("attention: dim not divisible by heads");
  if (mask && (mask->tq != tq || mask->tk != tk))
    throw DimensionError("attention: mask shape mismatch");
  const int hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  auto n = detail::make_node<S>({B, tq, d}, {q, k, v});
  auto probs = std::make_shared<std::vector<S>>(
      static_cast<size_t>(B) * n_heads * tq * tk);

  const int bh = B * n_heads;
  parallel_for(bh, [&](int idx) {
    const int b = idx / n_heads;
    const int h = idx % n_heads;
    const S* qp = q.data() + (static_cast<int64_t>(b) * tq) * d + h * hd;
    const S* kp = k.data() + (static_cast<int64_t>(b) * tk) * d + h * hd;
    const S* vp = v.data() + (static_cast<int64_t>(b) * tk) * d + h * hd;
    S* pp = probs->data() + static_cast<int64_t>(idx) * tq * tk;
    // scores
    CMapM<S> Q(qp, tq, hd, Eigen::OuterStride<>(d));
    CMapM<S> K(kp, tk, hd, Eigen::OuterStride<>(d));
    MapM<S> P(pp, tq, tk, Eigen::OuterStride<>(tk));
    P.noalias() = Q * K.transpose();
    for (int r = 0; r < tq; ++r) {
      S* prow = pp + static_cast<int64_t>(r) * tk;
      const uint8_t* arow = mask ? mask->allow.data() + static_cast<size_t>(r) * tk : nullptr;
      double mx = -1e300;
      for (int c = 0; c < tk; ++c) {
        if (arow && !arow[c]) continue;
        const double s = static_cast<double>(prow[c]) * inv_sqrt;
        if (s > mx) mx = s;
      }
      double sum = 0.0;
      for (int c = 0; c < tk; ++c) {
        if (arow && !arow[c]) {
          prow[c] = S(0);
          continue;
        }
        const double e = std::exp(static_cast<double>(prow[c]) * inv_sqrt - mx);
        prow[c] = static_cast<S>(e);
        sum += e;
      }
      if (sum <= 0.0) continue;  // row with no allowed keys stays zero
      const S inv_sum = static_cast<S>(1.0 / sum);
      for (int c = 0; c < tk; ++c) prow[c] *= inv_sum;
    }
    // out = P * V
    MapM<S> O(n->value.data() + (static_cast<int64_t>(b) * tq) * d + h * hd, tq, hd,
              Eigen::OuterStride<>(d));
    CMapM<S> V(vp, tk, hd, Eigen::OuterStride<>(d));
    CMapM<S> Pc(pp, tq, tk, Eigen::OuterStride<>(tk));
    O.noalias() = Pc * V;
  });
  if (save_probs) *save_probs = *probs;

  if (n->requires_grad) {
    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    n->backward_fn = [qn, kn, vn, probs, B, tq, tk, d, hd, n_heads, inv_sqrt](NodeT<S>& self) {
      qn->ensure_grad();
      kn->ensure_grad();
      vn->ensure_grad();
      const int bh = B * n_heads;
      parallel_for(bh, [&](int idx) {
        const int b = idx / n_heads;
        const int h = idx % n_heads;
        const int64_t qoff = (static_cast<int64_t>(b) * tq) * d + h * hd;
        const int64_t koff = (static_cast<int64_t>(b) * tk) * d + h * hd;
        const S* pp = probs->data() + static_cast<int64_t>(idx) * tq * tk;
        CMapM<S> P(pp, tq, tk, Eigen::OuterStride<>(tk));
        CMapM<S> dO(self.grad.data() + qoff, tq, hd, Eigen::OuterStride<>(d));
        CMapM<S> Q(qn->value.data() + qoff, tq, hd, Eigen::OuterStride<>(d));
        CMapM<S> K(kn->value.data() + koff, tk, hd, Eigen::OuterStride<>(d));
        CMapM<S> V(vn->value.data() + koff, tk, hd, Eigen::OuterStride<>(d));
        MapM<S> dQ(qn->grad.data() + qoff, tq, hd, Eigen::OuterStride<>(d));
        MapM<S> dK(kn->grad.data() + koff, tk, hd, Eigen::OuterStride<>(d));
        MapM<S> dV(vn->grad.data() + koff, tk, hd, Eigen::OuterStride<>(d));

        dV.noalias() += P.transpose() * dO;
        EMat<S> dP = dO * V.transpose();  // [tq, tk]
        // softmax backward: dS = P .* (dP - rowsum(dP .* P))
        for (int r = 0; r < tq; ++r) {
          double rs = 0.0;
          for (int c = 0; c < tk; ++c)
            rs += static_cast<double>(dP(r, c)) * P(r, c);
          for (int c = 0; c < tk; ++c)
            dP(r, c) = static_cast<S>((static_cast<double>(dP(r, c)) - rs) * P(r, c) * inv_sqrt);
        }
        dQ.noalias() += dP * K;
        dK.noalias() += dP.transpose() * Q;
      });
    };
  }
  return TensorT<S>(n);
}

// Rows of `table` gathered by index; out: [n, D].
template <class S>
TensorT<S> embedding(const TensorT<S>& table, const std::vector<int>& idx) {
  if (table.ndim() != 2) throw DimensionError("embedding: table must be 2-D");
  const int v = table.dim(0), d = table.dim(1);
  auto n = detail::make_node<S>({static_cast<int>(idx.size()), d}, {table});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= v) throw RangeError("embedding: index out of range");
    std::copy_n(table.data() + static_cast<int64_t>(idx[i]) * d, d,
                n->value.data() + static_cast<int64_t>(i) * d);
  }
  if (n->requires_grad) {
    auto tn = table.node();
    auto ids = std::make_shared<std::vector<int>>(idx);
    n->backward_fn = [tn, ids, d](NodeT<S>& self) {
      tn->ensure_grad();
      for (size_t i = 0; i < ids->size(); ++i) {
        S* dst = tn->grad.data() + static_cast<int64_t>((*ids)[i]) * d;
        const S* src = self.grad.data() + static_cast<int64_t>(i) * d;
        for (int c = 0; c < d; ++c) dst[c] += src[c];
      }
    };
  }
  return TensorT<S>(n);
}

// x: [B, T, D] + pe: [T, D] broadcast over batch.
template <class S>
TensorT<S> add_time_broadcast(const TensorT<S>& x, const TensorT<S>& pe) {
  if (x.ndim() != 3 || pe.ndim() != 2 || x.dim(1) != pe.dim(0) || x.dim(2) != pe.dim(1))
    throw DimensionError("add_time_broadcast: shape mismatch");
  const int B = x.dim(0), T = x.dim(1), d = x.dim(2);
  auto n = detail::make_node<S>(x.shape(), {x, pe});
  const S* px = x.data();
  const S* pp = pe.data();
  S* out = n->value.data();
  parallel_for(B * T, [&](int r) {
    const int t = r % T;
    const S* xr = px + static_cast<int64_t>(r) * d;
    const S* pr = pp + static_cast<int64_t>(t) * d;
    S* orow = out + static_cast<int64_t>(r) * d;
    for (int c = 0; c < d; ++c) orow[c] = xr[c] + pr[c];
  });
  if (n->requires_grad) {
    auto xn = x.node();
    auto pn = pe.node();
    n->backward_fn = [xn, pn, B, T, d](NodeT<S>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        const int64_t m = static_cast<int64_t>(B) * T * d;
        for (int64_t i = 0; i < m; ++i) xn->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
      }
      if (pn->requires_grad) {
        pn->ensure_grad();
        parallel_for(T, [&](int t) {
          for (int b = 0; b < B; ++b) {
            const S* src = self.grad.data() + (static_cast<int64_t>(b) * T + t) * d;
            S* dst = pn->grad.data() + static_cast<int64_t>(t) * d;
            for (int c = 0; c < d; ++c) dst[c] += src[c];
          }
        });
      }
    };
  }
  return TensorT<S>(n);
}

// FiLM / adaLN modulate: y = x * (1 + scale) + shift, with scale/shift
// [B, D] broadcast over x's time axis ([B, T, D]) or applied directly
// ([B, D]).
template <class S>
TensorT<S> modulate(const TensorT<S>& x, const TensorT<S>& sc, const TensorT<S>& sh) {
  const int d = x.cols();
  const bool has_time = x.ndim() == 3;
  const int B = x.dim(0);
  const int T = has_time ? x.dim(1) : 1;
  if (sc.ndim() != 2 || sc.dim(0) != B || sc.dim(1) != d || sh.shape() != sc.shape())
    throw DimensionError("modulate: scale/shift must be [B, D]");
  auto n = detail::make_node<S>(x.shape(), {x, sc, sh});
  parallel_for(B * T, [&](int r) {
    const int b = r / T;
    const S* xr = x.data() + static_cast<int64_t>(r) * d;
    const S* scr = sc.data() + static_cast<int64_t>(b) * d;
    const S* shr = sh.data() + static_cast<int64_t>(b) * d;
    S* orow = n->value.data() + static_cast<int64_t>(r) * d;
    for (int c = 0; c < d; ++c) orow[c] = xr[c] * (S(1) + scr[c]) + shr[c];
  });
  if (n->requires_grad) {
    auto xn = x.node();
    auto scn = sc.node();
    auto shn = sh.node();
    n->backward_fn = [xn, scn, shn, B, T, d](NodeT<S>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        parallel_for(B * T, [&](int r) {
          const int b = r / T;
          const S* g = self.grad.data() + static_cast<int64_t>(r) * d;
          const S* scr = scn->value.data() + static_cast<int64_t>(b) * d;
          S* gx = xn->grad.data() + static_cast<int64_t>(r) * d;
          for (int c = 0; c < d; ++c) gx[c] += g[c] * (S(1) + scr[c]);
        });
      }
      if (scn->requires_grad || shn->requires_grad) {
        scn->ensure_grad();
        shn->ensure_grad();
        parallel_for(B, [&](int b) {
          S* gsc = scn->grad.data() + static_cast<int64_t>(b) * d;
          S* gsh = shn->grad.data() + static_cast<int64_t>(b) * d;
          for (int t = 0; t < T; ++t) {
            const int64_t r = static_cast<int64_t>(b) * T + t;
            const S* g = self.grad.data() + r * d;
            const S* xr = xn->value.data() + r * d;
            for (int c = 0; c < d; ++c) {
              gsc[c] += g[c] * xr[c];
              gsh[c] += g[c];
            }
          }
        });
      }
    };
  }
  return TensorT<S>(n);
}

// y = x * gate with gate [B, D] broadcast over time.
template <class S>
TensorT<S> scale_rows(const TensorT<S>& x, const TensorT<S>& gate) {
  const int d = x.cols();
  const bool has_time = x.ndim() == 3;
  const int B = x.dim(0);
  const int T = has_time ? x.dim(1) : 1;
  if (gate.ndim() != 2 || gate.dim(0) != B || gate.dim(1) != d)
    throw DimensionError("scale_rows: gate must be [B, D]");
  auto n = detail::make_node<S>(x.shape(), {x, gate});
  parallel_for(B * T, [&](int r) {
    const int b = r / T;
    const S* xr = x.data() + static_cast<int64_t>(r) * d;
    const S* gr = gate.data() + static_cast<int64_t>(b) * d;
    S* orow = n->value.data() + static_cast<int64_t>(r) * d;
    for (int c = 0; c < d; ++c) orow[c] = xr[c] * gr[c];
  });
  if (n->requires_grad) {
    auto xn = x.node();
    auto gn = gate.node();
    n->backward_fn = [xn, gn, B, T, d](NodeT<S>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        parallel_for(B * T, [&](int r) {
          const int b = r / T;
          const S* g = self.grad.data() + static_cast<int64_t>(r) * d;
          const S* gr = gn->value.data() + static_cast<int64_t>(b) * d;
          S* gx = xn->grad.data() + static_cast<int64_t>(r) * d;
          for (int c = 0; c < d; ++c) gx[c] += g[c] * gr[c];
        });
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        parallel_for(B, [&](int b) {
          S* gg = gn->grad.data() + static_cast<int64_t>(b) * d;
          for (int t = 0; t < T; ++t) {
            const int64_t r = static_cast<int64_t>(b) * T + t;
            const S* g = self.grad.data() + r * d;
            const S* xr = xn->value.data() + r * d;
            for (int c = 0; c < d; ++c) gg[c] += g[c] * xr[c];
          }
        });
      }
    };
  }
  return TensorT<S>(n);
}

template <class S>
TensorT<S> concat_time(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw DimensionError("concat_time: shape mismatch");
  const int B = a.dim(0), ta = a.dim(1), tb = b.dim(1), d = a.dim(2);
  auto n = detail::make_node<S>({B, ta + tb, d}, {a, b});
  for (int bi = 0; bi < B; ++bi) {
    std::copy_n(a.data() + static_cast<int64_t>(bi) * ta * d, static_cast<int64_t>(ta) * d,
                n->value.data() + static_cast<int64_t>(bi) * (ta + tb) * d);
    std::copy_n(b.data() + static_cast<int64_t>(bi) * tb * d, static_cast<int64_t>(tb) * d,
                n->value.data() + static_cast<int64_t>(bi) * (ta + tb) * d + static_cast<int64_t>(ta) * d);
  }
  if (n->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    n->backward_fn = [an, bn, B, ta, tb, d](NodeT<S>& self) {
      for (int bi = 0; bi < B; ++bi) {
        const S* g = self.grad.data() + static_cast<int64_t>(bi) * (ta + tb) * d;
        if (an->requires_grad) {
          an->ensure_grad();
          S* ga = an->grad.data() + static_cast<int64_t>(bi) * ta * d;
          for (int64_t i = 0; i < static_cast<int64_t>(ta) * d; ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          S* gb = bn->grad.data() + static_cast<int64_t>(bi) * tb * d;
          const S* gsrc = g + static_cast<int64_t>(ta) * d;
          for (int64_t i = 0; i < static_cast<int64_t>(tb) * d; ++i) gb[i] += gsrc[i];
        }
      }
    };
  }
  return TensorT<S>(n);
}

template <class S>
TensorT<S> slice_time(const TensorT<S>& x, int t0, int len) {
  if (x.ndim() != 3) throw DimensionError("slice_time: expects [B, T, D]");
  const int B = x.dim(0), T = x.dim(1), d = x.dim(2);
  if (t0 < 0 || t0 + len > T) throw RangeError("slice_time: out of range");
  auto n = detail::make_node<S>({B, len, d}, {x});
  for (int b = 0; b < B; ++b)
    std::copy_n(x.data() + (static_cast<int64_t>(b) * T + t0) * d, static_cast<int64_t>(len) * d,
                n->value.data() + static_cast<int64_t>(b) * len * d);
  if (n->requires_grad) {
    auto xn = x.node();
    n->backward_fn = [xn, B, T, d, t0, len](NodeT<S>& self) {
      xn->ensure_grad();
      for (int b = 0; b < B; ++b) {
        S* gx = xn->grad.data() + (static_cast<int64_t>(b) * T + t0) * d;
        const S* g = self.grad.data() + static_cast<int64_t>(b) * len * d;
        for (int64_t i = 0; i < static_cast<int64_t>(len) * d; ++i) gx[i] += g[i];
      }
    };
  }
  return TensorT<S>(n);
}

// Column slice of the last dimension: out[..., 0:len] = x[..., c0:c0+len].
template <class S>
TensorT<S> slice_cols(const TensorT<S>& x, int c0, int len) {
  const int d = x.cols();
  const int rows = x.rows();
  if (c0 < 0 || c0 + len > d) throw RangeError("slice_cols: out of range");
  std::vector<int> oshape = x.shape();
  oshape.back() = len;
  auto n = detail::make_node<S>(oshape, {x});
  for (int r = 0; r < rows; ++r)
    std::copy_n(x.data() + static_cast<int64_t>(r) * d + c0, len,
                n->value.data() + static_cast<int64_t>(r) * len);
  if (n->requires_grad) {
    auto xn = x.node();
    n->backward_fn = [xn, rows, d, c0, len](NodeT<S>& self) {
      xn->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        S* gx = xn->grad.data() + static_cast<int64_t>(r) * d + c0;
        const S* g = self.grad.data() + static_cast<int64_t>(r) * len;
        for (int c = 0; c < len; ++c) gx[c] += g[c];
      }
    };
  }
  return TensorT<S>(n);
}

// Gather whole rows (tokens) from a flattened [R, D] view.
template <class S>
TensorT<S> gather_rows(const TensorT<S>& x, const std::vector<int>& rows_idx) {
  const int d = x.cols();
  const int rows = x.rows();
  auto n = detail::make_node<S>({static_cast<int>(rows_idx.size()), d}, {x});
  for (size_t i = 0; i < rows_idx.size(); ++i) {
    if (rows_idx[i] < 0 || rows_idx[i] >= rows) throw RangeError("gather_rows: out of range");
    std::copy_n(x.data() + static_cast<int64_t>(rows_idx[i]) * d, d,
                n->value.data() + static_cast<int64_t>(i) * d);
  }
  if (n->requires_grad) {
    auto xn = x.node();
    auto ids = std::make_shared<std::vector<int>>(rows_idx);
    n->backward_fn = [xn, ids, d](NodeT<S>& self) {
      xn->ensure_grad();
      for (size_t i = 0; i < ids->size(); ++i) {
        S* dst = xn->grad.data() + static_cast<int64_t>((*ids)[i]) * d;
        const S* src = self.grad.data() + static_cast<int64_t>(i) * d;
        for (int c = 0; c < d; ++c) dst[c] += src[c];
      }
    };
  }
  return TensorT<S>(n);
}

// Replace rows where flag != 0 with a learned [D] embedding.
template <class S>
TensorT<S> replace_masked_rows(const TensorT<S>& x, const TensorT<S>& mask_emb,
                               const std::vector<uint8_t>& flags) {
  const int d = x.cols();
  const int rows = x.rows();
  if (mask_emb.numel() != d) throw DimensionError("replace_masked_rows: embedding dim mismatch");
  if (static_cast<int>(flags.size()) != rows)
    throw DimensionError("replace_masked_rows: flag count mismatch");
  auto n = detail::make_node<S>(x.shape(), {x, mask_emb});
  for (int r = 0; r < rows; ++r) {
    const S* src = flags[static_cast<size_t>(r)] ? mask_emb.data() : x.data() + static_cast<int64_t>(r) * d;
    std::copy_n(src, d, n->value.data() + static_cast<int64_t>(r) * d);
  }
  if (n->requires_grad) {
    auto xn = x.node();
    auto mn = mask_emb.node();
    auto fl = std::make_shared<std::vector<uint8_t>>(flags);
    n->backward_fn = [xn, mn, fl, rows, d](NodeT<S>& self) {
      if (xn->requires_grad) xn->ensure_grad();
      if (mn->requires_grad) mn->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const S* g = self.grad.data() + static_cast<int64_t>(r) * d;
        if ((*fl)[static_cast<size_t>(r)]) {
          if (mn->requires_grad)
            for (int c = 0; c < d; ++c) mn->grad[static_cast<size_t>(c)] += g[c];
        } else if (xn->requires_grad) {
          S* gx = xn->grad.data() + static_cast<int64_t>(r) * d;
          for (int c = 0; c < d; ++c) gx[c] += g[c];
        }
      }
    };
  }
  return TensorT<S>(n);
}

template <class S>
TensorT<S> reshape(const TensorT<S>& x, std::vector<int> new_shape) {
  if (TensorT<S>::shape_numel(new_shape) != x.numel())
    throw DimensionError("reshape: element count mismatch");
  auto n = detail::make_node<S>(new_shape, {x});
  std::copy_n(x.data(), x.numel(), n->value.data());
  if (n->requires_grad) {
    auto xn = x.node();
    const int64_t m = x.numel();
    n->backward_fn = [xn, m](NodeT<S>& self) {
      xn->ensure_grad();
      for (int64_t i = 0; i < m; ++i) xn->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
    };
  }
  return TensorT<S>(n);
}

// Mean over the time axis: [B, T, D] -> [B, D].
template <class S>
TensorT<S> mean_time(const TensorT<S>& x) {
  if (x.ndim() != 3) throw DimensionError("mean_time: expects [B, T, D]");
  const int B = x.dim(0), T = x.dim(1), d = x.dim(2);
  auto n = detail::make_node<S>({B, d}, {x});
  parallel_for(B, [&](int b) {
    S* orow = n->value.data() + static_cast<int64_t>(b) * d;
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (int t = 0; t < T; ++t) acc += x.data()[(static_cast<int64_t>(b) * T + t) * d + c];
      orow[c] = static_cast<S>(acc / T);
    }
  });
  if (n->requires_grad) {
    auto xn = x.node();
    n->backward_fn = [xn, B, T, d](NodeT<S>& self) {
      xn->ensure_grad();
      const S inv = S(1) / static_cast<S>(T);
      parallel_for(B, [&](int b) {
        const S* g = self.grad.data() + static_cast<int64_t>(b) * d;
        for (int t = 0; t < T; ++t) {
          S* gx = xn->grad.data() + (static_cast<int64_t>(b) * T + t) * d;
          for (int c = 0; c < d; ++c) gx[c] += g[c] * inv;
        }
      });
    };
  }
  return TensorT<S>(n);
}

// Value comes from `quantized`, gradient flows to x unchanged.
template <class S>
TensorT<S> straight_through(const TensorT<S>& x, const std::vector<S>& quantized) {
  if (static_cast<int64_t>(quantized.size()) != x.numel())
    throw DimensionError("straight_through: size mismatch");
  auto n = detail::make_node<S>(x.shape(), {x});
  std::copy(quantized.begin(), quantized.end(), n->value.begin());
  if (n->requires_grad) {
    auto xn = x.node();
    const int64_t m = x.numel();
    n->backward_fn = [xn, m](NodeT<S>& self) {
      xn->ensure_grad();
      for (int64_t i = 0; i < m; ++i) xn->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
    };
  }
  return TensorT<S>(n);
}

// Mean of w_i * -log softmax(logits_i)[target_i] over rows with w_i > 0,
// normalized by sum(w). logits: [R, C].
template <class S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& targets,
                         const std::vector<double>& weights = {}) {
  const int rows = logits.rows(), c = logits.cols();
  if (static_cast<int>(targets.size()) != rows) throw DimensionError("cross_entropy: target count mismatch");
  if (!weights.empty() && static_cast<int>(weights.size()) != rows)
    throw DimensionError("cross_entropy: weight count mismatch");
  auto n = detail::make_node<S>({1}, {logits});
  auto probs = std::make_shared<std::vector<S>>(static_cast<size_t>(rows) * c);
  double wsum = 0.0;
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double w = weights.empty() ? 1.0 : weights[static_cast<size_t>(r)];
    wsum += w;
  }
  if (wsum <= 0.0) throw ValidationError("cross_entropy: no weighted rows");
  parallel_for(rows, [&](int r) {
    const S* row = logits.data() + static_cast<int64_t>(r) * c;
    S* prow = probs->data() + static_cast<int64_t>(r) * c;
    double mx = -1e300;
    for (int j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      const double e = std::exp(static_cast<double>(row[j]) - mx);
      prow[j] = static_cast<S>(e);
      sum += e;
    }
    const S inv = static_cast<S>(1.0 / sum);
    for (int j = 0; j < c; ++j) prow[j] *= inv;
  });
  for (int r = 0; r < rows; ++r) {
    const double w = weights.empty() ? 1.0 : weights[static_cast<size_t>(r)];
    if (w == 0.0) continue;
    const int t = targets[static_cast<size_t>(r)];
    if (t < 0 || t >= c) throw RangeError("cross_entropy: target out of range");
    const double p = std::max(static_cast<double>((*probs)[static_cast<size_t>(r) * c + t]), 1e-30);
    loss += -w * std::log(p);
  }
  n->value[0] = static_cast<S>(loss / wsum);
  if (n->requires_grad) {
    auto ln = logits.node();
    auto tgt = std::make_shared<std::vector<int>>(targets);
    auto wts = std::make_shared<std::vector<double>>(weights);
    n->backward_fn = [ln, tgt, wts, probs, rows, c, wsum](NodeT<S>& self) {
      ln->ensure_grad();
      const double g0 = static_cast<double>(self.grad[0]) / wsum;
      parallel_for(rows, [&](int r) {
        const double w = wts->empty() ? 1.0 : (*wts)[static_cast<size_t>(r)];
        if (w == 0.0) return;
        const S* prow = probs->data() + static_cast<int64_t>(r) * c;
        S* grow = ln->grad.data() + static_cast<int64_t>(r) * c;
        const int t = (*tgt)[static_cast<size_t>(r)];
        for (int j = 0; j < c; ++j)
          grow[j] += static_cast<S>(g0 * w * (static_cast<double>(prow[j]) - (j == t ? 1.0 : 0.0)));
      });
    };
  }
  return TensorT<S>(n);
}

// Mean squared error against constant targets, optionally element-weighted
// (weights in {0,1} act as a mask; normalizer is the weighted count).
template <class S>
TensorT<S> mse_loss(const TensorT<S>& pred, const std::vector<S>& target,
                    const std::vector<S>& weights = {}) {
  const int64_t m = pred.numel();
  if (static_cast<int64_t>(target.size()) != m) throw DimensionError("mse_loss: target size mismatch");
  if (!weights.empty() && static_cast<int64_t>(weights.size()) != m)
    throw DimensionError("mse_loss: weight size mismatch");
  auto n = detail::make_node<S>({1}, {pred});
  double wsum = 0.0, loss = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const double w = weights.empty() ? 1.0 : static_cast<double>(weights[static_cast<size_t>(i)]);
    const double dlt = static_cast<double>(pred.data()[i]) - static_cast<double>(target[static_cast<size_t>(i)]);
    loss += w * dlt * dlt;
    wsum += w;
  }
  if (wsum <= 0.0) throw ValidationError("mse_loss: no weighted elements");
  n->value[0] = static_cast<S>(loss / wsum);
  if (n->requires_grad) {
    auto pn = pred.node();
    auto tgt = std::make_shared<std::vector<S>>(target);
    auto wts = std::make_shared<std::vector<S>>(weights);
    n->backward_fn = [pn, tgt, wts, m, wsum](NodeT<S>& self) {
      pn->ensure_grad();
      const double g0 = 2.0 * static_cast<double>(self.grad[0]) / wsum;
      for (int64_t i = 0; i < m; ++i) {
        const double w = wts->empty() ? 1.0 : static_cast<double>((*wts)[static_cast<size_t>(i)]);
        if (w == 0.0) continue;
        pn->grad[static_cast<size_t>(i)] += static_cast<S>(
            g0 * w * (static_cast<double>(pn->value[static_cast<size_t>(i)]) - static_cast<double>((*tgt)[static_cast<size_t>(i)])));
      }
    };
  }
  return TensorT<S>(n);
}

// ---------------------------------------------------------------------------
// Convolutions (NHWC) for the target VQ autoencoder
// ---------------------------------------------------------------------------

// x: [B, H, W, Cin], w: [k*k*Cin, Cout], b: [Cout]. Output spatial size
// (H + 2p - k)/stride + 1.
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, int k, int stride,
                  int pad) {
  if (x.ndim() != 4) throw DimensionError("conv2d: expects NHWC input");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), cin = x.dim(3);
  if (w.ndim() != 2 || w.dim(0) != k * k * cin) throw DimensionError("conv2d: weight shape mismatch");
  const int cout = w.dim(1);
  const int ho = (H + 2 * pad - k) / stride + 1;
  const int wo = (W + 2 * pad - k) / stride + 1;
  auto n = detail::make_node<S>({B, ho, wo, cout}, {x, w, b});

  const int patch = k * k * cin;
  auto cols = std::make_shared<std::vector<S>>(static_cast<size_t>(B) * ho * wo * patch);
  parallel_for(B * ho * wo, [&](int r) {
    const int b_i = r / (ho * wo);
    const int oh = (r / wo) % ho;
    const int ow = r % wo;
    S* dst = cols->data() + static_cast<int64_t>(r) * patch;
    for (int ki = 0; ki < k; ++ki) {
      const int ih = oh * stride - pad + ki;
      for (int kj = 0; kj < k; ++kj) {
        const int iw = ow * stride - pad + kj;
        S* cell = dst + (static_cast<int64_t>(ki) * k + kj) * cin;
        if (ih < 0 || ih >= H || iw < 0 || iw >= W) {
          std::fill_n(cell, cin, S(0));
        } else {
          std::copy_n(x.data() + ((static_cast<int64_t>(b_i) * H + ih) * W + iw) * cin, cin, cell);
        }
      }
    }
  });
  gemm_nn(cols->data(), patch, w.data(), cout, n->value.data(), cout, B * ho * wo, patch, cout);
  if (b.defined()) {
    if (b.numel() != cout) throw DimensionError("conv2d: bias shape mismatch");
    parallel_for(B * ho * wo, [&](int r) {
      S* row = n->value.data() + static_cast<int64_t>(r) * cout;
      for (int c = 0; c < cout; ++c) row[c] += b.data()[c];
    });
  }

  if (n->requires_grad) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    n->backward_fn = [xn, wn, bn, cols, B, H, W, cin, cout, ho, wo, k, stride, pad,
                      patch](NodeT<S>& self) {
      const int rows = B * ho * wo;
      if (wn->requires_grad) {
        wn->ensure_grad();
        gemm_tn(cols->data(), patch, self.grad.data(), cout, wn->grad.data(), cout, rows, patch,
                cout, true);
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        parallel_for(cout, [&](int c) {
          double acc = 0.0;
          for (int r = 0; r < rows; ++r) acc += self.grad[static_cast<size_t>(r) * cout + c];
          bn->grad[static_cast<size_t>(c)] += static_cast<S>(acc);
        });
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        std::vector<S> dcols(static_cast<size_t>(rows) * patch);
        gemm_nt(self.grad.data(), cout, wn->value.data(), cout, dcols.data(), patch, rows, cout,
                patch);
        // col2im scatter; parallel over batch keeps writes disjoint.
        parallel_for(B, [&](int b_i) {
          for (int oh = 0; oh < ho; ++oh)
            for (int ow = 0; ow < wo; ++ow) {
              const int64_t r = (static_cast<int64_t>(b_i) * ho + oh) * wo + ow;
              const S* src = dcols.data() + r * patch;
              for (int ki = 0; ki < k; ++ki) {
                const int ih = oh * stride - pad + ki;
                if (ih < 0 || ih >= H) continue;
                for (int kj = 0; kj < k; ++kj) {
                  const int iw = ow * stride - pad + kj;
                  if (iw < 0 || iw >= W) continue;
                  S* dst = xn->grad.data() + ((static_cast<int64_t>(b_i) * H + ih) * W + iw) * cin;
                  const S* cell = src + (static_cast<int64_t>(ki) * k + kj) * cin;
                  for (int c = 0; c < cin; ++c) dst[c] += cell[c];
                }
              }
            }
        });
      }
    };
  }
  return TensorT<S>(n);
}

// Transposed conv, NHWC. x: [B, H, W, Cin], w: [Cin, k*k*Cout], output
// spatial size (H-1)*stride - 2p + k.
template <class S>
TensorT<S> conv2d_transpose(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, int k,
                            int stride, int pad) {
  if (x.ndim() != 4) throw DimensionError("conv2d_transpose: expects NHWC input");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), cin = x.dim(3);
  if (w.ndim() != 2 || w.dim(0) != cin) throw DimensionError("conv2d_transpose: weight shape mismatch");
  const int kkcout = w.dim(1);
  const int cout = kkcout / (k * k);
  const int ho = (H - 1) * stride - 2 * pad + k;
  const int wo = (W - 1) * stride - 2 * pad + k;
  auto n = detail::make_node<S>({B, ho, wo, cout}, {x, w, b});

  const int rows = B * H * W;
  auto ycols = std::make_shared<std::vector<S>>(static_cast<size_t>(rows) * kkcout);
  gemm_nn(x.data(), cin, w.data(), kkcout, ycols->data(), kkcout, rows, cin, kkcout);

  std::fill(n->value.begin(), n->value.end(), S(0));
  parallel_for(B, [&](int b_i) {
    for (int ih = 0; ih < H; ++ih)
      for (int iw = 0; iw < W; ++iw) {
        const int64_t r = (static_cast<int64_t>(b_i) * H + ih) * W + iw;
        const S* src = ycols->data() + r * kkcout;
        for (int ki = 0; ki < k; ++ki) {
          const int oh = ih * stride - pad + ki;
          if (oh < 0 || oh >= ho) continue;
          for (int kj = 0; kj < k; ++kj) {
            const int ow = iw * stride - pad + kj;
            if (ow < 0 || ow >= wo) continue;
            S* dst = n->value.data() + ((static_cast<int64_t>(b_i) * ho + oh) * wo + ow) * cout;
            const S* cell = src + (static_cast<int64_t>(ki) * k + kj) * cout;
            for (int c = 0; c < cout; ++c) dst[c] += cell[c];
          }
        }
      }
  });
  if (b.defined()) {
    if (b.numel() != cout) throw DimensionError("conv2d_transpose: bias shape mismatch");
    parallel_for(B * ho * wo, [&](int r) {
      S* row = n->value.data() + static_cast<int64_t>(r) * cout;
      for (int c = 0; c < cout; ++c) row[c] += b.data()[c];
    });
  }

  if (n->requires_grad) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    n->backward_fn = [xn, wn, bn, B, H, W, cin, cout, ho, wo, k, stride, pad, kkcout,
                      rows](NodeT<S>& self) {
      // Gather the output-gradient taps back into column layout.
      std::vector<S> dycols(static_cast<size_t>(rows) * kkcout, S(0));
      parallel_for(B, [&](int b_i) {
        for (int ih = 0; ih < H; ++ih)
          for (int iw = 0; iw < W; ++iw) {
            const int64_t r = (static_cast<int64_t>(b_i) * H + ih) * W + iw;
            S* dst = dycols.data() + r * kkcout;
            for (int ki = 0; ki < k; ++ki) {
              const int oh = ih * stride - pad + ki;
              if (oh < 0 || oh >= ho) continue;
              for (int kj = 0; kj < k; ++kj) {
                const int ow = iw * stride - pad + kj;
                if (ow < 0 || ow >= wo) continue;
                const S* src =
                    self.grad.data() + ((static_cast<int64_t>(b_i) * ho + oh) * wo + ow) * cout;
                S* cell = dst + (static_cast<int64_t>(ki) * k + kj) * cout;
                for (int c = 0; c < cout; ++c) cell[c] += src[c];
              }
            }
          }
      });
      if (xn->requires_grad) {
        xn->ensure_grad();
        gemm_nt(dycols.data(), kkcout, wn->value.data(), kkcout, xn->grad.data(), cin, rows,
                kkcout, cin, true);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        gemm_tn(xn->value.data(), cin, dycols.data(), kkcout, wn->grad.data(), kkcout, rows, cin,
                kkcout, true);
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        const int orow = B * ho * wo;
        parallel_for(cout, [&](int c) {
          double acc = 0.0;
          for (int r = 0; r < orow; ++r) acc += self.grad[static_cast<size_t>(r) * cout + c];
          bn->grad[static_cast<size_t>(c)] += static_cast<S>(acc);
        });
      }
    };
  }
  return TensorT<S>(n);
}

using Tensor = TensorT<float>;
using Node = NodeT<float>;

}  // namespace cwm::nn
