#pragma once

// Differentiable primitive ops over TensorT. Every op optionally records a
// vector-Jacobian product on the tape; pass graph == nullptr for inference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fsat/tensor.hpp"

namespace fsat {

enum class Act { Relu, Tanh, Sigmoid };
enum class Pad { Zero, Reflect };
enum class Reduce { Max, Std };

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline void same_shape(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
  }
}

// Views a rank-2 [n,d] or rank-3 [b,n,d] token tensor as (batch, rows, cols).
struct TokView {
  std::int64_t b, n, d;
};

template <class T>
TokView tok_view(const TensorT<T>& x, const char* op) {
  if (x.rank() == 2) return {1, x.dim(0), x.dim(1)};
  if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2)};
  throw std::invalid_argument(std::string(op) + ": expected rank 2 or 3 tokens, got " +
                              shape_str(x.shape()));
}

// PyTorch-style reflection (border not repeated): -1 -> 1, n -> n-2.
inline int reflect_index(int i, int n) {
  if (i < 0) i = -i;
  if (i >= n) i = 2 * n - 2 - i;
  return i;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, Graph<T>* g = nullptr) {
  detail::same_shape(a.shape(), b.shape(), "add");
  TensorT<T> out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (g) {
    TensorT<T> oc = out, ac = a, bc = b;
    g->record(out, [oc, ac, bc, n](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      if (gr.wants_grad(ac)) gr.deposit(ac, go.data(), n);
      if (gr.wants_grad(bc)) gr.deposit(bc, go.data(), n);
    });
  }
  return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b, Graph<T>* g = nullptr) {
  detail::same_shape(a.shape(), b.shape(), "sub");
  TensorT<T> out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (g) {
    TensorT<T> oc = out, ac = a, bc = b;
    g->record(out, [oc, ac, bc, n](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      if (gr.wants_grad(ac)) gr.deposit(ac, go.data(), n);
      if (gr.wants_grad(bc)) {
        std::vector<T> neg(go.size());
        for (std::int64_t i = 0; i < n; ++i) neg[static_cast<std::size_t>(i)] = -go[static_cast<std::size_t>(i)];
        gr.deposit(bc, neg.data(), n);
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, Graph<T>* g = nullptr) {
  detail::same_shape(a.shape(), b.shape(), "mul");
  TensorT<T> out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (g) {
    TensorT<T> oc = out, ac = a, bc = b;
    g->record(out, [oc, ac, bc, n](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      std::vector<T> tmp(static_cast<std::size_t>(n));
      if (gr.wants_grad(ac)) {
        for (std::int64_t i = 0; i < n; ++i)
          tmp[static_cast<std::size_t>(i)] = go[static_cast<std::size_t>(i)] * bc.data()[i];
        gr.deposit(ac, tmp.data(), n);
      }
      if (gr.wants_grad(bc)) {
        for (std::int64_t i = 0; i < n; ++i)
          tmp[static_cast<std::size_t>(i)] = go[static_cast<std::size_t>(i)] * ac.data()[i];
        gr.deposit(bc, tmp.data(), n);
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& a, T c, Graph<T>* g = nullptr) {
  TensorT<T> out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
  if (g) {
    TensorT<T> oc = out, ac = a;
    g->record(out, [oc, ac, n](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      if (gr.wants_grad(ac)) gr.deposit(ac, go.data(), n);
    });
  }
  return out;
}

template <class T>
TensorT<T> mul_scalar(const TensorT<T>& a, T c, Graph<T>* g = nullptr) {
  TensorT<T> out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (g) {
    TensorT<T> oc = out, ac = a;
    g->record(out, [oc, ac, c, n](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      if (!gr.wants_grad(ac)) return;
      std::vector<T> tmp(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) tmp[static_cast<std::size_t>(i)] = go[static_cast<std::size_t>(i)] * c;
      gr.deposit(ac, tmp.data(), n);
    });
  }
  return out;
}

// Elementwise max; gradient routes to the first argument on ties.
template <class T>
TensorT<T> emax(const TensorT<T>& a, const TensorT<T>& b, Graph<T>* g = nullptr) {
  detail::same_shape(a.shape(), b.shape(), "emax");
  TensorT<T> out(a.shape());
  const std::int64_t n = a.numel();
  std::vector<char> first(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const bool fa = a.data()[i] >= b.data()[i];
    first[static_cast<std::size_t>(i)] = fa;
    out.data()[i] = fa ? a.data()[i] : b.data()[i];
  }
  if (g) {
    TensorT<T> oc = out, ac = a, bc = b;
    g->record(out, [oc, ac, bc, n, first = std::move(first)](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      std::vector<T> tmp(static_cast<std::size_t>(n));
      if (gr.wants_grad(ac)) {
        for (std::int64_t i = 0; i < n; ++i)
          tmp[static_cast<std::size_t>(i)] = first[static_cast<std::size_t>(i)] ? go[static_cast<std::size_t>(i)] : T(0);
        gr.deposit(ac, tmp.data(), n);
      }
      if (gr.wants_grad(bc)) {
        for (std::int64_t i = 0; i < n; ++i)
          tmp[static_cast<std::size_t>(i)] = first[static_cast<std::size_t>(i)] ? T(0) : go[static_cast<std::size_t>(i)];
        gr.deposit(bc, tmp.data(), n);
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> sqrt_op(const TensorT<T>& a, Graph<T>* g = nullptr) {
  TensorT<T> out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::sqrt(a.data()[i]);
  if (g) {
    TensorT<T> oc = out, ac = a;
    g->record(out, [oc, ac, n](Graph<T>& gr) {
      if (!gr.wants_grad(ac)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> tmp(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) {
        const T y = std::max(oc.data()[i], T(1e-20));
        tmp[static_cast<std::size_t>(i)] = go[static_cast<std::size_t>(i)] * T(0.5) / y;
      }
      gr.deposit(ac, tmp.data(), n);
    });
  }
  return out;
}

template <class T>
TensorT<T> reciprocal(const TensorT<T>& a, Graph<T>* g = nullptr) {
  TensorT<T> out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = T(1) / a.data()[i];
  if (g) {
    TensorT<T> oc = out, ac = a;
    g->record(out, [oc, ac, n](Graph<T>& gr) {
      if (!gr.wants_grad(ac)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> tmp(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) {
        const T y = oc.data()[i];
        tmp[static_cast<std::size_t>(i)] = -go[static_cast<std::size_t>(i)] * y * y;
      }
      gr.deposit(ac, tmp.data(), n);
    });
  }
  return out;
}

template <class T>
TensorT<T> activation(const TensorT<T>& a, Act kind, Graph<T>* g = nullptr) {
  TensorT<T> out(a.shape());
  const std::int64_t n = a.numel();
  switch (kind) {
    case Act::Relu:
      for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
      break;
    case Act::Tanh:
      for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::tanh(a.data()[i]);
      break;
    case Act::Sigmoid:
      for (std::int64_t i = 0; i < n; ++i) out.data()[i] = T(1) / (T(1) + std::exp(-a.data()[i]));
      break;
  }
  if (g) {
    TensorT<T> oc = out, ac = a;
    g->record(out, [oc, ac, kind, n](Graph<T>& gr) {
      if (!gr.wants_grad(ac)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> tmp(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) {
        const T y = oc.data()[i];
        T d{};
        switch (kind) {
          case Act::Relu: d = y > T(0) ? T(1) : T(0); break;
          case Act::Tanh: d = T(1) - y * y; break;
          case Act::Sigmoid: d = y * (T(1) - y); break;
        }
        tmp[static_cast<std::size_t>(i)] = go[static_cast<std::size_t>(i)] * d;
      }
      gr.deposit(ac, tmp.data(), n);
    });
  }
  return out;
}

template <class T>
TensorT<T> relu(const TensorT<T>& a, Graph<T>* g = nullptr) { return activation(a, Act::Relu, g); }
template <class T>
TensorT<T> tanh_act(const TensorT<T>& a, Graph<T>* g = nullptr) { return activation(a, Act::Tanh, g); }
template <class T>
TensorT<T> sigmoid(const TensorT<T>& a, Graph<T>* g = nullptr) { return activation(a, Act::Sigmoid, g); }

// ---------------------------------------------------------------------------
// Reductions and reshapes
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> sum_all(const TensorT<T>& a, Graph<T>* g = nullptr) {
  const std::int64_t n = a.numel();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(a.data()[i]);
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc));
  if (g) {
    TensorT<T> oc = out, ac = a;
    g->record(out, [oc, ac, n](Graph<T>& gr) {
      if (!gr.wants_grad(ac)) return;
      const T go = gr.node_grad(oc)[0];
      std::vector<T> tmp(static_cast<std::size_t>(n), go);
      gr.deposit(ac, tmp.data(), n);
    });
  }
  return out;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& a, Graph<T>* g = nullptr) {
  return mul_scalar(sum_all(a, g), static_cast<T>(1.0 / static_cast<double>(a.numel())), g);
}

// Copying reshape participating in the tape.
template <class T>
TensorT<T> reshape(const TensorT<T>& a, std::vector<int> shape, Graph<T>* g = nullptr) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  TensorT<T> out(std::move(shape), a.vec());
  if (g) {
    TensorT<T> oc = out, ac = a;
    const std::int64_t n = a.numel();
    g->record(out, [oc, ac, n](Graph<T>& gr) {
      if (!gr.wants_grad(ac)) return;
      const auto& go = gr.node_grad(oc);
      gr.deposit(ac, go.data(), n);
    });
  }
  return out;
}

// Slice one batch element of a rank-4 tensor.
template <class T>
TensorT<T> select_batch(const TensorT<T>& x, int index, Graph<T>* g = nullptr) {
  detail::require(x.rank() == 4, "select_batch: expected rank-4, got " + shape_str(x.shape()));
  detail::require(index >= 0 && index < x.dim(0), "select_batch: index out of range");
  const std::int64_t plane = x.numel() / x.dim(0);
  TensorT<T> out({1, x.dim(1), x.dim(2), x.dim(3)});
  std::copy_n(x.data() + index * plane, plane, out.data());
  if (g) {
    TensorT<T> oc = out, xc = x;
    g->record(out, [oc, xc, index, plane](Graph<T>& gr) {
      if (!gr.wants_grad(xc)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> tmp(static_cast<std::size_t>(xc.numel()), T(0));
      std::copy_n(go.data(), plane, tmp.data() + index * plane);
      gr.deposit(xc, tmp.data(), xc.numel());
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, Graph<T>* g = nullptr) {
  detail::require(a.rank() == 2 && b.rank() == 2,
                  "matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  detail::require(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree, " +
                                            shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    T* dst = out.data() + static_cast<std::int64_t>(i) * n;
    const T* arow = a.data() + static_cast<std::int64_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.data() + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) dst[j] += av * brow[j];
    }
  }
  if (g) {
    TensorT<T> oc = out, ac = a, bc = b;
    g->record(out, [oc, ac, bc, m, k, n](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      if (gr.wants_grad(ac)) {
        std::vector<T> da(static_cast<std::size_t>(m) * k, T(0));
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            const T* grow = go.data() + static_cast<std::int64_t>(i) * n;
            const T* brow = bc.data() + static_cast<std::int64_t>(p) * n;
            T acc = T(0);
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            da[static_cast<std::size_t>(i) * k + p] = acc;
          }
        gr.deposit(ac, da.data(), static_cast<std::int64_t>(m) * k);
      }
      if (gr.wants_grad(bc)) {
        std::vector<T> db(static_cast<std::size_t>(k) * n, T(0));
        for (int i = 0; i < m; ++i) {
          const T* grow = go.data() + static_cast<std::int64_t>(i) * n;
          const T* arow = ac.data() + static_cast<std::int64_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            T* drow = db.data() + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
          }
        }
        gr.deposit(bc, db.data(), static_cast<std::int64_t>(k) * n);
      }
    });
  }
  return out;
}

// x[..., n, k] . w[k, d] (+ bias[d]); accepts rank-2 or rank-3 x.
template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                  Graph<T>* g = nullptr) {
  const auto v = detail::tok_view(x, "linear");
  detail::require(w.rank() == 2 && w.dim(0) == v.d,
                  "linear: weight " + shape_str(w.shape()) + " does not accept inputs " +
                      shape_str(x.shape()));
  const int k = w.dim(0), d = w.dim(1);
  if (bias.defined())
    detail::require(bias.numel() == d, "linear: bias length mismatch " + shape_str(bias.shape()));
  std::vector<int> oshape = x.shape();
  oshape.back() = d;
  TensorT<T> out(oshape);
  for (std::int64_t b = 0; b < v.b; ++b) {
    const T* xp = x.data() + b * v.n * v.d;
    T* op = out.data() + b * v.n * d;
    for (std::int64_t i = 0; i < v.n; ++i) {
      T* dst = op + i * d;
      if (bias.defined()) std::copy_n(bias.data(), d, dst);
      const T* xrow = xp + i * v.d;
      for (int p = 0; p < k; ++p) {
        const T xv = xrow[p];
        const T* wrow = w.data() + static_cast<std::int64_t>(p) * d;
        for (int j = 0; j < d; ++j) dst[j] += xv * wrow[j];
      }
    }
  }
  if (g) {
    TensorT<T> oc = out, xc = x, wc = w, bc = bias;
    g->record(out, [oc, xc, wc, bc, v, k, d](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      if (gr.wants_grad(xc)) {
        std::vector<T> dx(static_cast<std::size_t>(xc.numel()), T(0));
        for (std::int64_t b = 0; b < v.b; ++b)
          for (std::int64_t i = 0; i < v.n; ++i) {
            const T* grow = go.data() + (b * v.n + i) * d;
            T* drow = dx.data() + (b * v.n + i) * v.d;
            for (int p = 0; p < k; ++p) {
              const T* wrow = wc.data() + static_cast<std::int64_t>(p) * d;
              T acc = T(0);
              for (int j = 0; j < d; ++j) acc += grow[j] * wrow[j];
              drow[p] = acc;
            }
          }
        gr.deposit(xc, dx.data(), xc.numel());
      }
      if (gr.wants_grad(wc)) {
        std::vector<T> dw(static_cast<std::size_t>(k) * d, T(0));
        for (std::int64_t b = 0; b < v.b; ++b)
          for (std::int64_t i = 0; i < v.n; ++i) {
            const T* xrow = xc.data() + (b * v.n + i) * v.d;
            const T* grow = go.data() + (b * v.n + i) * d;
            for (int p = 0; p < k; ++p) {
              const T xv = xrow[p];
              T* drow = dw.data() + static_cast<std::int64_t>(p) * d;
              for (int j = 0; j < d; ++j) drow[j] += xv * grow[j];
            }
          }
        gr.deposit(wc, dw.data(), static_cast<std::int64_t>(k) * d);
      }
      if (bc.defined() && gr.wants_grad(bc)) {
        std::vector<T> db(static_cast<std::size_t>(d), T(0));
        for (std::int64_t r = 0; r < v.b * v.n; ++r) {
          const T* grow = go.data() + r * d;
          for (int j = 0; j < d; ++j) db[static_cast<std::size_t>(j)] += grow[j];
        }
        gr.deposit(bc, db.data(), d);
      }
    });
  }
  return out;
}

// Numerically stable softmax over the last dimension of rank-2/3 input.
template <class T>
TensorT<T> softmax_lastdim(const TensorT<T>& x, Graph<T>* g = nullptr) {
  const auto v = detail::tok_view(x, "softmax");
  TensorT<T> out(x.shape());
  const std::int64_t rows = v.b * v.n, d = v.d;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * d;
    T* dst = out.data() + r * d;
    T mx = src[0];
    for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, src[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const T e = std::exp(src[j] - mx);
      dst[j] = e;
      denom += static_cast<double>(e);
    }
    const T inv = static_cast<T>(1.0 / denom);
    for (std::int64_t j = 0; j < d; ++j) dst[j] *= inv;
  }
  if (g) {
    TensorT<T> oc = out, xc = x;
    g->record(out, [oc, xc, rows, d](Graph<T>& gr) {
      if (!gr.wants_grad(xc)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> dx(static_cast<std::size_t>(rows * d));
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = oc.data() + r * d;
        const T* gp = go.data() + r * d;
        double dot = 0.0;
        for (std::int64_t j = 0; j < d; ++j) dot += static_cast<double>(gp[j]) * y[j];
        T* dst = dx.data() + r * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] = y[j] * (gp[j] - static_cast<T>(dot));
      }
      gr.deposit(xc, dx.data(), rows * d);
    });
  }
  return out;
}

template <class T>
TensorT<T> softmax_rows(const TensorT<T>& x, Graph<T>* g = nullptr) {
  detail::require(x.rank() == 2, "softmax_rows: expected rank-2, got " + shape_str(x.shape()));
  return softmax_lastdim(x, g);
}

// scale * Q K^T per batch; Q,K are [b,n,c] (or [n,c]).
template <class T>
TensorT<T> attn_scores(const TensorT<T>& q, const TensorT<T>& k, T scale, Graph<T>* g = nullptr) {
  detail::same_shape(q.shape(), k.shape(), "attn_scores");
  const auto v = detail::tok_view(q, "attn_scores");
  std::vector<int> oshape = q.rank() == 2
                                ? std::vector<int>{static_cast<int>(v.n), static_cast<int>(v.n)}
                                : std::vector<int>{static_cast<int>(v.b), static_cast<int>(v.n),
                                                   static_cast<int>(v.n)};
  TensorT<T> out(oshape);
  for (std::int64_t b = 0; b < v.b; ++b) {
    const T* qp = q.data() + b * v.n * v.d;
    const T* kp = k.data() + b * v.n * v.d;
    T* op = out.data() + b * v.n * v.n;
    for (std::int64_t i = 0; i < v.n; ++i)
      for (std::int64_t j = 0; j < v.n; ++j) {
        const T* qr = qp + i * v.d;
        const T* kr = kp + j * v.d;
        T acc = T(0);
        for (std::int64_t c = 0; c < v.d; ++c) acc += qr[c] * kr[c];
        op[i * v.n + j] = scale * acc;
      }
  }
  if (g) {
    TensorT<T> oc = out, qc = q, kc = k;
    g->record(out, [oc, qc, kc, v, scale](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      const bool wq = gr.wants_grad(qc), wk = gr.wants_grad(kc);
      if (!wq && !wk) return;
      std::vector<T> dq(wq ? static_cast<std::size_t>(qc.numel()) : 0, T(0));
      std::vector<T> dk(wk ? static_cast<std::size_t>(kc.numel()) : 0, T(0));
      for (std::int64_t b = 0; b < v.b; ++b) {
        const T* qp = qc.data() + b * v.n * v.d;
        const T* kp = kc.data() + b * v.n * v.d;
        const T* gp = go.data() + b * v.n * v.n;
        for (std::int64_t i = 0; i < v.n; ++i)
          for (std::int64_t j = 0; j < v.n; ++j) {
            const T gv = scale * gp[i * v.n + j];
            if (gv == T(0)) continue;
            if (wq) {
              T* dst = dq.data() + (b * v.n + i) * v.d;
              const T* kr = kp + j * v.d;
              for (std::int64_t c = 0; c < v.d; ++c) dst[c] += gv * kr[c];
            }
            if (wk) {
              T* dst = dk.data() + (b * v.n + j) * v.d;
              const T* qr = qp + i * v.d;
              for (std::int64_t c = 0; c < v.d; ++c) dst[c] += gv * qr[c];
            }
          }
      }
      if (wq) gr.deposit(qc, dq.data(), qc.numel());
      if (wk) gr.deposit(kc, dk.data(), kc.numel());
    });
  }
  return out;
}

// P V per batch; P is [b,n,n], V is [b,n,c] (rank-2 forms accepted).
template <class T>
TensorT<T> attn_apply(const TensorT<T>& p, const TensorT<T>& val, Graph<T>* g = nullptr) {
  const auto pv = detail::tok_view(p, "attn_apply");
  const auto vv = detail::tok_view(val, "attn_apply");
  detail::require(pv.b == vv.b && pv.n == vv.n && pv.d == vv.n,
                  "attn_apply: shape mismatch " + shape_str(p.shape()) + " vs " +
                      shape_str(val.shape()));
  TensorT<T> out(val.shape());
  for (std::int64_t b = 0; b < pv.b; ++b) {
    const T* pp = p.data() + b * pv.n * pv.n;
    const T* vp = val.data() + b * vv.n * vv.d;
    T* op = out.data() + b * vv.n * vv.d;
    for (std::int64_t i = 0; i < pv.n; ++i) {
      T* dst = op + i * vv.d;
      for (std::int64_t j = 0; j < pv.n; ++j) {
        const T pvij = pp[i * pv.n + j];
        const T* vr = vp + j * vv.d;
        for (std::int64_t c = 0; c < vv.d; ++c) dst[c] += pvij * vr[c];
      }
    }
  }
  if (g) {
    TensorT<T> oc = out, pc = p, vc = val;
    g->record(out, [oc, pc, vc, pv, vv](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      if (gr.wants_grad(pc)) {
        std::vector<T> dp(static_cast<std::size_t>(pc.numel()), T(0));
        for (std::int64_t b = 0; b < pv.b; ++b)
          for (std::int64_t i = 0; i < pv.n; ++i)
            for (std::int64_t j = 0; j < pv.n; ++j) {
              const T* grow = go.data() + (b * vv.n + i) * vv.d;
              const T* vrow = vc.data() + (b * vv.n + j) * vv.d;
              T acc = T(0);
              for (std::int64_t c = 0; c < vv.d; ++c) acc += grow[c] * vrow[c];
              dp[static_cast<std::size_t>((b * pv.n + i) * pv.n + j)] = acc;
            }
        gr.deposit(pc, dp.data(), pc.numel());
      }
      if (gr.wants_grad(vc)) {
        std::vector<T> dv(static_cast<std::size_t>(vc.numel()), T(0));
        for (std::int64_t b = 0; b < pv.b; ++b)
          for (std::int64_t i = 0; i < pv.n; ++i) {
            const T* grow = go.data() + (b * vv.n + i) * vv.d;
            for (std::int64_t j = 0; j < pv.n; ++j) {
              const T pij = pc.data()[(b * pv.n + i) * pv.n + j];
              T* dst = dv.data() + (b * vv.n + j) * vv.d;
              for (std::int64_t c = 0; c < vv.d; ++c) dst[c] += pij * grow[c];
            }
          }
        gr.deposit(vc, dv.data(), vc.numel());
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Padding, cropping, convolution
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> pad2d(const TensorT<T>& x, int pt, int pb, int pl, int pr, Pad mode,
                 Graph<T>* g = nullptr) {
  detail::require(x.rank() == 4, "pad2d: expected rank-4, got " + shape_str(x.shape()));
  detail::require(pt >= 0 && pb >= 0 && pl >= 0 && pr >= 0, "pad2d: negative padding");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (mode == Pad::Reflect) {
    detail::require(pt <= h - 1 && pb <= h - 1 && pl <= w - 1 && pr <= w - 1,
                    "pad2d: reflect padding exceeds input extent " + shape_str(x.shape()));
  }
  const int oh = h + pt + pb, ow = w + pl + pr;
  TensorT<T> out({n, c, oh, ow});
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const T* src = x.data() + (static_cast<std::int64_t>(ni) * c + ci) * h * w;
      T* dst = out.data() + (static_cast<std::int64_t>(ni) * c + ci) * oh * ow;
      for (int r = 0; r < oh; ++r) {
        const int ry = r - pt;
        for (int q = 0; q < ow; ++q) {
          const int cx = q - pl;
          T v = T(0);
          if (mode == Pad::Zero) {
            if (ry >= 0 && ry < h && cx >= 0 && cx < w) v = src[static_cast<std::int64_t>(ry) * w + cx];
          } else {
            v = src[static_cast<std::int64_t>(detail::reflect_index(ry, h)) * w +
                    detail::reflect_index(cx, w)];
          }
          dst[static_cast<std::int64_t>(r) * ow + q] = v;
        }
      }
    }
  if (g) {
    TensorT<T> oc = out, xc = x;
    g->record(out, [oc, xc, pt, pl, mode, n, c, h, w, oh, ow](Graph<T>& gr) {
      if (!gr.wants_grad(xc)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> dx(static_cast<std::size_t>(xc.numel()), T(0));
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          T* dst = dx.data() + (static_cast<std::int64_t>(ni) * c + ci) * h * w;
          const T* gp = go.data() + (static_cast<std::int64_t>(ni) * c + ci) * oh * ow;
          for (int r = 0; r < oh; ++r) {
            const int ry = r - pt;
            for (int q = 0; q < ow; ++q) {
              const int cx = q - pl;
              if (mode == Pad::Zero) {
                if (ry >= 0 && ry < h && cx >= 0 && cx < w)
                  dst[static_cast<std::int64_t>(ry) * w + cx] += gp[static_cast<std::int64_t>(r) * ow + q];
              } else {
                dst[static_cast<std::int64_t>(detail::reflect_index(ry, h)) * w +
                    detail::reflect_index(cx, w)] += gp[static_cast<std::int64_t>(r) * ow + q];
              }
            }
          }
        }
      gr.deposit(xc, dx.data(), xc.numel());
    });
  }
  return out;
}

template <class T>
TensorT<T> crop2d(const TensorT<T>& x, int top, int left, int oh, int ow, Graph<T>* g = nullptr) {
  detail::require(x.rank() == 4, "crop2d: expected rank-4, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  detail::require(top >= 0 && left >= 0 && top + oh <= h && left + ow <= w,
                  "crop2d: crop window out of range");
  TensorT<T> out({n, c, oh, ow});
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = out.data() + p * oh * ow;
    for (int r = 0; r < oh; ++r)
      std::copy_n(src + static_cast<std::int64_t>(top + r) * w + left, ow,
                  dst + static_cast<std::int64_t>(r) * ow);
  }
  if (g) {
    TensorT<T> oc = out, xc = x;
    g->record(out, [oc, xc, top, left, oh, ow, n, c, h, w](Graph<T>& gr) {
      if (!gr.wants_grad(xc)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> dx(static_cast<std::size_t>(xc.numel()), T(0));
      for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
        T* dst = dx.data() + p * h * w;
        const T* gp = go.data() + p * oh * ow;
        for (int r = 0; r < oh; ++r) {
          const T* grow = gp + static_cast<std::int64_t>(r) * ow;
          T* drow = dst + static_cast<std::int64_t>(top + r) * w + left;
          for (int q = 0; q < ow; ++q) drow[q] += grow[q];
        }
      }
      gr.deposit(xc, dx.data(), xc.numel());
    });
  }
  return out;
}

// Valid cross-correlation, stride 1. x[N,Ci,H,W] * w[Co,Ci,kh,kw] -> [N,Co,H-kh+1,W-kw+1].
template <class T>
TensorT<T> conv_valid(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                      Graph<T>* g = nullptr) {
  detail::require(x.rank() == 4 && w.rank() == 4,
                  "conv2d: expected rank-4 input and weight, got " + shape_str(x.shape()) +
                      " and " + shape_str(w.shape()));
  detail::require(x.dim(1) == w.dim(1),
                  "conv2d: input channels " + std::to_string(x.dim(1)) + " != weight channels " +
                      std::to_string(w.dim(1)) + " (input " + shape_str(x.shape()) + ", weight " +
                      shape_str(w.shape()) + ")");
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::require(h >= kh && ww >= kw, "conv2d: kernel larger than input " + shape_str(x.shape()));
  if (bias.defined())
    detail::require(bias.numel() == co, "conv2d: bias length mismatch " + shape_str(bias.shape()));
  const int oh = h - kh + 1, ow = ww - kw + 1;
  TensorT<T> out({n, co, oh, ow});
  for (int ni = 0; ni < n; ++ni)
    for (int oc = 0; oc < co; ++oc) {
      T* plane = out.data() + (static_cast<std::int64_t>(ni) * co + oc) * oh * ow;
      if (bias.defined()) {
        const T bv = bias.data()[oc];
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i) plane[i] = bv;
      }
      for (int ic = 0; ic < ci; ++ic) {
        const T* src = x.data() + (static_cast<std::int64_t>(ni) * ci + ic) * h * ww;
        const T* ker = w.data() + ((static_cast<std::int64_t>(oc) * ci + ic) * kh) * kw;
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const T wv = ker[static_cast<std::int64_t>(ky) * kw + kx];
            if (wv == T(0)) continue;
            for (int y = 0; y < oh; ++y) {
              const T* srow = src + static_cast<std::int64_t>(y + ky) * ww + kx;
              T* drow = plane + static_cast<std::int64_t>(y) * ow;
              for (int xx = 0; xx < ow; ++xx) drow[xx] += wv * srow[xx];
            }
          }
      }
    }
  if (g) {
    TensorT<T> oc2 = out, xc = x, wc = w, bc = bias;
    g->record(out, [oc2, xc, wc, bc, n, ci, h, ww, co, kh, kw, oh, ow](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc2);
      if (bc.defined() && gr.wants_grad(bc)) {
        std::vector<T> db(static_cast<std::size_t>(co), T(0));
        for (int ni = 0; ni < n; ++ni)
          for (int oc = 0; oc < co; ++oc) {
            const T* gp = go.data() + (static_cast<std::int64_t>(ni) * co + oc) * oh * ow;
            double acc = 0.0;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i) acc += static_cast<double>(gp[i]);
            db[static_cast<std::size_t>(oc)] += static_cast<T>(acc);
          }
        gr.deposit(bc, db.data(), co);
      }
      if (gr.wants_grad(wc)) {
        std::vector<T> dw(static_cast<std::size_t>(wc.numel()), T(0));
        for (int ni = 0; ni < n; ++ni)
          for (int oc = 0; oc < co; ++oc) {
            const T* gp = go.data() + (static_cast<std::int64_t>(ni) * co + oc) * oh * ow;
            for (int ic = 0; ic < ci; ++ic) {
              const T* src = xc.data() + (static_cast<std::int64_t>(ni) * ci + ic) * h * ww;
              T* dker = dw.data() + ((static_cast<std::int64_t>(oc) * ci + ic) * kh) * kw;
              for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                  double acc = 0.0;
                  for (int y = 0; y < oh; ++y) {
                    const T* srow = src + static_cast<std::int64_t>(y + ky) * ww + kx;
                    const T* grow = gp + static_cast<std::int64_t>(y) * ow;
                    for (int xx = 0; xx < ow; ++xx) acc += static_cast<double>(srow[xx]) * grow[xx];
                  }
                  dker[static_cast<std::int64_t>(ky) * kw + kx] += static_cast<T>(acc);
                }
            }
          }
        gr.deposit(wc, dw.data(), wc.numel());
      }
      if (gr.wants_grad(xc)) {
        std::vector<T> dx(static_cast<std::size_t>(xc.numel()), T(0));
        for (int ni = 0; ni < n; ++ni)
          for (int oc = 0; oc < co; ++oc) {
            const T* gp = go.data() + (static_cast<std::int64_t>(ni) * co + oc) * oh * ow;
            for (int ic = 0; ic < ci; ++ic) {
              T* dst = dx.data() + (static_cast<std::int64_t>(ni) * ci + ic) * h * ww;
              const T* ker = wc.data() + ((static_cast<std::int64_t>(oc) * ci + ic) * kh) * kw;
              for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                  const T wv = ker[static_cast<std::int64_t>(ky) * kw + kx];
                  if (wv == T(0)) continue;
                  for (int y = 0; y < oh; ++y) {
                    const T* grow = gp + static_cast<std::int64_t>(y) * ow;
                    T* drow = dst + static_cast<std::int64_t>(y + ky) * ww + kx;
                    for (int xx = 0; xx < ow; ++xx) drow[xx] += wv * grow[xx];
                  }
                }
            }
          }
        gr.deposit(xc, dx.data(), xc.numel());
      }
    });
  }
  return out;
}

// "Same" convolution with odd kernels; zero or reflect border handling.
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, Pad mode,
                  Graph<T>* g = nullptr) {
  detail::require(w.rank() == 4, "conv2d: expected rank-4 weight, got " + shape_str(w.shape()));
  detail::require(x.rank() == 4, "conv2d: expected rank-4 input, got " + shape_str(x.shape()));
  detail::require(x.dim(1) == w.dim(1),
                  "conv2d: input channels " + std::to_string(x.dim(1)) + " != weight channels " +
                      std::to_string(w.dim(1)) + " (input " + shape_str(x.shape()) + ", weight " +
                      shape_str(w.shape()) + ")");
  const int kh = w.dim(2), kw = w.dim(3);
  detail::require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd, got " +
                                                  shape_str(w.shape()));
  const int ph = kh / 2, pw = kw / 2;
  if (ph == 0 && pw == 0) return conv_valid(x, w, bias, g);
  TensorT<T> padded = pad2d(x, ph, ph, pw, pw, mode, g);
  return conv_valid(padded, w, bias, g);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Batch normalization over N,H,W per channel. Training mode uses (population)
// batch statistics and updates running stats in place; inference mode reads
// them. momentum 0.9, eps 1e-5.
template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       TensorT<T>& running_mean, TensorT<T>& running_var, bool train,
                       Graph<T>* g = nullptr, T momentum = T(0.9), T eps = T(1e-5)) {
  detail::require(x.rank() == 4, "batchnorm2d: expected rank-4, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  detail::require(gamma.numel() == c && beta.numel() == c && running_mean.numel() == c &&
                      running_var.numel() == c,
                  "batchnorm2d: parameter width does not match channel count " + std::to_string(c));
  const std::int64_t m = static_cast<std::int64_t>(n) * h * w;
  std::vector<T> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  if (train) {
    detail::require(m >= 2, "batchnorm2d: training mode needs at least 2 elements per channel, got " +
                                std::to_string(m));
    for (int ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const T* p = x.data() + (static_cast<std::int64_t>(ni) * c + ci) * h * w;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) acc += static_cast<double>(p[i]);
      }
      const double mu = acc / static_cast<double>(m);
      double var = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const T* p = x.data() + (static_cast<std::int64_t>(ni) * c + ci) * h * w;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
          const double d = static_cast<double>(p[i]) - mu;
          var += d * d;
        }
      }
      var /= static_cast<double>(m);
      mean[static_cast<std::size_t>(ci)] = static_cast<T>(mu);
      inv_std[static_cast<std::size_t>(ci)] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      running_mean.data()[ci] = momentum * running_mean.data()[ci] + (T(1) - momentum) * static_cast<T>(mu);
      running_var.data()[ci] = momentum * running_var.data()[ci] + (T(1) - momentum) * static_cast<T>(var);
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mean[static_cast<std::size_t>(ci)] = running_mean.data()[ci];
      inv_std[static_cast<std::size_t>(ci)] =
          static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data()[ci]) + static_cast<double>(eps)));
    }
  }
  TensorT<T> out(x.shape());
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const T mu = mean[static_cast<std::size_t>(ci)];
      const T is = inv_std[static_cast<std::size_t>(ci)];
      const T ga = gamma.data()[ci], be = beta.data()[ci];
      const T* src = x.data() + (static_cast<std::int64_t>(ni) * c + ci) * h * w;
      T* dst = out.data() + (static_cast<std::int64_t>(ni) * c + ci) * h * w;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i)
        dst[i] = ga * (src[i] - mu) * is + be;
    }
  if (g) {
    TensorT<T> oc2 = out, xc = x, gc = gamma, bc = beta;
    g->record(out, [oc2, xc, gc, bc, mean, inv_std, train, n, c, h, w, m](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc2);
      const std::int64_t hw = static_cast<std::int64_t>(h) * w;
      std::vector<double> sum_g(static_cast<std::size_t>(c), 0.0), sum_gx(static_cast<std::size_t>(c), 0.0);
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          const T mu = mean[static_cast<std::size_t>(ci)];
          const T is = inv_std[static_cast<std::size_t>(ci)];
          const T* gp = go.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
          const T* xp = xc.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
          double sg = 0.0, sgx = 0.0;
          for (std::int64_t i = 0; i < hw; ++i) {
            sg += static_cast<double>(gp[i]);
            sgx += static_cast<double>(gp[i]) * ((xp[i] - mu) * is);
          }
          sum_g[static_cast<std::size_t>(ci)] += sg;
          sum_gx[static_cast<std::size_t>(ci)] += sgx;
        }
      if (gr.wants_grad(gc)) {
        std::vector<T> dg(static_cast<std::size_t>(c));
        for (int ci = 0; ci < c; ++ci) dg[static_cast<std::size_t>(ci)] = static_cast<T>(sum_gx[static_cast<std::size_t>(ci)]);
        gr.deposit(gc, dg.data(), c);
      }
      if (gr.wants_grad(bc)) {
        std::vector<T> db(static_cast<std::size_t>(c));
        for (int ci = 0; ci < c; ++ci) db[static_cast<std::size_t>(ci)] = static_cast<T>(sum_g[static_cast<std::size_t>(ci)]);
        gr.deposit(bc, db.data(), c);
      }
      if (gr.wants_grad(xc)) {
        std::vector<T> dx(static_cast<std::size_t>(xc.numel()));
        for (int ni = 0; ni < n; ++ni)
          for (int ci = 0; ci < c; ++ci) {
            const T mu = mean[static_cast<std::size_t>(ci)];
            const T is = inv_std[static_cast<std::size_t>(ci)];
            const T ga = gc.data()[ci];
            const T* gp = go.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
            const T* xp = xc.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
            T* dp = dx.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
            if (train) {
              const T mg = static_cast<T>(sum_g[static_cast<std::size_t>(ci)] / static_cast<double>(m));
              const T mgx = static_cast<T>(sum_gx[static_cast<std::size_t>(ci)] / static_cast<double>(m));
              for (std::int64_t i = 0; i < hw; ++i) {
                const T xh = (xp[i] - mu) * is;
                dp[i] = ga * is * (gp[i] - mg - xh * mgx);
              }
            } else {
              for (std::int64_t i = 0; i < hw; ++i) dp[i] = ga * is * gp[i];
            }
          }
        gr.deposit(xc, dx.data(), xc.numel());
      }
    });
  }
  return out;
}

// Per-token standardization over the feature dimension with learned scale and
// shift; accepts [n,c] or [b,n,c].
template <class T>
TensorT<T> layernorm_tokens(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                            Graph<T>* g = nullptr, T eps = T(1e-5)) {
  const auto v = detail::tok_view(x, "layernorm");
  detail::require(gamma.numel() == v.d && beta.numel() == v.d,
                  "layernorm: scale/shift width mismatch " + shape_str(x.shape()));
  const std::int64_t rows = v.b * v.n, d = v.d;
  TensorT<T> out(x.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(rows)), mean(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += static_cast<double>(src[j]);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double dv = static_cast<double>(src[j]) - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    mean[static_cast<std::size_t>(r)] = static_cast<T>(mu);
    inv_std[static_cast<std::size_t>(r)] = is;
    T* dst = out.data() + r * d;
    for (std::int64_t j = 0; j < d; ++j)
      dst[j] = gamma.data()[j] * (src[j] - static_cast<T>(mu)) * is + beta.data()[j];
  }
  if (g) {
    TensorT<T> oc = out, xc = x, gc = gamma, bc = beta;
    g->record(out, [oc, xc, gc, bc, mean = std::move(mean), inv_std = std::move(inv_std), rows,
                    d](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      const bool wx = gr.wants_grad(xc), wg = gr.wants_grad(gc), wb = gr.wants_grad(bc);
      std::vector<T> dx(wx ? static_cast<std::size_t>(rows * d) : 0);
      std::vector<T> dg(wg ? static_cast<std::size_t>(d) : 0, T(0));
      std::vector<T> db(wb ? static_cast<std::size_t>(d) : 0, T(0));
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* xp = xc.data() + r * d;
        const T* gp = go.data() + r * d;
        const T mu = mean[static_cast<std::size_t>(r)];
        const T is = inv_std[static_cast<std::size_t>(r)];
        double sum_gh = 0.0, sum_ghx = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
          const T xh = (xp[j] - mu) * is;
          const T gh = gp[j] * gc.data()[j];
          sum_gh += static_cast<double>(gh);
          sum_ghx += static_cast<double>(gh) * xh;
          if (wg) dg[static_cast<std::size_t>(j)] += gp[j] * xh;
          if (wb) db[static_cast<std::size_t>(j)] += gp[j];
        }
        if (wx) {
          const T mg = static_cast<T>(sum_gh / static_cast<double>(d));
          const T mgx = static_cast<T>(sum_ghx / static_cast<double>(d));
          T* dp = dx.data() + r * d;
          for (std::int64_t j = 0; j < d; ++j) {
            const T xh = (xp[j] - mu) * is;
            const T gh = gp[j] * gc.data()[j];
            dp[j] = is * (gh - mg - xh * mgx);
          }
        }
      }
      if (wx) gr.deposit(xc, dx.data(), rows * d);
      if (wg) gr.deposit(gc, dg.data(), d);
      if (wb) gr.deposit(bc, db.data(), d);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel/spatial pooling and broadcast scaling
// ---------------------------------------------------------------------------

// Reduce across channels per pixel. Max routes gradient to the first argmax
// channel; Std is the population standard deviation with zero subgradient at
// exactly-constant pixels.
template <class T>
TensorT<T> channel_reduce(const TensorT<T>& x, Reduce kind, Graph<T>* g = nullptr) {
  detail::require(x.rank() == 4, "channel_reduce: expected rank-4, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  detail::require(c >= 1, "channel_reduce: needs at least one channel");
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  TensorT<T> out({n, 1, h, w});
  std::vector<int> argmax;
  if (kind == Reduce::Max) argmax.assign(static_cast<std::size_t>(n * hw), 0);
  for (int ni = 0; ni < n; ++ni) {
    const T* base = x.data() + static_cast<std::int64_t>(ni) * c * hw;
    T* dst = out.data() + static_cast<std::int64_t>(ni) * hw;
    for (std::int64_t i = 0; i < hw; ++i) {
      if (kind == Reduce::Max) {
        T best = base[i];
        int bc = 0;
        for (int ci = 1; ci < c; ++ci) {
          const T v = base[static_cast<std::int64_t>(ci) * hw + i];
          if (v > best) {
            best = v;
            bc = ci;
          }
        }
        dst[i] = best;
        argmax[static_cast<std::size_t>(static_cast<std::int64_t>(ni) * hw + i)] = bc;
      } else {
        double mu = 0.0;
        for (int ci = 0; ci < c; ++ci) mu += static_cast<double>(base[static_cast<std::int64_t>(ci) * hw + i]);
        mu /= c;
        double var = 0.0;
        for (int ci = 0; ci < c; ++ci) {
          const double d = static_cast<double>(base[static_cast<std::int64_t>(ci) * hw + i]) - mu;
          var += d * d;
        }
        dst[i] = static_cast<T>(std::sqrt(var / c));
      }
    }
  }
  if (g) {
    TensorT<T> oc = out, xc = x;
    g->record(out, [oc, xc, kind, argmax = std::move(argmax), n, c, hw](Graph<T>& gr) {
      if (!gr.wants_grad(xc)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> dx(static_cast<std::size_t>(xc.numel()), T(0));
      for (int ni = 0; ni < n; ++ni) {
        const T* base = xc.data() + static_cast<std::int64_t>(ni) * c * hw;
        T* dbase = dx.data() + static_cast<std::int64_t>(ni) * c * hw;
        const T* gp = go.data() + static_cast<std::int64_t>(ni) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          if (kind == Reduce::Max) {
            const int bc = argmax[static_cast<std::size_t>(static_cast<std::int64_t>(ni) * hw + i)];
            dbase[static_cast<std::int64_t>(bc) * hw + i] += gp[i];
          } else {
            const T sigma = oc.data()[static_cast<std::int64_t>(ni) * hw + i];
            if (sigma <= T(1e-12)) continue;
            double mu = 0.0;
            for (int ci = 0; ci < c; ++ci) mu += static_cast<double>(base[static_cast<std::int64_t>(ci) * hw + i]);
            mu /= c;
            const T coef = gp[i] / (static_cast<T>(c) * sigma);
            for (int ci = 0; ci < c; ++ci)
              dbase[static_cast<std::int64_t>(ci) * hw + i] +=
                  coef * (base[static_cast<std::int64_t>(ci) * hw + i] - static_cast<T>(mu));
          }
        }
      }
      gr.deposit(xc, dx.data(), xc.numel());
    });
  }
  return out;
}

// out[n,c,h,w] = x[n,c,h,w] * s[n,c]
template <class T>
TensorT<T> scale_channels(const TensorT<T>& x, const TensorT<T>& s, Graph<T>* g = nullptr) {
  detail::require(x.rank() == 4 && s.rank() == 2 && s.dim(0) == x.dim(0) && s.dim(1) == x.dim(1),
                  "scale_channels: expected [n,c,h,w] and [n,c], got " + shape_str(x.shape()) +
                      " and " + shape_str(s.shape()));
  const int n = x.dim(0), c = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  TensorT<T> out(x.shape());
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
    const T sv = s.data()[p];
    const T* src = x.data() + p * hw;
    T* dst = out.data() + p * hw;
    for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * sv;
  }
  if (g) {
    TensorT<T> oc = out, xc = x, sc = s;
    g->record(out, [oc, xc, sc, n, c, hw](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      if (gr.wants_grad(xc)) {
        std::vector<T> dx(static_cast<std::size_t>(xc.numel()));
        for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
          const T sv = sc.data()[p];
          const T* gp = go.data() + p * hw;
          T* dp = dx.data() + p * hw;
          for (std::int64_t i = 0; i < hw; ++i) dp[i] = gp[i] * sv;
        }
        gr.deposit(xc, dx.data(), xc.numel());
      }
      if (gr.wants_grad(sc)) {
        std::vector<T> ds(static_cast<std::size_t>(n) * c);
        for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
          const T* gp = go.data() + p * hw;
          const T* xp = xc.data() + p * hw;
          double acc = 0.0;
          for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(gp[i]) * xp[i];
          ds[static_cast<std::size_t>(p)] = static_cast<T>(acc);
        }
        gr.deposit(sc, ds.data(), static_cast<std::int64_t>(n) * c);
      }
    });
  }
  return out;
}

// out[n,c,h,w] = x[n,c,h,w] * s[n,1,h,w]
template <class T>
TensorT<T> scale_spatial(const TensorT<T>& x, const TensorT<T>& s, Graph<T>* g = nullptr) {
  detail::require(x.rank() == 4 && s.rank() == 4 && s.dim(0) == x.dim(0) && s.dim(1) == 1 &&
                      s.dim(2) == x.dim(2) && s.dim(3) == x.dim(3),
                  "scale_spatial: expected [n,c,h,w] and [n,1,h,w], got " + shape_str(x.shape()) +
                      " and " + shape_str(s.shape()));
  const int n = x.dim(0), c = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  TensorT<T> out(x.shape());
  for (int ni = 0; ni < n; ++ni) {
    const T* sp = s.data() + static_cast<std::int64_t>(ni) * hw;
    for (int ci = 0; ci < c; ++ci) {
      const T* src = x.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
      T* dst = out.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * sp[i];
    }
  }
  if (g) {
    TensorT<T> oc = out, xc = x, sc = s;
    g->record(out, [oc, xc, sc, n, c, hw](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      if (gr.wants_grad(xc)) {
        std::vector<T> dx(static_cast<std::size_t>(xc.numel()));
        for (int ni = 0; ni < n; ++ni) {
          const T* sp = sc.data() + static_cast<std::int64_t>(ni) * hw;
          for (int ci = 0; ci < c; ++ci) {
            const T* gp = go.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
            T* dp = dx.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
            for (std::int64_t i = 0; i < hw; ++i) dp[i] = gp[i] * sp[i];
          }
        }
        gr.deposit(xc, dx.data(), xc.numel());
      }
      if (gr.wants_grad(sc)) {
        std::vector<T> ds(static_cast<std::size_t>(sc.numel()), T(0));
        for (int ni = 0; ni < n; ++ni) {
          T* dp = ds.data() + static_cast<std::int64_t>(ni) * hw;
          for (int ci = 0; ci < c; ++ci) {
            const T* gp = go.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
            const T* xp = xc.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
            for (std::int64_t i = 0; i < hw; ++i) dp[i] += gp[i] * xp[i];
          }
        }
        gr.deposit(sc, ds.data(), sc.numel());
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b, Graph<T>* g = nullptr) {
  detail::require(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                      a.dim(3) == b.dim(3),
                  "concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
  TensorT<T> out({n, ca + cb, a.dim(2), a.dim(3)});
  for (int ni = 0; ni < n; ++ni) {
    std::copy_n(a.data() + static_cast<std::int64_t>(ni) * ca * hw, ca * hw,
                out.data() + static_cast<std::int64_t>(ni) * (ca + cb) * hw);
    std::copy_n(b.data() + static_cast<std::int64_t>(ni) * cb * hw, cb * hw,
                out.data() + static_cast<std::int64_t>(ni) * (ca + cb) * hw + ca * hw);
  }
  if (g) {
    TensorT<T> oc = out, ac = a, bc = b;
    g->record(out, [oc, ac, bc, n, ca, cb, hw](Graph<T>& gr) {
      const auto& go = gr.node_grad(oc);
      if (gr.wants_grad(ac)) {
        std::vector<T> da(static_cast<std::size_t>(ac.numel()));
        for (int ni = 0; ni < n; ++ni)
          std::copy_n(go.data() + static_cast<std::int64_t>(ni) * (ca + cb) * hw, ca * hw,
                      da.data() + static_cast<std::int64_t>(ni) * ca * hw);
        gr.deposit(ac, da.data(), ac.numel());
      }
      if (gr.wants_grad(bc)) {
        std::vector<T> db(static_cast<std::size_t>(bc.numel()));
        for (int ni = 0; ni < n; ++ni)
          std::copy_n(go.data() + static_cast<std::int64_t>(ni) * (ca + cb) * hw + ca * hw, cb * hw,
                      db.data() + static_cast<std::int64_t>(ni) * cb * hw);
        gr.deposit(bc, db.data(), bc.numel());
      }
    });
  }
  return out;
}

}  // namespace fsat
