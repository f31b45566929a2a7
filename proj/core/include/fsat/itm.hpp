#pragma once

// Improved Transformer Module: window partitioning, single-head scaled
// dot-product self-attention, MLP, and Context Broadcast with residuals.

#include <cmath>
#include <cstdint>
#include <vector>

#include "fsat/ops.hpp"
#include "fsat/tensor.hpp"

namespace fsat {

template <class T>
struct ItmParams {
  TensorT<T> wq, wk, wv;              // C x C projections
  TensorT<T> mlp_w1, mlp_b1;          // C x 2C, 2C
  TensorT<T> mlp_w2, mlp_b2;          // 2C x C, C
  TensorT<T> norm1_g, norm1_b;        // C
  TensorT<T> norm2_g, norm2_b;        // C
};

// Bookkeeping for the partition/merge bijection, including reflect padding
// applied when H or W is not a multiple of the window size.
struct WindowLayout {
  int n = 0, c = 0, h = 0, w = 0;  // original map extents
  int hp = 0, wp = 0;              // padded extents (multiples of m)
  int m = 0;
};

namespace detail {

// Pure permutation between [N,C,Hp,Wp] maps and [B, M*M, C] window tokens.
template <class T>
TensorT<T> tokens_from_map(const TensorT<T>& x, int m, Graph<T>* g) {
  const int n = x.dim(0), c = x.dim(1), hp = x.dim(2), wp = x.dim(3);
  const int nwy = hp / m, nwx = wp / m;
  const int nb = n * nwy * nwx;
  TensorT<T> out({nb, m * m, c});
  const std::int64_t hw = static_cast<std::int64_t>(hp) * wp;
  for (int ni = 0; ni < n; ++ni)
    for (int wy = 0; wy < nwy; ++wy)
      for (int wx = 0; wx < nwx; ++wx) {
        const int b = (ni * nwy + wy) * nwx + wx;
        T* dst = out.data() + static_cast<std::int64_t>(b) * m * m * c;
        for (int iy = 0; iy < m; ++iy)
          for (int ix = 0; ix < m; ++ix) {
            const std::int64_t px = static_cast<std::int64_t>(wy * m + iy) * wp + (wx * m + ix);
            T* tok = dst + (static_cast<std::int64_t>(iy) * m + ix) * c;
            for (int ci = 0; ci < c; ++ci)
              tok[ci] = x.data()[(static_cast<std::int64_t>(ni) * c + ci) * hw + px];
          }
      }
  if (g) {
    TensorT<T> oc = out, xc = x;
    g->record(out, [oc, xc, m, n, c, hp, wp, nwy, nwx, hw](Graph<T>& gr) {
      if (!gr.wants_grad(xc)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> dx(static_cast<std::size_t>(xc.numel()), T(0));
      for (int ni = 0; ni < n; ++ni)
        for (int wy = 0; wy < nwy; ++wy)
          for (int wx = 0; wx < nwx; ++wx) {
            const int b = (ni * nwy + wy) * nwx + wx;
            const T* src = go.data() + static_cast<std::int64_t>(b) * m * m * c;
            for (int iy = 0; iy < m; ++iy)
              for (int ix = 0; ix < m; ++ix) {
                const std::int64_t px = static_cast<std::int64_t>(wy * m + iy) * wp + (wx * m + ix);
                const T* tok = src + (static_cast<std::int64_t>(iy) * m + ix) * c;
                for (int ci = 0; ci < c; ++ci)
                  dx[static_cast<std::size_t>((static_cast<std::int64_t>(ni) * c + ci) * hw + px)] += tok[ci];
              }
          }
      gr.deposit(xc, dx.data(), xc.numel());
    });
  }
  return out;
}

template <class T>
TensorT<T> map_from_tokens(const TensorT<T>& tokens, const WindowLayout& lay, Graph<T>* g) {
  const int m = lay.m, n = lay.n, c = lay.c, hp = lay.hp, wp = lay.wp;
  const int nwy = hp / m, nwx = wp / m;
  TensorT<T> out({n, c, hp, wp});
  const std::int64_t hw = static_cast<std::int64_t>(hp) * wp;
  for (int ni = 0; ni < n; ++ni)
    for (int wy = 0; wy < nwy; ++wy)
      for (int wx = 0; wx < nwx; ++wx) {
        const int b = (ni * nwy + wy) * nwx + wx;
        const T* src = tokens.data() + static_cast<std::int64_t>(b) * m * m * c;
        for (int iy = 0; iy < m; ++iy)
          for (int ix = 0; ix < m; ++ix) {
            const std::int64_t px = static_cast<std::int64_t>(wy * m + iy) * wp + (wx * m + ix);
            const T* tok = src + (static_cast<std::int64_t>(iy) * m + ix) * c;
            for (int ci = 0; ci < c; ++ci)
              out.data()[(static_cast<std::int64_t>(ni) * c + ci) * hw + px] = tok[ci];
          }
      }
  if (g) {
    TensorT<T> oc = out, tc = tokens;
    g->record(out, [oc, tc, m, n, c, hp, wp, nwy, nwx, hw](Graph<T>& gr) {
      if (!gr.wants_grad(tc)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> dt(static_cast<std::size_t>(tc.numel()), T(0));
      for (int ni = 0; ni < n; ++ni)
        for (int wy = 0; wy < nwy; ++wy)
          for (int wx = 0; wx < nwx; ++wx) {
            const int b = (ni * nwy + wy) * nwx + wx;
            T* dst = dt.data() + static_cast<std::int64_t>(b) * m * m * c;
            for (int iy = 0; iy < m; ++iy)
              for (int ix = 0; ix < m; ++ix) {
                const std::int64_t px = static_cast<std::int64_t>(wy * m + iy) * wp + (wx * m + ix);
                T* tok = dst + (static_cast<std::int64_t>(iy) * m + ix) * c;
                for (int ci = 0; ci < c; ++ci)
                  tok[ci] += go[static_cast<std::size_t>((static_cast<std::int64_t>(ni) * c + ci) * hw + px)];
              }
          }
      gr.deposit(tc, dt.data(), tc.numel());
    });
  }
  return out;
}

}  // namespace detail

// Splits the map into M x M windows of M^2 x C tokens. H and W are reflect-
// padded up to multiples of M; window_merge applies the exact inverse.
template <class T>
TensorT<T> window_partition(const TensorT<T>& x, int m, WindowLayout& lay, Graph<T>* g = nullptr) {
  detail::require(x.rank() == 4, "window_partition: expected rank-4, got " + shape_str(x.shape()));
  detail::require(m >= 1, "window_partition: window size must be >= 1");
  lay.n = x.dim(0);
  lay.c = x.dim(1);
  lay.h = x.dim(2);
  lay.w = x.dim(3);
  lay.m = m;
  lay.hp = (lay.h + m - 1) / m * m;
  lay.wp = (lay.w + m - 1) / m * m;
  TensorT<T> padded = x;
  if (lay.hp != lay.h || lay.wp != lay.w)
    padded = pad2d(x, 0, lay.hp - lay.h, 0, lay.wp - lay.w, Pad::Reflect, g);
  return detail::tokens_from_map(padded, m, g);
}

template <class T>
TensorT<T> window_merge(const TensorT<T>& tokens, const WindowLayout& lay, Graph<T>* g = nullptr) {
  detail::require(tokens.rank() == 3 && tokens.dim(1) == lay.m * lay.m && tokens.dim(2) == lay.c &&
                      tokens.dim(0) == lay.n * (lay.hp / lay.m) * (lay.wp / lay.m),
                  "window_merge: tokens " + shape_str(tokens.shape()) +
                      " do not match the recorded layout");
  TensorT<T> map = detail::map_from_tokens(tokens, lay, g);
  if (lay.hp != lay.h || lay.wp != lay.w) map = crop2d(map, 0, 0, lay.h, lay.w, g);
  return map;
}

// Single-head scaled dot-product attention over one window (rank-2 tokens)
// or a batch of windows (rank-3). Scaling factor is 1/sqrt(C).
template <class T>
TensorT<T> self_attention(const TensorT<T>& x, const ItmParams<T>& p, Graph<T>* g = nullptr) {
  const auto v = detail::tok_view(x, "self_attention");
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(v.d)));
  TensorT<T> none;
  TensorT<T> q = linear(x, p.wq, none, g);
  TensorT<T> k = linear(x, p.wk, none, g);
  TensorT<T> val = linear(x, p.wv, none, g);
  TensorT<T> scores = attn_scores(q, k, scale, g);
  TensorT<T> probs = softmax_lastdim(scores, g);
  return attn_apply(probs, val, g);
}

// out^n = x^n / 2 + mean(x) / 2, the parameter-free token mixer. Preserves
// per-column token means exactly.
template <class T>
TensorT<T> context_broadcast(const TensorT<T>& x, Graph<T>* g = nullptr) {
  const auto v = detail::tok_view(x, "context_broadcast");
  detail::require(v.n >= 1, "context_broadcast: needs at least one token");
  TensorT<T> out(x.shape());
  const T invn = static_cast<T>(1.0 / (2.0 * static_cast<double>(v.n)));
  std::vector<double> colsum(static_cast<std::size_t>(v.d));
  for (std::int64_t b = 0; b < v.b; ++b) {
    const T* src = x.data() + b * v.n * v.d;
    T* dst = out.data() + b * v.n * v.d;
    std::fill(colsum.begin(), colsum.end(), 0.0);
    for (std::int64_t i = 0; i < v.n; ++i)
      for (std::int64_t j = 0; j < v.d; ++j) colsum[static_cast<std::size_t>(j)] += static_cast<double>(src[i * v.d + j]);
    for (std::int64_t i = 0; i < v.n; ++i)
      for (std::int64_t j = 0; j < v.d; ++j)
        dst[i * v.d + j] = T(0.5) * src[i * v.d + j] + invn * static_cast<T>(colsum[static_cast<std::size_t>(j)]);
  }
  if (g) {
    TensorT<T> oc = out, xc = x;
    g->record(out, [oc, xc, v, invn](Graph<T>& gr) {
      if (!gr.wants_grad(xc)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> dx(static_cast<std::size_t>(xc.numel()));
      std::vector<double> colsum(static_cast<std::size_t>(v.d));
      for (std::int64_t b = 0; b < v.b; ++b) {
        const T* gp = go.data() + b * v.n * v.d;
        T* dp = dx.data() + b * v.n * v.d;
        std::fill(colsum.begin(), colsum.end(), 0.0);
        for (std::int64_t i = 0; i < v.n; ++i)
          for (std::int64_t j = 0; j < v.d; ++j) colsum[static_cast<std::size_t>(j)] += static_cast<double>(gp[i * v.d + j]);
        for (std::int64_t i = 0; i < v.n; ++i)
          for (std::int64_t j = 0; j < v.d; ++j)
            dp[i * v.d + j] = T(0.5) * gp[i * v.d + j] + invn * static_cast<T>(colsum[static_cast<std::size_t>(j)]);
      }
      gr.deposit(xc, dx.data(), xc.numel());
    });
  }
  return out;
}

// Per window: X1 = X + attn(norm1(X)); X2 = X1 + mlp(norm2(X1));
// X3 = context_broadcast(X2); merged back to map layout. MLP is
// linear(C->2C), ReLU, linear(2C->C). Set pre_norm=false to bypass the
// normalization layers.
template <class T>
TensorT<T> itm_forward(const TensorT<T>& f, const ItmParams<T>& p, int m, bool pre_norm = true,
                       Graph<T>* g = nullptr) {
  WindowLayout lay;
  TensorT<T> x = window_partition(f, m, lay, g);
  TensorT<T> attn_in = pre_norm ? layernorm_tokens(x, p.norm1_g, p.norm1_b, g) : x;
  TensorT<T> x1 = add(x, self_attention(attn_in, p, g), g);
  TensorT<T> mlp_in = pre_norm ? layernorm_tokens(x1, p.norm2_g, p.norm2_b, g) : x1;
  TensorT<T> hidden = relu(linear(mlp_in, p.mlp_w1, p.mlp_b1, g), g);
  TensorT<T> x2 = add(x1, linear(hidden, p.mlp_w2, p.mlp_b2, g), g);
  TensorT<T> x3 = context_broadcast(x2, g);
  return window_merge(x3, lay, g);
}

}  // namespace fsat
