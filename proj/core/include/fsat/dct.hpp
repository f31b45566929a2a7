#pragma once

// Two-dimensional DCT basis evaluation and per-frequency projection used by
// the frequency attention branch.

#include <cmath>
#include <cstdint>
#include <vector>

#include "fsat/ops.hpp"
#include "fsat/tensor.hpp"

namespace fsat {

struct FrequencyIndex {
  int a = 0;  // vertical frequency, 0..H-1
  int b = 0;  // horizontal frequency, 0..W-1
};

// Orthonormal DCT-II normalizer: sqrt(1/N) at index 0, sqrt(2/N) otherwise.
inline double dct_lambda(int idx, int n) {
  return idx == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
}

// grid[h][w] = cos(pi*a*(h+1/2)/H) * cos(pi*b*(w+1/2)/W), row-major.
std::vector<double> dct_basis(int a, int b, int h, int w);

// Process-wide cache of basis grids keyed by (H, W, a, b); concurrent readers
// are safe, population is mutex-guarded.
const std::vector<double>& dct_basis_cached(int a, int b, int h, int w);

// First `count` frequency indices in zigzag order (sorted by a+b, then a),
// restricted to a < H, b < W. The DC component comes first.
std::vector<FrequencyIndex> frequency_index_set(int count, int h, int w);

// f = lambda(a)*lambda(b) * sum_hw C^{a,b}_{h,w} * x_{h,w}; differentiable in x.
template <class T>
TensorT<T> dct_component(const TensorT<T>& x, FrequencyIndex idx, Graph<T>* g = nullptr) {
  detail::require(x.rank() == 2, "dct_component: expected rank-2 grid, got " + shape_str(x.shape()));
  const int h = x.dim(0), w = x.dim(1);
  detail::require(idx.a >= 0 && idx.a < h && idx.b >= 0 && idx.b < w,
                  "dct_component: frequency index (" + std::to_string(idx.a) + "," +
                      std::to_string(idx.b) + ") out of range for " + shape_str(x.shape()));
  const auto& basis = dct_basis_cached(idx.a, idx.b, h, w);
  const double norm = dct_lambda(idx.a, h) * dct_lambda(idx.b, w);
  double acc = 0.0;
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += basis[static_cast<std::size_t>(i)] * x.data()[i];
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(norm * acc));
  if (g) {
    TensorT<T> oc = out, xc = x;
    g->record(out, [oc, xc, idx, norm, n, h, w](Graph<T>& gr) {
      if (!gr.wants_grad(xc)) return;
      const T go = gr.node_grad(oc)[0];
      const auto& basis = dct_basis_cached(idx.a, idx.b, h, w);
      std::vector<T> dx(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i)
        dx[static_cast<std::size_t>(i)] = static_cast<T>(norm * basis[static_cast<std::size_t>(i)]) * go;
      gr.deposit(xc, dx.data(), n);
    });
  }
  return out;
}

}  // namespace fsat
