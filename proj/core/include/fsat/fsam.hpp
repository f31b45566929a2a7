#pragma once

// Frequency-Spatial Attention Mechanism: DCT-weighted channel gating followed
// by max/std spatial gating.

#include <cstdint>
#include <vector>

#include "fsat/dct.hpp"
#include "fsat/ops.hpp"
#include "fsat/tensor.hpp"

namespace fsat {

template <class T>
struct FsamParams {
  TensorT<T> fc_w, fc_b;      // C x C, C
  TensorT<T> sconv_w, sconv_b;  // 1 x 2 x 7 x 7, 1
};

// Channel grouping for the frequency branch: N_g contiguous groups of width
// C' = C / N_g, each assigned one DCT frequency (zigzag, DC first).
struct GroupSpec {
  int groups = 0;
  int group_width = 0;
  std::vector<FrequencyIndex> indices;  // one per group, pairwise distinct
};

inline GroupSpec make_group_spec(int groups, int channels, int h, int w) {
  if (groups < 1 || channels % groups != 0) {
    throw std::invalid_argument("group_spec: group count " + std::to_string(groups) +
                                " must divide channel count " + std::to_string(channels));
  }
  GroupSpec spec;
  spec.groups = groups;
  spec.group_width = channels / groups;
  spec.indices = frequency_index_set(groups, h, w);
  return spec;
}

// Per-channel DCT projection: channel c is projected onto the basis of its
// group, descriptors concatenated in channel order -> [N, C].
template <class T>
TensorT<T> frequency_descriptor(const TensorT<T>& f, const GroupSpec& spec, Graph<T>* g = nullptr) {
  detail::require(f.rank() == 4, "frequency_descriptor: expected rank-4, got " + shape_str(f.shape()));
  const int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  detail::require(spec.groups >= 1 && c == spec.groups * spec.group_width,
                  "frequency_descriptor: group spec does not cover " + std::to_string(c) +
                      " channels");
  detail::require(static_cast<int>(spec.indices.size()) == spec.groups,
                  "frequency_descriptor: group spec is missing frequency assignments");
  for (const auto& idx : spec.indices) {
    detail::require(idx.a < h && idx.b < w,
                    "frequency_descriptor: frequency (" + std::to_string(idx.a) + "," +
                        std::to_string(idx.b) + ") out of range for " + shape_str(f.shape()));
  }
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  TensorT<T> out({n, c});
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const auto idx = spec.indices[static_cast<std::size_t>(ci / spec.group_width)];
      const auto& basis = dct_basis_cached(idx.a, idx.b, h, w);
      const double norm = dct_lambda(idx.a, h) * dct_lambda(idx.b, w);
      const T* src = f.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
      double acc = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) acc += basis[static_cast<std::size_t>(i)] * src[i];
      out.data()[static_cast<std::int64_t>(ni) * c + ci] = static_cast<T>(norm * acc);
    }
  if (g) {
    TensorT<T> oc = out, fc = f;
    GroupSpec sp = spec;
    g->record(out, [oc, fc, sp, n, c, h, w, hw](Graph<T>& gr) {
      if (!gr.wants_grad(fc)) return;
      const auto& go = gr.node_grad(oc);
      std::vector<T> dx(static_cast<std::size_t>(fc.numel()));
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          const auto idx = sp.indices[static_cast<std::size_t>(ci / sp.group_width)];
          const auto& basis = dct_basis_cached(idx.a, idx.b, h, w);
          const double norm = dct_lambda(idx.a, h) * dct_lambda(idx.b, w);
          const T gv = go[static_cast<std::size_t>(static_cast<std::int64_t>(ni) * c + ci)];
          T* dp = dx.data() + (static_cast<std::int64_t>(ni) * c + ci) * hw;
          for (std::int64_t i = 0; i < hw; ++i)
            dp[i] = static_cast<T>(norm * basis[static_cast<std::size_t>(i)]) * gv;
        }
      gr.deposit(fc, dx.data(), fc.numel());
    });
  }
  return out;
}

template <class T>
struct AttentionOut {
  TensorT<T> att;
  TensorT<T> out;
};

// att = sigmoid(FC(descriptor)) in [N, C]; out = F scaled per channel.
template <class T>
AttentionOut<T> frequency_attention(const TensorT<T>& f, const FsamParams<T>& p,
                                    const GroupSpec& spec, Graph<T>* g = nullptr) {
  TensorT<T> desc = frequency_descriptor(f, spec, g);
  TensorT<T> att = sigmoid(linear(desc, p.fc_w, p.fc_b, g), g);
  return {att, scale_channels(f, att, g)};
}

// F_pool stacks channel max and channel std; att = sigmoid(conv7x7(F_pool))
// in [N, 1, H, W]; out = F scaled per pixel across channels.
template <class T>
AttentionOut<T> spatial_attention(const TensorT<T>& f, const FsamParams<T>& p,
                                  Graph<T>* g = nullptr) {
  TensorT<T> mx = channel_reduce(f, Reduce::Max, g);
  TensorT<T> sd = channel_reduce(f, Reduce::Std, g);
  TensorT<T> pool = concat_channels(mx, sd, g);
  TensorT<T> att = sigmoid(conv2d(pool, p.sconv_w, p.sconv_b, Pad::Zero, g), g);
  return {att, scale_spatial(f, att, g)};
}

// Frequency gate first, spatial gate second.
template <class T>
TensorT<T> fsam_forward(const TensorT<T>& f, const FsamParams<T>& p, const GroupSpec& spec,
                        Graph<T>* g = nullptr) {
  TensorT<T> ff = frequency_attention(f, p, spec, g).out;
  return spatial_attention(ff, p, g).out;
}

// Group spec resolved at the feature resolution the block actually sees.
template <class T>
TensorT<T> fsam_forward(const TensorT<T>& f, const FsamParams<T>& p, int groups,
                        Graph<T>* g = nullptr) {
  const GroupSpec spec = make_group_spec(groups, f.dim(1), f.dim(2), f.dim(3));
  return fsam_forward(f, p, spec, g);
}

}  // namespace fsat
