#pragma once

// Adam with bias correction and the cosine-annealed learning rate schedule.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fsat/tensor.hpp"

namespace fsat {

// lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2, t in [0, T].
inline double cosine_lr(std::int64_t t, std::int64_t total, double lr_max, double lr_min = 0.0) {
  if (total <= 0) throw std::invalid_argument("cosine_lr: total steps must be positive");
  if (t < 0 || t > total) throw std::invalid_argument("cosine_lr: step out of [0, T]");
  const double pi = 3.14159265358979323846;
  return lr_min + 0.5 * (lr_max - lr_min) *
                      (1.0 + std::cos(pi * static_cast<double>(t) / static_cast<double>(total)));
}

// Per-parameter first/second moment state; beta1 0.9, beta2 0.999, eps 1e-8.
template <class T>
struct AdamState {
  struct Slot {
    std::vector<T> m, v;
  };
  std::vector<Slot> slots;
  std::int64_t t = 0;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);

  void init(const std::vector<TensorT<T>*>& params) {
    slots.clear();
    slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      slots[i].m.assign(static_cast<std::size_t>(params[i]->numel()), T(0));
      slots[i].v.assign(static_cast<std::size_t>(params[i]->numel()), T(0));
    }
    t = 0;
  }
};

// One bias-corrected update from the accumulated gradients in params[i]->grad().
template <class T>
void adam_step(AdamState<T>& state, const std::vector<TensorT<T>*>& params, T lr) {
  if (state.slots.size() != params.size())
    throw std::invalid_argument("adam_step: state/parameter count mismatch");
  state.t += 1;
  const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta1), static_cast<double>(state.t)));
  const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta2), static_cast<double>(state.t)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    TensorT<T>& p = *params[i];
    auto& slot = state.slots[i];
    if (static_cast<std::int64_t>(slot.m.size()) != p.numel())
      throw std::invalid_argument("adam_step: moment shape does not match parameter " +
                                  shape_str(p.shape()));
    const auto& grad = p.grad();
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      const T gj = grad[static_cast<std::size_t>(j)];
      T& m = slot.m[static_cast<std::size_t>(j)];
      T& v = slot.v[static_cast<std::size_t>(j)];
      m = state.beta1 * m + (T(1) - state.beta1) * gj;
      v = state.beta2 * v + (T(1) - state.beta2) * gj * gj;
      const T mhat = m / bc1;
      const T vhat = v / bc2;
      p.data()[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace fsat
