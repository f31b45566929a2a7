#pragma once

// Central finite-difference verification of reverse-mode gradients.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fsat/rng.hpp"
#include "fsat/tensor.hpp"

namespace fsat {

struct FdOptions {
  double h = 1e-3;            // base step
  int coords_per_tensor = 64; // sampled coordinates per parameter tensor
  std::uint64_t seed = 0x5eed;
  // Central differences are meaningless across an activation kink. The check
  // evaluates central differences at h and h/2: for a smooth function they
  // agree to O(h^2), while a crossed kink makes them disagree by the crossed
  // unit's gradient share regardless of step. Flagged coordinates are skipped
  // and replacements drawn, up to max_skip_fraction.
  bool skip_nonsmooth = true;
  double kink_tol = 5e-3;
  double max_skip_fraction = 0.5;
};

struct FdTensorReport {
  std::string name;
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped = 0;
};

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst;
  std::vector<FdTensorReport> tensors;
  bool ok(double tol) const {
    if (tensors.empty()) return false;
    for (const auto& t : tensors)
      if (t.checked == 0) return false;
    return max_rel_err < tol;
  }
};

// `f` builds the forward pass and returns the scalar loss. It is called with
// a graph for the analytic gradients and with nullptr for the many
// re-evaluations; it must be a pure function of the parameter values.
template <class T>
FdReport finite_diff_check(const std::function<TensorT<T>(Graph<T>*)>& f,
                           const std::vector<std::pair<std::string, TensorT<T>>>& params,
                           const FdOptions& opt = {}) {
  for (const auto& [name, p] : params) {
    if (!p.requires_grad())
      throw std::invalid_argument("finite_diff_check: parameter '" + name +
                                  "' does not require grad");
  }
  if (!(opt.h > 0)) throw std::invalid_argument("finite_diff_check: step must be positive");

  std::vector<std::vector<T>> analytic;
  double f0;
  {
    for (const auto& [name, p] : params) const_cast<TensorT<T>&>(p).zero_grad();
    Graph<T> g;
    TensorT<T> loss = f(&g);
    backward(loss, g);
    f0 = static_cast<double>(loss.item());
    for (const auto& [name, p] : params) analytic.push_back(p.grad());
  }

  const T h = static_cast<T>(opt.h);
  FdReport report;
  Rng rng(opt.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& name = params[pi].first;
    TensorT<T>& p = const_cast<TensorT<T>&>(params[pi].second);
    const std::int64_t n = p.numel();

    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);

    FdTensorReport tr;
    tr.name = name;
    // Absolute noise floor of a central difference at this step and loss scale.
    const double noise = 1e-15 * std::max(1.0, std::fabs(f0)) / opt.h;
    const int want = static_cast<int>(std::min<std::int64_t>(n, opt.coords_per_tensor));
    for (std::size_t oi = 0; oi < order.size() && tr.checked < want; ++oi) {
      const std::int64_t idx = order[oi];
      const T saved = p.data()[idx];
      auto eval_at = [&](double step) {
        p.data()[idx] = saved + static_cast<T>(step);
        const double fp = static_cast<double>(f(nullptr).item());
        p.data()[idx] = saved - static_cast<T>(step);
        const double fm = static_cast<double>(f(nullptr).item());
        p.data()[idx] = saved;
        return (fp - fm) / (2.0 * step);
      };
      const double d_full = eval_at(opt.h);
      const double d_half = eval_at(opt.h / 2.0);
      if (opt.skip_nonsmooth &&
          std::fabs(d_full - d_half) >
              opt.kink_tol * std::max(std::fabs(d_full), std::fabs(d_half)) + 10.0 * noise) {
        ++tr.skipped;
        continue;
      }
      const double numeric = d_half;
      const double exact = static_cast<double>(analytic[pi][static_cast<std::size_t>(idx)]);
      double rel;
      if (std::fabs(exact) < 1e-8 && std::fabs(numeric) < std::max(1e-8, 20.0 * noise)) {
        rel = 0.0;  // both are zero at the resolution a finite difference has
      } else {
        const double denom = std::max({std::fabs(exact), std::fabs(numeric), 1e-8});
        rel = std::fabs(exact - numeric) / denom;
      }
      ++tr.checked;
      if (rel > tr.max_rel_err) tr.max_rel_err = rel;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = name;
      }
    }
    if (tr.checked + tr.skipped > 0 &&
        static_cast<double>(tr.skipped) >
            opt.max_skip_fraction * static_cast<double>(tr.checked + tr.skipped)) {
      // Too many non-smooth points to trust this tensor; surface it as failure.
      tr.max_rel_err = 1.0;
      report.max_rel_err = std::max(report.max_rel_err, 1.0);
      report.worst = name + " (non-smooth)";
    }
    report.tensors.push_back(std::move(tr));
  }
  return report;
}

}  // namespace fsat
