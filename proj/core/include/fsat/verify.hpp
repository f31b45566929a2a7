#pragma once

// Full-network gradient verification: every learnable tensor of the default
// two-block network, checked against central finite differences in 64-bit on
// a random 16x16 input through the complete training loss.

#include <cstdint>

#include "fsat/gradcheck.hpp"
#include "fsat/losses.hpp"
#include "fsat/network.hpp"

namespace fsat {

struct NetworkGradcheck {
  FdReport report;
  double tolerance = 1e-5;
  bool passed = false;
};

inline NetworkGradcheck full_network_gradcheck(std::uint64_t seed = 7,
                                               const NetworkConfig& cfg_in = NetworkConfig{},
                                               int height = 16, int width = 16) {
  NetworkConfig cfg = cfg_in;
  cfg.validate();
  ModelParamsD params = init_params<double>(cfg, seed);

  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  TensorD input({1, 2, height, width});
  for (std::int64_t i = 0; i < input.numel(); ++i) input.data()[i] = rng.uniform(0.05, 0.95);
  const std::int64_t hw = static_cast<std::int64_t>(height) * width;
  TensorD ir({1, 1, height, width});
  TensorD vi({1, 1, height, width});
  std::copy_n(input.data(), hw, ir.data());
  std::copy_n(input.data() + hw, hw, vi.data());

  const LossWeights weights;
  auto loss_fn = [&](Graph<double>* g) -> TensorD {
    TensorD fused = network_forward(input, params, cfg, /*train=*/true, g);
    return total_loss(fused, vi, ir, weights, g).value;
  };

  FdOptions opt;
  opt.seed = seed;

  std::vector<std::pair<std::string, TensorD>> checked;
  for (auto& [name, t] : params.learnable(cfg)) checked.emplace_back(name, *t);

  NetworkGradcheck result;
  result.report = finite_diff_check<double>(loss_fn, checked, opt);
  result.passed = result.report.ok(result.tolerance);
  return result;
}

}  // namespace fsat
