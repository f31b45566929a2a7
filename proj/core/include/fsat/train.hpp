#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fsat/dataset.hpp"
#include "fsat/losses.hpp"
#include "fsat/network.hpp"

namespace fsat {

struct TrainOptions {
  int epochs = 50;
  int batch = 32;
  double lr = 1e-3;
  int patch = 224;       // images resized to patch x patch
  std::uint64_t seed = 0;
  LossWeights weights;   // (1, 10, 100)
  std::optional<std::string> trace_csv;  // per-step loss trace
  bool verbose = false;
};

struct TrainResult {
  ModelParamsF params;
  std::vector<LossReport> trace;  // one report per optimizer step
  int skipped_pairs = 0;
  std::int64_t steps = 0;
};

// Mini-batch training with per-epoch reshuffle (counter-mixed seed), Adam and
// cosine annealing over the full step budget. Deterministic for a fixed
// (seed, dataset, options) in single-threaded mode. Unreadable pairs are
// skipped with a warning on stderr.
TrainResult train_loop(const DatasetIndex& data, const NetworkConfig& cfg,
                       const TrainOptions& opt);

// Per-step trace serialization: header `step,lr,pixel,texture,ssim,total`.
std::string trace_to_csv(const std::vector<LossReport>& trace, const std::vector<double>& lrs);

}  // namespace fsat
