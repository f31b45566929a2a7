#pragma once

#include <map>
#include <string>
#include <vector>

#include "fsat/color.hpp"
#include "fsat/dataset.hpp"
#include "fsat/image.hpp"
#include "fsat/metrics.hpp"
#include "fsat/network.hpp"

namespace fsat {

// YUV route for color inputs: fuse IR with the luma plane, pass the original
// chroma planes through untouched, convert back to RGB.
Image fuse_rgb_pipeline(const Image& ir, const Image& rgb, ModelParamsF& params,
                        const NetworkConfig& cfg);

// Fuses every pair and evaluates MI/NCIE/Qabf/SSIM plus per-pair fusion
// wall-clock seconds.
MetricsReport evaluate_dataset(const DatasetIndex& data, ModelParamsF& params,
                               const NetworkConfig& cfg);

struct BenchRow {
  std::string pair;
  double mean_seconds = 0.0;
  double variance = 0.0;
  int width = 0, height = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  int repeats = 0;
  double mean_seconds = 0.0;  // arithmetic mean over rows
};

// Wall-clock per fused pair, one warm-up pass excluded, single-threaded.
BenchReport bench_runtime(const DatasetIndex& data, ModelParamsF& params, const NetworkConfig& cfg,
                          int repeats);

// UTF-8 `key=value` config files; '#' starts a comment, blank lines ignored.
std::map<std::string, std::string> read_config_file(const std::string& path);

}  // namespace fsat
