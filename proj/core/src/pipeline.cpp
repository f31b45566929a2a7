#include "fsat/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <stdexcept>

namespace fsat {

Image fuse_rgb_pipeline(const Image& ir, const Image& rgb, ModelParamsF& params,
                        const NetworkConfig& cfg) {
  if (ir.width != rgb.width || ir.height != rgb.height) {
    throw std::invalid_argument("fuse_rgb: dimension mismatch, ir " + std::to_string(ir.width) +
                                "x" + std::to_string(ir.height) + " vs rgb " +
                                std::to_string(rgb.width) + "x" + std::to_string(rgb.height));
  }
  YuvPlanes yuv = rgb_to_yuv(rgb);
  Image fused_y = fuse_forward(ir, yuv.y, params, cfg);
  return yuv_to_rgb(fused_y, yuv.u, yuv.v);
}

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

struct EvalPair {
  std::string id;
  Image ir, vi;
};

EvalPair load_eval_pair(const DatasetIndex::Pair& pair) {
  EvalPair p;
  p.id = pair.id;
  p.ir = load_pgm(pair.ir_path);
  Image vi_raw = load_image(pair.vi_path);
  if (vi_raw.channels == 3) {
    p.vi = rgb_to_yuv(vi_raw).y;
  } else {
    p.vi = vi_raw;
  }
  if (p.ir.width != p.vi.width || p.ir.height != p.vi.height)
    throw std::runtime_error(pair.id + ": pair dimensions disagree");
  return p;
}

}  // namespace

MetricsReport evaluate_dataset(const DatasetIndex& data, ModelParamsF& params,
                               const NetworkConfig& cfg) {
  if (data.empty()) throw std::runtime_error("eval: dataset is empty");
  MetricsReport report;
  for (const auto& pr : data.pairs) {
    EvalPair p = load_eval_pair(pr);
    const double t0 = now_seconds();
    Image fused = fuse_forward(p.ir, p.vi, params, cfg);
    const double t1 = now_seconds();
    PairMetrics row = evaluate_pair(fused, p.ir, p.vi);
    row.pair = p.id;
    row.seconds = t1 - t0;
    report.rows.push_back(std::move(row));
  }
  return report;
}

BenchReport bench_runtime(const DatasetIndex& data, ModelParamsF& params, const NetworkConfig& cfg,
                          int repeats) {
  if (data.empty()) throw std::runtime_error("bench: dataset is empty");
  if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
  BenchReport report;
  report.repeats = repeats;
  for (const auto& pr : data.pairs) {
    EvalPair p = load_eval_pair(pr);
    (void)fuse_forward(p.ir, p.vi, params, cfg);  // warm-up, excluded
    double sum = 0.0, sum2 = 0.0;
    for (int r = 0; r < repeats; ++r) {
      const double t0 = now_seconds();
      (void)fuse_forward(p.ir, p.vi, params, cfg);
      const double dt = now_seconds() - t0;
      sum += dt;
      sum2 += dt * dt;
    }
    BenchRow row;
    row.pair = p.id;
    row.width = p.ir.width;
    row.height = p.ir.height;
    row.mean_seconds = sum / repeats;
    row.variance = repeats > 1 ? (sum2 - sum * sum / repeats) / (repeats - 1) : 0.0;
    report.rows.push_back(std::move(row));
  }
  for (const auto& r : report.rows) report.mean_seconds += r.mean_seconds;
  report.mean_seconds /= static_cast<double>(report.rows.size());
  return report;
}

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open config file");
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r\n");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r\n");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty key");
    out[key] = value;
  }
  return out;
}

}  // namespace fsat
