#include "fsat/train.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "fsat/optim.hpp"
#include "fsat/rng.hpp"

namespace fsat {

namespace {

struct LoadedPair {
  Tensor input;   // 1 x 2 x patch x patch
  Tensor vi;      // 1 x 1 x patch x patch
  Tensor ir;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter) {
  // splitmix-style finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (counter + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor plane_from_image(const Image& img) {
  Tensor t({1, 1, img.height, img.width});
  for (std::size_t i = 0; i < img.data.size(); ++i)
    t.data()[static_cast<std::int64_t>(i)] = img.data[i];
  return t;
}

Tensor stack_batch(const std::vector<const Tensor*>& planes) {
  const int h = planes[0]->dim(2), w = planes[0]->dim(3), c = planes[0]->dim(1);
  Tensor out({static_cast<int>(planes.size()), c, h, w});
  const std::int64_t stride = static_cast<std::int64_t>(c) * h * w;
  for (std::size_t i = 0; i < planes.size(); ++i)
    std::copy_n(planes[i]->data(), stride, out.data() + static_cast<std::int64_t>(i) * stride);
  return out;
}

}  // namespace

std::string trace_to_csv(const std::vector<LossReport>& trace, const std::vector<double>& lrs) {
  std::ostringstream os;
  os << "step,lr,pixel,texture,ssim,total\n";
  os.precision(9);
  for (std::size_t i = 0; i < trace.size(); ++i) {
    os << i << ',' << (i < lrs.size() ? lrs[i] : 0.0) << ',' << trace[i].pixel << ','
       << trace[i].texture << ',' << trace[i].ssim << ',' << trace[i].total << '\n';
  }
  return os.str();
}

TrainResult train_loop(const DatasetIndex& data, const NetworkConfig& cfg,
                       const TrainOptions& opt) {
  cfg.validate();
  if (data.empty()) throw std::runtime_error("train: dataset is empty");
  if (opt.epochs < 1 || opt.batch < 1) throw std::invalid_argument("train: epochs/batch must be >= 1");
  if (opt.patch < 8) throw std::invalid_argument("train: patch size must be >= 8");

  TrainResult result;

  // Load and resize the corpus once up front; skip-and-warn on bad files.
  std::vector<LoadedPair> corpus;
  for (const auto& pair : data.pairs) {
    try {
      Image ir = load_pgm(pair.ir_path);
      Image vi_raw = load_image(pair.vi_path);
      Image vi = vi_raw;
      if (vi_raw.channels == 3) {
        // gray training contract: reduce RGB to luma
        vi = Image(vi_raw.width, vi_raw.height, 1);
        for (std::size_t i = 0; i < vi.pixel_count(); ++i)
          vi.data[i] = 0.299f * vi_raw.data[i * 3] + 0.587f * vi_raw.data[i * 3 + 1] +
                       0.114f * vi_raw.data[i * 3 + 2];
      }
      if (ir.width != vi.width || ir.height != vi.height)
        throw std::runtime_error("pair dimensions disagree");
      ir = resize_bilinear(ir, opt.patch, opt.patch);
      vi = resize_bilinear(vi, opt.patch, opt.patch);
      LoadedPair lp;
      lp.ir = plane_from_image(ir);
      lp.vi = plane_from_image(vi);
      lp.input = concat_inputs<float>(ir, vi);
      corpus.push_back(std::move(lp));
    } catch (const std::exception& e) {
      std::fprintf(stderr, "train: skipping pair %s: %s\n", pair.id.c_str(), e.what());
      ++result.skipped_pairs;
    }
  }
  if (corpus.empty()) throw std::runtime_error("train: no readable pairs in dataset");

  result.params = init_params<float>(cfg, opt.seed);
  auto learnable = result.params.learnable(cfg);
  std::vector<Tensor*> plist;
  for (auto& [name, t] : learnable) plist.push_back(t);
  AdamState<float> adam;
  adam.init(plist);

  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(corpus.size()) + opt.batch - 1) / opt.batch;
  const std::int64_t total_steps = steps_per_epoch * opt.epochs;
  std::vector<double> lrs;

  std::vector<std::size_t> order(corpus.size());
  std::int64_t step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(opt.seed, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    for (std::int64_t bi = 0; bi < steps_per_epoch; ++bi) {
      std::vector<const Tensor*> ins, vis, irs;
      for (int k = 0; k < opt.batch; ++k) {
        const std::size_t idx = order[static_cast<std::size_t>(
            (bi * opt.batch + k) % static_cast<std::int64_t>(order.size()))];
        ins.push_back(&corpus[idx].input);
        vis.push_back(&corpus[idx].vi);
        irs.push_back(&corpus[idx].ir);
      }
      Tensor batch_in = stack_batch(ins);
      Tensor batch_vi = stack_batch(vis);
      Tensor batch_ir = stack_batch(irs);

      Graph<float> graph;
      Tensor fused = network_forward(batch_in, result.params, cfg, /*train=*/true, &graph);
      TotalLoss<float> loss = total_loss(fused, batch_vi, batch_ir, opt.weights, &graph);
      result.params.zero_grad(cfg);
      backward(loss.value, graph);

      const double lr = cosine_lr(step, total_steps, opt.lr);
      adam_step(adam, plist, static_cast<float>(lr));
      lrs.push_back(lr);
      result.trace.push_back(loss.report);
      if (opt.verbose && (step % 10 == 0 || step + 1 == total_steps)) {
        std::fprintf(stderr, "step %5lld/%lld  lr %.2e  total %.4f (px %.4f  tx %.4f  ssim %.4f)\n",
                     static_cast<long long>(step), static_cast<long long>(total_steps), lr,
                     loss.report.total, loss.report.pixel, loss.report.texture, loss.report.ssim);
      }
      ++step;
    }
  }
  result.steps = step;

  if (opt.trace_csv) {
    std::ofstream out(*opt.trace_csv);
    if (!out) throw std::runtime_error(*opt.trace_csv + ": cannot open file for writing");
    out << trace_to_csv(result.trace, lrs);
  }
  return result;
}

}  // namespace fsat
