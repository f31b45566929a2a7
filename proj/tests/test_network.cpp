#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fsat/gradcheck.hpp"
#include "fsat/network.hpp"
#include "support/testutil.hpp"

using namespace fsat;
using testsupport::max_abs_diff;
using testsupport::random_tensor;

namespace {

Image random_image(int w, int h, Rng& rng) {
  Image img(w, h, 1);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return img;
}

void zero_learnables(ModelParamsF& p, const NetworkConfig& cfg) {
  for (auto& [name, t] : p.learnable(cfg)) {
    const bool identity_norm = name.find("norm") != std::string::npos &&
                               name.find("gamma") != std::string::npos;
    const bool bn_gamma = name == "bn.gamma";
    float fill = 0.0f;
    if (identity_norm || bn_gamma) fill = 1.0f;
    std::fill(t->vec().begin(), t->vec().end(), fill);
  }
}

std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("concat_inputs: channel order, sums, shape, and mismatch error") {
  Image ir(2, 2, 1, 0.0f);
  Image vi(2, 2, 1, 1.0f);
  Tensor t = concat_inputs<float>(ir, vi);
  REQUIRE(t.shape() == std::vector<int>{1, 2, 2, 2});
  double s0 = 0.0, s1 = 0.0;
  for (int i = 0; i < 4; ++i) {
    s0 += t.data()[i];
    s1 += t.data()[4 + i];
  }
  CHECK(s0 == doctest::Approx(0.0));
  CHECK(s1 == doctest::Approx(4.0));

  Tensor swapped = concat_inputs<float>(vi, ir);
  CHECK(swapped.data()[0] == 1.0f);  // not symmetric
  CHECK(swapped.data()[4] == 0.0f);

  Rng rng(1);
  Image big_ir = random_image(640, 480, rng);
  Image big_vi = random_image(640, 480, rng);
  CHECK(concat_inputs<float>(big_ir, big_vi).shape() == std::vector<int>{1, 2, 480, 640});

  Image other(3, 2, 1);
  CHECK_THROWS_WITH_AS(concat_inputs<float>(ir, other), doctest::Contains("2x2"),
                       std::invalid_argument);
}

TEST_CASE("shallow_extract: zero input, nonnegativity, op-chain oracle") {
  NetworkConfig cfg;
  cfg.validate();
  ModelParamsF p = init_params<float>(cfg, 3);

  Tensor zeros({1, 2, 8, 8}, 0.0f);
  ModelParamsF pz = init_params<float>(cfg, 3);
  zero_learnables(pz, cfg);
  Tensor out0 = shallow_extract(zeros, pz, /*train=*/false);
  for (std::int64_t i = 0; i < out0.numel(); ++i) CHECK(out0.data()[i] == 0.0f);

  Rng rng(4);
  Tensor x = random_tensor<float>({1, 2, 8, 8}, rng, 0.0, 1.0);
  Tensor out = shallow_extract(x, p, /*train=*/true);
  CHECK(out.shape() == std::vector<int>{1, 16, 8, 8});
  for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] >= 0.0f);

  // scripted oracle with the same parameters and fresh BN stats
  ModelParamsF q = init_params<float>(cfg, 3);
  Tensor a = relu(conv2d(x, q.conv1_w, q.conv1_b, Pad::Zero));
  Tensor b = conv2d(a, q.conv2_w, q.conv2_b, Pad::Zero);
  ModelParamsF stats = init_params<float>(cfg, 3);
  Tensor n = batchnorm2d(b, q.bn_gamma, q.bn_beta, stats.bn_mean, stats.bn_var, true);
  Tensor want = relu(n);
  ModelParamsF p2 = init_params<float>(cfg, 3);
  Tensor got = shallow_extract(x, p2, true);
  CHECK(max_abs_diff(got, want) < 1e-5);
}

TEST_CASE("fsat_forward: zero block parameters compose CB and the 0.25 gate") {
  NetworkConfig cfg;
  ModelParamsF p = init_params<float>(cfg, 5);
  zero_learnables(p, cfg);
  Rng rng(5);
  Tensor f = random_tensor<float>({1, 16, 8, 8}, rng, 0.1, 1.0);
  Tensor out = fsat_forward(f, p.blocks[0], cfg);
  // oracle: ITM collapses to context broadcast, FSAM gates by 0.25
  WindowLayout lay;
  Tensor cb = window_merge(context_broadcast(window_partition(f, 8, lay)), lay);
  for (std::int64_t i = 0; i < f.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(f.data()[i] + 0.25f * cb.data()[i]).epsilon(1e-5));
}

TEST_CASE("fsat stack preserves shape for n_fsat in {1,2,3,4}") {
  Rng rng(6);
  for (int n = 1; n <= 4; ++n) {
    NetworkConfig cfg;
    cfg.n_fsat = n;
    ModelParamsF p = init_params<float>(cfg, 7);
    Tensor x = random_tensor<float>({1, 2, 16, 16}, rng, 0.0, 1.0);
    Tensor out = network_forward(x, p, cfg, false);
    CHECK(out.shape() == std::vector<int>{1, 1, 16, 16});
  }
}

TEST_CASE("reverse and full orderings differ on random input") {
  Rng rng(7);
  Tensor f = random_tensor<float>({1, 16, 8, 8}, rng, 0.0, 1.0);
  NetworkConfig full;
  NetworkConfig rev;
  rev.ablation = Ablation::Reverse;
  ModelParamsF p1 = init_params<float>(full, 11);
  ModelParamsF p2 = init_params<float>(rev, 11);
  Tensor a = fsat_forward(f, p1.blocks[0], full);
  Tensor b = fsat_forward(f, p2.blocks[0], rev);
  CHECK(max_abs_diff(a, b) > 0.0);
}

TEST_CASE("fuse_forward: zero parameters give the constant 0.5 image") {
  NetworkConfig cfg;
  ModelParamsF p = init_params<float>(cfg, 8);
  zero_learnables(p, cfg);
  Rng rng(8);
  Image ir = random_image(16, 16, rng);
  Image vi = random_image(16, 16, rng);
  Image fused = fuse_forward(ir, vi, p, cfg);
  for (float v : fused.data) CHECK(v == doctest::Approx(0.5f));
}

TEST_CASE("fuse_forward: output in (0,1) and bit-deterministic") {
  NetworkConfig cfg;
  ModelParamsF p = init_params<float>(cfg, 9);
  Rng rng(9);
  Image ir = random_image(64, 64, rng);
  Image vi = random_image(64, 64, rng);
  Image a = fuse_forward(ir, vi, p, cfg);
  Image b = fuse_forward(ir, vi, p, cfg);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    CHECK(a.data[i] > 0.0f);
    CHECK(a.data[i] < 1.0f);
    CHECK(a.data[i] == b.data[i]);
  }
}

TEST_CASE("init_params: reproducible, seed-sensitive, fan-in bound") {
  NetworkConfig cfg;
  ModelParamsF a = init_params<float>(cfg, 42);
  ModelParamsF b = init_params<float>(cfg, 42);
  ModelParamsF c = init_params<float>(cfg, 43);
  auto na = a.named(cfg), nb = b.named(cfg), nc = c.named(cfg);
  bool any_diff = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    CHECK(na[i].second->vec() == nb[i].second->vec());
    if (na[i].second->vec() != nc[i].second->vec()) any_diff = true;
  }
  CHECK(any_diff);

  // conv1 fan-in is 2*3*3; every weight must respect the bound and the
  // empirical max should come close to it
  const float bound = std::sqrt(1.0f / 18.0f);
  float maxabs = 0.0f;
  for (std::int64_t i = 0; i < a.conv1_w.numel(); ++i)
    maxabs = std::max(maxabs, std::fabs(a.conv1_w.data()[i]));
  CHECK(maxabs <= bound);
  CHECK(maxabs > 0.75f * bound);
  for (std::int64_t i = 0; i < a.conv1_b.numel(); ++i) CHECK(a.conv1_b.data()[i] == 0.0f);
}

TEST_CASE("save/load round-trips bit-exactly including BN running stats") {
  NetworkConfig cfg;
  ModelParamsF p = init_params<float>(cfg, 10);
  // make running stats non-trivial first
  Rng rng(10);
  Tensor x = random_tensor<float>({2, 2, 8, 8}, rng, 0.0, 1.0);
  (void)shallow_extract(x, p, /*train=*/true);

  const std::string path = tmp_path("fsat_roundtrip.model");
  save_params(p, cfg, path);
  LoadedModel<float> loaded = load_params<float>(path);
  CHECK(loaded.config.n_fsat == cfg.n_fsat);
  auto np = p.named(cfg);
  auto nl = loaded.params.named(loaded.config);
  REQUIRE(np.size() == nl.size());
  for (std::size_t i = 0; i < np.size(); ++i) {
    CHECK(np[i].first == nl[i].first);
    CHECK(np[i].second->vec() == nl[i].second->vec());
  }
}

TEST_CASE("load_params: corrupt magic is a distinct error") {
  NetworkConfig cfg;
  ModelParamsF p = init_params<float>(cfg, 11);
  const std::string path = tmp_path("fsat_badmagic.model");
  save_params(p, cfg, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS_WITH_AS(load_params<float>(path), doctest::Contains("bad magic"),
                       std::runtime_error);
}

TEST_CASE("load_params: truncated file is a distinct error") {
  NetworkConfig cfg;
  ModelParamsF p = init_params<float>(cfg, 12);
  const std::string path = tmp_path("fsat_trunc.model");
  save_params(p, cfg, path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  CHECK_THROWS_WITH_AS(load_params<float>(path), doctest::Contains("truncated"),
                       std::runtime_error);
}

TEST_CASE("load_params: config mismatch is rejected before tensor data") {
  NetworkConfig two;
  ModelParamsF p = init_params<float>(two, 13);
  const std::string path = tmp_path("fsat_n2.model");
  save_params(p, two, path);
  NetworkConfig three;
  three.n_fsat = 3;
  CHECK_THROWS_AS(load_params<float>(path, &three), std::runtime_error);
  // self-describing load still works
  CHECK(load_params<float>(path).config.n_fsat == 2);
}

TEST_CASE("parameter counts are a pure function of config and differ across ablations") {
  NetworkConfig full, nofsam, noitm, rev;
  nofsam.ablation = Ablation::NoFsam;
  noitm.ablation = Ablation::NoItm;
  rev.ablation = Ablation::Reverse;
  const auto nf = param_count<float>(full);
  const auto ns = param_count<float>(nofsam);
  const auto ni = param_count<float>(noitm);
  const auto nr = param_count<float>(rev);
  CHECK(nf == nr);        // reverse keeps both modules
  CHECK(ns < nf);         // dropping FSAM removes parameters
  CHECK(ni < nf);         // dropping ITM removes parameters
  CHECK(ns != ni);
  CHECK(param_count<float>(full) == param_count<float>(full));
}

TEST_CASE("ablation configs are pairwise distinguishable on a fixed input") {
  Rng rng(14);
  Image ir = random_image(16, 16, rng);
  Image vi = random_image(16, 16, rng);
  std::vector<Ablation> kinds = {Ablation::Full, Ablation::NoFsam, Ablation::NoItm,
                                 Ablation::Reverse};
  std::vector<Image> outs;
  for (Ablation ab : kinds) {
    NetworkConfig cfg;
    cfg.ablation = ab;
    ModelParamsF p = init_params<float>(cfg, 99);
    outs.push_back(fuse_forward(ir, vi, p, cfg));
  }
  for (std::size_t i = 0; i < outs.size(); ++i)
    for (std::size_t j = i + 1; j < outs.size(); ++j) {
      double diff = 0.0;
      for (std::size_t k = 0; k < outs[i].data.size(); ++k)
        diff = std::max(diff, std::fabs(static_cast<double>(outs[i].data[k]) - outs[j].data[k]));
      CHECK(diff > 1e-6);
    }
}

TEST_CASE("shape totality: any H,W >= 8 is accepted and preserved") {
  NetworkConfig cfg;
  ModelParamsF p = init_params<float>(cfg, 15);
  Rng rng(15);
  for (auto [w, h] : {std::pair{8, 8}, std::pair{13, 9}, std::pair{30, 22}}) {
    Image ir = random_image(w, h, rng);
    Image vi = random_image(w, h, rng);
    Image out = fuse_forward(ir, vi, p, cfg);
    CHECK(out.width == w);
    CHECK(out.height == h);
  }
}
