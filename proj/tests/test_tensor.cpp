#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fsat/gradcheck.hpp"
#include "fsat/ops.hpp"
#include "fsat/tensor.hpp"
#include "support/testutil.hpp"

using namespace fsat;
using testsupport::max_abs_diff;
using testsupport::random_tensor;

namespace {

// Independent dense loop-nest reference for "same" zero-padded convolution.
template <class T>
TensorT<T> conv2d_oracle(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ph = kh / 2, pw = kw / 2;
  TensorT<T> out({n, co, h, ww});
  for (int ni = 0; ni < n; ++ni)
    for (int oc = 0; oc < co; ++oc)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < ww; ++xx) {
          double acc = b.defined() ? static_cast<double>(b.data()[oc]) : 0.0;
          for (int ic = 0; ic < ci; ++ic)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int sy = y + ky - ph, sx = xx + kx - pw;
                if (sy < 0 || sy >= h || sx < 0 || sx >= ww) continue;
                acc += static_cast<double>(
                           x.data()[((static_cast<std::int64_t>(ni) * ci + ic) * h + sy) * ww + sx]) *
                       w.data()[((static_cast<std::int64_t>(oc) * ci + ic) * kh + ky) * kw + kx];
              }
          out.data()[((static_cast<std::int64_t>(ni) * co + oc) * h + y) * ww + xx] =
              static_cast<T>(acc);
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d: zero input yields per-channel bias") {
  Rng rng(1);
  Tensor x({1, 2, 5, 5}, 0.0f);
  Tensor w = random_tensor<float>({3, 2, 3, 3}, rng);
  Tensor b({3}, std::vector<float>{0.5f, -1.0f, 2.0f});
  Tensor out = conv2d(x, w, b, Pad::Zero);
  for (int oc = 0; oc < 3; ++oc)
    for (int i = 0; i < 25; ++i) CHECK(out.data()[oc * 25 + i] == doctest::Approx(b.data()[oc]));
}

TEST_CASE("conv2d: delta response pins the cross-correlation convention") {
  Tensor x({1, 1, 3, 3}, 0.0f);
  x.data()[4] = 1.0f;  // center delta
  Tensor w({1, 1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor none;
  Tensor out = conv2d(x, w, none, Pad::Zero);
  CHECK(out.data()[4] == doctest::Approx(5.0f));  // center = w[1][1]
  // cross-correlation (no kernel flip): the impulse response is the
  // 180-degree rotated kernel, out[y][x] = w[2-y][2-x]
  for (int y = 0; y < 3; ++y)
    for (int x2 = 0; x2 < 3; ++x2)
      CHECK(out.data()[y * 3 + x2] == doctest::Approx(w.data()[(2 - y) * 3 + (2 - x2)]));
  // and a right-neighbor delta shifts the response left, which separates
  // cross-correlation from true convolution
  Tensor x2({1, 1, 3, 3}, 0.0f);
  x2.data()[5] = 1.0f;  // (y=1, x=2)
  Tensor gx({1, 1, 3, 3}, std::vector<float>{0, 0, 0, -1, 0, 1, 0, 0, 0});
  Tensor out2 = conv2d(x2, gx, none, Pad::Zero);
  CHECK(out2.data()[4] == doctest::Approx(1.0f));   // w[1][2] lands at center
  CHECK(out2.data()[3] == doctest::Approx(0.0f));
}

TEST_CASE("conv2d matches the naive loop oracle on random cases") {
  Rng rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor<float>({1, 2, 5, 5}, rng);
    Tensor w = random_tensor<float>({4, 2, 3, 3}, rng);
    Tensor b = random_tensor<float>({4}, rng);
    Tensor out = conv2d(x, w, b, Pad::Zero);
    Tensor ref = conv2d_oracle(x, w, b);
    CHECK(max_abs_diff(out, ref) < 1e-6);
  }
}

TEST_CASE("conv2d rejects channel mismatch with both shapes named") {
  Tensor x({1, 3, 5, 5}, 1.0f);
  Tensor w({4, 2, 3, 3}, 1.0f);
  Tensor none;
  CHECK_THROWS_WITH_AS(conv2d(x, w, none, Pad::Zero),
                       doctest::Contains("1x3x5x5"), std::invalid_argument);
  try {
    conv2d(x, w, none, Pad::Zero);
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("4x2x3x3") != std::string::npos);
  }
}

TEST_CASE("matmul: identity, hand arithmetic, loop oracle") {
  Tensor a({2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor eye({2, 2}, std::vector<float>{1, 0, 0, 1});
  CHECK(max_abs_diff(matmul(a, eye), a) == 0.0);

  Tensor ones({2, 1}, std::vector<float>{1, 1});
  Tensor prod = matmul(a, ones);
  CHECK(prod.data()[0] == doctest::Approx(3));
  CHECK(prod.data()[1] == doctest::Approx(7));

  Rng rng(3);
  Tensor x = random_tensor<float>({7, 5}, rng);
  Tensor y = random_tensor<float>({5, 3}, rng);
  Tensor out = matmul(x, y);
  Tensor ref({7, 3});
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 5; ++k)
        acc += static_cast<double>(x.data()[i * 5 + k]) * y.data()[k * 3 + j];
      ref.data()[i * 3 + j] = static_cast<float>(acc);
    }
  CHECK(max_abs_diff(out, ref) < 1e-6);

  Tensor bad({4, 3}, 1.0f);
  CHECK_THROWS_AS(matmul(x, bad), std::invalid_argument);
}

TEST_CASE("softmax_rows: uniform, closed form, shift invariance, row sums") {
  Tensor equal({1, 4}, std::vector<float>{2, 2, 2, 2});
  Tensor u = softmax_rows(equal);
  for (int i = 0; i < 4; ++i) CHECK(u.data()[i] == doctest::Approx(0.25));

  Tensor row({1, 2}, std::vector<float>{0.0f, std::log(3.0f)});
  Tensor s = softmax_rows(row);
  CHECK(s.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(s.data()[1] == doctest::Approx(0.75).epsilon(1e-6));

  Rng rng(9);
  for (int seed = 0; seed < 3; ++seed) {
    // shift invariance at the verification precision
    TensorD x = random_tensor<double>({5, 7}, rng, -4.0, 4.0);
    TensorD shifted(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) shifted.data()[i] = x.data()[i] + 1000.0;
    TensorD sx = softmax_rows(x);
    TensorD ss = softmax_rows(shifted);
    CHECK(max_abs_diff(sx, ss) < 1e-7);
    for (int r = 0; r < 5; ++r) {
      double sum = 0.0;
      for (int c = 0; c < 7; ++c) {
        const double v = sx.data()[r * 7 + c];
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        sum += v;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    // 32-bit path with an exactly representable offset
    Tensor xf = random_tensor<float>({4, 6}, rng, -2.0, 2.0);
    Tensor sf(xf.shape());
    for (std::int64_t i = 0; i < xf.numel(); ++i) sf.data()[i] = xf.data()[i];
    Tensor plain = softmax_rows(sf);
    for (std::int64_t i = 0; i < xf.numel(); ++i) sf.data()[i] += 0.5f;
    Tensor off = softmax_rows(sf);
    CHECK(max_abs_diff(plain, off) < 1e-7);
  }
}

TEST_CASE("activations: point values and tanh slope at zero") {
  Tensor x({1, 4}, std::vector<float>{-1.0f, 2.0f, 0.0f, 0.0f});
  Tensor r = relu(x);
  CHECK(r.data()[0] == 0.0f);
  CHECK(r.data()[1] == 2.0f);
  CHECK(sigmoid(x).data()[2] == doctest::Approx(0.5));
  CHECK(tanh_act(x).data()[3] == doctest::Approx(0.0));

  // d tanh / dx at 0 is 1, via the checker itself
  TensorD p = TensorD::scalar(0.0);
  p.set_requires_grad(true);
  auto f = [&](Graph<double>* g) { return tanh_act(p, g); };
  auto rep = finite_diff_check<double>(f, {{"p", p}});
  CHECK(rep.max_rel_err < 1e-5);
  p.zero_grad();
  Graph<double> g;
  TensorD y = tanh_act(p, &g);
  backward(y, g);
  CHECK(p.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("batchnorm2d: train statistics, gamma=0 collapse, infer formula") {
  Rng rng(5);
  Tensor x = random_tensor<float>({2, 3, 4, 4}, rng, -2.0, 5.0);
  Tensor gamma({3}, 1.0f), beta({3}, 0.0f);
  Tensor rm({3}, 0.0f), rv({3}, 1.0f);
  Tensor out = batchnorm2d(x, gamma, beta, rm, rv, /*train=*/true);
  const std::int64_t hw = 16, m = 2 * hw;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < hw; ++i) mean += out.data()[(n * 3 + c) * hw + i];
    mean /= static_cast<double>(m);
    for (int n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < hw; ++i) {
        const double d = out.data()[(n * 3 + c) * hw + i] - mean;
        var += d * d;
      }
    var /= static_cast<double>(m);
    CHECK(std::fabs(mean) < 1e-4);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    // momentum 0.9 pulls the zero-initialized running mean 10% toward batch
    CHECK(rm.data()[c] != 0.0f);
  }

  Tensor gz({3}, 0.0f), bz({3}, std::vector<float>{1.0f, 2.0f, 3.0f});
  Tensor rm2({3}, 0.0f), rv2({3}, 1.0f);
  Tensor out0 = batchnorm2d(x, gz, bz, rm2, rv2, true);
  for (int c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < hw; ++i) CHECK(out0.data()[c * hw + i] == bz.data()[c]);

  // inference reproduces the hand formula with given running stats
  Tensor rm3({3}, std::vector<float>{0.5f, -0.25f, 1.0f});
  Tensor rv3({3}, std::vector<float>{2.0f, 0.5f, 1.5f});
  Tensor ga({3}, std::vector<float>{1.5f, 0.7f, -0.3f});
  Tensor be({3}, std::vector<float>{0.1f, 0.0f, -1.0f});
  Tensor inf = batchnorm2d(x, ga, be, rm3, rv3, /*train=*/false);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < hw; ++i) {
        const float xi = x.data()[(n * 3 + c) * hw + i];
        const float want = (xi - rm3.data()[c]) / std::sqrt(rv3.data()[c] + 1e-5f) * ga.data()[c] +
                           be.data()[c];
        CHECK(inf.data()[(n * 3 + c) * hw + i] == doctest::Approx(want).epsilon(1e-5));
      }

  Tensor tiny({1, 3, 1, 1}, 1.0f);
  Tensor rm4({3}, 0.0f), rv4({3}, 1.0f);
  CHECK_THROWS_AS(batchnorm2d(tiny, gamma, beta, rm4, rv4, true), std::invalid_argument);
}

TEST_CASE("channel_reduce: hand values, constant std, loop oracle") {
  Tensor x({1, 2, 1, 1}, std::vector<float>{1.0f, 3.0f});
  CHECK(channel_reduce(x, Reduce::Max).data()[0] == doctest::Approx(3.0));
  CHECK(channel_reduce(x, Reduce::Std).data()[0] == doctest::Approx(1.0));

  Tensor c({1, 5, 3, 3}, 0.77f);
  Tensor sd = channel_reduce(c, Reduce::Std);
  for (std::int64_t i = 0; i < sd.numel(); ++i) CHECK(sd.data()[i] == 0.0f);

  Rng rng(11);
  Tensor r = random_tensor<float>({1, 8, 4, 4}, rng);
  Tensor mx = channel_reduce(r, Reduce::Max);
  Tensor st = channel_reduce(r, Reduce::Std);
  for (int i = 0; i < 16; ++i) {
    double best = -1e30, mean = 0.0;
    for (int ch = 0; ch < 8; ++ch) {
      const double v = r.data()[ch * 16 + i];
      best = std::max(best, v);
      mean += v;
    }
    mean /= 8.0;
    double var = 0.0;
    for (int ch = 0; ch < 8; ++ch) {
      const double d = r.data()[ch * 16 + i] - mean;
      var += d * d;
    }
    CHECK(mx.data()[i] == doctest::Approx(best));
    CHECK(st.data()[i] == doctest::Approx(std::sqrt(var / 8.0)).epsilon(1e-5));
  }
}

TEST_CASE("backward: sum and sum-of-squares gradients, accumulation, scalar guard") {
  Rng rng(13);
  Tensor x = random_tensor<float>({2, 3}, rng);
  x.set_requires_grad(true);

  {
    Graph<float> g;
    Tensor loss = sum_all(x, &g);
    x.zero_grad();
    backward(loss, g);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(1.0f));
    // repeated backward without zeroing accumulates
    backward(loss, g);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(2.0f));
  }
  {
    Graph<float> g;
    Tensor loss = sum_all(mul(x, x, &g), &g);
    x.zero_grad();
    backward(loss, g);
    for (std::int64_t i = 0; i < x.numel(); ++i)
      CHECK(x.grad()[i] == doctest::Approx(2.0f * x.data()[i]));
  }
  {
    Graph<float> g;
    Tensor notscalar = mul(x, x, &g);
    CHECK_THROWS_AS(backward(notscalar, g), std::invalid_argument);
    Tensor detached = Tensor::scalar(1.0f);
    CHECK_THROWS_AS(backward(detached, g), std::invalid_argument);
  }
}

TEST_CASE("finite_diff_check: quadratic sanity") {
  TensorD p = TensorD::scalar(3.0);
  p.set_requires_grad(true);
  auto f = [&](Graph<double>* g) { return mul(p, p, g); };
  auto rep = finite_diff_check<double>(f, {{"p", p}});
  CHECK(rep.max_rel_err < 1e-9);

  // the analytic derivative is 6 at p = 3
  p.zero_grad();
  Graph<double> g;
  TensorD y = mul(p, p, &g);
  backward(y, g);
  CHECK(p.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("every primitive op passes a 64-bit finite-difference check") {
  for (std::uint64_t seed : {101u, 202u, 303u}) {
    Rng rng(seed);
    TensorD x = random_tensor<double>({2, 3, 6, 6}, rng, 0.1, 1.0);
    TensorD w = random_tensor<double>({4, 3, 3, 3}, rng);
    TensorD b = random_tensor<double>({4}, rng);
    TensorD s2 = random_tensor<double>({2, 3}, rng, 0.2, 1.0);
    TensorD sp = random_tensor<double>({2, 1, 6, 6}, rng, 0.2, 1.0);
    TensorD other = random_tensor<double>({2, 3, 6, 6}, rng, 0.1, 1.0);
    TensorD gmm = random_tensor<double>({3, 4}, rng);
    TensorD tok = random_tensor<double>({2, 5, 3}, rng);
    TensorD gamma = random_tensor<double>({3}, rng, 0.5, 1.5);
    TensorD beta = random_tensor<double>({3}, rng, -0.5, 0.5);
    for (auto* t : {&x, &w, &b, &s2, &sp, &other, &gmm, &tok, &gamma, &beta})
      t->set_requires_grad(true);

    using F = std::function<TensorD(Graph<double>*)>;
    std::vector<std::pair<const char*, F>> cases;
    cases.emplace_back("conv_zero", [&](Graph<double>* g) {
      return sum_all(conv2d(x, w, b, Pad::Zero, g), g);
    });
    cases.emplace_back("conv_reflect", [&](Graph<double>* g) {
      return sum_all(mul(conv2d(x, w, b, Pad::Reflect, g), conv2d(x, w, b, Pad::Reflect, g), g), g);
    });
    cases.emplace_back("softmax", [&](Graph<double>* g) {
      return sum_all(mul(softmax_lastdim(tok, g), softmax_lastdim(tok, g), g), g);
    });
    cases.emplace_back("activations", [&](Graph<double>* g) {
      return sum_all(sigmoid(mul(tanh_act(tok, g), tok, g), g), g);
    });
    cases.emplace_back("channel_ops", [&](Graph<double>* g) {
      TensorD st = channel_reduce(x, Reduce::Std, g);
      TensorD mx = channel_reduce(x, Reduce::Max, g);
      return sum_all(mul(concat_channels(mx, st, g), concat_channels(st, mx, g), g), g);
    });
    cases.emplace_back("scales", [&](Graph<double>* g) {
      return sum_all(scale_spatial(scale_channels(x, s2, g), sp, g), g);
    });
    cases.emplace_back("matmul_fd", [&](Graph<double>* g) {
      TensorD flat = reshape(s2, {2, 3}, g);
      return sum_all(mul(matmul(flat, gmm, g), matmul(flat, gmm, g), g), g);
    });
    cases.emplace_back("layernorm_fd", [&](Graph<double>* g) {
      return sum_all(mul(layernorm_tokens(tok, gamma, beta, g), tok, g), g);
    });
    cases.emplace_back("emax_sqrt", [&](Graph<double>* g) {
      return sqrt_op(add_scalar(sum_all(mul(emax(x, other, g), x, g), g), 1.0, g), g);
    });
    cases.emplace_back("batchnorm_fd", [&](Graph<double>* g) {
      TensorD rm({3}, 0.0);
      TensorD rv({3}, 1.0);
      TensorD bn = batchnorm2d(x, gamma, beta, rm, rv, true, g);
      return sum_all(mul(bn, bn, g), g);
    });
    cases.emplace_back("pad_crop_select", [&](Graph<double>* g) {
      TensorD padded = pad2d(x, 2, 1, 1, 2, Pad::Reflect, g);
      TensorD cropped = crop2d(padded, 1, 1, 6, 6, g);
      return sum_all(mul(select_batch(cropped, 1, g), select_batch(x, 1, g), g), g);
    });

    std::vector<std::pair<std::string, TensorD>> params = {
        {"x", x},     {"w", w},     {"b", b},       {"s2", s2},   {"sp", sp},
        {"other", other}, {"gmm", gmm}, {"tok", tok}, {"gamma", gamma}, {"beta", beta}};
    for (auto& [name, fn] : cases) {
      FdOptions opt;
      opt.coords_per_tensor = 16;
      opt.seed = seed;
      auto rep = finite_diff_check<double>(fn, params, opt);
      INFO("op ", std::string(name), " worst ", rep.worst, " err ", rep.max_rel_err);
      CHECK(rep.max_rel_err < 1e-5);
    }
  }
}

TEST_CASE("finite outputs on random op pipelines") {
  Rng rng(77);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor<float>({1, 4, 8, 8}, rng, -3.0, 3.0);
    Tensor w = random_tensor<float>({4, 4, 3, 3}, rng);
    Tensor b = random_tensor<float>({4}, rng);
    Tensor y = sigmoid(conv2d(relu(x), w, b, Pad::Reflect));
    Tensor z = channel_reduce(mul(y, y), Reduce::Std);
    for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(std::isfinite(z.data()[i]));
  }
}
