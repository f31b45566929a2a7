#pragma once

// Training losses: pixel MSE against both sources, Sobel texture loss against
// the per-pixel max of the source gradients, and SSIM against the per-pixel
// max image. All are differentiable end to end.

#include <cmath>
#include <cstdint>
#include <vector>

#include "fsat/ops.hpp"
#include "fsat/tensor.hpp"

namespace fsat {

struct LossWeights {
  double alpha = 1.0;
  double beta = 10.0;
  double gamma = 100.0;
};

struct LossReport {
  double pixel = 0.0;
  double texture = 0.0;
  double ssim = 0.0;  // the loss term 1 - SSIM
  double total = 0.0;
};

namespace detail {

// Accepts rank-2 [H,W] or rank-4 [N,1,H,W]; returns an [N,1,H,W] tape view.
template <class T>
TensorT<T> as_map(const TensorT<T>& x, Graph<T>* g, const char* op) {
  if (x.rank() == 4) {
    require(x.dim(1) == 1, std::string(op) + ": expected single-channel maps, got " +
                               shape_str(x.shape()));
    return x;
  }
  require(x.rank() == 2, std::string(op) + ": expected [H,W] or [N,1,H,W], got " +
                             shape_str(x.shape()));
  return reshape(x, {1, 1, x.dim(0), x.dim(1)}, g);
}

template <class T>
TensorT<T> sobel_kernel_x() {
  return TensorT<T>({1, 1, 3, 3}, std::vector<T>{-1, 0, 1, -2, 0, 2, -1, 0, 1});
}

template <class T>
TensorT<T> sobel_kernel_y() {
  return TensorT<T>({1, 1, 3, 3}, std::vector<T>{-1, -2, -1, 0, 0, 0, 1, 2, 1});
}

// 11x11 Gaussian window, sigma 1.5, normalized to sum 1; computed in double.
template <class T>
TensorT<T> gaussian_window11() {
  static const std::vector<double> w = [] {
    const int r = 5;
    std::vector<double> v(11 * 11);
    double sum = 0.0;
    for (int y = -r; y <= r; ++y)
      for (int x = -r; x <= r; ++x) {
        const double e = std::exp(-(x * x + y * y) / (2.0 * 1.5 * 1.5));
        v[static_cast<std::size_t>((y + r) * 11 + (x + r))] = e;
        sum += e;
      }
    for (auto& e : v) e /= sum;
    return v;
  }();
  std::vector<T> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = static_cast<T>(w[i]);
  return TensorT<T>({1, 1, 11, 11}, std::move(out));
}

}  // namespace detail

// (1/HW) * sum[(F-VI)^2 + (F-IR)^2], averaged over the batch when N > 1.
template <class T>
TensorT<T> pixel_loss(const TensorT<T>& f, const TensorT<T>& vi, const TensorT<T>& ir,
                      Graph<T>* g = nullptr) {
  TensorT<T> fm = detail::as_map(f, g, "pixel_loss");
  TensorT<T> vm = detail::as_map(vi, g, "pixel_loss");
  TensorT<T> im = detail::as_map(ir, g, "pixel_loss");
  detail::same_shape(fm.shape(), vm.shape(), "pixel_loss");
  detail::same_shape(fm.shape(), im.shape(), "pixel_loss");
  TensorT<T> dv = sub(fm, vm, g);
  TensorT<T> di = sub(fm, im, g);
  TensorT<T> sq = add(mul(dv, dv, g), mul(di, di, g), g);
  const double hw = static_cast<double>(fm.dim(2)) * fm.dim(3);
  // mean over batch and pixels = sum / (N*HW); per image this is 1/HW.
  return mul_scalar(sum_all(sq, g), static_cast<T>(1.0 / (hw * fm.dim(0))), g);
}

// Sobel gradient magnitude sqrt(Gx^2 + Gy^2 + 1e-8) with reflect padding.
template <class T>
TensorT<T> sobel_gradient(const TensorT<T>& img, Graph<T>* g = nullptr) {
  TensorT<T> x = detail::as_map(img, g, "sobel_gradient");
  TensorT<T> none;
  TensorT<T> gx = conv2d(x, detail::sobel_kernel_x<T>(), none, Pad::Reflect, g);
  TensorT<T> gy = conv2d(x, detail::sobel_kernel_y<T>(), none, Pad::Reflect, g);
  TensorT<T> mag2 = add_scalar(add(mul(gx, gx, g), mul(gy, gy, g), g), T(1e-8), g);
  return sqrt_op(mag2, g);
}

// ||grad(F) - max(grad(VI), grad(IR))||_2 / sqrt(HW), batch-averaged.
template <class T>
TensorT<T> texture_loss(const TensorT<T>& f, const TensorT<T>& vi, const TensorT<T>& ir,
                        Graph<T>* g = nullptr) {
  TensorT<T> fm = detail::as_map(f, g, "texture_loss");
  TensorT<T> vm = detail::as_map(vi, g, "texture_loss");
  TensorT<T> im = detail::as_map(ir, g, "texture_loss");
  detail::same_shape(fm.shape(), vm.shape(), "texture_loss");
  detail::same_shape(fm.shape(), im.shape(), "texture_loss");
  TensorT<T> gf = sobel_gradient(fm, g);
  TensorT<T> gmax = emax(sobel_gradient(vm, g), sobel_gradient(im, g), g);
  TensorT<T> diff = sub(gf, gmax, g);
  const int n = fm.dim(0);
  const double hw = static_cast<double>(fm.dim(2)) * fm.dim(3);
  if (n == 1) {
    return mul_scalar(sqrt_op(sum_all(mul(diff, diff, g), g), g), static_cast<T>(1.0 / std::sqrt(hw)),
                      g);
  }
  // per-image l2 norms, averaged over the batch
  TensorT<T> acc;
  for (int i = 0; i < n; ++i) {
    TensorT<T> di = select_batch(diff, i, g);
    TensorT<T> norm = sqrt_op(sum_all(mul(di, di, g), g), g);
    acc = i == 0 ? norm : add(acc, norm, g);
  }
  return mul_scalar(acc, static_cast<T>(1.0 / (std::sqrt(hw) * n)), g);
}

template <class T>
TensorT<T> max_image(const TensorT<T>& vi, const TensorT<T>& ir, Graph<T>* g = nullptr) {
  detail::same_shape(vi.shape(), ir.shape(), "max_image");
  return emax(vi, ir, g);
}

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
// C2 = 0.03^2 for dynamic range 1, reflect padding.
template <class T>
TensorT<T> ssim(const TensorT<T>& a, const TensorT<T>& b, Graph<T>* g = nullptr) {
  TensorT<T> x = detail::as_map(a, g, "ssim");
  TensorT<T> y = detail::as_map(b, g, "ssim");
  detail::same_shape(x.shape(), y.shape(), "ssim");
  const T c1 = T(0.01 * 0.01), c2 = T(0.03 * 0.03);
  TensorT<T> win = detail::gaussian_window11<T>();
  TensorT<T> none;
  auto blur = [&](const TensorT<T>& t) { return conv2d(t, win, none, Pad::Reflect, g); };
  TensorT<T> mx = blur(x);
  TensorT<T> my = blur(y);
  TensorT<T> mxy = mul(mx, my, g);
  TensorT<T> mx2 = mul(mx, mx, g);
  TensorT<T> my2 = mul(my, my, g);
  TensorT<T> sx = sub(blur(mul(x, x, g)), mx2, g);
  TensorT<T> sy = sub(blur(mul(y, y, g)), my2, g);
  TensorT<T> sxy = sub(blur(mul(x, y, g)), mxy, g);
  TensorT<T> num = mul(add_scalar(mul_scalar(mxy, T(2), g), c1, g),
                       add_scalar(mul_scalar(sxy, T(2), g), c2, g), g);
  TensorT<T> den = mul(add_scalar(add(mx2, my2, g), c1, g), add_scalar(add(sx, sy, g), c2, g), g);
  // elementwise num/den via num * den^-1; den >= c1*c2 > 0
  TensorT<T> inv_den = reciprocal(den, g);
  return mean_all(mul(num, inv_den, g), g);
}

// 1 - SSIM(F, max(VI, IR)).
template <class T>
TensorT<T> ssim_loss(const TensorT<T>& f, const TensorT<T>& vi, const TensorT<T>& ir,
                     Graph<T>* g = nullptr) {
  TensorT<T> target = max_image(vi, ir, g);
  TensorT<T> s = ssim(f, target, g);
  return add_scalar(mul_scalar(s, T(-1), g), T(1), g);
}

template <class T>
struct TotalLoss {
  TensorT<T> value;  // scalar tape node for backward
  LossReport report;
};

// alpha * pixel + beta * texture + gamma * ssim.
template <class T>
TotalLoss<T> total_loss(const TensorT<T>& f, const TensorT<T>& vi, const TensorT<T>& ir,
                        const LossWeights& w, Graph<T>* g = nullptr) {
  TotalLoss<T> out;
  TensorT<T> lp = pixel_loss(f, vi, ir, g);
  TensorT<T> lt = texture_loss(f, vi, ir, g);
  TensorT<T> ls = ssim_loss(f, vi, ir, g);
  TensorT<T> total = add(add(mul_scalar(lp, static_cast<T>(w.alpha), g),
                             mul_scalar(lt, static_cast<T>(w.beta), g), g),
                         mul_scalar(ls, static_cast<T>(w.gamma), g), g);
  out.value = total;
  out.report.pixel = static_cast<double>(lp.item());
  out.report.texture = static_cast<double>(lt.item());
  out.report.ssim = static_cast<double>(ls.item());
  out.report.total = static_cast<double>(total.item());
  return out;
}

}  // namespace fsat
