#pragma once

// Fusion-quality metrics: mutual information, nonlinear correlation
// information entropy, Xydeas-Petrovic edge preservation, plus SSIM reuse.
// All operate on [0,1] grayscale images quantized to 8 bits.

#include <array>
#include <string>
#include <vector>

#include "fsat/image.hpp"

namespace fsat {

// Shannon entropy in bits over a 256-bin histogram; 0*log0 = 0.
double entropy_bits(const Image& img, int bins = 256);

// MI(F,A) + MI(F,B) with MI(X,Y) = H(X) + H(Y) - H(X,Y), log base 2, 256 bins.
double mi_metric(const Image& f, const Image& a, const Image& b);

// Pairwise MI for tests and diagnostics.
double mi_pair(const Image& x, const Image& y);

// Nonlinear correlation information entropy. R holds pairwise nonlinear
// correlation coefficients NCC(X,Y) = Hb(X) + Hb(Y) - Hb(X,Y) with log base
// 256; NCC of a pair with identical content is 1 by definition. NCIE =
// 1 + sum_i (l_i/3) log256(l_i/3) over the eigenvalues of R.
double ncie_metric(const Image& f, const Image& a, const Image& b);

// Xydeas-Petrovic edge preservation in [0,1]; Sobel strength/orientation per
// image, per-pixel sigmoid preservation scores, strength-weighted average
// over both sources. Constants (0.9994, -15, 0.5, 0.9879, -22, 0.8).
double qabf_metric(const Image& f, const Image& a, const Image& b);

// SSIM between two grayscale images (evaluation path, 11x11 Gaussian).
double ssim_metric(const Image& x, const Image& y);

struct PairMetrics {
  std::string pair;
  double mi = 0.0;
  double ncie = 0.0;
  double qabf = 0.0;
  double ssim = 0.0;
  double seconds = 0.0;
};

// All metrics for one fused pair; SSIM is computed against max(A,B).
PairMetrics evaluate_pair(const Image& f, const Image& a, const Image& b);

struct MetricsReport {
  std::vector<PairMetrics> rows;
  PairMetrics mean() const;
  // Header `pair,mi,ncie,qabf,ssim,seconds`, 4 decimal places, final row `mean`.
  std::string to_csv() const;
  void write_csv(const std::string& path) const;
  static MetricsReport from_csv(const std::string& text);
};

// Eigenvalues of a symmetric 3x3 matrix via cyclic Jacobi, ascending order.
std::array<double, 3> symmetric_eigenvalues3(const std::array<double, 9>& m);

}  // namespace fsat
