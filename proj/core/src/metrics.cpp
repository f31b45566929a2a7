#include "fsat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "fsat/losses.hpp"
#include "fsat/tensor.hpp"

namespace fsat {

namespace {

void check_pair(const Image& x, const Image& y, const char* op) {
  if (x.width != y.width || x.height != y.height) {
    throw std::invalid_argument(std::string(op) + ": dimension mismatch " +
                                std::to_string(x.width) + "x" + std::to_string(x.height) + " vs " +
                                std::to_string(y.width) + "x" + std::to_string(y.height));
  }
}

std::vector<std::uint8_t> quantize(const Image& img) {
  std::vector<std::uint8_t> q(img.pixel_count());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = quantize8(img.data[i]);
  return q;
}

double entropy_from_counts(const std::vector<double>& counts, double total, double log_base) {
  double h = 0.0;
  for (double c : counts) {
    if (c <= 0.0) continue;
    const double p = c / total;
    h -= p * std::log(p);
  }
  return h / std::log(log_base);
}

double joint_entropy(const std::vector<std::uint8_t>& x, const std::vector<std::uint8_t>& y,
                     double log_base) {
  std::vector<double> joint(256 * 256, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) joint[static_cast<std::size_t>(x[i]) * 256 + y[i]] += 1.0;
  return entropy_from_counts(joint, static_cast<double>(x.size()), log_base);
}

double marginal_entropy(const std::vector<std::uint8_t>& x, double log_base) {
  std::vector<double> hist(256, 0.0);
  for (std::uint8_t v : x) hist[v] += 1.0;
  return entropy_from_counts(hist, static_cast<double>(x.size()), log_base);
}

// Sobel strength and orientation with reflect borders. Orientation is
// atan(gy/gx) in [-pi/2, pi/2] with gx == 0 mapped to pi/2.
void sobel_strength_orientation(const Image& img, std::vector<double>& strength,
                                std::vector<double>& orientation) {
  const int w = img.width, h = img.height;
  strength.assign(static_cast<std::size_t>(w) * h, 0.0);
  orientation.assign(static_cast<std::size_t>(w) * h, 0.0);
  auto ref = [](int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double gx = 0.0, gy = 0.0;
      static const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
      static const int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const double v = img.at(ref(x + dx, w), ref(y + dy, h));
          gx += kx[dy + 1][dx + 1] * v;
          gy += ky[dy + 1][dx + 1] * v;
        }
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      strength[i] = std::sqrt(gx * gx + gy * gy);
      orientation[i] = gx == 0.0 ? 3.14159265358979323846 / 2.0 : std::atan(gy / gx);
    }
}

}  // namespace

double entropy_bits(const Image& img, int bins) {
  if (bins != 256) throw std::invalid_argument("entropy: only 256 bins supported");
  return marginal_entropy(quantize(img), 2.0);
}

double mi_pair(const Image& x, const Image& y) {
  check_pair(x, y, "mi");
  const auto qx = quantize(x), qy = quantize(y);
  return marginal_entropy(qx, 2.0) + marginal_entropy(qy, 2.0) - joint_entropy(qx, qy, 2.0);
}

double mi_metric(const Image& f, const Image& a, const Image& b) {
  check_pair(f, a, "mi_metric");
  check_pair(f, b, "mi_metric");
  return mi_pair(f, a) + mi_pair(f, b);
}

std::array<double, 3> symmetric_eigenvalues3(const std::array<double, 9>& m) {
  std::array<double, 9> a = m;
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = std::fabs(a[1]) + std::fabs(a[2]) + std::fabs(a[5]);
    if (off < 1e-15) break;
    static const int pq[3][2] = {{0, 1}, {0, 2}, {1, 2}};
    for (const auto& pair : pq) {
      const int p = pair[0], q = pair[1];
      const double apq = a[static_cast<std::size_t>(p) * 3 + q];
      if (std::fabs(apq) < 1e-300) continue;
      const double app = a[static_cast<std::size_t>(p) * 3 + p];
      const double aqq = a[static_cast<std::size_t>(q) * 3 + q];
      const double theta = 0.5 * std::atan2(2.0 * apq, aqq - app);
      const double c = std::cos(theta), s = std::sin(theta);
      for (int k = 0; k < 3; ++k) {
        const double akp = a[static_cast<std::size_t>(k) * 3 + p];
        const double akq = a[static_cast<std::size_t>(k) * 3 + q];
        a[static_cast<std::size_t>(k) * 3 + p] = c * akp - s * akq;
        a[static_cast<std::size_t>(k) * 3 + q] = s * akp + c * akq;
      }
      for (int k = 0; k < 3; ++k) {
        const double apk = a[static_cast<std::size_t>(p) * 3 + k];
        const double aqk = a[static_cast<std::size_t>(q) * 3 + k];
        a[static_cast<std::size_t>(p) * 3 + k] = c * apk - s * aqk;
        a[static_cast<std::size_t>(q) * 3 + k] = s * apk + c * aqk;
      }
    }
  }
  std::array<double, 3> ev{a[0], a[4], a[8]};
  std::sort(ev.begin(), ev.end());
  return ev;
}

double ncie_metric(const Image& f, const Image& a, const Image& b) {
  check_pair(f, a, "ncie_metric");
  check_pair(f, b, "ncie_metric");
  const std::array<const Image*, 3> imgs{&f, &a, &b};
  std::array<std::vector<std::uint8_t>, 3> q;
  for (int i = 0; i < 3; ++i) q[static_cast<std::size_t>(i)] = quantize(*imgs[static_cast<std::size_t>(i)]);
  std::array<double, 3> h;
  for (int i = 0; i < 3; ++i) h[static_cast<std::size_t>(i)] = marginal_entropy(q[static_cast<std::size_t>(i)], 256.0);
  std::array<double, 9> r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double ncc;
      if (i == j || q[static_cast<std::size_t>(i)] == q[static_cast<std::size_t>(j)]) {
        ncc = 1.0;  // identical content correlates perfectly by definition
      } else {
        ncc = h[static_cast<std::size_t>(i)] + h[static_cast<std::size_t>(j)] -
              joint_entropy(q[static_cast<std::size_t>(i)], q[static_cast<std::size_t>(j)], 256.0);
      }
      r[static_cast<std::size_t>(i) * 3 + j] = ncc;
    }
  const auto ev = symmetric_eigenvalues3(r);
  double ncie = 1.0;
  for (double lambda : ev) {
    // R has unit trace/3 structure; eigenvalues live in [0,3] up to rounding.
    double x = std::clamp(lambda / 3.0, 0.0, 1.0);
    if (x > 1e-12) ncie += x * std::log(x) / std::log(256.0);
  }
  return ncie;
}

double qabf_metric(const Image& f, const Image& a, const Image& b) {
  check_pair(f, a, "qabf_metric");
  check_pair(f, b, "qabf_metric");
  const double tg = 0.9994, kg = -15.0, dg = 0.5;
  const double ta = 0.9879, ka = -22.0, da = 0.8;
  const double half_pi = 3.14159265358979323846 / 2.0;
  std::vector<double> gf, af, ga, aa, gb, ab;
  sobel_strength_orientation(f, gf, af);
  sobel_strength_orientation(a, ga, aa);
  sobel_strength_orientation(b, gb, ab);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < gf.size(); ++i) {
    auto edge_preservation = [&](double gx, double ax) {
      double grel;
      if (gx == 0.0 && gf[i] == 0.0) {
        grel = 0.0;
      } else {
        grel = gx > gf[i] ? gf[i] / gx : gx / gf[i];
      }
      const double arel = 1.0 - std::fabs(ax - af[i]) / half_pi;
      const double qg = tg / (1.0 + std::exp(kg * (grel - dg)));
      const double qa = ta / (1.0 + std::exp(ka * (arel - da)));
      return qg * qa;
    };
    num += edge_preservation(ga[i], aa[i]) * ga[i] + edge_preservation(gb[i], ab[i]) * gb[i];
    den += ga[i] + gb[i];
  }
  return den > 0.0 ? num / den : 0.0;
}

double ssim_metric(const Image& x, const Image& y) {
  check_pair(x, y, "ssim_metric");
  TensorD tx({1, 1, x.height, x.width});
  TensorD ty({1, 1, y.height, y.width});
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    tx.data()[static_cast<std::int64_t>(i)] = static_cast<double>(x.data[i]);
    ty.data()[static_cast<std::int64_t>(i)] = static_cast<double>(y.data[i]);
  }
  return ssim<double>(tx, ty, nullptr).item();
}

PairMetrics evaluate_pair(const Image& f, const Image& a, const Image& b) {
  PairMetrics row;
  row.mi = mi_metric(f, a, b);
  row.ncie = ncie_metric(f, a, b);
  row.qabf = qabf_metric(f, a, b);
  Image mx(a.width, a.height, 1);
  for (std::size_t i = 0; i < mx.data.size(); ++i) mx.data[i] = std::max(a.data[i], b.data[i]);
  row.ssim = ssim_metric(f, mx);
  return row;
}

PairMetrics MetricsReport::mean() const {
  PairMetrics m;
  m.pair = "mean";
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.mi += r.mi;
    m.ncie += r.ncie;
    m.qabf += r.qabf;
    m.ssim += r.ssim;
    m.seconds += r.seconds;
  }
  const double n = static_cast<double>(rows.size());
  m.mi /= n;
  m.ncie /= n;
  m.qabf /= n;
  m.ssim /= n;
  m.seconds /= n;
  return m;
}

namespace {
void append_row(std::ostringstream& os, const PairMetrics& r) {
  os << r.pair << ',' << std::fixed;
  os.precision(4);
  os << r.mi << ',' << r.ncie << ',' << r.qabf << ',' << r.ssim << ',' << r.seconds << '\n';
}
}  // namespace

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "pair,mi,ncie,qabf,ssim,seconds\n";
  for (const auto& r : rows) append_row(os, r);
  append_row(os, mean());
  return os.str();
}

void MetricsReport::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open file for writing");
  out << to_csv();
  if (!out) throw std::runtime_error(path + ": write failed");
}

MetricsReport MetricsReport::from_csv(const std::string& text) {
  MetricsReport rep;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "pair,mi,ncie,qabf,ssim,seconds")
    throw std::runtime_error("metrics csv: bad header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    PairMetrics r;
    std::string field;
    std::getline(ls, r.pair, ',');
    std::getline(ls, field, ',');
    r.mi = std::stod(field);
    std::getline(ls, field, ',');
    r.ncie = std::stod(field);
    std::getline(ls, field, ',');
    r.qabf = std::stod(field);
    std::getline(ls, field, ',');
    r.ssim = std::stod(field);
    std::getline(ls, field, ',');
    r.seconds = std::stod(field);
    if (r.pair == "mean") continue;  // derived row
    rep.rows.push_back(std::move(r));
  }
  return rep;
}

}  // namespace fsat
