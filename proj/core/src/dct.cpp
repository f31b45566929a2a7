#include "fsat/dct.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <stdexcept>
#include <tuple>

namespace fsat {

std::vector<double> dct_basis(int a, int b, int h, int w) {
  if (a < 0 || a >= h || b < 0 || b >= w) {
    throw std::invalid_argument("dct_basis: frequency index (" + std::to_string(a) + "," +
                                std::to_string(b) + ") out of range for " + std::to_string(h) +
                                "x" + std::to_string(w));
  }
  const double pi = 3.14159265358979323846;
  std::vector<double> row(static_cast<std::size_t>(h)), col(static_cast<std::size_t>(w));
  for (int i = 0; i < h; ++i) row[static_cast<std::size_t>(i)] = std::cos(pi * a * (i + 0.5) / h);
  for (int j = 0; j < w; ++j) col[static_cast<std::size_t>(j)] = std::cos(pi * b * (j + 0.5) / w);
  std::vector<double> grid(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      grid[static_cast<std::size_t>(i) * w + j] = row[static_cast<std::size_t>(i)] * col[static_cast<std::size_t>(j)];
  return grid;
}

namespace {
std::mutex g_cache_mutex;
std::map<std::tuple<int, int, int, int>, std::vector<double>> g_cache;
}  // namespace

const std::vector<double>& dct_basis_cached(int a, int b, int h, int w) {
  const auto key = std::make_tuple(h, w, a, b);
  std::lock_guard<std::mutex> lock(g_cache_mutex);
  auto it = g_cache.find(key);
  if (it == g_cache.end()) it = g_cache.emplace(key, dct_basis(a, b, h, w)).first;
  return it->second;
}

std::vector<FrequencyIndex> frequency_index_set(int count, int h, int w) {
  if (count < 0 || static_cast<long long>(count) > static_cast<long long>(h) * w) {
    throw std::invalid_argument("frequency_index_set: requested " + std::to_string(count) +
                                " indices from a " + std::to_string(h) + "x" + std::to_string(w) +
                                " grid");
  }
  std::vector<FrequencyIndex> all;
  all.reserve(static_cast<std::size_t>(h) * w);
  for (int a = 0; a < h; ++a)
    for (int b = 0; b < w; ++b) all.push_back({a, b});
  std::stable_sort(all.begin(), all.end(), [](const FrequencyIndex& x, const FrequencyIndex& y) {
    if (x.a + x.b != y.a + y.b) return x.a + x.b < y.a + y.b;
    return x.a < y.a;
  });
  all.resize(static_cast<std::size_t>(count));
  return all;
}

}  // namespace fsat
