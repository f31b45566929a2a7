#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "fsat/rng.hpp"

namespace fsat::testsupport {

namespace {

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

}  // namespace

FixturePair make_pair(int index, int size, std::uint64_t seed) {
  Rng rng(seed + static_cast<std::uint64_t>(index) * 1000003ULL);
  FixturePair out{Image(size, size, 1), Image(size, size, 1)};

  // Visible: sinusoid texture over a gentle gradient plus high-contrast
  // rectangles, with a dark band where texture is suppressed.
  const double fx = rng.uniform(0.25, 0.55);
  const double fy = rng.uniform(0.12, 0.4);
  const double phase = rng.uniform(0.0, 6.28);
  const int band_y0 = static_cast<int>(rng.uniform(0.1, 0.5) * size);
  const int band_h = size / 5;
  struct Rect {
    int x0, y0, w, h;
    float level;
  };
  Rect rects[3];
  for (auto& r : rects) {
    r.w = static_cast<int>(rng.uniform(0.12, 0.3) * size);
    r.h = static_cast<int>(rng.uniform(0.12, 0.3) * size);
    r.x0 = static_cast<int>(rng.uniform(0.05, 0.65) * size);
    r.y0 = static_cast<int>(rng.uniform(0.05, 0.65) * size);
    r.level = static_cast<float>(rng.uniform(0.55, 0.95));
  }
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      float v = 0.35f + 0.25f * static_cast<float>(x) / size;
      v += 0.22f * static_cast<float>(std::sin(fx * x + phase) * std::sin(fy * y));
      for (const auto& r : rects) {
        if (x >= r.x0 && x < r.x0 + r.w && y >= r.y0 && y < r.y0 + r.h) v = r.level;
      }
      if (y >= band_y0 && y < band_y0 + band_h) v *= 0.15f;  // low-light band
      v += static_cast<float>(rng.uniform(-0.01, 0.01));
      out.vi.at(x, y) = clamp01(v);
    }

  // Infrared: smooth vertical gradient plus hot blobs; one blob sits inside
  // the visible dark band so the modalities complement each other.
  struct Blob {
    double cx, cy, r, amp;
  };
  Blob blobs[3];
  for (int i = 0; i < 3; ++i) {
    blobs[i].cx = rng.uniform(0.15, 0.85) * size;
    blobs[i].cy = rng.uniform(0.15, 0.85) * size;
    blobs[i].r = rng.uniform(0.06, 0.14) * size;
    blobs[i].amp = rng.uniform(0.55, 0.8);
  }
  blobs[0].cy = band_y0 + band_h / 2.0;  // target hidden from the VI sensor
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      float v = 0.15f + 0.2f * static_cast<float>(y) / size;
      for (const auto& b : blobs) {
        const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
        v += static_cast<float>(b.amp * std::exp(-d2 / (2.0 * b.r * b.r)));
      }
      v += static_cast<float>(rng.uniform(-0.005, 0.005));
      out.ir.at(x, y) = clamp01(v);
    }
  return out;
}

void write_corpus(const std::string& root, int train_pairs, int holdout_pairs, int size,
                  std::uint64_t seed) {
  namespace fs = std::filesystem;
  for (const char* split : {"train", "holdout"}) {
    fs::create_directories(fs::path(root) / split / "ir");
    fs::create_directories(fs::path(root) / split / "vi");
  }
  char name[32];
  for (int i = 0; i < train_pairs + holdout_pairs; ++i) {
    const bool holdout = i >= train_pairs;
    const char* split = holdout ? "holdout" : "train";
    const int local = holdout ? i - train_pairs : i;
    FixturePair pair = make_pair(i, size, seed);
    std::snprintf(name, sizeof(name), "pair%02d.pgm", local);
    save_pgm(pair.ir, (fs::path(root) / split / "ir" / name).string());
    save_pgm(pair.vi, (fs::path(root) / split / "vi" / name).string());
  }
}

}  // namespace fsat::testsupport
