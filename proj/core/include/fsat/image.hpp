#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fsat {

// Grayscale or interleaved-RGB raster with values in [0,1] (clamped on load).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 or 3
  std::vector<float> data;  // row-major, channel-interleaved

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

// Round-half-up 8-bit quantization used by the writers and the metrics.
inline std::uint8_t quantize8(float v) {
  const float q = v * 255.0f + 0.5f;
  if (q <= 0.0f) return 0;
  if (q >= 255.0f) return 255;
  return static_cast<std::uint8_t>(q);
}

// Binary PGM (P5) / PPM (P6), maxval 255 only. Round-trips are byte-exact for
// valid 8-bit inputs. Distinct errors: "unsupported magic", "unsupported
// maxval", "truncated payload".
Image load_pgm(const std::string& path);
void save_pgm(const Image& img, const std::string& path);
Image load_ppm(const std::string& path);
void save_ppm(const Image& img, const std::string& path);

// Loads either format based on the magic; gray stays 1-channel.
Image load_image(const std::string& path);

// align-corners-false bilinear; bit-preserving when dimensions are unchanged.
Image resize_bilinear(const Image& img, int out_w, int out_h);

}  // namespace fsat
