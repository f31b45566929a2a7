#include "fsat/color.hpp"

#include <algorithm>
#include <stdexcept>

namespace fsat {

YuvPlanes rgb_to_yuv(const Image& rgb) {
  if (rgb.channels != 3)
    throw std::invalid_argument("rgb_to_yuv: expected 3 channels, got " +
                                std::to_string(rgb.channels));
  YuvPlanes out{Image(rgb.width, rgb.height, 1), Image(rgb.width, rgb.height, 1),
                Image(rgb.width, rgb.height, 1)};
  const std::size_t n = rgb.pixel_count();
  for (std::size_t i = 0; i < n; ++i) {
    const float r = rgb.data[i * 3 + 0];
    const float g = rgb.data[i * 3 + 1];
    const float b = rgb.data[i * 3 + 2];
    const float y = 0.299f * r + 0.587f * g + 0.114f * b;
    out.y.data[i] = y;
    out.u.data[i] = (b - y) / 1.772f + 0.5f;
    out.v.data[i] = (r - y) / 1.402f + 0.5f;
  }
  return out;
}

Image yuv_to_rgb(const Image& y, const Image& u, const Image& v) {
  if (y.width != u.width || y.height != u.height || y.width != v.width || y.height != v.height)
    throw std::invalid_argument("yuv_to_rgb: plane dimensions disagree");
  Image rgb(y.width, y.height, 3);
  const std::size_t n = y.pixel_count();
  for (std::size_t i = 0; i < n; ++i) {
    const float yy = y.data[i];
    const float uu = u.data[i] - 0.5f;
    const float vv = v.data[i] - 0.5f;
    const float b = uu * 1.772f + yy;
    const float r = vv * 1.402f + yy;
    const float g = (yy - 0.299f * r - 0.114f * b) / 0.587f;
    rgb.data[i * 3 + 0] = std::clamp(r, 0.0f, 1.0f);
    rgb.data[i * 3 + 1] = std::clamp(g, 0.0f, 1.0f);
    rgb.data[i * 3 + 2] = std::clamp(b, 0.0f, 1.0f);
  }
  return rgb;
}

}  // namespace fsat
