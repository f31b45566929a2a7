#pragma once

#include "fsat/image.hpp"

namespace fsat {

struct YuvPlanes {
  Image y, u, v;  // grayscale planes, chroma biased by +0.5
};

// BT.601 full-range: Y = 0.299R + 0.587G + 0.114B,
// U = (B - Y)/1.772 + 0.5, V = (R - Y)/1.402 + 0.5.
YuvPlanes rgb_to_yuv(const Image& rgb);

// Exact algebraic inverse, clamped to [0,1] on output.
Image yuv_to_rgb(const Image& y, const Image& u, const Image& v);

}  // namespace fsat
