#include "fsat/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace fsat {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

Image load_pnm(const std::string& path, const char* want_magic, int channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open file");
  std::string magic = next_token(in);
  if (magic != want_magic)
    fail(path, "unsupported magic '" + magic + "' (expected " + want_magic + ")");
  const std::string ws = next_token(in), hs = next_token(in), ms = next_token(in);
  if (ws.empty() || hs.empty() || ms.empty()) fail(path, "truncated header");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(ws);
    h = std::stoi(hs);
    maxval = std::stoi(ms);
  } catch (const std::exception&) {
    fail(path, "malformed header");
  }
  if (w <= 0 || h <= 0) fail(path, "malformed header");
  if (maxval != 255) fail(path, "unsupported maxval " + std::to_string(maxval));
  // next_token consumed exactly one whitespace after maxval; payload follows.
  Image img(w, h, channels);
  const std::size_t bytes = img.pixel_count() * static_cast<std::size_t>(channels);
  std::vector<std::uint8_t> buf(bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) fail(path, "truncated payload");
  for (std::size_t i = 0; i < bytes; ++i) img.data[i] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

void save_pnm(const Image& img, const std::string& path, const char* magic, int channels) {
  if (img.channels != channels)
    fail(path, "expected " + std::to_string(channels) + "-channel image, got " +
                   std::to_string(img.channels));
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(path, "cannot open file for writing");
  out << magic << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> buf(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) buf[i] = quantize8(img.data[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) fail(path, "write failed");
}

}  // namespace

Image load_pgm(const std::string& path) { return load_pnm(path, "P5", 1); }
void save_pgm(const Image& img, const std::string& path) { save_pnm(img, path, "P5", 1); }
Image load_ppm(const std::string& path) { return load_pnm(path, "P6", 3); }
void save_ppm(const Image& img, const std::string& path) { save_pnm(img, path, "P6", 3); }

Image load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  char m[2] = {0, 0};
  in.read(m, 2);
  in.close();
  if (m[0] == 'P' && m[1] == '5') return load_pgm(path);
  if (m[0] == 'P' && m[1] == '6') return load_ppm(path);
  throw std::runtime_error(path + ": unsupported magic '" + std::string(m, 2) + "'");
}

Image resize_bilinear(const Image& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1)
    throw std::invalid_argument("resize_bilinear: target dimensions must be positive");
  if (out_w == img.width && out_h == img.height) return img;
  Image out(out_w, out_h, img.channels);
  const float sx = static_cast<float>(img.width) / static_cast<float>(out_w);
  const float sy = static_cast<float>(img.height) / static_cast<float>(out_h);
  for (int y = 0; y < out_h; ++y) {
    float fy = (static_cast<float>(y) + 0.5f) * sy - 0.5f;
    fy = std::max(0.0f, std::min(fy, static_cast<float>(img.height - 1)));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const float wy = fy - static_cast<float>(y0);
    for (int x = 0; x < out_w; ++x) {
      float fx = (static_cast<float>(x) + 0.5f) * sx - 0.5f;
      fx = std::max(0.0f, std::min(fx, static_cast<float>(img.width - 1)));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const float wx = fx - static_cast<float>(x0);
      for (int c = 0; c < img.channels; ++c) {
        const float v00 = img.at(x0, y0, c), v10 = img.at(x1, y0, c);
        const float v01 = img.at(x0, y1, c), v11 = img.at(x1, y1, c);
        const float top = v00 + (v10 - v00) * wx;
        const float bot = v01 + (v11 - v01) * wx;
        out.at(x, y, c) = top + (bot - top) * wy;
      }
    }
  }
  return out;
}

}  // namespace fsat
