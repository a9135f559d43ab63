#pragma once

// Binary PPM (P6) reading/writing, bilinear resizing and box drawing.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "unihoi/common.hpp"

namespace unihoi {

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw DataError(path + ": only binary PPM (P6) images are supported");
  auto next_int = [&]() {
    int v = 0;
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      break;
    }
    if (!(in >> v)) throw DataError(path + ": malformed PPM header");
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  in.get();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw DataError(path + ": unsupported PPM geometry");
  Image img(h, w, 3);
  std::string bytes(static_cast<std::size_t>(w) * h * 3, '\0');
  if (!in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw DataError(path + ": truncated PPM payload");
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    img.data[i] = static_cast<float>(static_cast<unsigned char>(bytes[i])) / static_cast<float>(maxval);
  }
  return img;
}

inline std::string encode_ppm(const Image& img) {
  if (img.channels != 3 && img.channels != 1) throw DataError("PPM output needs 1 or 3 channels");
  std::ostringstream out;
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::string bytes;
  bytes.reserve(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = img.at(y, x, img.channels == 1 ? 0 : c);
        bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
      }
    }
  }
  out << bytes;
  return out.str();
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path);
  out << encode_ppm(img);
}

// Bilinear resampling with half-pixel centers (align_corners = false).
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
  if (src.height == out_h && src.width == out_w) return src;
  Image dst(out_h, out_w, src.channels);
  const double sy = static_cast<double>(src.height) / out_h;
  const double sx = static_cast<double>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        const double bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        dst.at(y, x, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return dst;
}

// Draws a one-pixel rectangle outline given corner pixel coordinates.
inline void draw_box(Image& img, const BoxXyxy& box, const std::array<float, 3>& color) {
  const int x1 = std::clamp(static_cast<int>(std::floor(box[0])), 0, img.width - 1);
  const int y1 = std::clamp(static_cast<int>(std::floor(box[1])), 0, img.height - 1);
  const int x2 = std::clamp(static_cast<int>(std::ceil(box[2])) - 1, 0, img.width - 1);
  const int y2 = std::clamp(static_cast<int>(std::ceil(box[3])) - 1, 0, img.height - 1);
  auto put = [&](int y, int x) {
    for (int c = 0; c < std::min(img.channels, 3); ++c) img.at(y, x, c) = color[static_cast<std::size_t>(c)];
  };
  for (int x = x1; x <= x2; ++x) {
    put(y1, x);
    put(y2, x);
  }
  for (int y = y1; y <= y2; ++y) {
    put(y, x1);
    put(y, x2);
  }
}

}  // namespace unihoi
