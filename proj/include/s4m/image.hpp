#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "s4m/common.hpp"

namespace s4m {

// 8-bit image, interleaved row-major (y, x, channel). Channels are 1 or 3.
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> px;

  static Image zeros(int h, int w, int c) {
    Image im;
    im.h = h;
    im.w = w;
    im.c = c;
    im.px.assign(static_cast<size_t>(h) * w * c, 0);
    return im;
  }

  uint8_t& at(int y, int x, int ch = 0) {
    return px[(static_cast<size_t>(y) * w + static_cast<size_t>(x)) * c + static_cast<size_t>(ch)];
  }
  uint8_t at(int y, int x, int ch = 0) const {
    return px[(static_cast<size_t>(y) * w + static_cast<size_t>(x)) * c + static_cast<size_t>(ch)];
  }
  bool operator==(const Image& o) const { return h == o.h && w == o.w && c == o.c && px == o.px; }
};

Image crop(const Image& im, int y0, int x0, int out_h, int out_w);
Image hflip(const Image& im);
Image resize_bilinear(const Image& im, int out_h, int out_w);

// Pixels to a (h*w) x c matrix scaled to [-1, 1].
MatF image_to_matrix(const Image& im);

void write_png(const std::string& path, const Image& im);
Image read_png(const std::string& path);

}  // namespace s4m
