#include "s4m/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <png.h>

namespace s4m {

Image crop(const Image& im, int y0, int x0, int out_h, int out_w) {
  check(y0 >= 0 && x0 >= 0 && y0 + out_h <= im.h && x0 + out_w <= im.w, "crop out of bounds");
  Image out = Image::zeros(out_h, out_w, im.c);
  for (int y = 0; y < out_h; ++y) {
    const uint8_t* src = &im.px[((static_cast<size_t>(y + y0)) * im.w + static_cast<size_t>(x0)) * im.c];
    std::copy(src, src + static_cast<size_t>(out_w) * im.c, &out.px[static_cast<size_t>(y) * out_w * im.c]);
  }
  return out;
}

Image hflip(const Image& im) {
  Image out = Image::zeros(im.h, im.w, im.c);
  for (int y = 0; y < im.h; ++y) {
    for (int x = 0; x < im.w; ++x) {
      for (int ch = 0; ch < im.c; ++ch) out.at(y, x, ch) = im.at(y, im.w - 1 - x, ch);
    }
  }
  return out;
}

Image resize_bilinear(const Image& im, int out_h, int out_w) {
  if (im.h == out_h && im.w == out_w) return im;
  Image out = Image::zeros(out_h, out_w, im.c);
  const double sy = static_cast<double>(im.h) / out_h;
  const double sx = static_cast<double>(im.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, im.h - 1);
    int y1 = std::min(y0 + 1, im.h - 1);
    double wy = std::clamp(fy - y0, 0.0, 1.0);
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, im.w - 1);
      int x1 = std::min(x0 + 1, im.w - 1);
      double wx = std::clamp(fx - x0, 0.0, 1.0);
      for (int ch = 0; ch < im.c; ++ch) {
        double v = (1 - wy) * ((1 - wx) * im.at(y0, x0, ch) + wx * im.at(y0, x1, ch)) +
                   wy * ((1 - wx) * im.at(y1, x0, ch) + wx * im.at(y1, x1, ch));
        out.at(y, x, ch) = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

MatF image_to_matrix(const Image& im) {
  MatF m(static_cast<Eigen::Index>(im.h) * im.w, im.c);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (int ch = 0; ch < im.c; ++ch) {
      m(i, ch) = static_cast<float>(im.px[static_cast<size_t>(i) * im.c + static_cast<size_t>(ch)]) / 127.5f - 1.0f;
    }
  }
  return m;
}

void write_png(const std::string& path, const Image& im) {
  check(im.c == 1 || im.c == 3, "write_png: channels must be 1 or 3");
  FILE* fp = std::fopen(path.c_str(), "wb");
  check(fp != nullptr, "cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fail("libpng write error: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(im.w), static_cast<png_uint_32>(im.h), 8,
               im.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(im.h));
  for (int y = 0; y < im.h; ++y) {
    rows[static_cast<size_t>(y)] = const_cast<png_bytep>(&im.px[static_cast<size_t>(y) * im.w * im.c]);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Image read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  check(fp != nullptr, "cannot open image file: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    fail("libpng read error: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  int channels = png_get_channels(png, info);
  check(channels == 1 || channels == 3, "read_png: unsupported channel count in " + path);
  Image im = Image::zeros(static_cast<int>(h), static_cast<int>(w), channels);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (png_uint_32 y = 0; y < h; ++y) {
    rows[y] = &im.px[static_cast<size_t>(y) * w * static_cast<size_t>(channels)];
  }
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return im;
}

}  // namespace s4m
