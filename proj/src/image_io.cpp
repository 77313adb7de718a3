#include "sacnet/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "sacnet/errors.hpp"

namespace sacnet {

namespace {

struct FileCloser {
  FILE* f;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

ImageU8 read_png(FILE* f, const std::string& path) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw UnreadableImage(path + ": libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw UnreadableImage(path + ": libpng info init failed");
  }
  std::vector<uint8_t> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw UnreadableImage(path + ": corrupt or unsupported PNG");
  }
  png_init_io(png, f);
  png_read_info(png, info);

  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);

  ImageU8 img;
  img.h = png_get_image_height(png, info);
  img.w = png_get_image_width(png, info);
  pixels.resize(img.h * img.w);
  rows.resize(img.h);
  for (int64_t y = 0; y < img.h; ++y) rows[y] = pixels.data() + y * img.w;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  img.pixels = std::move(pixels);
  return img;
}

ImageU8 read_pgm(FILE* f, const std::string& path) {
  auto next_token = [&]() -> long {
    int c = std::fgetc(f);
    while (c == '#' || std::isspace(c)) {
      if (c == '#')
        while (c != '\n' && c != EOF) c = std::fgetc(f);
      c = std::fgetc(f);
    }
    long v = 0;
    bool any = false;
    while (std::isdigit(c)) {
      v = v * 10 + (c - '0');
      any = true;
      c = std::fgetc(f);
    }
    if (!any) throw UnreadableImage(path + ": malformed PGM header");
    return v;
  };
  const long w = next_token();
  const long h = next_token();
  const long maxval = next_token();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw UnreadableImage(path + ": unsupported PGM dimensions or maxval");
  ImageU8 img;
  img.h = h;
  img.w = w;
  img.pixels.resize(h * w);
  if (std::fread(img.pixels.data(), 1, img.pixels.size(), f) != img.pixels.size())
    throw UnreadableImage(path + ": truncated PGM payload");
  return img;
}

}  // namespace

ImageU8 read_image_gray8(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw UnreadableImage(path + ": cannot open");
  FileCloser closer{f};
  uint8_t magic[8] = {0};
  const size_t got = std::fread(magic, 1, 8, f);
  std::rewind(f);
  if (got >= 8 && png_sig_cmp(magic, 0, 8) == 0) return read_png(f, path);
  if (got >= 2 && magic[0] == 'P' && magic[1] == '5') {
    std::fseek(f, 2, SEEK_SET);
    return read_pgm(f, path);
  }
  throw UnreadableImage(path + ": not an 8-bit grayscale PNG or PGM file");
}

void write_png_gray8(const ImageU8& img, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("write_png_gray8: cannot open " + path);
  FileCloser closer{f};
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw std::runtime_error("write_png_gray8: libpng failure on " + path);
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, img.w, img.h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < img.h; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.w));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<double> to_unit(const ImageU8& img) {
  std::vector<double> out(img.pixels.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i] / 255.0;
  return out;
}

ImageU8 from_unit(int64_t h, int64_t w, const std::vector<double>& pixels) {
  ImageU8 img;
  img.h = h;
  img.w = w;
  img.pixels.resize(h * w);
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    double v = std::round(pixels[i] * 255.0);
    img.pixels[i] = static_cast<uint8_t>(std::min(255.0, std::max(0.0, v)));
  }
  return img;
}

std::vector<double> bilinear_resize(const std::vector<double>& src, int64_t h, int64_t w,
                                    int64_t out_h, int64_t out_w) {
  if (h == out_h && w == out_w) return src;
  std::vector<double> out(out_h * out_w);
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int64_t oy = 0; oy < out_h; ++oy) {
    const double fy = (oy + 0.5) * sy - 0.5;
    int64_t y0 = static_cast<int64_t>(std::floor(fy));
    const double wy = fy - y0;
    int64_t y1 = y0 + 1;
    y0 = std::min(std::max<int64_t>(y0, 0), h - 1);
    y1 = std::min(std::max<int64_t>(y1, 0), h - 1);
    for (int64_t ox = 0; ox < out_w; ++ox) {
      const double fx = (ox + 0.5) * sx - 0.5;
      int64_t x0 = static_cast<int64_t>(std::floor(fx));
      const double wx = fx - x0;
      int64_t x1 = x0 + 1;
      x0 = std::min(std::max<int64_t>(x0, 0), w - 1);
      x1 = std::min(std::max<int64_t>(x1, 0), w - 1);
      out[oy * out_w + ox] = (1 - wy) * ((1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
                             wy * ((1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
    }
  }
  return out;
}

}  // namespace sacnet
