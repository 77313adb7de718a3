#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sacnet {

struct ImageU8 {
  int64_t h = 0;
  int64_t w = 0;
  std::vector<uint8_t> pixels;  // row-major grayscale
};

// PNG or PGM (P5) decided by file magic; anything else throws
// UnreadableImage naming the file. Color PNGs are converted to grayscale.
ImageU8 read_image_gray8(const std::string& path);

void write_png_gray8(const ImageU8& img, const std::string& path);

std::vector<double> to_unit(const ImageU8& img);  // /255 into [0,1]
ImageU8 from_unit(int64_t h, int64_t w, const std::vector<double>& pixels);

// identity when dims match, so quantized round trips stay exact
std::vector<double> bilinear_resize(const std::vector<double>& src, int64_t h, int64_t w,
                                    int64_t out_h, int64_t out_w);

}  // namespace sacnet
