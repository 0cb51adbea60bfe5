#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dgseg/image.hpp"
#include "dgseg/types.hpp"

namespace dgseg {

// 8-bit image buffer, row-major, interleaved channels (1 = gray, 3 = RGB).
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t& at(int y, int x, int ch) {
    return data[static_cast<std::size_t>((y * width + x) * channels + ch)];
  }
  std::uint8_t at(int y, int x, int ch) const {
    return data[static_cast<std::size_t>((y * width + x) * channels + ch)];
  }
};

// Minimal PNG codec: 8-bit grayscale and RGB, no interlace, no palette.
// The writer always emits filter type 0 and a fixed compression setting so
// identical pixels produce identical files.
void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

ImageU8 to_u8(const Image& img);
Image from_u8(const ImageU8& img);
ImageU8 labels_to_u8(const LabelMap& labels);
LabelMap labels_from_u8(const ImageU8& img);

}  // namespace dgseg
