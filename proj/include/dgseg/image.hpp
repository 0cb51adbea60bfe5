#pragma once

#include <array>
#include <string>

#include "dgseg/types.hpp"

namespace dgseg {

// RGB image with values in [0, 1], one (H x W) matrix per channel.
struct Image {
  std::array<Mat, 3> c;

  Index height() const { return c[0].rows(); }
  Index width() const { return c[0].cols(); }

  static Image zero(Index h, Index w) {
    Image im;
    for (auto& ch : im.c) ch = Mat::Zero(h, w);
    return im;
  }
};

// Class index per pixel; kIgnoreLabel marks excluded pixels.
using LabelMap = MatI;

struct LabeledImage {
  Image image;
  LabelMap labels;
  std::string domain_id;
};

}  // namespace dgseg
