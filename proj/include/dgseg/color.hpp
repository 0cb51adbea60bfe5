#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "dgseg/types.hpp"

namespace dgseg {

inline Scalar luma(Scalar r, Scalar g, Scalar b) {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

// Hue in [0,1), saturation and value in [0,1].
inline std::array<Scalar, 3> rgb_to_hsv(Scalar r, Scalar g, Scalar b) {
  const Scalar mx = std::max({r, g, b});
  const Scalar mn = std::min({r, g, b});
  const Scalar d = mx - mn;
  Scalar h = 0.0;
  if (d > 0.0) {
    if (mx == r)
      h = std::fmod((g - b) / d, 6.0);
    else if (mx == g)
      h = (b - r) / d + 2.0;
    else
      h = (r - g) / d + 4.0;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
  }
  const Scalar s = mx > 0.0 ? d / mx : 0.0;
  return {h, s, mx};
}

inline std::array<Scalar, 3> hsv_to_rgb(Scalar h, Scalar s, Scalar v) {
  h = h - std::floor(h);
  const Scalar hh = h * 6.0;
  const int i = std::min(5, static_cast<int>(hh));
  const Scalar f = hh - i;
  const Scalar p = v * (1.0 - s);
  const Scalar q = v * (1.0 - s * f);
  const Scalar t = v * (1.0 - s * (1.0 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

}  // namespace dgseg
