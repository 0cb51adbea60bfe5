#include "dgseg/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dgseg/color.hpp"
#include "dgseg/rng.hpp"

namespace dgseg::perturb {

namespace {

void clamp01(Image& img) {
  for (auto& ch : img.c) ch = ch.array().min(1.0).max(0.0);
}

}  // namespace

PerturbRanges PerturbRanges::from_config(const Config& cfg) {
  PerturbRanges r;
  r.brightness_lo = cfg.get_real("perturb.brightness_lo", r.brightness_lo);
  r.brightness_hi = cfg.get_real("perturb.brightness_hi", r.brightness_hi);
  r.contrast_lo = cfg.get_real("perturb.contrast_lo", r.contrast_lo);
  r.contrast_hi = cfg.get_real("perturb.contrast_hi", r.contrast_hi);
  r.saturation_lo = cfg.get_real("perturb.saturation_lo", r.saturation_lo);
  r.saturation_hi = cfg.get_real("perturb.saturation_hi", r.saturation_hi);
  r.hue_max = cfg.get_real("perturb.hue_max", r.hue_max);
  r.blur_sigma_max = cfg.get_real("perturb.blur_sigma_max", r.blur_sigma_max);
  r.noise_sigma_max =
      cfg.get_real("perturb.noise_sigma_max", r.noise_sigma_max);
  validate_ranges(r);
  return r;
}

PerturbRanges PerturbRanges::identity() {
  PerturbRanges r;
  r.brightness_lo = r.brightness_hi = 1.0;
  r.contrast_lo = r.contrast_hi = 1.0;
  r.saturation_lo = r.saturation_hi = 1.0;
  r.hue_max = 0.0;
  r.blur_sigma_max = 0.0;
  r.noise_sigma_max = 0.0;
  return r;
}

void validate_ranges(const PerturbRanges& r) {
  auto span = [](const char* name, Scalar lo, Scalar hi) {
    if (!(lo > 0.0) || !(hi >= lo) || !std::isfinite(hi))
      throw std::invalid_argument(std::string("perturb.") + name +
                                  " range invalid (need 0 < lo <= hi)");
  };
  span("brightness", r.brightness_lo, r.brightness_hi);
  span("contrast", r.contrast_lo, r.contrast_hi);
  span("saturation", r.saturation_lo, r.saturation_hi);
  if (!(r.hue_max >= 0.0 && r.hue_max <= 0.5))
    throw std::invalid_argument("perturb.hue_max must be in [0, 0.5]");
  if (!(r.blur_sigma_max >= 0.0) || !std::isfinite(r.blur_sigma_max))
    throw std::invalid_argument("perturb.blur_sigma_max must be >= 0");
  if (!(r.noise_sigma_max >= 0.0) || !std::isfinite(r.noise_sigma_max))
    throw std::invalid_argument("perturb.noise_sigma_max must be >= 0");
}

PerturbationParams sample_perturbation(std::uint64_t rng_seed,
                                       const PerturbRanges& ranges) {
  validate_ranges(ranges);
  Rng r(mix_seed(rng_seed, 21));
  PerturbationParams p;
  p.brightness = r.uniform(ranges.brightness_lo, ranges.brightness_hi);
  p.contrast = r.uniform(ranges.contrast_lo, ranges.contrast_hi);
  p.saturation = r.uniform(ranges.saturation_lo, ranges.saturation_hi);
  p.hue_shift = r.uniform(-ranges.hue_max, ranges.hue_max);
  p.blur_sigma = r.uniform(0.0, ranges.blur_sigma_max);
  p.noise_sigma = r.uniform(0.0, ranges.noise_sigma_max);
  p.seed = static_cast<std::int64_t>(rng_seed);
  return p;
}

Image gaussian_blur(const Image& img, Scalar sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma))
    throw std::invalid_argument("gaussian_blur: sigma must be finite and >= 0");
  if (sigma == 0.0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<Scalar> kernel(static_cast<std::size_t>(2 * radius + 1));
  Scalar total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const Scalar w = std::exp(-0.5 * i * i / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (auto& w : kernel) w /= total;

  const Index H = img.height(), W = img.width();
  Image out = img;
  for (auto& ch : out.c) {
    Mat tmp(H, W);
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        Scalar acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const Index xx = std::clamp<Index>(x + i, 0, W - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] * ch(y, xx);
        }
        tmp(y, x) = acc;
      }
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        Scalar acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const Index yy = std::clamp<Index>(y + i, 0, H - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] * tmp(yy, x);
        }
        ch(y, x) = acc;
      }
  }
  return out;
}

LabeledImage apply_perturbation(const LabeledImage& x,
                                const PerturbationParams& p) {
  for (const Scalar v :
       {p.brightness, p.contrast, p.saturation, p.hue_shift}) {
    if (!std::isfinite(v))
      throw std::invalid_argument("PerturbationParams: non-finite jitter");
  }
  if (!(p.blur_sigma >= 0.0) || !(p.noise_sigma >= 0.0))
    throw std::invalid_argument("PerturbationParams: sigma must be >= 0");

  LabeledImage out;
  out.image = x.image;
  out.labels = x.labels;
  out.domain_id = "aug:" + std::to_string(p.seed);
  Image& im = out.image;
  const Index H = im.height(), W = im.width();

  if (p.brightness != 1.0) {
    for (auto& ch : im.c) ch *= p.brightness;
    clamp01(im);
  }
  if (p.contrast != 1.0) {
    Scalar m = 0.0;
    for (Index y = 0; y < H; ++y)
      for (Index x2 = 0; x2 < W; ++x2)
        m += luma(im.c[0](y, x2), im.c[1](y, x2), im.c[2](y, x2));
    m /= static_cast<Scalar>(H * W);
    for (auto& ch : im.c)
      ch = (ch.array() - m) * p.contrast + m;
    clamp01(im);
  }
  if (p.saturation != 1.0) {
    for (Index y = 0; y < H; ++y)
      for (Index x2 = 0; x2 < W; ++x2) {
        const Scalar g = luma(im.c[0](y, x2), im.c[1](y, x2), im.c[2](y, x2));
        for (auto& ch : im.c)
          ch(y, x2) = g + p.saturation * (ch(y, x2) - g);
      }
    clamp01(im);
  }
  if (p.hue_shift != 0.0) {
    for (Index y = 0; y < H; ++y)
      for (Index x2 = 0; x2 < W; ++x2) {
        const auto hsv =
            rgb_to_hsv(im.c[0](y, x2), im.c[1](y, x2), im.c[2](y, x2));
        const auto rgb = hsv_to_rgb(hsv[0] + p.hue_shift, hsv[1], hsv[2]);
        for (int ch = 0; ch < 3; ++ch)
          im.c[static_cast<std::size_t>(ch)](y, x2) =
              rgb[static_cast<std::size_t>(ch)];
      }
    clamp01(im);
  }
  if (p.blur_sigma > 0.0) im = gaussian_blur(im, p.blur_sigma);
  if (p.noise_sigma > 0.0) {
    Rng r(mix_seed(static_cast<std::uint64_t>(p.seed), 22));
    for (Index y = 0; y < H; ++y)
      for (Index x2 = 0; x2 < W; ++x2)
        for (auto& ch : im.c)
          ch(y, x2) += p.noise_sigma * r.normal();
    clamp01(im);
  }
  return out;
}

}  // namespace dgseg::perturb
