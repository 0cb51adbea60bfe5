#pragma once

#include <cstdint>

#include "dgseg/config.hpp"
#include "dgseg/image.hpp"
#include "dgseg/types.hpp"

namespace dgseg::perturb {

struct PerturbationParams {
  Scalar brightness = 1.0;
  Scalar contrast = 1.0;
  Scalar saturation = 1.0;
  Scalar hue_shift = 0.0;
  Scalar blur_sigma = 0.0;
  Scalar noise_sigma = 0.0;
  std::int64_t seed = 0;
};

struct PerturbRanges {
  Scalar brightness_lo = 0.6, brightness_hi = 1.4;
  Scalar contrast_lo = 0.6, contrast_hi = 1.4;
  Scalar saturation_lo = 0.6, saturation_hi = 1.4;
  Scalar hue_max = 0.1;
  Scalar blur_sigma_max = 1.5;
  Scalar noise_sigma_max = 0.05;

  // Reads keys perturb.* with the defaults above.
  static PerturbRanges from_config(const Config& cfg);
  // Collapses every range to the identity transform.
  static PerturbRanges identity();
};

void validate_ranges(const PerturbRanges& r);

PerturbationParams sample_perturbation(std::uint64_t rng_seed,
                                       const PerturbRanges& ranges);

// Photometric perturbation in fixed order: brightness, contrast, saturation,
// hue, then blur, then noise; each stage clamps to [0,1]. Stages at their
// identity value are skipped so identity params reproduce the input exactly.
// Labels are copied verbatim; domain_id becomes "aug:<seed>".
LabeledImage apply_perturbation(const LabeledImage& x,
                                const PerturbationParams& p);

// Separable Gaussian blur with replicate borders, kernel radius ceil(3*sigma).
Image gaussian_blur(const Image& img, Scalar sigma);

}  // namespace dgseg::perturb
