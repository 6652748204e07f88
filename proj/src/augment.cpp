#include "celestial/augment.hpp"

#include "celestial/errors.hpp"
#include "celestial/rng.hpp"

namespace celestial {

void AugmentationPolicy::validate() const {
  if (rotations.empty()) throw ValidationError("rotation set must not be empty");
  for (int r : rotations)
    if (r < 0 || r > 3) throw ValidationError("rotation quarter-turn count must be in {0,1,2,3}");
  if (!(brightness_max_delta >= 0.0 && brightness_max_delta <= 1.0))
    throw ValidationError("brightness_max_delta must be in [0,1]");
  if (!(contrast_max_delta >= 0.0 && contrast_max_delta <= 1.0))
    throw ValidationError("contrast_max_delta must be in [0,1]");
}

AugmentDraw draw_augmentation(const AugmentationPolicy& policy, std::uint64_t draw) {
  policy.validate();
  CounterRng rng(policy.seed, draw);
  AugmentDraw d;
  d.quarter_turns = policy.rotations[rng.below(policy.rotations.size())];
  d.brightness = rng.uniform(-policy.brightness_max_delta, policy.brightness_max_delta);
  d.contrast = rng.uniform(-policy.contrast_max_delta, policy.contrast_max_delta);
  return d;
}

Image apply_augmentation(const Image& image, const AugmentDraw& params) {
  if (!image.square()) throw ValidationError("augmentation requires a square image");
  Image out = rotate_quarter(image, params.quarter_turns);
  if (params.brightness != 0.0) out.pixels.array() += static_cast<float>(params.brightness);
  if (params.contrast != 0.0) {
    const double mean = out.pixels.cast<double>().mean();
    const double scale = 1.0 + params.contrast;
    out.pixels = ((out.pixels.cast<double>().array() - mean) * scale + mean).cast<float>().matrix();
  }
  out.pixels = out.pixels.cwiseMax(0.0f).cwiseMin(1.0f);
  return out;
}

Image augment(const Image& image, const AugmentationPolicy& policy, std::uint64_t draw) {
  if (!image.square()) throw ValidationError("augmentation requires a square image");
  return apply_augmentation(image, draw_augmentation(policy, draw));
}

ViewPair make_view_pair(const ImageSample& sample, const AugmentationPolicy& policy,
                        std::uint64_t draw) {
  return {sample.id, augment(sample.pixels, policy, 2 * draw),
          augment(sample.pixels, policy, 2 * draw + 1)};
}

}  // namespace celestial
