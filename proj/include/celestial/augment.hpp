#pragma once

#include "celestial/dataset.hpp"
#include "celestial/image.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace celestial {

/// Ranges for content-preserving perturbations: quarter-turn rotation,
/// additive brightness and multiplicative contrast about the image mean.
struct AugmentationPolicy {
  std::vector<int> rotations{0, 1, 2, 3};
  double brightness_max_delta = 0.2;
  double contrast_max_delta = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
  static AugmentationPolicy identity() { return {{0}, 0.0, 0.0, 0}; }
};

/// One concrete perturbation drawn from a policy.
struct AugmentDraw {
  int quarter_turns = 0;
  double brightness = 0.0;
  double contrast = 0.0;
};

/// Pure function of (policy.seed, draw).
AugmentDraw draw_augmentation(const AugmentationPolicy& policy, std::uint64_t draw);

/// clamp(contrast(brighten(rotate(image)))) for a fixed draw.
Image apply_augmentation(const Image& image, const AugmentDraw& params);

Image augment(const Image& image, const AugmentationPolicy& policy, std::uint64_t draw);

struct ViewPair {
  std::string source_id;
  Image view_a;
  Image view_b;
};

/// view_a uses draw 2*draw, view_b uses 2*draw+1.
ViewPair make_view_pair(const ImageSample& sample, const AugmentationPolicy& policy,
                        std::uint64_t draw);

}  // namespace celestial
