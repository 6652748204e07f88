#include "celestial/augment.hpp"
#include "celestial/errors.hpp"

#include "support.hpp"

#include <doctest.h>

using namespace celestial;
using celestial::testing::constant_image;
using celestial::testing::random_image;

TEST_CASE("identity policy leaves the image unchanged") {
  const Image img = random_image(16, 16, 3, 1);
  const auto policy = AugmentationPolicy::identity();
  for (std::uint64_t d = 0; d < 10; ++d) CHECK(augment(img, policy, d) == img);

  ImageSample sample{"x", img, 2, "src"};
  const auto pair = make_view_pair(sample, policy, 5);
  CHECK(pair.view_a == img);
  CHECK(pair.view_b == img);
  CHECK(pair.source_id == "x");
}

TEST_CASE("augmentation is a pure function of the policy seed and draw") {
  const Image img = random_image(16, 16, 3, 2);
  AugmentationPolicy policy;
  policy.seed = 17;
  for (std::uint64_t d = 0; d < 20; ++d) CHECK(augment(img, policy, d) == augment(img, policy, d));
  const auto a = draw_augmentation(policy, 3);
  policy.seed = 18;
  const auto b = draw_augmentation(policy, 3);
  CHECK((a.brightness != b.brightness || a.contrast != b.contrast || a.quarter_turns != b.quarter_turns));
}

TEST_CASE("brightness is clamped after the shift") {
  const Image img = constant_image(8, 8, 3, 0.9f);
  const Image out = apply_augmentation(img, {0, 0.2, 0.0});
  CHECK((out.pixels.array() == 1.0f).all());
  const Image down = apply_augmentation(constant_image(8, 8, 1, 0.1f), {0, -0.2, 0.0});
  CHECK((down.pixels.array() == 0.0f).all());
}

TEST_CASE("drawn parameters stay inside the policy ranges") {
  AugmentationPolicy policy;
  policy.rotations = {0, 2};
  policy.brightness_max_delta = 0.2;
  policy.contrast_max_delta = 0.1;
  policy.seed = 4;
  bool saw[4] = {false, false, false, false};
  for (std::uint64_t d = 0; d < 2000; ++d) {
    const auto p = draw_augmentation(policy, d);
    CHECK(std::abs(p.brightness) <= 0.2);
    CHECK(std::abs(p.contrast) <= 0.1);
    REQUIRE((p.quarter_turns == 0 || p.quarter_turns == 2));
    saw[p.quarter_turns] = true;
  }
  CHECK(saw[0]);
  CHECK(saw[2]);
}

TEST_CASE("the two views of a pair use different draws") {
  AugmentationPolicy policy;
  policy.seed = 9;
  const Image img = random_image(12, 12, 3, 3);
  ImageSample sample{"s", img, std::nullopt, ""};
  int differing = 0;
  for (std::uint64_t d = 0; d < 50; ++d) {
    const auto a = draw_augmentation(policy, 2 * d);
    const auto b = draw_augmentation(policy, 2 * d + 1);
    CHECK(a.brightness != b.brightness);
    const auto pair = make_view_pair(sample, policy, d);
    CHECK(pair.view_a == augment(img, policy, 2 * d));
    CHECK(pair.view_b == augment(img, policy, 2 * d + 1));
    differing += pair.view_a == pair.view_b ? 0 : 1;
    CHECK(pair.source_id == "s");
  }
  CHECK(differing == 50);
}

TEST_CASE("every augmented pixel stays in [0,1]") {
  AugmentationPolicy policy;
  policy.brightness_max_delta = 1.0;
  policy.contrast_max_delta = 1.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    policy.seed = s;
    const Image img = random_image(10, 10, 3, 100 + s);
    for (std::uint64_t d = 0; d < 40; ++d) {
      const Image out = augment(img, policy, d);
      CHECK(out.size() == img.size());
      CHECK(out.pixels.minCoeff() >= 0.0f);
      CHECK(out.pixels.maxCoeff() <= 1.0f);
    }
  }
}

TEST_CASE("pure contrast preserves the image mean when nothing clips") {
  Image img = random_image(16, 16, 3, 5);
  img.pixels = img.pixels * 0.4f + Eigen::MatrixXf::Constant(3, 256, 0.3f);  // values in [0.3, 0.7]
  for (double c : {-0.2, -0.05, 0.1, 0.2}) {
    const Image out = apply_augmentation(img, {0, 0.0, c});
    CHECK(out.pixels.cast<double>().mean() == doctest::Approx(img.pixels.cast<double>().mean()).epsilon(1e-6));
  }
}

TEST_CASE("quarter-turn rotations form a cyclic group") {
  const Image img = random_image(9, 9, 3, 6);
  CHECK(rotate_quarter(rotate_quarter(img, 1), 3) == img);
  CHECK(rotate_quarter(rotate_quarter(img, 2), 2) == img);
  CHECK(rotate_quarter(img, 4) == img);
  CHECK(rotate_quarter(img, -1) == rotate_quarter(img, 3));
  CHECK(rotate_quarter(rotate_quarter(img, 1), 1) == rotate_quarter(img, 2));

  Image corner(3, 3, 1);
  corner.at(0, 0, 2) = 1.0f;  // top-right
  const Image turned = rotate_quarter(corner, 1);
  CHECK(turned.at(0, 0, 0) == 1.0f);  // counter-clockwise: top-right goes to top-left
}

TEST_CASE("augmentation rejects bad policies and non-square images") {
  AugmentationPolicy bad;
  bad.brightness_max_delta = 1.5;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = {};
  bad.rotations = {};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = {};
  bad.rotations = {5};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS(augment(random_image(4, 6, 3, 1), AugmentationPolicy{}, 0), ValidationError);
}
