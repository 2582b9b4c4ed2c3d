#include <doctest.h>

#include "support.hpp"
#include "vton/augment.hpp"
#include "vton/errors.hpp"

using namespace vton;
using vton::testing::random_image;

namespace {

// Keys cubic, a = -1/2, in its textbook piecewise form.
double keys(double x) {
  x = std::abs(x);
  if (x < 1.0) return 1.5 * x * x * x - 2.5 * x * x + 1.0;
  if (x < 2.0) return -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0;
  return 0.0;
}

// Direct 16-tap evaluation at each output pixel, no separable passes.
Image bicubic_oracle(const Image& src, double left, double top, double w, double h, int oh, int ow) {
  Image out(oh, ow, src.channels());
  for (int y = 0; y < oh; ++y) {
    const double sy = top + (y + 0.5) * h / oh - 0.5;
    for (int x = 0; x < ow; ++x) {
      const double sx = left + (x + 0.5) * w / ow - 0.5;
      for (int c = 0; c < src.channels(); ++c) {
        double acc = 0.0;
        for (int j = static_cast<int>(std::floor(sy)) - 1; j <= static_cast<int>(std::floor(sy)) + 2; ++j)
          for (int i = static_cast<int>(std::floor(sx)) - 1; i <= static_cast<int>(std::floor(sx)) + 2; ++i)
            acc += keys(sy - j) * keys(sx - i) * src.clamped(j, i, c);
        out.at(y, x, c) = std::clamp(acc, 0.0, 1.0);
      }
    }
  }
  return out;
}

double max_abs_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("full-scale square request yields the whole square image") {
  Rng rng(1);
  const CropSample s = sample_crop_box(rng, {1.0, 1.0}, {1.0, 1.0}, 64, 64);
  CHECK_FALSE(s.fallback);
  CHECK(s.box.left == doctest::Approx(0.0));
  CHECK(s.box.width == doctest::Approx(64.0));
  CHECK(s.box.area_ratio == doctest::Approx(1.0));
}

TEST_CASE("quarter-area square crop of a 512x384 image") {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const CropSample s = sample_crop_box(rng, {0.25, 0.25}, {1.0, 1.0}, 512, 384);
    CHECK_FALSE(s.fallback);
    CHECK(std::abs(s.box.width * s.box.height - 49152.0) <= 1.0);
    CHECK(s.box.width == doctest::Approx(221.70250336881628));
    CHECK(s.box.valid(512, 384));
  }
}

TEST_CASE("area ratios over 10k draws stay in range with the uniform mean") {
  Rng rng(3);
  double sum = 0.0;
  int fallbacks = 0;
  for (int i = 0; i < 10000; ++i) {
    const CropSample s = sample_crop_box(rng, kLocalScale, kAspectRange, 64, 48);
    REQUIRE(s.box.valid(64, 48));
    CHECK(s.box.area_ratio >= 0.05 - 1e-12);
    CHECK(s.box.area_ratio <= 0.25 + 1e-12);
    const double aspect = s.box.width / s.box.height;
    CHECK(aspect >= 0.75 - 1e-9);
    CHECK(aspect <= 4.0 / 3.0 + 1e-9);
    sum += s.box.area_ratio;
    fallbacks += s.fallback;
  }
  CHECK(std::abs(sum / 10000.0 - 0.15) <= 0.01);
  CHECK(fallbacks == 0);
}

TEST_CASE("infeasible requests fall back to a centred crop") {
  Rng rng(4);
  // aspect fixed at 4 cannot fit a 0.9-area box in a square image
  const CropSample s = sample_crop_box(rng, {0.9, 0.9}, {4.0, 4.0}, 40, 40);
  CHECK(s.fallback);
  CHECK(s.box.valid(40, 40));
  CHECK(s.box.left + s.box.width / 2 == doctest::Approx(20.0));
  CHECK(s.box.width * s.box.height == doctest::Approx(0.9 * 1600.0));
  CHECK_THROWS_AS(sample_crop_box(rng, {0.0, 0.5}, kAspectRange, 40, 40), ConfigError);
}

TEST_CASE("crop-resize matches the direct bicubic oracle") {
  SUBCASE("2x upscale of a linear ramp") {
    Image ramp(8, 10, 1);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 10; ++x) ramp.at(y, x, 0) = 0.1 + 0.07 * x + 0.02 * y;
    const Image got = apply_crop_resize(ramp, CropBox::full(8, 10), 16, 20);
    const Image want = bicubic_oracle(ramp, 0, 0, 10, 8, 16, 20);
    CHECK(max_abs_diff(got, want) < 1e-12);
    // away from the clamped border, cubic convolution reproduces the ramp
    CHECK(got.at(7, 9, 0) == doctest::Approx(0.1 + 0.07 * (9.5 / 2 - 0.5) + 0.02 * (7.5 / 2 - 0.5)));
  }
  SUBCASE("arbitrary sub-rect of a random image") {
    Rng rng(5);
    const Image img = random_image(30, 20, rng);
    const CropBox box = CropBox::from_rect(3.3, 7.1, 11.7, 9.4, 30, 20);
    CHECK(max_abs_diff(apply_crop_resize(img, box, 13, 17), bicubic_oracle(img, 3.3, 7.1, 11.7, 9.4, 13, 17)) < 1e-12);
  }
  SUBCASE("identity and constants") {
    Rng rng(6);
    const Image img = random_image(16, 12, rng);
    CHECK(max_abs_diff(apply_crop_resize(img, CropBox::full(16, 12), 16, 12), img) < 1e-6);
    const Image flat(16, 12, 3, 0.37);
    const Image out = apply_crop_resize(flat, CropBox::from_rect(1.5, 2.5, 7, 9, 16, 12), 5, 5);
    for (double v : out.data()) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
  }
}

TEST_CASE("augment pipeline properties") {
  Rng rng(7);
  const Image img = random_image(64, 48, rng);
  const CropBox box = CropBox::from_rect(4, 6, 30, 40, 64, 48);

  SUBCASE("identity policy reduces to crop-resize") {
    Rng r(1);
    const Image v = augment_view(img, box, AugmentPolicy::identity(), r, 32, 32);
    CHECK(v == apply_crop_resize(img, box, 32, 32));
  }
  SUBCASE("flip is an involution") {
    const Image c = apply_crop_resize(img, box, 20, 16);
    CHECK(flip_horizontal(flip_horizontal(c)) == c);
    AugmentPolicy p = AugmentPolicy::identity();
    p.flip_prob = 1.0;
    Rng r(2);
    CHECK(augment_view(img, box, p, r, 20, 16) == flip_horizontal(c));
  }
  SUBCASE("same seed gives byte-identical views") {
    AugmentPolicy p;
    p.blur_prob = 1.0;
    Rng a(42), b(42);
    const Image va = augment_view(img, box, p, a, 32, 32);
    const Image vb = augment_view(img, box, p, b, 32, 32);
    CHECK(to_bytes(va) == to_bytes(vb));
    CHECK(va == vb);
  }
  SUBCASE("normalisation inverts") {
    const AugmentPolicy p;
    const Image back = denormalize(normalize(img, p), p);
    CHECK(max_abs_diff(back, img) < 1e-12);
  }
  SUBCASE("blur preserves constants") {
    const Image flat(20, 20, 3, 0.6);
    const Image blurred = gaussian_blur(flat, 1.0);
    for (double v : blurred.data()) CHECK(v == doctest::Approx(0.6));
  }
}

TEST_CASE("every emitted box is valid for any stream") {
  Rng rng(8);
  for (int i = 0; i < 10000; ++i) {
    const int h = 16 + static_cast<int>(rng() % 64), w = 16 + static_cast<int>(rng() % 64);
    const Range scale = (i % 2 == 0) ? kGlobalScale : kLocalScale;
    REQUIRE(sample_crop_box(rng, scale, kAspectRange, h, w).box.valid(h, w));
  }
}
