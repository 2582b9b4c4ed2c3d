#pragma once

// Random-resized-crop geometry and the photometric chain that produces
// teacher/student views.

#include <array>
#include <utility>

#include "vton/image.hpp"
#include "vton/params.hpp"

namespace vton {

using Range = std::pair<double, double>;

constexpr Range kGlobalScale = {0.25, 1.0};
constexpr Range kLocalScale = {0.05, 0.25};
constexpr Range kAspectRange = {3.0 / 4.0, 4.0 / 3.0};

// Crop rectangle. Pixel coordinates are continuous; `left`/`top` are the
// outer edges of the first covered pixel.
struct CropBox {
  double cx = 0.5;  // normalized centre
  double cy = 0.5;
  double area_ratio = 1.0;  // rect area / image area
  double aspect = 1.0;      // width / height
  double left = 0.0;
  double top = 0.0;
  double width = 0.0;
  double height = 0.0;

  static CropBox from_rect(double left, double top, double width, double height, int image_height, int image_width);
  static CropBox full(int image_height, int image_width);
  bool in_bounds(int image_height, int image_width, double tol = 1e-9) const;
  // True when every CropBox invariant holds for the given image.
  bool valid(int image_height, int image_width) const;
};

struct CropSample {
  CropBox box;
  bool fallback = false;  // true when no placement fit in 10 attempts
};

CropSample sample_crop_box(Rng& rng, Range scale, Range aspect, int image_height, int image_width);

// Keys cubic convolution kernel, a = -0.5.
double bicubic_kernel(double t);

// Bicubic resample of the box region to out_height x out_width, clamped to [0,1].
Image apply_crop_resize(const Image& image, const CropBox& box, int out_height, int out_width);

struct AugmentPolicy {
  double flip_prob = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double blur_prob = 0.5;
  Range blur_sigma = {0.1, 1.0};
  std::array<double, 3> mean = {0.485, 0.456, 0.406};
  std::array<double, 3> std = {0.229, 0.224, 0.225};
  std::uint64_t rng_seed = 0;

  void validate() const;
  static AugmentPolicy identity();
};

Image flip_horizontal(const Image& image);
Image gaussian_blur(const Image& image, double sigma);
Image normalize(const Image& image, const AugmentPolicy& policy);
Image denormalize(const Image& image, const AugmentPolicy& policy);

// crop-resize -> flip -> brightness/contrast/saturation jitter -> blur -> normalize.
Image augment_view(const Image& image, const CropBox& box, const AugmentPolicy& policy, Rng& rng, int out_height,
                   int out_width);

}  // namespace vton
