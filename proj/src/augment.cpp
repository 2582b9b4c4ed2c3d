#include "vton/augment.hpp"

#include <algorithm>
#include <cmath>

#include "vton/errors.hpp"

namespace vton {

CropBox CropBox::from_rect(double left, double top, double width, double height, int image_height, int image_width) {
  CropBox b;
  b.left = left;
  b.top = top;
  b.width = width;
  b.height = height;
  b.cx = (left + 0.5 * width) / image_width;
  b.cy = (top + 0.5 * height) / image_height;
  b.area_ratio = width * height / (static_cast<double>(image_width) * image_height);
  b.aspect = width / height;
  return b;
}

CropBox CropBox::full(int image_height, int image_width) {
  return from_rect(0.0, 0.0, image_width, image_height, image_height, image_width);
}

bool CropBox::in_bounds(int image_height, int image_width, double tol) const {
  return left >= -tol && top >= -tol && left + width <= image_width + tol && top + height <= image_height + tol;
}

bool CropBox::valid(int image_height, int image_width) const {
  constexpr double kTol = 1e-9;
  return in_bounds(image_height, image_width) && width > 0.0 && height > 0.0 && area_ratio > 0.0 &&
         area_ratio <= 1.0 + kTol && aspect >= kAspectRange.first - kTol && aspect <= kAspectRange.second + kTol;
}

CropSample sample_crop_box(Rng& rng, Range scale, Range aspect, int image_height, int image_width) {
  if (!(scale.first > 0.0 && scale.first <= scale.second && scale.second <= 1.0)) {
    throw ConfigError("sample_crop_box: need 0 < lo <= hi <= 1");
  }
  if (!(aspect.first > 0.0 && aspect.first <= aspect.second)) throw ConfigError("sample_crop_box: bad aspect range");
  const double area = static_cast<double>(image_height) * image_width;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double log_lo = std::log(aspect.first), log_hi = std::log(aspect.second);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double ratio = scale.first + (scale.second - scale.first) * unit(rng);
    const double ar = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
    const double w = std::sqrt(ratio * area * ar);
    const double h = std::sqrt(ratio * area / ar);
    if (w <= image_width && h <= image_height) {
      const double left = (image_width - w) * unit(rng);
      const double top = (image_height - h) * unit(rng);
      return {CropBox::from_rect(left, top, w, h, image_height, image_width), false};
    }
  }
  // Center crop at the lower scale with the aspect clamped into the feasible set.
  const double target = scale.first * area;
  double ar = std::clamp(1.0, aspect.first, aspect.second);
  double w = std::sqrt(target * ar), h = std::sqrt(target / ar);
  if (w > image_width) {
    w = image_width;
    h = target / w;
  }
  if (h > image_height) {
    h = image_height;
    w = std::min<double>(image_width, target / h);
  }
  return {CropBox::from_rect((image_width - w) / 2, (image_height - h) / 2, w, h, image_height, image_width), true};
}

double bicubic_kernel(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

namespace {

struct Taps {
  std::array<int, 4> index;
  std::array<double, 4> weight;
};

// Source taps for each output coordinate along one axis.
std::vector<Taps> axis_taps(double start, double extent, int out, int limit) {
  std::vector<Taps> taps(static_cast<std::size_t>(out));
  const double step = extent / out;
  for (int i = 0; i < out; ++i) {
    const double s = start + (i + 0.5) * step - 0.5;
    const int base = static_cast<int>(std::floor(s));
    const double frac = s - base;
    Taps& t = taps[static_cast<std::size_t>(i)];
    for (int k = 0; k < 4; ++k) {
      t.index[k] = std::clamp(base - 1 + k, 0, limit - 1);
      t.weight[k] = bicubic_kernel(frac - (k - 1));
    }
  }
  return taps;
}

}  // namespace

Image apply_crop_resize(const Image& image, const CropBox& box, int out_height, int out_width) {
  if (out_height <= 0 || out_width <= 0) throw ShapeError("apply_crop_resize: output size must be positive");
  const int ch = image.channels();
  const auto xt = axis_taps(box.left, box.width, out_width, image.width());
  const auto yt = axis_taps(box.top, box.height, out_height, image.height());
  // Horizontal pass over every source row, then vertical.
  Image tmp(image.height(), out_width, ch);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < out_width; ++x) {
      const Taps& t = xt[static_cast<std::size_t>(x)];
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += t.weight[k] * image.at(y, t.index[k], c);
        tmp.at(y, x, c) = acc;
      }
    }
  }
  Image out(out_height, out_width, ch);
  for (int y = 0; y < out_height; ++y) {
    const Taps& t = yt[static_cast<std::size_t>(y)];
    for (int x = 0; x < out_width; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += t.weight[k] * tmp.at(t.index[k], x, c);
        out.at(y, x, c) = acc;
      }
    }
  }
  out.clamp01();
  return out;
}

void AugmentPolicy::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(flip_prob) || !prob(blur_prob)) throw ConfigError("augment: probabilities must lie in [0,1]");
  if (brightness < 0.0 || contrast < 0.0 || saturation < 0.0) throw ConfigError("augment: jitter must be >= 0");
  if (blur_sigma.first < 0.0 || blur_sigma.first > blur_sigma.second) {
    throw ConfigError("augment: blur sigma range must be ordered and nonnegative");
  }
  for (double s : std) {
    if (s == 0.0) throw ConfigError("augment: normalization std must be nonzero");
  }
}

AugmentPolicy AugmentPolicy::identity() {
  AugmentPolicy p;
  p.flip_prob = 0.0;
  p.brightness = p.contrast = p.saturation = 0.0;
  p.blur_prob = 0.0;
  p.blur_sigma = {0.0, 0.0};
  p.mean = {0.0, 0.0, 0.0};
  p.std = {1.0, 1.0, 1.0};
  return p;
}

Image flip_horizontal(const Image& image) {
  Image out(image.height(), image.width(), image.channels());
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = image.at(y, image.width() - 1 - x, c);
  return out;
}

Image gaussian_blur(const Image& image, double sigma) {
  if (sigma <= 0.0) return image;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += k[static_cast<std::size_t>(i + radius)];
  }
  for (double& v : k) v /= total;
  Image tmp(image.height(), image.width(), image.channels());
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < image.channels(); ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * image.clamped(y, x + i, c);
        tmp.at(y, x, c) = acc;
      }
  Image out(image.height(), image.width(), image.channels());
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < image.channels(); ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * tmp.clamped(y + i, x, c);
        out.at(y, x, c) = acc;
      }
  return out;
}

Image normalize(const Image& image, const AugmentPolicy& policy) {
  Image out = image;
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = (out.at(y, x, c) - policy.mean[c]) / policy.std[c];
  return out;
}

Image denormalize(const Image& image, const AugmentPolicy& policy) {
  Image out = image;
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = out.at(y, x, c) * policy.std[c] + policy.mean[c];
  return out;
}

namespace {

double jitter_factor(double strength, Rng& rng) {
  std::uniform_real_distribution<double> u(std::max(0.0, 1.0 - strength), 1.0 + strength);
  return u(rng);
}

void adjust_brightness(Image& img, double f) {
  for (double& v : img.data()) v = std::clamp(v * f, 0.0, 1.0);
}

void adjust_contrast(Image& img, double f) {
  const Image gray = to_gray(img);
  double mean = 0.0;
  for (double v : gray.data()) mean += v;
  mean /= static_cast<double>(gray.size());
  for (double& v : img.data()) v = std::clamp((v - mean) * f + mean, 0.0, 1.0);
}

void adjust_saturation(Image& img, double f) {
  const Image gray = to_gray(img);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        const double g = gray.at(y, x, 0);
        img.at(y, x, c) = std::clamp((img.at(y, x, c) - g) * f + g, 0.0, 1.0);
      }
}

}  // namespace

Image augment_view(const Image& image, const CropBox& box, const AugmentPolicy& policy, Rng& rng, int out_height,
                   int out_width) {
  policy.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image view = apply_crop_resize(image, box, out_height, out_width);

  if (unit(rng) < policy.flip_prob) view = flip_horizontal(view);

  const double fb = jitter_factor(policy.brightness, rng);
  const double fc = jitter_factor(policy.contrast, rng);
  const double fs = jitter_factor(policy.saturation, rng);
  if (policy.brightness > 0.0) adjust_brightness(view, fb);
  if (policy.contrast > 0.0) adjust_contrast(view, fc);
  if (policy.saturation > 0.0) adjust_saturation(view, fs);

  const bool blur = unit(rng) < policy.blur_prob;
  const double sigma = policy.blur_sigma.first + (policy.blur_sigma.second - policy.blur_sigma.first) * unit(rng);
  if (blur && sigma > 0.0) view = gaussian_blur(view, sigma);

  return normalize(view, policy);
}

}  // namespace vton
