#pragma once

// Procedural try-on data: flat "shirt" garments with collars, sleeves, and
// glyph patterns, stick-figure persons wearing them, torso masks, and
// box-fitting flows. Annotations are written for evaluation only.

#include <array>
#include <filesystem>

#include <json.hpp>

#include "vton/dataset.hpp"
#include "vton/image.hpp"
#include "vton/params.hpp"

namespace vton {

using Color = std::array<double, 3>;

void fill_rect(Image& img, double x0, double y0, double x1, double y1, const Color& c);
void fill_disk(Image& img, double cx, double cy, double r, const Color& c);
void fill_triangle(Image& img, std::array<double, 2> a, std::array<double, 2> b, std::array<double, 2> c,
                   const Color& color);
void fill_rounded_rect(Image& img, double x0, double y0, double x1, double y1, double r, const Color& c);

struct SyntheticPair {
  Image garment;
  Image person;    // ground truth: the person wearing the garment
  Image agnostic;  // person with the mask region greyed out
  Mask mask;
  Image flow;
  nlohmann::json annotation;  // glyph / collar / sleeve boxes in garment pixels
};

SyntheticPair make_synthetic_pair(int height, int width, Rng& rng);

// Writes `n_pairs` records under out_dir and returns the saved index.
// The last round(test_fraction * n) records form the test split.
PairedDatasetIndex gen_synthetic_dataset(int n_pairs, int height, int width, std::uint64_t seed,
                                         const std::filesystem::path& out_dir, double test_fraction = 0.0);

}  // namespace vton
