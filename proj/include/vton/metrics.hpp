#pragma once

#include <vector>

#include "vton/autograd.hpp"
#include "vton/dataset.hpp"
#include "vton/image.hpp"
#include "vton/vit.hpp"

namespace vton {

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

// Mean SSIM over every fully contained Gaussian window of the luminance
// images (0.299, 0.587, 0.114).
double ssim(const Image& x, const Image& y, const SsimOptions& options = {});

struct GaussianStats {
  Vec mean;
  Mat cov;
  long n = 0;
  bool rank_deficient = false;

  int dim() const { return static_cast<int>(mean.size()); }
  void validate() const;
};

// Symmetric PSD square root via eigendecomposition; negative eigenvalues clamp to zero.
Mat sqrtm_psd(const Mat& a);

// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
double frechet_embed_distance(const GaussianStats& a, const GaussianStats& b);

// Streaming (Welford) mean and unbiased covariance of row vectors.
GaussianStats gaussian_stats(const std::vector<RowVec>& samples);

// Statistics of the encoder's final-norm class-token embeddings.
GaussianStats embed_stats(const ParamStore& encoder, const ViTConfig& config, const std::vector<Image>& inputs);

// Fraction of each patch (row-major grid) covered by the union of boxes.
std::vector<double> patch_coverage(const std::vector<PixelBox>& boxes, int grid_rows, int grid_cols, int patch_size);

// Mean over heads of the share of each head's top-mass patch set that falls
// inside annotated regions: sum_{p in top} a_p cov_p / sum_{p in top} a_p.
double annotated_attention_share(const AttentionMap& map, const std::vector<double>& coverage, double mass_fraction);

}  // namespace vton
