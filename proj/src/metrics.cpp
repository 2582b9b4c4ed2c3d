#include "vton/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>

#include "vton/errors.hpp"

namespace vton {

double ssim(const Image& x, const Image& y, const SsimOptions& options) {
  if (!x.same_shape(y)) throw ShapeError("ssim: images differ in shape");
  if (options.window > x.height() || options.window > x.width()) throw ShapeError("ssim: window larger than image");
  const Image gx = to_gray(x), gy = to_gray(y);
  const int win = options.window, radius = win / 2;
  std::vector<double> k(static_cast<std::size_t>(win));
  double total = 0.0;
  for (int i = 0; i < win; ++i) {
    const double d = i - radius;
    k[static_cast<std::size_t>(i)] = std::exp(-0.5 * d * d / (options.sigma * options.sigma));
    total += k[static_cast<std::size_t>(i)];
  }
  for (double& v : k) v /= total;
  const double c1 = std::pow(options.k1 * options.data_range, 2);
  const double c2 = std::pow(options.k2 * options.data_range, 2);

  double acc = 0.0;
  long count = 0;
  for (int top = 0; top + win <= x.height(); ++top) {
    for (int left = 0; left + win <= x.width(); ++left) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double w = k[static_cast<std::size_t>(i)] * k[static_cast<std::size_t>(j)];
          const double a = gx.at(top + i, left + j, 0), b = gy.at(top + i, left + j, 0);
          mx += w * a;
          my += w * b;
          sxx += w * a * a;
          syy += w * b * b;
          sxy += w * a * b;
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
      acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

void GaussianStats::validate() const {
  if (cov.rows() != mean.size() || cov.cols() != mean.size()) throw ShapeError("gaussian stats: covariance shape");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-8) throw ConfigError("gaussian stats: covariance not symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(cov, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-8) throw ConfigError("gaussian stats: covariance not PSD");
}

Mat sqrtm_psd(const Mat& a) {
  const Mat sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  const Vec roots = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * roots.asDiagonal() * es.eigenvectors().transpose();
}

double frechet_embed_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim()) throw ShapeError("frechet distance: dimension mismatch");
  const double mean_term = (a.mean - b.mean).squaredNorm();
  // Tr((Sa Sb)^{1/2}) = Tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}); the inner matrix is symmetric PSD.
  const Mat ra = sqrtm_psd(a.cov);
  const Mat inner = ra * b.cov * ra;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return std::max(0.0, mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt);
}

GaussianStats gaussian_stats(const std::vector<RowVec>& samples) {
  if (samples.empty()) throw ConfigError("gaussian stats: empty sample set");
  const Eigen::Index d = samples.front().size();
  GaussianStats s;
  s.mean = Vec::Zero(d);
  Mat m2 = Mat::Zero(d, d);
  for (const RowVec& r : samples) {
    if (r.size() != d) throw ShapeError("gaussian stats: inconsistent embedding width");
    ++s.n;
    const Vec delta = r.transpose() - s.mean;
    s.mean += delta / static_cast<double>(s.n);
    m2 += delta * (r.transpose() - s.mean).transpose();
  }
  s.cov = s.n > 1 ? Mat(m2 / static_cast<double>(s.n - 1)) : Mat::Zero(d, d);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  s.rank_deficient = s.n < d + 1 || s.cov.isZero(0.0);
  return s;
}

GaussianStats embed_stats(const ParamStore& encoder, const ViTConfig& config, const std::vector<Image>& inputs) {
  if (inputs.empty()) throw ConfigError("embed_stats: no images");
  std::vector<RowVec> rows;
  rows.reserve(inputs.size());
  for (const Image& img : inputs) rows.push_back(vit_forward(encoder, img, config).class_token);
  return gaussian_stats(rows);
}

}  // namespace vton

#include "vton/keypoints.hpp"

namespace vton {

std::vector<double> patch_coverage(const std::vector<PixelBox>& boxes, int grid_rows, int grid_cols, int patch_size) {
  std::vector<double> cov(static_cast<std::size_t>(grid_rows) * grid_cols, 0.0);
  for (int r = 0; r < grid_rows; ++r) {
    for (int c = 0; c < grid_cols; ++c) {
      int inside = 0;
      for (int y = r * patch_size; y < (r + 1) * patch_size; ++y)
        for (int x = c * patch_size; x < (c + 1) * patch_size; ++x) {
          const double px = x + 0.5, py = y + 0.5;
          const bool hit = std::any_of(boxes.begin(), boxes.end(), [&](const PixelBox& b) {
            return px >= b.left && px < b.left + b.width && py >= b.top && py < b.top + b.height;
          });
          inside += hit ? 1 : 0;
        }
      cov[static_cast<std::size_t>(r) * grid_cols + c] = static_cast<double>(inside) / (patch_size * patch_size);
    }
  }
  return cov;
}

double annotated_attention_share(const AttentionMap& map, const std::vector<double>& coverage, double mass_fraction) {
  if (coverage.size() != static_cast<std::size_t>(map.num_patches())) throw ShapeError("coverage does not match the grid");
  double acc = 0.0;
  for (int h = 0; h < map.num_heads(); ++h) {
    const RowVec row = map.head_rows.row(h);
    double in = 0.0, total = 0.0;
    for (int p : threshold_head({row.data(), static_cast<std::size_t>(row.size())}, mass_fraction)) {
      in += row(p) * coverage[static_cast<std::size_t>(p)];
      total += row(p);
    }
    acc += total > 0.0 ? in / total : 0.0;
  }
  return acc / map.num_heads();
}

}  // namespace vton
