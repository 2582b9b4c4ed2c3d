#pragma once

// Attention-guided keypoints: per-head high-attention points, merged across
// heads, clustered into K centroids that seed local crops.

#include <array>
#include <span>
#include <vector>

#include "vton/augment.hpp"
#include "vton/vit.hpp"

namespace vton {

struct GridPoint {
  int row = 0;
  int col = 0;
  bool operator==(const GridPoint&) const = default;
};

struct HighAttentionPoints {
  int grid_rows = 0;
  int grid_cols = 0;
  std::vector<GridPoint> points;
  std::vector<int> source_head;
  std::vector<double> weight;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

// Minimal set of patches, taken in descending attention order (ties by
// index), whose cumulative mass reaches `mass_fraction` of the row total.
// Returns an empty set for an all-zero row.
std::vector<int> threshold_head(std::span<const double> attention_row, double mass_fraction);

// High-attention points of one head of an attention map.
HighAttentionPoints head_points(const AttentionMap& map, int head, double mass_fraction);

// Multiset union; duplicates across heads are kept.
HighAttentionPoints merge_heads(const std::vector<HighAttentionPoints>& per_head);

struct KeypointSet {
  std::vector<std::array<double, 2>> centroids;  // (row, col), size == k
  int k = 0;
  int effective_k = 0;          // < k when there were fewer distinct points than k
  bool reduced = false;
  std::vector<int> assignment;  // point index -> centroid index in [0, effective_k)
  double sse = 0.0;             // weighted within-cluster sum of squares
  std::vector<double> sse_history;  // after every Lloyd iteration, then the refinement, of the winning restart
};

struct KMeansOptions {
  int max_iterations = 100;
  int restarts = 1;
};

// Weighted k-means (k-means++ seeding, Lloyd iterations, Hartigan refinement)
// on grid coordinates.
KeypointSet cluster_keypoints(const HighAttentionPoints& points, int k, Rng& rng, const KMeansOptions& options = {});

// Weighted SSE of a given assignment with weighted-mean centroids.
double partition_sse(const std::vector<std::array<double, 2>>& coords, const std::vector<double>& weights,
                     const std::vector<int>& assignment, int k);

// One box per centroid, centred on the patch centre and shifted minimally
// to stay inside the image.
std::vector<CropBox> keypoint_crop_boxes(const KeypointSet& keys, Range scale, int patch_size, int image_height,
                                         int image_width, Rng& rng, Range aspect = kAspectRange);

struct KeypointOptions {
  double mass_fraction = 0.6;
  int num_keypoints = 10;
  KMeansOptions kmeans;
};

// Full pipeline over every head of a map.
KeypointSet keypoints_from_attention(const AttentionMap& map, const KeypointOptions& options, Rng& rng,
                                     HighAttentionPoints* merged_out = nullptr);

}  // namespace vton
