#include "vton/keypoints.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "vton/errors.hpp"

namespace vton {

std::vector<int> threshold_head(std::span<const double> attention_row, double mass_fraction) {
  if (!(mass_fraction > 0.0 && mass_fraction < 1.0)) throw ConfigError("threshold_head: mass fraction must be in (0,1)");
  const double total = std::accumulate(attention_row.begin(), attention_row.end(), 0.0);
  if (!(total > 0.0)) return {};
  std::vector<int> order(attention_row.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return attention_row[static_cast<std::size_t>(a)] > attention_row[static_cast<std::size_t>(b)]; });
  const double target = mass_fraction * total;
  std::vector<int> out;
  double mass = 0.0;
  for (int idx : order) {
    out.push_back(idx);
    mass += attention_row[static_cast<std::size_t>(idx)];
    if (mass >= target - 1e-12) break;
  }
  return out;
}

HighAttentionPoints head_points(const AttentionMap& map, int head, double mass_fraction) {
  if (head < 0 || head >= map.num_heads()) throw ConfigError("head_points: head out of range");
  const RowVec row = map.head_rows.row(head);
  HighAttentionPoints out;
  out.grid_rows = map.rows;
  out.grid_cols = map.cols;
  for (int idx : threshold_head(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())), mass_fraction)) {
    out.points.push_back({idx / map.cols, idx % map.cols});
    out.source_head.push_back(head);
    out.weight.push_back(row(idx));
  }
  return out;
}

HighAttentionPoints merge_heads(const std::vector<HighAttentionPoints>& per_head) {
  HighAttentionPoints out;
  if (per_head.empty()) return out;
  out.grid_rows = per_head.front().grid_rows;
  out.grid_cols = per_head.front().grid_cols;
  for (const HighAttentionPoints& h : per_head) {
    if (h.grid_rows != out.grid_rows || h.grid_cols != out.grid_cols) throw ShapeError("merge_heads: grid mismatch");
    out.points.insert(out.points.end(), h.points.begin(), h.points.end());
    out.source_head.insert(out.source_head.end(), h.source_head.begin(), h.source_head.end());
    out.weight.insert(out.weight.end(), h.weight.begin(), h.weight.end());
  }
  return out;
}

namespace {

using Point2 = std::array<double, 2>;

double dist2(const Point2& a, const Point2& b) {
  const double dr = a[0] - b[0], dc = a[1] - b[1];
  return dr * dr + dc * dc;
}

int nearest(const Point2& p, const std::vector<Point2>& centers) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centers.size(); ++c) {
    const double d = dist2(p, centers[c]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

std::size_t sample_index(const std::vector<double>& mass, Rng& rng) {
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  std::uniform_real_distribution<double> u(0.0, total);
  double r = u(rng);
  for (std::size_t i = 0; i < mass.size(); ++i) {
    r -= mass[i];
    if (r < 0.0 && mass[i] > 0.0) return i;
  }
  for (std::size_t i = mass.size(); i-- > 0;) {
    if (mass[i] > 0.0) return i;
  }
  return 0;
}

struct Run {
  std::vector<Point2> centers;
  std::vector<int> assignment;
  double sse = 0.0;
  std::vector<double> history;
};

Run lloyd(const std::vector<Point2>& pts, const std::vector<double>& w, int k, Rng& rng, int max_iterations) {
  const std::size_t n = pts.size();
  Run run;
  // k-means++ seeding.
  run.centers.push_back(pts[sample_index(w, rng)]);
  std::vector<double> mass(n);
  while (static_cast<int>(run.centers.size()) < k) {
    for (std::size_t i = 0; i < n; ++i) mass[i] = w[i] * dist2(pts[i], run.centers[static_cast<std::size_t>(nearest(pts[i], run.centers))]);
    run.centers.push_back(pts[sample_index(mass, rng)]);
  }

  run.assignment.assign(n, -1);
  for (int it = 0; it < max_iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const int c = nearest(pts[i], run.centers);
      changed = changed || c != run.assignment[i];
      run.assignment[i] = c;
    }
    // Refill empty clusters with the costliest point of a cluster that can spare one.
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int a : run.assignment) ++counts[static_cast<std::size_t>(a)];
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      double worst = -1.0;
      std::size_t pick = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const int a = run.assignment[i];
        if (counts[static_cast<std::size_t>(a)] < 2) continue;
        const double cost = w[i] * dist2(pts[i], run.centers[static_cast<std::size_t>(a)]);
        if (cost > worst) {
          worst = cost;
          pick = i;
        }
      }
      --counts[static_cast<std::size_t>(run.assignment[pick])];
      run.assignment[pick] = c;
      ++counts[static_cast<std::size_t>(c)];
      changed = true;
    }
    std::vector<Point2> sums(static_cast<std::size_t>(k), {0.0, 0.0});
    std::vector<double> wsum(static_cast<std::size_t>(k), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = static_cast<std::size_t>(run.assignment[i]);
      sums[a][0] += w[i] * pts[i][0];
      sums[a][1] += w[i] * pts[i][1];
      wsum[a] += w[i];
    }
    for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
      run.centers[c] = {sums[c][0] / wsum[c], sums[c][1] / wsum[c]};
    }
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) sse += w[i] * dist2(pts[i], run.centers[static_cast<std::size_t>(run.assignment[i])]);
    run.history.push_back(sse);
    run.sse = sse;
    if (!changed && it > 0) break;
  }
  return run;
}

// Hartigan single-point moves from a Lloyd fixed point: move point i from
// cluster a to b whenever that lowers the weighted SSE once both centroids
// shift. Every move strictly lowers the SSE, so the loop terminates.
void hartigan_refine(Run& run, const std::vector<Point2>& pts, const std::vector<double>& w, int k) {
  const std::size_t n = pts.size();
  std::vector<Point2> sums(static_cast<std::size_t>(k), {0.0, 0.0});
  std::vector<double> mass(static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = static_cast<std::size_t>(run.assignment[i]);
    sums[a][0] += w[i] * pts[i][0];
    sums[a][1] += w[i] * pts[i][1];
    mass[a] += w[i];
  }
  auto center = [&](std::size_t c) { return Point2{sums[c][0] / mass[c], sums[c][1] / mass[c]}; };
  bool moved = true;
  while (moved) {
    moved = false;
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = static_cast<std::size_t>(run.assignment[i]);
      if (mass[a] - w[i] <= 1e-12 * mass[a]) continue;  // never empty a cluster
      const double leave = w[i] * mass[a] / (mass[a] - w[i]) * dist2(pts[i], center(a));
      double best = leave;
      std::size_t target = a;
      for (std::size_t b = 0; b < static_cast<std::size_t>(k); ++b) {
        if (b == a) continue;
        const double join = w[i] * mass[b] / (mass[b] + w[i]) * dist2(pts[i], center(b));
        if (join < best - 1e-12) {
          best = join;
          target = b;
        }
      }
      if (target == a) continue;
      sums[a][0] -= w[i] * pts[i][0];
      sums[a][1] -= w[i] * pts[i][1];
      mass[a] -= w[i];
      sums[target][0] += w[i] * pts[i][0];
      sums[target][1] += w[i] * pts[i][1];
      mass[target] += w[i];
      run.assignment[i] = static_cast<int>(target);
      moved = true;
    }
  }
  double sse = 0.0;
  for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) run.centers[c] = center(c);
  for (std::size_t i = 0; i < n; ++i) sse += w[i] * dist2(pts[i], run.centers[static_cast<std::size_t>(run.assignment[i])]);
  if (sse < run.sse) {
    run.history.push_back(sse);
    run.sse = sse;
  }
}

}  // namespace

double partition_sse(const std::vector<std::array<double, 2>>& coords, const std::vector<double>& weights,
                     const std::vector<int>& assignment, int k) {
  std::vector<Point2> sums(static_cast<std::size_t>(k), {0.0, 0.0});
  std::vector<double> wsum(static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto a = static_cast<std::size_t>(assignment[i]);
    sums[a][0] += weights[i] * coords[i][0];
    sums[a][1] += weights[i] * coords[i][1];
    wsum[a] += weights[i];
  }
  double sse = 0.0;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto a = static_cast<std::size_t>(assignment[i]);
    const Point2 c = {sums[a][0] / wsum[a], sums[a][1] / wsum[a]};
    sse += weights[i] * dist2(coords[i], c);
  }
  return sse;
}

KeypointSet cluster_keypoints(const HighAttentionPoints& points, int k, Rng& rng, const KMeansOptions& options) {
  if (points.empty()) {
    throw ConfigError("cluster_keypoints: no high-attention points; lower the mass threshold");
  }
  if (k <= 0) throw ConfigError("cluster_keypoints: k must be positive");
  std::vector<Point2> pts;
  pts.reserve(points.size());
  for (const GridPoint& p : points.points) pts.push_back({static_cast<double>(p.row), static_cast<double>(p.col)});
  std::vector<double> w = points.weight;
  if (w.size() != pts.size()) w.assign(pts.size(), 1.0);

  std::set<std::pair<double, double>> distinct;
  for (const Point2& p : pts) distinct.emplace(p[0], p[1]);
  const int effective = std::min<int>(k, static_cast<int>(distinct.size()));

  Run best;
  best.sse = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, options.restarts); ++r) {
    Run run = lloyd(pts, w, effective, rng, options.max_iterations);
    hartigan_refine(run, pts, w, effective);
    if (run.sse < best.sse) best = std::move(run);
  }

  KeypointSet out;
  out.k = k;
  out.effective_k = effective;
  out.reduced = effective < k;
  out.assignment = std::move(best.assignment);
  out.sse = best.sse;
  out.sse_history = std::move(best.history);
  for (int i = 0; i < k; ++i) out.centroids.push_back(best.centers[static_cast<std::size_t>(i % effective)]);
  return out;
}

std::vector<CropBox> keypoint_crop_boxes(const KeypointSet& keys, Range scale, int patch_size, int image_height,
                                         int image_width, Rng& rng, Range aspect) {
  if (!(scale.first > 0.0 && scale.first <= scale.second && scale.second <= 1.0)) {
    throw ConfigError("keypoint_crop_boxes: need 0 < lo <= hi <= 1");
  }
  const double area = static_cast<double>(image_height) * image_width;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double log_lo = std::log(aspect.first), log_hi = std::log(aspect.second);
  std::vector<CropBox> boxes;
  boxes.reserve(keys.centroids.size());
  for (const auto& c : keys.centroids) {
    const double ratio = scale.first + (scale.second - scale.first) * unit(rng);
    const double ar = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
    const double w = std::min<double>(std::sqrt(ratio * area * ar), image_width);
    const double h = std::min<double>(std::sqrt(ratio * area / ar), image_height);
    const double cx = (c[1] + 0.5) * patch_size;
    const double cy = (c[0] + 0.5) * patch_size;
    const double left = std::clamp(cx - w / 2, 0.0, image_width - w);
    const double top = std::clamp(cy - h / 2, 0.0, image_height - h);
    boxes.push_back(CropBox::from_rect(left, top, w, h, image_height, image_width));
  }
  return boxes;
}

KeypointSet keypoints_from_attention(const AttentionMap& map, const KeypointOptions& options, Rng& rng,
                                     HighAttentionPoints* merged_out) {
  std::vector<HighAttentionPoints> per_head;
  for (int h = 0; h < map.num_heads(); ++h) per_head.push_back(head_points(map, h, options.mass_fraction));
  HighAttentionPoints merged = merge_heads(per_head);
  KeypointSet keys = cluster_keypoints(merged, options.num_keypoints, rng, options.kmeans);
  if (merged_out != nullptr) *merged_out = std::move(merged);
  return keys;
}

}  // namespace vton
