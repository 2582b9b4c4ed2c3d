#pragma once
// Brute-force references shared by the unit tests and the acceptance binary.
#include <array>
#include <cmath>
#include <limits>
#include <set>
#include <vector>

namespace vton::testing {

// Minimum weighted within-cluster SSE over every assignment of n points to at
// most k labels. Exponential; meant for n <= 10.
inline double exhaustive_kmeans_sse(const std::vector<std::array<double, 2>>& pts, const std::vector<double>& w,
                                    int k) {
  const std::size_t n = pts.size();
  std::vector<int> label(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    double sse = 0.0;
    for (int c = 0; c < k; ++c) {
      double sw = 0.0, sr = 0.0, sc = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if (label[i] == c) {
          sw += w[i];
          sr += w[i] * pts[i][0];
          sc += w[i] * pts[i][1];
        }
      if (sw == 0.0) continue;
      for (std::size_t i = 0; i < n; ++i)
        if (label[i] == c) {
          const double dr = pts[i][0] - sr / sw, dc = pts[i][1] - sc / sw;
          sse += w[i] * (dr * dr + dc * dc);
        }
    }
    best = std::min(best, sse);
    std::size_t pos = 0;
    while (pos < n && ++label[pos] == k) label[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

}  // namespace vton::testing
