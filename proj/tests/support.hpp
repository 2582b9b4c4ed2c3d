#pragma once
// Shared fixtures for the unit tests and the acceptance binary.
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "vton/autograd.hpp"
#include "vton/image.hpp"
#include "vton/params.hpp"

namespace vton::testing {

inline Image random_image(int h, int w, Rng& rng, int channels = 3) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w, channels);
  for (double& v : img.data()) v = u(rng);
  return img;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Image checker(int h, int w, int cell) {
  Image img(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = ((y / cell + x / cell) % 2 == 0) ? 0.9 : 0.1;
      img.at(y, x, 0) = v;
      img.at(y, x, 1) = 1.0 - v;
      img.at(y, x, 2) = 0.5 * v;
    }
  return img;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const char* env = std::getenv("VTON_TEST_TMP");
  std::filesystem::path base = env != nullptr ? env : std::filesystem::temp_directory_path() / "vton_tests";
  const std::filesystem::path dir = base / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline double rel_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// Central difference of f with respect to one entry of a parameter array.
template <class F>
double central_difference(ParamStore& params, const std::string& name, Eigen::Index index, F&& f, double h = 1e-5) {
  double& w = params.value(name).data()[index];
  const double saved = w;
  w = saved + h;
  const double up = f();
  w = saved - h;
  const double down = f();
  w = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace vton::testing
