#include "vton/image.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>

#include "vton/errors.hpp"

namespace vton {

Image::Image(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  if (height <= 0 || width <= 0 || channels <= 0) throw ShapeError("image dimensions must be positive");
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

double Image::clamped(int y, int x, int c) const {
  y = std::clamp(y, 0, height_ - 1);
  x = std::clamp(x, 0, width_ - 1);
  return at(y, x, c);
}

Mat Image::to_grid() const {
  Mat out(static_cast<Eigen::Index>(height_) * width_, channels_);
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x)
      for (int c = 0; c < channels_; ++c) out(static_cast<Eigen::Index>(y) * width_ + x, c) = at(y, x, c);
  return out;
}

Image Image::from_grid(const Mat& grid, int height, int width) {
  if (grid.rows() != static_cast<Eigen::Index>(height) * width) throw ShapeError("from_grid: row count mismatch");
  Image out(height, width, static_cast<int>(grid.cols()));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < out.channels(); ++c) out.at(y, x, c) = grid(static_cast<Eigen::Index>(y) * width + x, c);
  return out;
}

void Image::clamp01() {
  for (double& v : data_) v = std::clamp(v, 0.0, 1.0);
}

bool Image::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Image to_gray(const Image& rgb) {
  if (rgb.channels() == 1) return rgb;
  if (rgb.channels() != 3) throw ShapeError("to_gray: expected 3 channels");
  Image out(rgb.height(), rgb.width(), 1);
  for (int y = 0; y < rgb.height(); ++y)
    for (int x = 0; x < rgb.width(); ++x)
      out.at(y, x, 0) = kLuminance[0] * rgb.at(y, x, 0) + kLuminance[1] * rgb.at(y, x, 1) +
                        kLuminance[2] * rgb.at(y, x, 2);
  return out;
}

std::vector<std::uint8_t> to_bytes(const Image& image) {
  std::vector<std::uint8_t> out(image.size());
  auto src = image.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(src[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

Image read_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw IoError("cannot read image " + path.string());
  Image out(m.rows, m.cols, 3);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < m.cols; ++x) {
      // OpenCV stores BGR.
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = row[x][2 - c] / 255.0;
    }
  }
  return out;
}

Mask read_mask(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw IoError("cannot read mask " + path.string());
  Mask out(m.rows, m.cols, 1);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) out.at(y, x, 0) = row[x] / 255.0 >= 0.5 ? 1.0 : 0.0;
  }
  return out;
}

void write_png(const Image& image, const std::filesystem::path& path) {
  if (image.channels() != 1 && image.channels() != 3) throw ShapeError("write_png: need 1 or 3 channels");
  const auto bytes = to_bytes(image);
  cv::Mat m(image.height(), image.width(), image.channels() == 3 ? CV_8UC3 : CV_8UC1);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < image.width(); ++x) {
      const std::size_t base = (static_cast<std::size_t>(y) * image.width() + x) * image.channels();
      if (image.channels() == 3) {
        row[3 * x + 0] = bytes[base + 2];
        row[3 * x + 1] = bytes[base + 1];
        row[3 * x + 2] = bytes[base + 0];
      } else {
        row[x] = bytes[base];
      }
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write " + path.string());
}

}  // namespace vton
