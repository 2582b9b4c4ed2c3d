#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vton/autograd.hpp"

namespace vton {

// Height x width x channels of float64 samples, row-major, channels last.
// Pixel images hold values in [0,1]; normalized network inputs may not.
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels = 3, double fill = 0.0);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  bool empty() const { return data_.empty(); }
  std::size_t size() const { return data_.size(); }

  double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }
  // Sample with coordinates clamped to the border.
  double clamped(int y, int x, int c) const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
  }
  bool operator==(const Image& other) const = default;

  // (h*w) x channels matrix, row index y*w + x.
  Mat to_grid() const;
  static Image from_grid(const Mat& grid, int height, int width);

  void clamp01();
  bool all_finite() const;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

// Single-channel binary mask stored as an Image with one channel.
using Mask = Image;

constexpr std::array<double, 3> kLuminance = {0.299, 0.587, 0.114};

Image to_gray(const Image& rgb);

// 8-bit PNG/JPEG IO. Channels are RGB on the C++ side.
Image read_image(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);
// Reads a mask and binarizes at 0.5.
Mask read_mask(const std::filesystem::path& path);
std::vector<std::uint8_t> to_bytes(const Image& image);

}  // namespace vton
