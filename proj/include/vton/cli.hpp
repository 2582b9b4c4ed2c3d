#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "vton/config.hpp"
#include "vton/image.hpp"
#include "vton/keypoints.hpp"

namespace vton {

// Exit codes shared by every subcommand.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitUsage = 2, kExitNumerical = 3 };

// Entry point for `vton <command> [flags]`; argv[0] is the program name.
int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

// Heatmap of a patch-grid attention row blended over the image, upscaled by `scale`.
Image attention_overlay(const Image& image, const RowVec& attention, int grid_rows, int grid_cols, int scale = 4);
// Image upscaled by `scale` with red disks at keypoint centroids and small
// yellow dots at merged high-attention points.
Image keypoint_overlay(const Image& image, const KeypointSet& keys, const HighAttentionPoints& points, int patch_size,
                       int scale = 4);

}  // namespace vton
