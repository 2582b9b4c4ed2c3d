#pragma once

// Parameter initialization, the on-disk array container, and the optimizer.
//
// Container layout (all integers little-endian):
//   magic "VTONARR1" (8 bytes)
//   u32 format_version, u32 array_count
//   per array: u32 name_len, name bytes, u32 rows, u32 cols, rows*cols float32 (row-major)
// A JSON sidecar `<file>.json` carries the model config, a tag, and the
// same format_version.

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>

#include <json.hpp>

#include "vton/autograd.hpp"

namespace vton {

using Rng = std::mt19937_64;

constexpr std::uint32_t kContainerVersion = 1;

// Truncated normal in [-2 std, 2 std].
void init_trunc_normal(Mat& m, double stddev, Rng& rng);

struct ArrayContainer {
  std::map<std::string, Mat> arrays;
  nlohmann::json meta;
};

void save_arrays(const ParamStore& params, const std::filesystem::path& file, nlohmann::json meta);
ArrayContainer load_arrays(const std::filesystem::path& file);
// Copies every array of `src` into `dst`; names and shapes must match exactly.
void assign_checked(ParamStore& dst, const std::map<std::string, Mat>& src);

// Elementwise teacher <- lambda * teacher + (1 - lambda) * student.
void ema_update(ParamStore& teacher, const ParamStore& student, double lambda);

// Adam with decoupled weight decay. Decay is skipped for biases, norms,
// and tokens (arrays with a single row).
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.04)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}
  void step(ParamStore& params, double lr);
  long steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::map<std::string, std::pair<Mat, Mat>> moments_;
};

// Cosine interpolation from `start` (progress 0) to `end` (progress 1).
double cosine_schedule(double start, double end, double progress);

// Lowercase hex SHA-1 of "blob <len>\0" + bytes, as git computes object ids.
std::string git_blob_hash(std::string_view bytes);
std::string git_blob_hash_file(const std::filesystem::path& file);

}  // namespace vton
