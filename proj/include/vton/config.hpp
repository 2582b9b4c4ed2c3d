#pragma once

// Flat `key = value` experiment configuration with dotted namespaces.
// Lines starting with '#' and blank lines are ignored. Every key maps to one
// typed field; unknown keys and unparsable values are configuration errors.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "vton/augment.hpp"
#include "vton/diffusion.hpp"
#include "vton/metrics.hpp"
#include "vton/ssl.hpp"
#include "vton/vit.hpp"

namespace vton {

struct ScheduleParams {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::string shape = "linear";
};

struct InpaintTrainParams {
  int epochs = 2;
  int batch_size = 4;
  double learning_rate = 1e-3;
  double min_learning_rate = 1e-5;
};

struct SampleParams {
  int steps = 100;
  std::string method = "plms";
};

struct GenParams {
  int pairs = 50;
  double test_fraction = 0.2;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string data_root = "data";
  std::string out_dir = "out";
  std::string crop_mode = "keypoint";
  std::string encoder_checkpoint;
  std::string denoiser_checkpoint;
  std::string infer_dir;  // eval input: directory written by `infer`
  std::string split = "test";
  int limit = 0;  // 0 = all records of the split

  ViTConfig vit;
  DistillConfig ssl;
  AugmentPolicy augment;
  ScheduleParams schedule;
  DenoiserConfig denoiser;
  InpaintTrainParams inpaint;
  SampleParams sample;
  SsimOptions ssim;
  GenParams gen;

  // Sets one key from its text value. Throws ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  // Every key with its current value, sorted by key.
  std::map<std::string, std::string> snapshot() const;
  // Cross-field checks; throws ConfigError naming the failing key.
  void validate() const;
  // Derives every module seed from one global seed. The parser applies explicit
  // module seed keys afterwards, so they win regardless of line order.
  void apply_seed(std::uint64_t s);
};

ExperimentConfig load_config(const std::filesystem::path& file);
// Parses `key = value` text into an existing config.
void parse_config_text(const std::string& text, ExperimentConfig& config, const std::string& source = "<text>");
std::string render_config(const ExperimentConfig& config);

}  // namespace vton
