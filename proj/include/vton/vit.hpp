#pragma once

// Small Vision Transformer used both as the condition encoder (teacher) and
// as the student in self-distillation.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vton/autograd.hpp"
#include "vton/image.hpp"
#include "vton/params.hpp"

namespace vton {

struct ViTConfig {
  int image_height = 64;
  int image_width = 48;
  int patch_size = 16;
  int embed_dim = 128;
  int num_heads = 4;
  int depth = 4;
  int mlp_ratio = 4;
  int proj_dim = 256;
  int condition_dim = 128;
  // Side length local crops are resized to before encoding.
  int local_size = 32;
  std::uint64_t init_seed = 0;

  void validate() const;
  int grid_rows() const { return image_height / patch_size; }
  int grid_cols() const { return image_width / patch_size; }
  int num_patches() const { return grid_rows() * grid_cols(); }
  int head_dim() const { return embed_dim / num_heads; }

  nlohmann::json to_json() const;
  static ViTConfig from_json(const nlohmann::json& j);
};

// Class-token attention over patch keys, one row per head.
struct AttentionMap {
  int rows = 0;
  int cols = 0;
  Mat head_rows;  // num_heads x (rows * cols), each row sums to 1

  int num_heads() const { return static_cast<int>(head_rows.rows()); }
  int num_patches() const { return rows * cols; }
  RowVec head_average() const { return head_rows.colwise().mean(); }
};

// Class token followed by patch tokens, mapped to condition_dim.
struct ConditionEmbedding {
  Mat tokens;  // (1 + P) x condition_dim
  Eigen::Index token_count() const { return tokens.rows(); }
};

// Builds a fresh parameter set: truncated-normal(0.02) weights, zero biases,
// unit norm gains, seeded from config.init_seed.
ParamStore init_vit_params(const ViTConfig& config);

// Throws ShapeError unless every array has the shape the config dictates.
void validate_vit_params(const ParamStore& params, const ViTConfig& config);

struct ViTOutput {
  ConditionEmbedding condition;
  AttentionMap attention;  // class-token attention of the requested layer
  RowVec class_token;      // final-norm class token, embed_dim wide
  RowVec logits;           // projection head output, proj_dim wide
  Vec proj_dist;           // softmax(logits); callers apply their own temperature
};

// Inference pass. `attention_layer` < 0 selects the final layer.
ViTOutput vit_forward(const ParamStore& params, const Image& image, const ViTConfig& config,
                      int attention_layer = -1);

AttentionMap extract_class_attention(const ParamStore& params, const Image& image, const ViTConfig& config,
                                     int layer);

// Tokenwise affine map of backbone tokens (width embed_dim) to condition_dim.
ConditionEmbedding project_condition(const ParamStore& params, const Mat& backbone_tokens, const ViTConfig& config);

// Differentiable pass recorded on a tape.
struct ViTGraph {
  Var tokens;  // final-norm tokens, (1 + P) x embed_dim
  Var logits;  // 1 x proj_dim
  // Per layer: num_heads x (1 + P) class-token attention rows including the
  // class-token key.
  std::vector<Mat> class_attention;
  int grid_rows = 0;
  int grid_cols = 0;
};

using ParamFetch = std::function<Var(const std::string&)>;

ViTGraph vit_graph(Tape& tape, const ParamFetch& fetch, const Image& image, const ViTConfig& config);
// Convenience: every parameter as a differentiable leaf.
ViTGraph vit_graph(Tape& tape, ParamStore& params, const Image& image, const ViTConfig& config);

// Patch-key attention of one class-token row set, renormalized per head.
AttentionMap patch_attention(const Mat& class_rows, int grid_rows, int grid_cols);

// Bilinear (half-pixel centres) resampling operator from a src grid to a
// dst grid, as a (dst_rows*dst_cols) x (src_rows*src_cols) sparse matrix.
SparseMat bilinear_operator(int src_rows, int src_cols, int dst_rows, int dst_cols);

// Flattened non-overlapping patches, one row per patch, (py, px, c) order.
Mat extract_patches(const Image& image, int patch_size);

void save_vit(const ParamStore& params, const ViTConfig& config, const std::filesystem::path& file,
              const std::string& tag);
std::pair<ParamStore, ViTConfig> load_vit(const std::filesystem::path& file);

}  // namespace vton
