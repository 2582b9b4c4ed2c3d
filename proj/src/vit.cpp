#include "vton/vit.hpp"

#include <cmath>

#include "vton/errors.hpp"

namespace vton {

void ViTConfig::validate() const {
  if (image_height <= 0 || image_width <= 0 || patch_size <= 0 || embed_dim <= 0 || num_heads <= 0 ||
      depth <= 0 || mlp_ratio <= 0 || proj_dim <= 0 || condition_dim <= 0 || local_size <= 0) {
    throw ConfigError("vit: all dimensions must be strictly positive");
  }
  if (image_height % patch_size != 0 || image_width % patch_size != 0) {
    throw ConfigError("vit: image size " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                      " is not divisible by patch size " + std::to_string(patch_size));
  }
  if (local_size % patch_size != 0) throw ConfigError("vit: local_size must be divisible by patch_size");
  if (embed_dim % num_heads != 0) throw ConfigError("vit: embed_dim must be divisible by num_heads");
}

nlohmann::json ViTConfig::to_json() const {
  return {{"image_height", image_height}, {"image_width", image_width}, {"patch_size", patch_size},
          {"embed_dim", embed_dim},       {"num_heads", num_heads},     {"depth", depth},
          {"mlp_ratio", mlp_ratio},       {"proj_dim", proj_dim},       {"condition_dim", condition_dim},
          {"local_size", local_size},     {"init_seed", init_seed}};
}

ViTConfig ViTConfig::from_json(const nlohmann::json& j) {
  ViTConfig c;
  try {
    c.image_height = j.at("image_height");
    c.image_width = j.at("image_width");
    c.patch_size = j.at("patch_size");
    c.embed_dim = j.at("embed_dim");
    c.num_heads = j.at("num_heads");
    c.depth = j.at("depth");
    c.mlp_ratio = j.at("mlp_ratio");
    c.proj_dim = j.at("proj_dim");
    c.condition_dim = j.at("condition_dim");
    c.local_size = j.at("local_size");
    c.init_seed = j.at("init_seed");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("vit config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

struct Shape {
  std::string name;
  Eigen::Index rows, cols;
  enum class Init { kWeight, kZero, kOne, kUnitColumns } init;
};

std::vector<Shape> vit_shapes(const ViTConfig& c) {
  using I = Shape::Init;
  const Eigen::Index d = c.embed_dim, p = c.num_patches();
  const Eigen::Index patch_dim = static_cast<Eigen::Index>(c.patch_size) * c.patch_size * 3;
  const Eigen::Index hidden = d * c.mlp_ratio;
  std::vector<Shape> s = {
      {"patch_embed.w", patch_dim, d, I::kWeight},
      {"patch_embed.b", 1, d, I::kZero},
      {"cls_token", 1, d, I::kWeight},
      {"pos_embed", 1 + p, d, I::kWeight},
  };
  for (int l = 0; l < c.depth; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    s.push_back({b + "norm1.g", 1, d, I::kOne});
    s.push_back({b + "norm1.b", 1, d, I::kZero});
    s.push_back({b + "attn.qkv.w", d, 3 * d, I::kWeight});
    s.push_back({b + "attn.qkv.b", 1, 3 * d, I::kZero});
    s.push_back({b + "attn.proj.w", d, d, I::kWeight});
    s.push_back({b + "attn.proj.b", 1, d, I::kZero});
    s.push_back({b + "norm2.g", 1, d, I::kOne});
    s.push_back({b + "norm2.b", 1, d, I::kZero});
    s.push_back({b + "mlp.fc1.w", d, hidden, I::kWeight});
    s.push_back({b + "mlp.fc1.b", 1, hidden, I::kZero});
    s.push_back({b + "mlp.fc2.w", hidden, d, I::kWeight});
    s.push_back({b + "mlp.fc2.b", 1, d, I::kZero});
  }
  s.push_back({"norm.g", 1, d, I::kOne});
  s.push_back({"norm.b", 1, d, I::kZero});
  s.push_back({"head.fc1.w", d, d, I::kWeight});
  s.push_back({"head.fc1.b", 1, d, I::kZero});
  s.push_back({"head.fc2.w", d, c.proj_dim, I::kUnitColumns});
  s.push_back({"head.fc2.b", 1, c.proj_dim, I::kZero});
  s.push_back({"cond.w", d, c.condition_dim, I::kWeight});
  s.push_back({"cond.b", 1, c.condition_dim, I::kZero});
  return s;
}

Var linear(Tape&, const ParamFetch& fetch, Var x, const std::string& prefix) {
  return ag::add_row(ag::matmul(x, fetch(prefix + ".w")), fetch(prefix + ".b"));
}

}  // namespace

ParamStore init_vit_params(const ViTConfig& config) {
  config.validate();
  Rng rng(config.init_seed);
  ParamStore params;
  for (const Shape& s : vit_shapes(config)) {
    Mat& m = params.add(s.name, s.rows, s.cols);
    switch (s.init) {
      case Shape::Init::kWeight: init_trunc_normal(m, 0.02, rng); break;
      case Shape::Init::kZero: m.setZero(); break;
      case Shape::Init::kOne: m.setOnes(); break;
      // columns of roughly unit norm, so logits start on the cosine scale
      case Shape::Init::kUnitColumns: init_trunc_normal(m, 1.0 / std::sqrt(static_cast<double>(m.rows())), rng); break;
    }
  }
  return params;
}

void validate_vit_params(const ParamStore& params, const ViTConfig& config) {
  const auto shapes = vit_shapes(config);
  if (shapes.size() != params.size()) throw ShapeError("vit params: unexpected array count");
  for (const Shape& s : shapes) {
    if (!params.contains(s.name)) throw ShapeError("vit params: missing '" + s.name + "'");
    const Mat& m = params.value(s.name);
    if (m.rows() != s.rows || m.cols() != s.cols) throw ShapeError("vit params: bad shape for '" + s.name + "'");
  }
  if (!params.all_finite()) throw NumericalError("vit params: non-finite values");
}

Mat extract_patches(const Image& image, int patch_size) {
  if (image.channels() != 3) throw ShapeError("vit: expected an RGB image");
  const int rows = image.height() / patch_size, cols = image.width() / patch_size;
  Mat out(static_cast<Eigen::Index>(rows) * cols, static_cast<Eigen::Index>(patch_size) * patch_size * 3);
  for (int gr = 0; gr < rows; ++gr) {
    for (int gc = 0; gc < cols; ++gc) {
      const Eigen::Index r = static_cast<Eigen::Index>(gr) * cols + gc;
      Eigen::Index k = 0;
      for (int py = 0; py < patch_size; ++py)
        for (int px = 0; px < patch_size; ++px)
          for (int ch = 0; ch < 3; ++ch) out(r, k++) = image.at(gr * patch_size + py, gc * patch_size + px, ch);
    }
  }
  return out;
}

SparseMat bilinear_operator(int src_rows, int src_cols, int dst_rows, int dst_cols) {
  std::vector<Eigen::Triplet<double>> trips;
  auto axis = [](int dst, int src, int i) {
    double s = (i + 0.5) * static_cast<double>(src) / dst - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, src - 1);
    return std::tuple<int, int, double>{i0, i1, s - i0};
  };
  for (int r = 0; r < dst_rows; ++r) {
    const auto [r0, r1, fr] = axis(dst_rows, src_rows, r);
    for (int c = 0; c < dst_cols; ++c) {
      const auto [c0, c1, fc] = axis(dst_cols, src_cols, c);
      const int row = r * dst_cols + c;
      trips.emplace_back(row, r0 * src_cols + c0, (1 - fr) * (1 - fc));
      trips.emplace_back(row, r0 * src_cols + c1, (1 - fr) * fc);
      trips.emplace_back(row, r1 * src_cols + c0, fr * (1 - fc));
      trips.emplace_back(row, r1 * src_cols + c1, fr * fc);
    }
  }
  SparseMat op(static_cast<Eigen::Index>(dst_rows) * dst_cols, static_cast<Eigen::Index>(src_rows) * src_cols);
  op.setFromTriplets(trips.begin(), trips.end());  // duplicate entries are summed
  return op;
}

ViTGraph vit_graph(Tape& tape, const ParamFetch& fetch, const Image& image, const ViTConfig& config) {
  const bool global = image.height() == config.image_height && image.width() == config.image_width;
  const bool local = image.height() == config.local_size && image.width() == config.local_size;
  if (!global && !local) {
    throw ConfigError("vit: input " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                      " matches neither the global size " + std::to_string(config.image_height) + "x" +
                      std::to_string(config.image_width) + " nor the local size " +
                      std::to_string(config.local_size));
  }
  const int d = config.embed_dim, heads = config.num_heads, hd = config.head_dim();
  ViTGraph g;
  g.grid_rows = image.height() / config.patch_size;
  g.grid_cols = image.width() / config.patch_size;
  const int p = g.grid_rows * g.grid_cols;

  Var patches = tape.constant(extract_patches(image, config.patch_size));
  Var x = linear(tape, fetch, patches, "patch_embed");
  x = ag::concat_rows({fetch("cls_token"), x});

  Var pos = fetch("pos_embed");
  if (g.grid_rows != config.grid_rows() || g.grid_cols != config.grid_cols()) {
    Var cls_pos = ag::slice_rows(pos, 0, 1);
    Var patch_pos = ag::slice_rows(pos, 1, config.num_patches());
    patch_pos =
        ag::apply_left(bilinear_operator(config.grid_rows(), config.grid_cols(), g.grid_rows, g.grid_cols), patch_pos);
    pos = ag::concat_rows({cls_pos, patch_pos});
  }
  x = ag::add(x, pos);

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int l = 0; l < config.depth; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    Var h = ag::layer_norm(x, fetch(b + "norm1.g"), fetch(b + "norm1.b"));
    Var qkv = linear(tape, fetch, h, b + "attn.qkv");
    std::vector<Var> outs;
    Mat cls_rows(heads, 1 + p);
    for (int head = 0; head < heads; ++head) {
      Var q = ag::slice_cols(qkv, head * hd, hd);
      Var k = ag::slice_cols(qkv, d + head * hd, hd);
      Var v = ag::slice_cols(qkv, 2 * d + head * hd, hd);
      Var att = ag::softmax_rows(ag::scale(ag::matmul_nt(q, k), inv_sqrt));
      cls_rows.row(head) = att.value().row(0);
      outs.push_back(ag::matmul(att, v));
    }
    g.class_attention.push_back(std::move(cls_rows));
    Var merged = outs.size() == 1 ? outs.front() : ag::concat_cols(outs);
    x = ag::add(x, linear(tape, fetch, merged, b + "attn.proj"));
    Var h2 = ag::layer_norm(x, fetch(b + "norm2.g"), fetch(b + "norm2.b"));
    Var mlp = linear(tape, fetch, ag::gelu(linear(tape, fetch, h2, b + "mlp.fc1")), b + "mlp.fc2");
    x = ag::add(x, mlp);
    if (!x.value().allFinite()) throw NumericalError("vit: non-finite activation in layer " + std::to_string(l));
  }
  g.tokens = ag::layer_norm(x, fetch("norm.g"), fetch("norm.b"));
  Var cls = ag::slice_rows(g.tokens, 0, 1);
  Var bottleneck = ag::l2_normalize_rows(ag::gelu(linear(tape, fetch, cls, "head.fc1")));
  g.logits = linear(tape, fetch, bottleneck, "head.fc2");
  if (!g.logits.value().allFinite()) throw NumericalError("vit: non-finite projection head output");
  return g;
}

ViTGraph vit_graph(Tape& tape, ParamStore& params, const Image& image, const ViTConfig& config) {
  return vit_graph(
      tape, [&](const std::string& name) { return tape.param(params, name); }, image, config);
}

AttentionMap patch_attention(const Mat& class_rows, int grid_rows, int grid_cols) {
  const Eigen::Index p = static_cast<Eigen::Index>(grid_rows) * grid_cols;
  if (class_rows.cols() != p + 1) throw ShapeError("patch_attention: row width does not match the grid");
  AttentionMap map;
  map.rows = grid_rows;
  map.cols = grid_cols;
  map.head_rows = class_rows.rightCols(p);
  for (Eigen::Index h = 0; h < map.head_rows.rows(); ++h) {
    const double s = map.head_rows.row(h).sum();
    if (!(s > 0.0)) throw NumericalError("patch_attention: head " + std::to_string(h) + " has no patch mass");
    map.head_rows.row(h) /= s;
  }
  return map;
}

ConditionEmbedding project_condition(const ParamStore& params, const Mat& backbone_tokens, const ViTConfig& config) {
  if (backbone_tokens.cols() != config.embed_dim) {
    throw ShapeError("project_condition: token width " + std::to_string(backbone_tokens.cols()) + " != embed_dim " +
                     std::to_string(config.embed_dim));
  }
  const Mat& w = params.value("cond.w");
  const Mat& b = params.value("cond.b");
  ConditionEmbedding out;
  out.tokens = (backbone_tokens * w).rowwise() + b.row(0);
  return out;
}

namespace {

ParamFetch constant_fetch(Tape& tape, const ParamStore& params) {
  return [&tape, &params](const std::string& name) { return tape.constant(params.value(name)); };
}

}  // namespace

ViTOutput vit_forward(const ParamStore& params, const Image& image, const ViTConfig& config, int attention_layer) {
  config.validate();
  if (attention_layer >= config.depth) throw ConfigError("vit: attention layer out of range");
  Tape tape;
  ViTGraph g = vit_graph(tape, constant_fetch(tape, params), image, config);
  ViTOutput out;
  const int layer = attention_layer < 0 ? config.depth - 1 : attention_layer;
  out.attention = patch_attention(g.class_attention[static_cast<std::size_t>(layer)], g.grid_rows, g.grid_cols);
  out.condition = project_condition(params, g.tokens.value(), config);
  out.class_token = g.tokens.value().row(0);
  out.logits = g.logits.value().row(0);
  out.proj_dist = softmax_rows(g.logits.value()).row(0).transpose();
  if (!out.condition.tokens.allFinite()) throw NumericalError("vit: non-finite condition tokens");
  return out;
}

AttentionMap extract_class_attention(const ParamStore& params, const Image& image, const ViTConfig& config,
                                     int layer) {
  if (layer < 0 || layer >= config.depth) {
    throw ConfigError("extract_class_attention: layer " + std::to_string(layer) + " outside [0, " +
                      std::to_string(config.depth) + ")");
  }
  return vit_forward(params, image, config, layer).attention;
}

void save_vit(const ParamStore& params, const ViTConfig& config, const std::filesystem::path& file,
              const std::string& tag) {
  save_arrays(params, file, {{"kind", "vit"}, {"tag", tag}, {"config", config.to_json()}});
}

std::pair<ParamStore, ViTConfig> load_vit(const std::filesystem::path& file) {
  ArrayContainer c = load_arrays(file);
  if (c.meta.value("kind", "") != "vit") throw IoError(file.string() + " is not a vit checkpoint");
  ViTConfig config = ViTConfig::from_json(c.meta.at("config"));
  ParamStore params = init_vit_params(config);
  assign_checked(params, c.arrays);
  return {std::move(params), config};
}

}  // namespace vton
