#include <doctest.h>

#include "support.hpp"
#include "vton/errors.hpp"
#include "vton/vit.hpp"

using namespace vton;
using vton::testing::checker;
using vton::testing::random_image;
using vton::testing::random_mat;

namespace {

ViTConfig toy_config() {
  ViTConfig c;
  c.image_height = 8;
  c.image_width = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.num_heads = 1;
  c.depth = 1;
  c.mlp_ratio = 2;
  c.proj_dim = 5;
  c.condition_dim = 6;
  c.local_size = 4;
  c.init_seed = 21;
  return c;
}

// Make every array non-trivial so biases and gains are exercised too.
ParamStore perturbed(const ViTConfig& c, double scale = 0.3) {
  ParamStore p = init_vit_params(c);
  Rng rng(c.init_seed + 1000);
  for (const std::string& n : p.names()) p.value(n) += random_mat(p.value(n).rows(), p.value(n).cols(), rng, scale);
  return p;
}

// Scalar-loop forward pass written without the library's graph code.
struct Oracle {
  std::vector<std::vector<double>> tokens;
  std::vector<double> cls_attention;  // over 1 + P keys
  std::vector<double> logits;
};

using Rows = std::vector<std::vector<double>>;

Rows affine(const Rows& x, const Mat& w, const Mat& b) {
  Rows out(x.size(), std::vector<double>(static_cast<std::size_t>(w.cols())));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      double s = b(0, j);
      for (Eigen::Index k = 0; k < w.rows(); ++k) s += x[i][static_cast<std::size_t>(k)] * w(k, j);
      out[i][static_cast<std::size_t>(j)] = s;
    }
  return out;
}

Rows lnorm(const Rows& x, const Mat& g, const Mat& b) {
  Rows out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mu = 0.0, var = 0.0;
    for (double v : x[i]) mu += v / n;
    for (double v : x[i]) var += (v - mu) * (v - mu) / n;
    for (std::size_t j = 0; j < x[i].size(); ++j)
      out[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-6) * g(0, static_cast<Eigen::Index>(j)) +
                  b(0, static_cast<Eigen::Index>(j));
  }
  return out;
}

double gelu_ref(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

Oracle oracle_forward(const ParamStore& p, const Image& img, int patch) {
  const int gr = img.height() / patch, gc = img.width() / patch;
  Rows patches;
  for (int r = 0; r < gr; ++r)
    for (int c = 0; c < gc; ++c) {
      std::vector<double> v;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          for (int ch = 0; ch < 3; ++ch) v.push_back(img.at(r * patch + y, c * patch + x, ch));
      patches.push_back(v);
    }
  Rows x = affine(patches, p.value("patch_embed.w"), p.value("patch_embed.b"));
  std::vector<double> cls(static_cast<std::size_t>(p.value("cls_token").cols()));
  for (std::size_t j = 0; j < cls.size(); ++j) cls[j] = p.value("cls_token")(0, static_cast<Eigen::Index>(j));
  x.insert(x.begin(), cls);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x[i].size(); ++j)
      x[i][j] += p.value("pos_embed")(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));

  const std::size_t n = x.size(), d = x[0].size();
  const Rows h = lnorm(x, p.value("blocks.0.norm1.g"), p.value("blocks.0.norm1.b"));
  const Rows qkv = affine(h, p.value("blocks.0.attn.qkv.w"), p.value("blocks.0.attn.qkv.b"));
  Rows att(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += qkv[i][j] * qkv[k][d + j];
      att[i][k] = s / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, att[i][k]);
    }
    double z = 0.0;
    for (std::size_t k = 0; k < n; ++k) z += (att[i][k] = std::exp(att[i][k] - mx));
    for (std::size_t k = 0; k < n; ++k) att[i][k] /= z;
  }
  Rows mixed(n, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < d; ++j) mixed[i][j] += att[i][k] * qkv[k][2 * d + j];
  const Rows proj = affine(mixed, p.value("blocks.0.attn.proj.w"), p.value("blocks.0.attn.proj.b"));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x[i][j] += proj[i][j];
  Rows hidden = affine(lnorm(x, p.value("blocks.0.norm2.g"), p.value("blocks.0.norm2.b")),
                       p.value("blocks.0.mlp.fc1.w"), p.value("blocks.0.mlp.fc1.b"));
  for (auto& row : hidden)
    for (double& v : row) v = gelu_ref(v);
  const Rows mlp = affine(hidden, p.value("blocks.0.mlp.fc2.w"), p.value("blocks.0.mlp.fc2.b"));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x[i][j] += mlp[i][j];

  Oracle o;
  o.tokens = lnorm(x, p.value("norm.g"), p.value("norm.b"));
  o.cls_attention = att[0];
  Rows head = affine({o.tokens[0]}, p.value("head.fc1.w"), p.value("head.fc1.b"));
  double norm2 = 0.0;
  for (double& v : head[0]) {
    v = gelu_ref(v);
    norm2 += v * v;
  }
  for (double& v : head[0]) v /= std::sqrt(norm2 + 1e-12);
  o.logits = affine(head, p.value("head.fc2.w"), p.value("head.fc2.b"))[0];
  return o;
}

std::vector<double> softmax_ref(const std::vector<double>& v) {
  double mx = *std::max_element(v.begin(), v.end()), z = 0.0;
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) z += (out[i] = std::exp(v[i] - mx));
  for (double& x : out) x /= z;
  return out;
}

}  // namespace

TEST_CASE("token count follows the patch grid") {
  ViTConfig c;
  c.depth = 1;
  const ParamStore p = init_vit_params(c);
  const Image img(64, 48, 3, 0.5);
  const ViTOutput out = vit_forward(p, img, c);
  CHECK(c.num_patches() == 12);
  CHECK(out.condition.tokens.rows() == 13);
  CHECK(out.condition.tokens.cols() == c.condition_dim);
  CHECK(out.attention.rows == 4);
  CHECK(out.attention.cols == 3);
}

TEST_CASE("depth-1 single-head forward matches the scalar-loop oracle") {
  const ViTConfig c = toy_config();
  const ParamStore p = perturbed(c);
  const Image img = checker(8, 8, 2);
  const ViTOutput out = vit_forward(p, img, c);
  const Oracle o = oracle_forward(p, img, c.patch_size);
  const std::vector<double> dist = softmax_ref(o.logits);
  for (int k = 0; k < c.proj_dim; ++k) CHECK(out.proj_dist(k) == doctest::Approx(dist[static_cast<std::size_t>(k)]).epsilon(1e-12));
  for (std::size_t j = 0; j < o.tokens[0].size(); ++j)
    CHECK(out.class_token(static_cast<Eigen::Index>(j)) == doctest::Approx(o.tokens[0][j]).epsilon(1e-12));
  const Rows cond = affine(o.tokens, p.value("cond.w"), p.value("cond.b"));
  REQUIRE(out.condition.tokens.rows() == 5);
  for (std::size_t i = 0; i < cond.size(); ++i)
    for (std::size_t j = 0; j < cond[i].size(); ++j)
      CHECK(out.condition.tokens(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) ==
            doctest::Approx(cond[i][j]).epsilon(1e-12));

  // Attention restricted to patch keys, renormalised.
  double patch_mass = 0.0;
  for (std::size_t k = 1; k < o.cls_attention.size(); ++k) patch_mass += o.cls_attention[k];
  for (int k = 0; k < 4; ++k)
    CHECK(out.attention.head_rows(0, k) == doctest::Approx(o.cls_attention[static_cast<std::size_t>(k) + 1] / patch_mass).epsilon(1e-12));

  // Frozen oracle output for this seed.
  const double frozen[5] = {0.099940231319665659, 0.41576728316276923, 0.13075781683019722, 0.12959030298873947,
                           0.2239443656986283};
  for (int k = 0; k < 5; ++k) CHECK(dist[static_cast<std::size_t>(k)] == doctest::Approx(frozen[k]).epsilon(1e-9));
}

TEST_CASE("condition projection is a tokenwise affine map") {
  const ViTConfig c = toy_config();
  ParamStore p = perturbed(c);
  Rng rng(5);
  const Mat tokens = random_mat(5, c.embed_dim, rng);

  SUBCASE("matches an explicit product") {
    const Mat got = project_condition(p, tokens, c).tokens;
    const Mat& w = p.value("cond.w");
    const Mat& b = p.value("cond.b");
    for (Eigen::Index i = 0; i < tokens.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        double s = b(0, j);
        for (Eigen::Index k = 0; k < w.rows(); ++k) s += tokens(i, k) * w(k, j);
        CHECK(got(i, j) == doctest::Approx(s).epsilon(1e-13));
      }
  }
  SUBCASE("identity and zero maps") {
    ViTConfig sq = c;
    sq.condition_dim = sq.embed_dim;
    ParamStore q = perturbed(sq);
    q.value("cond.w").setIdentity();
    q.value("cond.b").setZero();
    CHECK(project_condition(q, tokens, sq).tokens.isApprox(tokens, 0.0));
    q.value("cond.w").setZero();
    CHECK(project_condition(q, tokens, sq).tokens.isZero(0.0));
  }
  SUBCASE("width mismatch") { CHECK_THROWS_AS(project_condition(p, Mat::Zero(3, 4), c), ShapeError); }
}

TEST_CASE("attention rows are probability vectors for every layer") {
  ViTConfig c;
  c.depth = 2;
  c.init_seed = 3;
  const ParamStore p = init_vit_params(c);
  Rng rng(8);
  for (int trial = 0; trial < 3; ++trial) {
    const Image img = random_image(64, 48, rng);
    for (int layer = 0; layer < c.depth; ++layer) {
      const AttentionMap m = extract_class_attention(p, img, c, layer);
      CHECK((m.head_rows.array() >= 0.0).all());
      for (int h = 0; h < m.num_heads(); ++h) CHECK(m.head_rows.row(h).sum() == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(m.head_average().sum() == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  CHECK_THROWS_AS(extract_class_attention(p, Image(64, 48, 3), c, 2), ConfigError);
  CHECK_THROWS_AS(extract_class_attention(p, Image(64, 48, 3), c, -1), ConfigError);
}

TEST_CASE("identical head weights give identical head rows") {
  ViTConfig c;
  c.depth = 1;
  c.num_heads = 4;
  ParamStore p = init_vit_params(c);
  const int hd = c.head_dim(), d = c.embed_dim;
  Mat& w = p.value("blocks.0.attn.qkv.w");
  for (int part = 0; part < 3; ++part)
    for (int h = 1; h < c.num_heads; ++h) w.middleCols(part * d + h * hd, hd) = w.middleCols(part * d, hd);
  Rng rng(2);
  const AttentionMap m = vit_forward(p, random_image(64, 48, rng), c).attention;
  for (int h = 1; h < c.num_heads; ++h) CHECK(m.head_rows.row(h).isApprox(m.head_rows.row(0), 1e-14));
}

TEST_CASE("local crops use an interpolated positional table") {
  ViTConfig c;
  c.depth = 1;
  const ParamStore p = init_vit_params(c);
  Rng rng(4);
  const ViTOutput out = vit_forward(p, random_image(32, 32, rng), c);
  CHECK(out.condition.tokens.rows() == 5);
  CHECK(out.attention.rows == 2);
  CHECK_THROWS_AS(vit_forward(p, Image(40, 40, 3), c), ConfigError);

  const SparseMat same = bilinear_operator(4, 3, 4, 3);
  CHECK(Mat(same).isIdentity(1e-15));
  const SparseMat down = bilinear_operator(4, 3, 2, 2);
  for (int r = 0; r < 4; ++r) CHECK(Mat(down).row(r).sum() == doctest::Approx(1.0));
}

TEST_CASE("forward pass is deterministic and rejects non-finite input") {
  ViTConfig c;
  c.depth = 1;
  const ParamStore p = init_vit_params(c);
  Rng rng(6);
  const Image img = random_image(64, 48, rng);
  const ViTOutput a = vit_forward(p, img, c), b = vit_forward(p, img, c);
  CHECK(a.logits == b.logits);
  Image bad = img;
  bad.at(3, 3, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    vit_forward(p, bad, c);
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
  }
}

TEST_CASE("projection-head output gradients match central differences") {
  const ViTConfig c = toy_config();
  ParamStore p = perturbed(c, 0.2);
  const Image img = checker(8, 8, 2);
  Rng rng(31);
  const Mat dir = random_mat(1, c.proj_dim, rng);
  auto f = [&] {
    const ViTOutput o = vit_forward(p, img, c);
    return (o.proj_dist.transpose() * dir.transpose())(0, 0);
  };
  Tape tape;
  ViTGraph g = vit_graph(tape, p, img, c);
  Var probs = ag::softmax_rows(g.logits);
  p.zero_grad();
  tape.backward(ag::sum(ag::hadamard(probs, tape.constant(dir))));
  for (const std::string name : {"head.fc2.w", "head.fc1.w", "blocks.0.attn.qkv.w", "patch_embed.w", "pos_embed"}) {
    for (int trial = 0; trial < 5; ++trial) {
      const Eigen::Index i = std::uniform_int_distribution<Eigen::Index>(0, p.value(name).size() - 1)(rng);
      const double fd = vton::testing::central_difference(p, name, i, f);
      const double an = p.grad(name).data()[i];
      INFO(name << "[" << i << "] " << an << " vs " << fd);
      CHECK(std::abs(an - fd) <= 1e-4 * std::max(std::abs(fd), 1e-6));
    }
  }
}

TEST_CASE("checkpoint round trip is exact at float32 precision") {
  const ViTConfig c = toy_config();
  const ParamStore p = perturbed(c);
  const auto file = vton::testing::scratch_dir("vit_ckpt") / "toy.vtw";
  save_vit(p, c, file, "teacher");
  auto [q, qc] = load_vit(file);
  CHECK(qc.to_json() == c.to_json());
  for (const std::string& n : p.names())
    CHECK(q.value(n).isApprox(p.value(n).cast<float>().cast<double>(), 0.0));
  CHECK(std::filesystem::exists(file.string() + ".json"));
}
