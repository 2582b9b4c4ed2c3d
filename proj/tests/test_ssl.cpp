#include <doctest.h>

#include "support.hpp"
#include "vton/errors.hpp"
#include "vton/ssl.hpp"

using namespace vton;
using vton::testing::random_image;
using vton::testing::random_mat;

namespace {

Vec random_dist(int n, Rng& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = g(rng) + 1e-6;
  return v / v.sum();
}

Vec one_hot(int n, int k) {
  Vec v = Vec::Zero(n);
  v(k) = 1.0;
  return v;
}

double ce(const Vec& a, const Vec& b) {
  return cross_entropy({a.data(), static_cast<std::size_t>(a.size())}, {b.data(), static_cast<std::size_t>(b.size())});
}

ViTConfig toy_vit() {
  ViTConfig c;
  c.image_height = 16;
  c.image_width = 16;
  c.patch_size = 8;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.depth = 1;
  c.mlp_ratio = 2;
  c.proj_dim = 6;
  c.condition_dim = 4;
  c.local_size = 8;
  c.init_seed = 17;
  return c;
}

}  // namespace

TEST_CASE("cross entropy") {
  CHECK(ce(one_hot(4, 2), one_hot(4, 2)) == 0.0);
  CHECK(ce(one_hot(4, 1), Vec::Constant(4, 0.25)) == doctest::Approx(std::log(4.0)));
  CHECK(ce(one_hot(3, 0), one_hot(3, 1)) == doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(ce(Vec::Ones(3), Vec::Ones(4)), ShapeError);

  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const Vec a = random_dist(9, rng), b = random_dist(9, rng);
    double want = 0.0;
    for (int i = 0; i < 9; ++i) want += -a(i) * std::log(b(i));
    CHECK(ce(a, b) == doctest::Approx(want).epsilon(1e-14));
    CHECK(ce(a, b) >= ce(a, a) - 1e-14);  // Gibbs
    CHECK(ce(a, a) >= 0.0);
  }
}

TEST_CASE("self-distillation term count") {
  Rng rng(2);
  for (int m = 1; m <= 4; ++m) {
    for (int n = 0; n <= 12; ++n) {
      int pairs = 0;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < m + n; ++j) pairs += (i != j);
      std::vector<Vec> t, s;
      for (int i = 0; i < m; ++i) t.push_back(random_dist(5, rng));
      for (int j = 0; j < m + n; ++j) s.push_back(random_dist(5, rng));
      const SsLoss l = ss_loss(t, s, m, n);
      CHECK(l.terms == pairs);
      CHECK(l.terms == m * (m + n - 1));
      DistillConfig d;
      d.global_crops = m;
      d.local_crops = n;
      CHECK(d.term_count() == pairs);
    }
  }
  CHECK(DistillConfig{}.term_count() == 22);
  const SsLoss empty = ss_loss({one_hot(3, 0)}, {one_hot(3, 0)}, 1, 0);
  CHECK(empty.terms == 0);
  CHECK(empty.value == 0.0);
  const std::vector<Vec> same(12, one_hot(4, 3));
  CHECK(ss_loss({same[0], same[1]}, same, 2, 10).value == 0.0);
  CHECK_THROWS_AS(ss_loss({same[0]}, same, 2, 10), ShapeError);
}

TEST_CASE("teacher distribution is a centred, sharpened softmax") {
  const RowVec zero = RowVec::Zero(5);
  CHECK(teacher_distribution(zero, Vec::Zero(5), 0.04).isApprox(Vec::Constant(5, 0.2)));
  Rng rng(3);
  const RowVec logits = random_mat(1, 5, rng);
  CHECK(teacher_distribution(logits, logits.transpose(), 0.04).isApprox(Vec::Constant(5, 0.2)));

  const Vec center = random_mat(5, 1, rng, 0.1);
  const Vec got = teacher_distribution(logits, center, 0.04);
  double z = 0.0;
  std::vector<double> e(5);
  for (int i = 0; i < 5; ++i) z += (e[static_cast<std::size_t>(i)] = std::exp((logits(i) - center(i)) / 0.04));
  for (int i = 0; i < 5; ++i) CHECK(got(i) == doctest::Approx(e[static_cast<std::size_t>(i)] / z).epsilon(1e-13));
}

TEST_CASE("EMA update") {
  ParamStore t, s;
  t.add("w", 1, 1)(0, 0) = 1.0;
  s.add("w", 1, 1)(0, 0) = 0.0;
  ParamStore t1 = t;
  ema_update(t1, s, 1.0);
  CHECK(t1.value("w")(0, 0) == 1.0);
  ParamStore t0 = t;
  ema_update(t0, s, 0.0);
  CHECK(t0.value("w")(0, 0) == 0.0);
  ema_update(t, s, 0.5);
  CHECK(t.value("w")(0, 0) == 0.5);
  ParamStore bad;
  bad.add("w", 2, 1);
  CHECK_THROWS(ema_update(t, bad, 0.5));
}

TEST_CASE("student loss graph equals the summed pair cross-entropies") {
  const ViTConfig c = toy_vit();
  DistillConfig d;
  d.global_crops = 2;
  d.local_crops = 3;
  ParamStore student = init_vit_params(c);
  Rng rng(4);
  for (const std::string& n : student.names())
    student.value(n) += random_mat(student.value(n).rows(), student.value(n).cols(), rng, 0.3);
  std::vector<Image> views = {random_image(16, 16, rng), random_image(16, 16, rng)};
  for (int i = 0; i < 3; ++i) views.push_back(random_image(8, 8, rng));
  const std::vector<Vec> teacher = {random_dist(c.proj_dim, rng), random_dist(c.proj_dim, rng)};

  std::vector<Vec> student_dists;
  for (const Image& v : views) {
    const RowVec logits = vit_forward(student, v, c).logits;
    student_dists.push_back(softmax_rows(Mat(logits / d.student_temp)).row(0).transpose());
  }
  const SsLoss want = ss_loss(teacher, student_dists, 2, 3);
  Tape tape;
  const Var got = student_loss_graph(tape, student, views, teacher, c, d);
  CHECK(got.value()(0, 0) == doctest::Approx(want.value).epsilon(1e-12));
  CHECK(want.terms == 8);

  SUBCASE("projection-head gradients match central differences") {
    student.zero_grad();
    tape.backward(got);
    auto f = [&] {
      Tape t;
      return student_loss_graph(t, student, views, teacher, c, d).value()(0, 0);
    };
    for (const std::string name : {"head.fc2.w", "head.fc2.b", "head.fc1.w"}) {
      for (int trial = 0; trial < 5; ++trial) {
        const Eigen::Index i = std::uniform_int_distribution<Eigen::Index>(0, student.value(name).size() - 1)(rng);
        const double fd = vton::testing::central_difference(student, name, i, f);
        const double an = student.grad(name).data()[i];
        INFO(name << "[" << i << "] " << an << " vs " << fd);
        CHECK(std::abs(an - fd) <= 1e-4 * std::max(std::abs(fd), 1e-6));
      }
    }
  }
}

TEST_CASE("a no-op step leaves teacher and student untouched") {
  const ViTConfig c = toy_vit();
  DistillConfig d;
  d.learning_rate = 0.0;
  d.min_learning_rate = 0.0;
  d.ema_start = d.ema_end = 1.0;
  d.batch_size = 2;
  d.epochs = 2;
  d.local_crops = 2;
  Rng rng(5);
  std::vector<Image> data;
  for (int i = 0; i < 4; ++i) data.push_back(random_image(16, 16, rng));
  const ParamStore init = init_vit_params(c);
  for (CropMode mode : {CropMode::kRandom, CropMode::kKeypoint}) {
    SslTrainer trainer(c, d, AugmentPolicy{}, mode, init);
    const auto logs = trainer.train(data);
    CHECK(logs.size() == 2);
    CHECK(trainer.steps_done() == 4);
    for (const std::string& n : init.names()) {
      CHECK(trainer.teacher().params.value(n) == init.value(n));
      CHECK(trainer.student().value(n) == init.value(n));
    }
  }
}

TEST_CASE("with lambda = 1 the teacher stays bit-identical while the student learns") {
  const ViTConfig c = toy_vit();
  DistillConfig d;
  d.learning_rate = 1e-2;
  d.ema_start = d.ema_end = 1.0;
  d.batch_size = 2;
  d.epochs = 1;
  d.local_crops = 2;
  Rng rng(6);
  std::vector<Image> data;
  for (int i = 0; i < 4; ++i) data.push_back(random_image(16, 16, rng));
  const ParamStore init = init_vit_params(c);
  SslTrainer trainer(c, d, AugmentPolicy{}, CropMode::kKeypoint, init);
  std::ostringstream log;
  trainer.train(data, &log);
  bool moved = false;
  for (const std::string& n : init.names()) {
    CHECK(trainer.teacher().params.value(n) == init.value(n));
    moved = moved || trainer.student().value(n) != init.value(n);
  }
  CHECK(moved);
  // one JSON line per step
  const std::string text = log.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 2);
}

TEST_CASE("teacher is a convex combination of its start and the student") {
  const ViTConfig c = toy_vit();
  DistillConfig d;
  d.learning_rate = 1e-2;
  d.ema_start = 0.5;
  d.ema_end = 0.5;
  d.batch_size = 4;
  d.epochs = 1;
  d.local_crops = 1;
  Rng rng(7);
  std::vector<Image> data;
  for (int i = 0; i < 4; ++i) data.push_back(random_image(16, 16, rng));
  const ParamStore init = init_vit_params(c);
  SslTrainer trainer(c, d, AugmentPolicy{}, CropMode::kRandom, init);
  trainer.train(data);
  for (const std::string& n : init.names()) {
    const Mat want = 0.5 * init.value(n) + 0.5 * trainer.student().value(n);
    CHECK(trainer.teacher().params.value(n).isApprox(want, 1e-14));
  }
}

TEST_CASE("views follow the configured crop layout") {
  const ViTConfig c = toy_vit();
  DistillConfig d;
  d.local_crops = 4;
  Rng rng(8);
  std::vector<Image> data = {random_image(16, 16, rng)};
  SslTrainer trainer(c, d, AugmentPolicy{}, CropMode::kKeypoint, init_vit_params(c));
  CHECK_THROWS_AS(trainer.make_views(data, 0), ConfigError);
  trainer.begin_epoch(data);
  const auto views = trainer.make_views(data, 0);
  REQUIRE(views.size() == 6);
  for (int i = 0; i < 2; ++i) CHECK(views[static_cast<std::size_t>(i)].height() == 16);
  for (int i = 2; i < 6; ++i) CHECK(views[static_cast<std::size_t>(i)].height() == 8);
  CHECK(parse_crop_mode("random") == CropMode::kRandom);
  CHECK_THROWS_AS(parse_crop_mode("grid"), ConfigError);
}
