#include "vton/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "vton/diffusion.hpp"
#include "vton/errors.hpp"

namespace vton {

namespace {

void put(Image& img, int y, int x, const Color& c) {
  if (y < 0 || x < 0 || y >= img.height() || x >= img.width()) return;
  for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[static_cast<std::size_t>(ch)];
}

Color hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

}  // namespace

void fill_rect(Image& img, double x0, double y0, double x1, double y1, const Color& c) {
  for (int y = std::max(0, static_cast<int>(std::floor(y0))); y < std::min(img.height(), static_cast<int>(std::ceil(y1))); ++y)
    for (int x = std::max(0, static_cast<int>(std::floor(x0))); x < std::min(img.width(), static_cast<int>(std::ceil(x1))); ++x)
      if (x + 0.5 >= x0 && x + 0.5 < x1 && y + 0.5 >= y0 && y + 0.5 < y1) put(img, y, x, c);
}

void fill_disk(Image& img, double cx, double cy, double r, const Color& c) {
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= r * r) put(img, y, x, c);
    }
}

void fill_triangle(Image& img, std::array<double, 2> a, std::array<double, 2> b, std::array<double, 2> c,
                   const Color& color) {
  auto edge = [](const std::array<double, 2>& p, const std::array<double, 2>& q, double x, double y) {
    return (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]);
  };
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double e0 = edge(a, b, px, py), e1 = edge(b, c, px, py), e2 = edge(c, a, px, py);
      if ((e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)) put(img, y, x, color);
    }
}

void fill_rounded_rect(Image& img, double x0, double y0, double x1, double y1, double r, const Color& c) {
  fill_rect(img, x0 + r, y0, x1 - r, y1, c);
  fill_rect(img, x0, y0 + r, x1, y1 - r, c);
  fill_disk(img, x0 + r, y0 + r, r, c);
  fill_disk(img, x1 - r, y0 + r, r, c);
  fill_disk(img, x0 + r, y1 - r, r, c);
  fill_disk(img, x1 - r, y1 - r, r, c);
}

SyntheticPair make_synthetic_pair(int height, int width, Rng& rng) {
  if (height < 32 || width < 24 || height % kLatentFactor != 0 || width % kLatentFactor != 0) {
    throw ConfigError("synthetic data needs at least 32x24 pixels, divisible by 4");
  }
  const double H = height, W = width;
  SyntheticPair out;
  const Color white = {1.0, 1.0, 1.0};
  out.garment = Image(height, width, 3, 1.0);
  Image& g = out.garment;

  const double hue = uniform(rng, 0.0, 1.0);
  const Color body = hsv(hue, uniform(rng, 0.3, 0.6), uniform(rng, 0.55, 0.8));
  const Color sleeve_col = hsv(hue, uniform(rng, 0.3, 0.6), uniform(rng, 0.45, 0.7));
  auto accent = [&] { return hsv(hue + uniform(rng, 0.35, 0.65), uniform(rng, 0.8, 1.0), uniform(rng, 0.15, 1.0)); };

  // Body.
  const double bx0 = W * uniform(rng, 0.24, 0.29), bx1 = W - W * uniform(rng, 0.24, 0.29);
  const double by0 = H * uniform(rng, 0.16, 0.22), by1 = H * uniform(rng, 0.86, 0.93);
  fill_rounded_rect(g, bx0, by0, bx1, by1, 2.0, body);

  // Sleeves: short or long, with an accent cuff.
  const bool long_sleeve = uniform(rng, 0.0, 1.0) < 0.5;
  const double sleeve_w = W * uniform(rng, 0.14, 0.18);
  const double sleeve_len = H * (long_sleeve ? uniform(rng, 0.45, 0.6) : uniform(rng, 0.16, 0.24));
  const Color cuff = accent();
  nlohmann::json sleeves = nlohmann::json::array();
  for (int side = 0; side < 2; ++side) {
    const double x0 = side == 0 ? bx0 - sleeve_w : bx1;
    const double x1 = x0 + sleeve_w;
    fill_rect(g, x0, by0 + 1.0, x1, by0 + sleeve_len, sleeve_col);
    fill_rect(g, x0, by0 + sleeve_len - 3.0, x1, by0 + sleeve_len, cuff);
    sleeves.push_back({{"side", side == 0 ? "left" : "right"},
                       {"length", long_sleeve ? "long" : "short"},
                       {"box", PixelBox{x0, by0 + 1.0, sleeve_w, sleeve_len - 1.0}.to_json()}});
  }

  // Collar.
  const double cx = 0.5 * (bx0 + bx1);
  const double collar_w = (bx1 - bx0) * uniform(rng, 0.4, 0.55);
  const double collar_h = H * uniform(rng, 0.1, 0.14);
  const Color collar_col = accent();
  const int style = uniform_int(rng, 0, 2);
  const char* style_name = "crew";
  switch (style) {
    case 0:
      fill_disk(g, cx, by0, collar_w / 2, collar_col);
      fill_disk(g, cx, by0, collar_w / 2 - 2.0, white);
      fill_rect(g, 0, 0, W, by0, white);
      break;
    case 1:
      style_name = "vneck";
      fill_triangle(g, {cx - collar_w / 2, by0}, {cx + collar_w / 2, by0}, {cx, by0 + collar_h}, collar_col);
      fill_triangle(g, {cx - collar_w / 2 + 2.5, by0}, {cx + collar_w / 2 - 2.5, by0}, {cx, by0 + collar_h - 3.0}, white);
      break;
    default:
      style_name = "polo";
      fill_triangle(g, {cx - collar_w / 2, by0}, {cx, by0}, {cx - 1.0, by0 + collar_h}, collar_col);
      fill_triangle(g, {cx, by0}, {cx + collar_w / 2, by0}, {cx + 1.0, by0 + collar_h}, collar_col);
      break;
  }
  const PixelBox collar_box{cx - collar_w / 2, by0, collar_w, style == 0 ? collar_w / 2 : collar_h};

  // Glyphs on the body below the collar.
  nlohmann::json glyphs = nlohmann::json::array();
  const int n_glyphs = uniform_int(rng, 1, 3);
  const double gs = W * uniform(rng, 0.16, 0.2);
  std::vector<PixelBox> placed;
  static constexpr const char* kKinds[] = {"square", "disk", "cross", "triangle", "ring"};
  for (int i = 0; i < n_glyphs; ++i) {
    PixelBox b;
    bool ok = false;
    for (int attempt = 0; attempt < 30 && !ok; ++attempt) {
      b = {uniform(rng, bx0 + 1.0, bx1 - gs - 1.0), uniform(rng, by0 + collar_box.height + 2.0, by1 - gs - 2.0), gs, gs};
      ok = std::none_of(placed.begin(), placed.end(), [&](const PixelBox& o) {
        return b.left < o.left + o.width + 1 && o.left < b.left + b.width + 1 && b.top < o.top + o.height + 1 &&
               o.top < b.top + b.height + 1;
      });
    }
    if (!ok) continue;
    placed.push_back(b);
    const Color col = accent();
    const int kind = uniform_int(rng, 0, 4);
    const double mx = b.left + gs / 2, my = b.top + gs / 2;
    switch (kind) {
      case 0: fill_rect(g, b.left, b.top, b.left + gs, b.top + gs, col); break;
      case 1: fill_disk(g, mx, my, gs / 2, col); break;
      case 2:
        fill_rect(g, b.left, my - gs / 6, b.left + gs, my + gs / 6, col);
        fill_rect(g, mx - gs / 6, b.top, mx + gs / 6, b.top + gs, col);
        break;
      case 3: fill_triangle(g, {b.left, b.top + gs}, {b.left + gs, b.top + gs}, {mx, b.top}, col); break;
      default:
        fill_disk(g, mx, my, gs / 2, col);
        fill_disk(g, mx, my, gs / 4, body);
        break;
    }
    glyphs.push_back({{"kind", kKinds[kind]}, {"box", b.to_json()}});
  }
  out.annotation = {{"glyphs", glyphs},
                    {"collar", {{"style", style_name}, {"box", collar_box.to_json()}}},
                    {"sleeves", sleeves},
                    {"body", PixelBox{bx0, by0, bx1 - bx0, by1 - by0}.to_json()}};

  // Person: background, head, legs, arms; the garment is fitted to the wear box.
  const Color bg = {uniform(rng, 0.8, 0.9), uniform(rng, 0.82, 0.92), uniform(rng, 0.85, 0.95)};
  const Color skin = hsv(uniform(rng, 0.03, 0.1), uniform(rng, 0.3, 0.55), uniform(rng, 0.6, 0.95));
  const Color pants = hsv(uniform(rng, 0.0, 1.0), uniform(rng, 0.2, 0.5), uniform(rng, 0.15, 0.4));
  out.person = Image(height, width, 3);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) put(out.person, y, x, bg);
  const double wx0 = W * uniform(rng, 0.1, 0.16), wx1 = W - W * uniform(rng, 0.1, 0.16);
  const double wy0 = H * uniform(rng, 0.2, 0.25), wy1 = H * uniform(rng, 0.78, 0.84);
  const double pcx = 0.5 * (wx0 + wx1);
  fill_disk(out.person, pcx, wy0 - H * 0.09, H * 0.085, skin);
  fill_rect(out.person, pcx - 2.0, wy0 - H * 0.03, pcx + 2.0, wy0 + 1.0, skin);
  fill_rect(out.person, wx0 + (wx1 - wx0) * 0.22, wy1 - 1.0, pcx - 1.0, H, pants);
  fill_rect(out.person, pcx + 1.0, wy1 - 1.0, wx1 - (wx1 - wx0) * 0.22, H, pants);
  const double arm_w = (wx1 - wx0) * 0.12;
  fill_rect(out.person, wx0 - 1.0, wy0 + 2.0, wx0 + arm_w, wy1 - 2.0, skin);
  fill_rect(out.person, wx1 - arm_w, wy0 + 2.0, wx1 + 1.0, wy1 - 2.0, skin);

  // Garment box -> wear box, with horizontal shading to mimic body curvature.
  const double gx0 = bx0 - sleeve_w, gx1 = bx1 + sleeve_w;
  const double sx = (gx1 - gx0) / (wx1 - wx0), sy = (by1 - by0) / (wy1 - wy0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (x + 0.5 < wx0 || x + 0.5 >= wx1 || y + 0.5 < wy0 || y + 0.5 >= wy1) continue;
      const double src_x = gx0 + (x + 0.5 - wx0) * sx - 0.5;
      const double src_y = by0 + (y + 0.5 - wy0) * sy - 0.5;
      const int ix = std::clamp(static_cast<int>(std::lround(src_x)), 0, width - 1);
      const int iy = std::clamp(static_cast<int>(std::lround(src_y)), 0, height - 1);
      double diff = 0.0;
      for (int c = 0; c < 3; ++c) diff += std::abs(g.at(iy, ix, c) - 1.0);
      if (diff < 1e-9) continue;  // garment background keeps the person underneath
      const double u = (x + 0.5 - pcx) / (0.5 * (wx1 - wx0));
      const double shade = 0.78 + 0.22 * std::cos(0.5 * 3.14159265358979 * std::clamp(u, -1.0, 1.0));
      for (int c = 0; c < 3; ++c) out.person.at(y, x, c) = std::clamp(g.at(iy, ix, c) * shade, 0.0, 1.0);
    }
  }
  // Quantize to 8 bits so in-memory and on-disk copies agree exactly.
  for (double& v : out.person.data()) v = std::lround(v * 255.0) / 255.0;
  for (double& v : g.data()) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;

  // Mask: wear box grown by a small margin.
  const double margin = uniform(rng, 1.5, 3.5);
  out.mask = Mask(height, width, 1, 0.0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (x + 0.5 >= wx0 - margin && x + 0.5 < wx1 + margin && y + 0.5 >= wy0 - margin && y + 0.5 < wy1 + margin)
        out.mask.at(y, x, 0) = 1.0;

  out.agnostic = out.person;
  constexpr double kGrey = 128.0 / 255.0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (out.mask.at(y, x, 0) == 1.0)
        for (int c = 0; c < 3; ++c) out.agnostic.at(y, x, c) = kGrey;

  out.flow = affine_box_flow(g, out.mask);
  return out;
}

PairedDatasetIndex gen_synthetic_dataset(int n_pairs, int height, int width, std::uint64_t seed,
                                         const std::filesystem::path& out_dir, double test_fraction) {
  if (n_pairs < 1) throw ConfigError("gen_synthetic_dataset: n_pairs must be positive");
  std::filesystem::create_directories(out_dir);
  Rng rng(seed);
  PairedDatasetIndex index;
  index.root = out_dir;
  const int n_test = static_cast<int>(std::lround(test_fraction * n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    const SyntheticPair p = make_synthetic_pair(height, width, rng);
    char id[16];
    std::snprintf(id, sizeof(id), "%05d", i);
    PairRecord r;
    r.id = id;
    r.split = i >= n_pairs - n_test ? "test" : "train";
    r.person = "person/" + r.id + ".png";
    r.garment = "garment/" + r.id + ".png";
    r.mask = "mask/" + r.id + ".png";
    r.agnostic = "agnostic/" + r.id + ".png";
    r.flow = "flow/" + r.id + ".flo";
    r.ground_truth = "annotation/" + r.id + ".json";
    write_png(p.person, index.path(r.person));
    write_png(p.garment, index.path(r.garment));
    write_png(p.mask, index.path(r.mask));
    write_png(p.agnostic, index.path(r.agnostic));
    write_flow(p.flow, index.path(r.flow));
    write_json(p.annotation, index.path(r.ground_truth));
    index.records.push_back(std::move(r));
  }
  index.save();
  return index;
}

}  // namespace vton
