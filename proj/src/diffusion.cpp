#include "vton/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "vton/errors.hpp"

namespace vton {

double DiffusionSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps()) throw ConfigError("schedule: timestep " + std::to_string(t) + " outside [0, T]");
  return t == 0 ? 1.0 : alpha_bars[static_cast<std::size_t>(t - 1)];
}

void DiffusionSchedule::validate() const {
  if (betas.empty() || betas.size() != alpha_bars.size()) throw ConfigError("schedule: empty or inconsistent");
  double running = 1.0;
  double prev = 1.0;
  for (std::size_t s = 0; s < betas.size(); ++s) {
    if (!(betas[s] > 0.0 && betas[s] < 1.0)) throw ConfigError("schedule: beta outside (0,1)");
    running *= 1.0 - betas[s];
    if (std::abs(running - alpha_bars[s]) > 1e-12) throw ConfigError("schedule: alpha_bars do not match the running product");
    if (!(alpha_bars[s] < prev && alpha_bars[s] > 0.0)) throw ConfigError("schedule: alpha_bars not strictly decreasing in (0,1)");
    prev = alpha_bars[s];
  }
}

std::string DiffusionSchedule::hash() const {
  std::string bytes(betas.size() * sizeof(double), '\0');
  std::memcpy(bytes.data(), betas.data(), bytes.size());
  return git_blob_hash(bytes);
}

DiffusionSchedule build_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule: need at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  DiffusionSchedule s;
  s.betas.resize(static_cast<std::size_t>(steps));
  s.alpha_bars.resize(static_cast<std::size_t>(steps));
  double running = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    s.betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
    running *= 1.0 - s.betas[static_cast<std::size_t>(i)];
    s.alpha_bars[static_cast<std::size_t>(i)] = running;
  }
  return s;
}

Latent forward_diffuse(const Latent& z0, int t, const Mat& eps, const DiffusionSchedule& schedule) {
  if (eps.rows() != z0.z.rows() || eps.cols() != z0.z.cols()) throw ShapeError("forward_diffuse: noise shape mismatch");
  if (t < 1 || t > schedule.steps()) throw ConfigError("forward_diffuse: t outside [1, T]");
  const double ab = schedule.alpha_bar(t);
  Latent out = z0;
  out.z = std::sqrt(ab) * z0.z + std::sqrt(1.0 - ab) * eps;
  out.t = t;
  return out;
}

Latent encode(const Image& image) {
  if (image.height() % kLatentFactor != 0 || image.width() % kLatentFactor != 0) {
    throw ShapeError("encode: image size must be divisible by " + std::to_string(kLatentFactor));
  }
  Latent out;
  out.height = image.height() / kLatentFactor;
  out.width = image.width() / kLatentFactor;
  out.z = Mat::Zero(static_cast<Eigen::Index>(out.height) * out.width, image.channels());
  constexpr double inv = 1.0 / (kLatentFactor * kLatentFactor);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < image.channels(); ++c)
        out.z(static_cast<Eigen::Index>(y / kLatentFactor) * out.width + x / kLatentFactor, c) += inv * image.at(y, x, c);
  return out;
}

Image decode(const Latent& latent) {
  const SparseMat up = bilinear_operator(latent.height, latent.width, latent.height * kLatentFactor,
                                         latent.width * kLatentFactor);
  return Image::from_grid(up * latent.z, latent.height * kLatentFactor, latent.width * kLatentFactor);
}

Mat downsample_mask(const Mask& mask) {
  if (mask.channels() != 1) throw ShapeError("downsample_mask: expected one channel");
  return encode(mask).z;
}

Image warp_apply(const Image& garment, const Image& flow) {
  if (flow.channels() != 2 || flow.height() != garment.height() || flow.width() != garment.width()) {
    throw ShapeError("warp_apply: flow must be H x W x 2 matching the garment");
  }
  Image out(garment.height(), garment.width(), garment.channels());
  const double max_x = garment.width() - 1, max_y = garment.height() - 1;
  for (int y = 0; y < garment.height(); ++y) {
    for (int x = 0; x < garment.width(); ++x) {
      const double sx = std::clamp(x + flow.at(y, x, 0), 0.0, max_x);
      const double sy = std::clamp(y + flow.at(y, x, 1), 0.0, max_y);
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, garment.width() - 1), y1 = std::min(y0 + 1, garment.height() - 1);
      const double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < garment.channels(); ++c) {
        const double top = (1 - fx) * garment.at(y0, x0, c) + fx * garment.at(y0, x1, c);
        const double bottom = (1 - fx) * garment.at(y1, x0, c) + fx * garment.at(y1, x1, c);
        out.at(y, x, c) = (1 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

namespace {

struct Box {
  int left, top, right, bottom;  // inclusive
  bool empty() const { return right < left; }
};

template <typename Pred>
Box bounding_box(int height, int width, Pred inside) {
  Box b{width, height, -1, -1};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (inside(y, x)) {
        b.left = std::min(b.left, x);
        b.right = std::max(b.right, x);
        b.top = std::min(b.top, y);
        b.bottom = std::max(b.bottom, y);
      }
  return b;
}

}  // namespace

Image affine_box_flow(const Image& garment, const Mask& mask) {
  if (garment.height() != mask.height() || garment.width() != mask.width()) throw ShapeError("affine_box_flow: size mismatch");
  Image flow(garment.height(), garment.width(), 2, 0.0);
  const Box mb = bounding_box(mask.height(), mask.width(), [&](int y, int x) { return mask.at(y, x, 0) > 0.5; });
  const Box gb = bounding_box(garment.height(), garment.width(), [&](int y, int x) {
    double d = 0.0;
    for (int c = 0; c < garment.channels(); ++c) d += std::abs(garment.at(y, x, c) - garment.at(0, 0, c));
    return d > 0.05;
  });
  if (mb.empty() || gb.empty()) return flow;
  const double sx = static_cast<double>(gb.right - gb.left + 1) / (mb.right - mb.left + 1);
  const double sy = static_cast<double>(gb.bottom - gb.top + 1) / (mb.bottom - mb.top + 1);
  for (int y = 0; y < flow.height(); ++y) {
    for (int x = 0; x < flow.width(); ++x) {
      const double gx = gb.left + (x - mb.left + 0.5) * sx - 0.5;
      const double gy = gb.top + (y - mb.top + 0.5) * sy - 0.5;
      flow.at(y, x, 0) = gx - x;
      flow.at(y, x, 1) = gy - y;
    }
  }
  return flow;
}

namespace {
constexpr char kFlowMagic[8] = {'V', 'T', 'O', 'N', 'F', 'L', 'O', 'W'};
}

void write_flow(const Image& flow, const std::filesystem::path& file) {
  if (flow.channels() != 2) throw ShapeError("write_flow: flow must have two channels");
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary);
  if (!os) throw IoError("cannot write " + file.string());
  os.write(kFlowMagic, 8);
  const std::uint32_t dims[2] = {static_cast<std::uint32_t>(flow.height()), static_cast<std::uint32_t>(flow.width())};
  os.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  for (double v : flow.data()) {
    const float f = static_cast<float>(v);
    os.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
  if (!os) throw IoError("write failed for " + file.string());
}

Image read_flow(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("cannot open " + file.string());
  char magic[8];
  std::uint32_t dims[2];
  if (!is.read(magic, 8) || std::memcmp(magic, kFlowMagic, 8) != 0) throw IoError(file.string() + ": bad flow magic");
  if (!is.read(reinterpret_cast<char*>(dims), sizeof(dims))) throw IoError(file.string() + ": truncated header");
  Image flow(static_cast<int>(dims[0]), static_cast<int>(dims[1]), 2);
  for (double& v : flow.data()) {
    float f = 0.0f;
    if (!is.read(reinterpret_cast<char*>(&f), sizeof(f))) throw IoError(file.string() + ": truncated flow data");
    if (!std::isfinite(f)) throw NumericalError(file.string() + ": non-finite flow value");
    v = f;
  }
  return flow;
}

InpaintSample assemble_coarse(const Image& person, const Image& garment, const Mask& mask, const Image& flow) {
  if (!person.same_shape(garment) || mask.height() != person.height() || mask.width() != person.width() ||
      mask.channels() != 1) {
    throw ShapeError("assemble_coarse: person, garment, and mask sizes differ");
  }
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw ConfigError("assemble_coarse: mask must be binary");
  }
  InpaintSample s;
  s.person = person;
  s.garment = garment;
  s.mask = mask;
  s.flow = flow;
  s.coarse = composite(person, warp_apply(garment, flow), mask);
  return s;
}

Image composite(const Image& person, const Image& generated, const Mask& mask) {
  if (!person.same_shape(generated) || mask.height() != person.height() || mask.width() != person.width()) {
    throw ShapeError("composite: size mismatch");
  }
  Image out = person;
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) {
      if (mask.at(y, x, 0) == 0.0) continue;
      for (int c = 0; c < out.channels(); ++c) out.at(y, x, c) = std::clamp(generated.at(y, x, c), 0.0, 1.0);
    }
  return out;
}

SamplerMethod parse_sampler(const std::string& s) {
  if (s == "ddim") return SamplerMethod::kDdim;
  if (s == "plms") return SamplerMethod::kPlms;
  throw ConfigError("unsupported sampler '" + s + "' (expected ddim or plms)");
}

std::string to_string(SamplerMethod m) { return m == SamplerMethod::kDdim ? "ddim" : "plms"; }

std::vector<int> sampling_timesteps(int total, int steps) {
  if (steps < 1 || steps > total) throw ConfigError("sampler: steps must lie in [1, T]");
  std::vector<int> ts;
  for (int k = steps - 1; k >= 0; --k) {
    ts.push_back(static_cast<int>((static_cast<long>(k + 1) * total + steps - 1) / steps));
  }
  return ts;
}

Latent sample_latent(const EpsPredictor& eps, Latent start, const DiffusionSchedule& schedule, int steps,
                     SamplerMethod method) {
  const std::vector<int> ts = sampling_timesteps(schedule.steps(), steps);
  Latent z = std::move(start);
  std::vector<Mat> history;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    z.t = t;
    Mat e = eps(z, t);
    if (e.rows() != z.z.rows() || e.cols() != z.z.cols()) throw ShapeError("sampler: eps prediction shape mismatch");
    Mat e_used = e;
    if (method == SamplerMethod::kPlms) {
      switch (history.size()) {
        case 0: break;
        case 1: e_used = (3.0 * e - history[0]) / 2.0; break;
        case 2: e_used = (23.0 * e - 16.0 * history[1] + 5.0 * history[0]) / 12.0; break;
        default: {
          const std::size_t n = history.size();
          e_used = (55.0 * e - 59.0 * history[n - 1] + 37.0 * history[n - 2] - 9.0 * history[n - 3]) / 24.0;
        }
      }
      history.push_back(e);
      if (history.size() > 3) history.erase(history.begin());
    }
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const Mat x0 = (z.z - std::sqrt(1.0 - ab) * e_used) / std::sqrt(ab);
    z.z = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * e_used;
    if (!z.z.allFinite()) throw NumericalError("sampler: non-finite latent at t=" + std::to_string(t));
  }
  z.t = 0;
  return z;
}

Image sample(const ParamStore& params, const SampleInputs& inputs, const DiffusionSchedule& schedule,
             const DenoiserConfig& config, int steps, SamplerMethod method, std::uint64_t rng_seed) {
  if (inputs.person == nullptr || inputs.mask == nullptr || inputs.coarse == nullptr || inputs.condition == nullptr) {
    throw ConfigError("sample: missing inputs");
  }
  const Latent z_lc = encode(*inputs.coarse);
  const Mat m_lat = downsample_mask(*inputs.mask);
  Latent start;
  start.height = z_lc.height;
  start.width = z_lc.width;
  start.z.resize(z_lc.z.rows(), z_lc.z.cols());
  Rng rng(rng_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < start.z.size(); ++i) start.z.data()[i] = normal(rng);
  const EpsPredictor predictor = [&](const Latent& z_t, int t) {
    DenoiserInputs in{&z_t, &z_lc, &m_lat, &inputs.condition->tokens, t};
    return predict_eps(params, in, schedule.alpha_bar(t), config);
  };
  const Latent z0 = sample_latent(predictor, std::move(start), schedule, steps, method);
  return composite(*inputs.person, decode(z0), *inputs.mask);
}

}  // namespace vton
