#include <cmath>

#include "vton/diffusion.hpp"
#include "vton/errors.hpp"

namespace vton {

void DenoiserConfig::validate() const {
  if (latent_channels <= 0 || base_channels <= 0 || levels < 0 || time_dim <= 0 || time_dim % 2 != 0 ||
      attention_dim <= 0 || condition_dim <= 0) {
    throw ConfigError("denoiser: dimensions must be positive (time_dim even)");
  }
  if (!(prior_std > 0.0)) throw ConfigError("denoiser: prior_std must be positive");
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"latent_channels", latent_channels}, {"base_channels", base_channels}, {"levels", levels},
          {"time_dim", time_dim},               {"attention_dim", attention_dim}, {"condition_dim", condition_dim},
          {"prior_std", prior_std},             {"init_seed", init_seed}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  try {
    c.latent_channels = j.at("latent_channels");
    c.base_channels = j.at("base_channels");
    c.levels = j.at("levels");
    c.time_dim = j.at("time_dim");
    c.attention_dim = j.at("attention_dim");
    c.condition_dim = j.at("condition_dim");
    c.prior_std = j.at("prior_std");
    c.init_seed = j.at("init_seed");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("denoiser config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> denoiser_shapes(const DenoiserConfig& c) {
  std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> s;
  auto lin = [&](const std::string& name, Eigen::Index in, Eigen::Index out) {
    s.push_back({name + ".w", {in, out}});
    s.push_back({name + ".b", {1, out}});
  };
  const Eigen::Index td = c.time_dim;
  lin("time.fc1", td, td);
  const Eigen::Index cin = 2 * c.latent_channels + 1;
  lin("in.conv", 9 * cin, c.channels_at(0));
  lin("in.temb", td, c.channels_at(0));
  for (int l = 1; l <= c.levels; ++l) {
    const std::string p = "down" + std::to_string(l);
    lin(p + ".conv", 9 * c.channels_at(l - 1), c.channels_at(l));
    lin(p + ".temb", td, c.channels_at(l));
  }
  const Eigen::Index cb = c.channels_at(c.levels);
  s.push_back({"mid.attn.norm.g", {1, cb}});
  s.push_back({"mid.attn.norm.b", {1, cb}});
  lin("mid.attn.q", cb, c.attention_dim);
  lin("mid.attn.k", c.condition_dim, c.attention_dim);
  lin("mid.attn.v", c.condition_dim, c.attention_dim);
  lin("mid.attn.o", c.attention_dim, cb);
  lin("mid.conv", 9 * cb, cb);
  lin("mid.temb", td, cb);
  for (int l = c.levels; l >= 1; --l) {
    const std::string p = "up" + std::to_string(l);
    lin(p + ".conv", 9 * (c.channels_at(l) + c.channels_at(l - 1)), c.channels_at(l - 1));
    lin(p + ".temb", td, c.channels_at(l - 1));
  }
  lin("out.conv", 9 * c.channels_at(0), c.latent_channels);
  return s;
}

Var linear(const ParamFetch& fetch, Var x, const std::string& prefix) {
  return ag::add_row(ag::matmul(x, fetch(prefix + ".w")), fetch(prefix + ".b"));
}

Var conv3x3(const ParamFetch& fetch, Var x, int h, int w, const std::string& prefix) {
  return linear(fetch, ag::im2col3x3(x, h, w), prefix);
}

// conv + per-channel timestep shift + SiLU
Var stage(const ParamFetch& fetch, Var x, Var temb, int h, int w, const std::string& prefix) {
  Var y = conv3x3(fetch, x, h, w, prefix + ".conv");
  y = ag::add_row(y, linear(fetch, temb, prefix + ".temb"));
  return ag::silu(y);
}

}  // namespace

ParamStore init_denoiser_params(const DenoiserConfig& config) {
  config.validate();
  Rng rng(config.init_seed);
  ParamStore params;
  for (const auto& [name, shape] : denoiser_shapes(config)) {
    Mat& m = params.add(name, shape.first, shape.second);
    if (name.ends_with(".norm.g")) {
      m.setOnes();
    } else if (name.ends_with(".w")) {
      // He-style scaling keeps activations O(1) through the SiLU stack.
      init_trunc_normal(m, std::sqrt(1.0 / static_cast<double>(shape.first)), rng);
    }
  }
  return params;
}

Mat timestep_embedding(int t, int dim) {
  Mat e(1, dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e(0, i) = std::sin(t * freq);
    e(0, half + i) = std::cos(t * freq);
  }
  return e;
}

SparseMat pool2x2_operator(int height, int width) {
  if (height % 2 != 0 || width % 2 != 0) throw ShapeError("pool2x2: grid dimensions must be even");
  const int oh = height / 2, ow = width / 2;
  std::vector<Eigen::Triplet<double>> trips;
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) trips.emplace_back(y * ow + x, (2 * y + dy) * width + 2 * x + dx, 0.25);
  SparseMat op(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(height) * width);
  op.setFromTriplets(trips.begin(), trips.end());
  return op;
}

SparseMat upsample2x_operator(int height, int width) {
  const int oh = height * 2, ow = width * 2;
  std::vector<Eigen::Triplet<double>> trips;
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) trips.emplace_back(y * ow + x, (y / 2) * width + x / 2, 1.0);
  SparseMat op(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(height) * width);
  op.setFromTriplets(trips.begin(), trips.end());
  return op;
}

Var cross_attention(Tape&, const ParamFetch& fetch, Var features, Var condition, const std::string& prefix,
                    int attention_dim) {
  Var h = ag::layer_norm(features, fetch(prefix + ".norm.g"), fetch(prefix + ".norm.b"));
  Var q = linear(fetch, h, prefix + ".q");
  Var k = linear(fetch, condition, prefix + ".k");
  Var v = linear(fetch, condition, prefix + ".v");
  Var att = ag::softmax_rows(ag::scale(ag::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(attention_dim))));
  return ag::add(features, linear(fetch, ag::matmul(att, v), prefix + ".o"));
}

Var denoiser_graph(Tape& tape, const ParamFetch& fetch, const DenoiserInputs& in, const DenoiserConfig& config) {
  config.validate();
  if (in.z_t == nullptr || in.z_lc == nullptr || in.mask == nullptr || in.condition == nullptr) {
    throw ConfigError("denoiser: missing inputs");
  }
  const int h = in.z_t->height, w = in.z_t->width;
  if (in.z_lc->height != h || in.z_lc->width != w || in.z_t->z.rows() != in.z_lc->z.rows() ||
      in.z_t->z.cols() != config.latent_channels || in.z_lc->z.cols() != config.latent_channels) {
    throw ShapeError("denoiser: z_t and z_lc must share the latent shape");
  }
  if (in.mask->rows() != in.z_t->z.rows() || in.mask->cols() != 1) throw ShapeError("denoiser: mask grid mismatch");
  if (in.condition->cols() != config.condition_dim || in.condition->rows() < 1) {
    throw ShapeError("denoiser: condition width " + std::to_string(in.condition->cols()) + " != " +
                     std::to_string(config.condition_dim));
  }
  if ((h >> config.levels) << config.levels != h || (w >> config.levels) << config.levels != w) {
    throw ShapeError("denoiser: latent grid not divisible by 2^levels");
  }

  Var temb = ag::silu(linear(fetch, tape.constant(timestep_embedding(in.t, config.time_dim)), "time.fc1"));
  Var x = ag::concat_cols({tape.constant(in.z_t->z), tape.constant(in.z_lc->z), tape.constant(*in.mask)});
  x = stage(fetch, x, temb, h, w, "in");

  std::vector<Var> skips;
  int ch = h, cw = w;
  for (int l = 1; l <= config.levels; ++l) {
    skips.push_back(x);
    x = ag::apply_left(pool2x2_operator(ch, cw), x);
    ch /= 2;
    cw /= 2;
    x = stage(fetch, x, temb, ch, cw, "down" + std::to_string(l));
  }
  x = cross_attention(tape, fetch, x, tape.constant(*in.condition), "mid.attn", config.attention_dim);
  x = stage(fetch, x, temb, ch, cw, "mid");
  for (int l = config.levels; l >= 1; --l) {
    x = ag::apply_left(upsample2x_operator(ch, cw), x);
    ch *= 2;
    cw *= 2;
    x = ag::concat_cols({x, skips[static_cast<std::size_t>(l - 1)]});
    x = stage(fetch, x, temb, ch, cw, "up" + std::to_string(l));
  }
  return conv3x3(fetch, x, h, w, "out.conv");
}

Mat denoiser_forward(const ParamStore& params, const DenoiserInputs& in, const DenoiserConfig& config) {
  Tape tape;
  const ParamFetch fetch = [&](const std::string& name) { return tape.constant(params.value(name)); };
  Mat out = denoiser_graph(tape, fetch, in, config).value();
  if (!out.allFinite()) throw NumericalError("denoiser: non-finite output");
  return out;
}

namespace {

// Per latent pixel: the prior std is prior_std times the masked fraction, so
// pixels the coarse latent already knows get an exact linear estimate.
struct Preconditioning {
  Mat linear;  // c_skip * (z_t - sqrt(ab) z_lc)
  Mat out;     // c_out, broadcast over channels
};

Preconditioning precondition(const DenoiserInputs& in, double alpha_bar, const DenoiserConfig& config) {
  const Eigen::ArrayXd s = config.prior_std * in.mask->col(0).array();
  const Eigen::ArrayXd v = alpha_bar * s.square() + (1.0 - alpha_bar);
  const Eigen::ArrayXd skip = std::sqrt(1.0 - alpha_bar) / v;
  const Eigen::ArrayXd out = std::sqrt(alpha_bar) * s / v.sqrt();
  const Eigen::Index c = in.z_t->z.cols();
  Preconditioning p;
  p.linear = (in.z_t->z - std::sqrt(alpha_bar) * in.z_lc->z).array().colwise() * skip;
  p.out = out.replicate(1, c).matrix();
  return p;
}

}  // namespace

Var eps_graph(Tape& tape, const ParamFetch& fetch, const DenoiserInputs& in, double alpha_bar,
              const DenoiserConfig& config) {
  const Preconditioning p = precondition(in, alpha_bar, config);
  return ag::add(tape.constant(p.linear), ag::hadamard(denoiser_graph(tape, fetch, in, config), tape.constant(p.out)));
}

Mat predict_eps(const ParamStore& params, const DenoiserInputs& in, double alpha_bar, const DenoiserConfig& config) {
  const Preconditioning p = precondition(in, alpha_bar, config);
  return p.linear + denoiser_forward(params, in, config).cwiseProduct(p.out);
}

Var denoise_loss_graph(Tape& tape, ParamStore& params, const InpaintSample& sample,
                       const ConditionEmbedding& condition, int t, const Mat& eps, const DiffusionSchedule& schedule,
                       const DenoiserConfig& config) {
  const Latent z0 = encode(sample.person);
  const Latent z_lc = encode(sample.coarse);
  const Mat m_lat = downsample_mask(sample.mask);
  const Latent z_t = forward_diffuse(z0, t, eps, schedule);
  DenoiserInputs in{&z_t, &z_lc, &m_lat, &condition.tokens, t};
  const ParamFetch fetch = [&](const std::string& name) { return tape.param(params, name); };
  return ag::mse(eps_graph(tape, fetch, in, schedule.alpha_bar(t), config), eps);
}

TrainStepResult train_step(ParamStore& params, const InpaintSample& sample, const ConditionEmbedding& condition,
                           const DiffusionSchedule& schedule, const DenoiserConfig& config, Rng& rng,
                           double grad_scale) {
  std::uniform_int_distribution<int> pick_t(1, schedule.steps());
  std::normal_distribution<double> normal(0.0, 1.0);
  TrainStepResult r;
  r.t = pick_t(rng);
  const int h = sample.person.height() / kLatentFactor, w = sample.person.width() / kLatentFactor;
  Mat eps(static_cast<Eigen::Index>(h) * w, sample.person.channels());
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(rng);
  Tape tape;
  Var loss = denoise_loss_graph(tape, params, sample, condition, r.t, eps, schedule, config);
  r.loss = loss.value()(0, 0);
  if (!std::isfinite(r.loss)) throw NumericalError("train_step: non-finite loss at t=" + std::to_string(r.t));
  tape.backward(ag::scale(loss, grad_scale));
  return r;
}

TrainStepResult train_step(ParamStore& params, const InpaintSample& sample, const ParamStore& encoder,
                           const ViTConfig& encoder_config, const Image& encoder_view,
                           const DiffusionSchedule& schedule, const DenoiserConfig& config, Rng& rng) {
  const ConditionEmbedding c = vit_forward(encoder, encoder_view, encoder_config).condition;
  return train_step(params, sample, c, schedule, config, rng);
}

void save_denoiser(const ParamStore& params, const DenoiserConfig& config, const std::filesystem::path& file,
                   const nlohmann::json& extra) {
  nlohmann::json meta = {{"kind", "denoiser"}, {"config", config.to_json()}};
  if (!extra.is_null()) meta["extra"] = extra;
  save_arrays(params, file, meta);
}

std::pair<ParamStore, DenoiserConfig> load_denoiser(const std::filesystem::path& file) {
  ArrayContainer c = load_arrays(file);
  if (c.meta.value("kind", "") != "denoiser") throw IoError(file.string() + " is not a denoiser checkpoint");
  DenoiserConfig config = DenoiserConfig::from_json(c.meta.at("config"));
  ParamStore params = init_denoiser_params(config);
  assign_checked(params, c.arrays);
  return {std::move(params), config};
}

}  // namespace vton
