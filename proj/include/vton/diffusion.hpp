#pragma once

// Toy latent-diffusion inpainting: variance schedule, forward noising, a
// fixed pooling autoencoder, garment warping, the conditioned denoiser, its
// training objective, and DDIM/PLMS sampling.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include <json.hpp>

#include "vton/autograd.hpp"
#include "vton/image.hpp"
#include "vton/params.hpp"
#include "vton/vit.hpp"

namespace vton {

struct DiffusionSchedule {
  std::vector<double> betas;
  std::vector<double> alpha_bars;  // alpha_bars[t-1] for t in [1, T]

  int steps() const { return static_cast<int>(betas.size()); }
  // Cumulative product at timestep t in [0, T]; t = 0 gives 1.
  double alpha_bar(int t) const;
  // Throws unless every schedule invariant holds.
  void validate() const;
  // Hex digest of the float64 beta sequence.
  std::string hash() const;
};

// Linear beta schedule.
DiffusionSchedule build_schedule(int steps, double beta_start, double beta_end);

// Latent grid stored as (height*width) x channels.
struct Latent {
  int height = 0;
  int width = 0;
  Mat z;
  int t = 0;
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
Latent forward_diffuse(const Latent& z0, int t, const Mat& eps, const DiffusionSchedule& schedule);

constexpr int kLatentFactor = 4;

// Fixed 4x area-average downsample per channel.
Latent encode(const Image& image);
// Bilinear 4x upsample.
Image decode(const Latent& latent);
// Mask averaged onto the latent grid, (h*w) x 1.
Mat downsample_mask(const Mask& mask);

// Two-channel image: channel 0 = dx, channel 1 = dy (pixels). Backward
// bilinear sampling, out-of-range coordinates clamp to the border.
Image warp_apply(const Image& garment, const Image& flow);
// Flow mapping the mask's bounding box onto the garment's non-background
// bounding box (pixels differing from the corner colour).
Image affine_box_flow(const Image& garment, const Mask& mask);

void write_flow(const Image& flow, const std::filesystem::path& file);
Image read_flow(const std::filesystem::path& file);

struct InpaintSample {
  Image person;   // ground-truth person (training target)
  Image garment;  // in-shop garment
  Mask mask;      // 1 where the garment region is regenerated
  Image coarse;   // warped garment composited onto the person
  Image flow;
};

// coarse = person where mask == 0, warp_apply(garment, flow) where mask == 1.
InpaintSample assemble_coarse(const Image& person, const Image& garment, const Mask& mask, const Image& flow);

// ---------------------------------------------------------------------------
// Denoiser

struct DenoiserConfig {
  int latent_channels = 3;
  int base_channels = 32;
  int levels = 1;  // number of 2x down/up stages around the bottleneck
  int time_dim = 32;
  int attention_dim = 32;
  int condition_dim = 128;
  // spread of the clean latent around the coarse latent, for the noise prior
  double prior_std = 0.15;
  std::uint64_t init_seed = 0;

  void validate() const;
  int channels_at(int level) const { return base_channels << level; }
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

struct DenoiserInputs {
  const Latent* z_t = nullptr;
  const Latent* z_lc = nullptr;
  const Mat* mask = nullptr;       // (h*w) x 1
  const Mat* condition = nullptr;  // tokens x condition_dim
  int t = 0;
};

ParamStore init_denoiser_params(const DenoiserConfig& config);
Mat timestep_embedding(int t, int dim);

// 2x2 average pooling on an (h*w) grid.
SparseMat pool2x2_operator(int height, int width);
// Nearest-neighbour 2x upsampling from an (h*w) grid.
SparseMat upsample2x_operator(int height, int width);

Var denoiser_graph(Tape& tape, const ParamFetch& fetch, const DenoiserInputs& in, const DenoiserConfig& config);
Mat denoiser_forward(const ParamStore& params, const DenoiserInputs& in, const DenoiserConfig& config);

// Noise prediction: the linear estimate of eps that is exact when
// z0 ~ N(z_lc, (prior_std * m)^2) per latent pixel, plus the network output
// scaled by the standard deviation of what that estimate leaves over.
//   eps = c_skip * (z_t - sqrt(ab) z_lc) + c_out * F
//   c_skip = sqrt(1-ab) / (ab s^2 + 1 - ab),  c_out = sqrt(ab) s / sqrt(ab s^2 + 1 - ab)
Var eps_graph(Tape& tape, const ParamFetch& fetch, const DenoiserInputs& in, double alpha_bar,
              const DenoiserConfig& config);
Mat predict_eps(const ParamStore& params, const DenoiserInputs& in, double alpha_bar, const DenoiserConfig& config);

// Cross-attention of grid features onto condition tokens (residual add).
Var cross_attention(Tape& tape, const ParamFetch& fetch, Var features, Var condition, const std::string& prefix,
                    int attention_dim);

struct TrainStepResult {
  double loss = 0.0;
  int t = 0;
};

// One objective evaluation: samples t and eps, forms z_t from encode(person),
// adds d(loss)/d(params) into params' grad buffers (scaled by `grad_scale`).
TrainStepResult train_step(ParamStore& params, const InpaintSample& sample, const ConditionEmbedding& condition,
                           const DiffusionSchedule& schedule, const DenoiserConfig& config, Rng& rng,
                           double grad_scale = 1.0);

// Same, computing the condition with a frozen encoder.
TrainStepResult train_step(ParamStore& params, const InpaintSample& sample, const ParamStore& encoder,
                           const ViTConfig& encoder_config, const Image& encoder_view,
                           const DiffusionSchedule& schedule, const DenoiserConfig& config, Rng& rng);

// Loss for fixed (t, eps), recorded on a tape for gradient checks.
Var denoise_loss_graph(Tape& tape, ParamStore& params, const InpaintSample& sample,
                       const ConditionEmbedding& condition, int t, const Mat& eps, const DiffusionSchedule& schedule,
                       const DenoiserConfig& config);

enum class SamplerMethod { kDdim, kPlms };
SamplerMethod parse_sampler(const std::string& s);
std::string to_string(SamplerMethod m);

// Noise prediction as a function of (z_t, t).
using EpsPredictor = std::function<Mat(const Latent& z_t, int t)>;

// Descending timestep sequence of length `steps` ending at 1 and starting at T.
std::vector<int> sampling_timesteps(int total, int steps);

// Deterministic reverse process from `start` (eta = 0).
Latent sample_latent(const EpsPredictor& eps, Latent start, const DiffusionSchedule& schedule, int steps,
                     SamplerMethod method);

struct SampleInputs {
  const Image* person = nullptr;  // pixels kept where mask == 0
  const Mask* mask = nullptr;
  const Image* coarse = nullptr;
  const ConditionEmbedding* condition = nullptr;
};

// Full inpainting: noise from rng_seed, reverse process, decode, composite.
Image sample(const ParamStore& params, const SampleInputs& inputs, const DiffusionSchedule& schedule,
             const DenoiserConfig& config, int steps, SamplerMethod method, std::uint64_t rng_seed);

// output = person where mask == 0, clamp(decoded) where mask == 1.
Image composite(const Image& person, const Image& generated, const Mask& mask);

void save_denoiser(const ParamStore& params, const DenoiserConfig& config, const std::filesystem::path& file,
                   const nlohmann::json& extra = {});
std::pair<ParamStore, DenoiserConfig> load_denoiser(const std::filesystem::path& file);

}  // namespace vton
