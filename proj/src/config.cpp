#include "vton/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "vton/errors.hpp"

namespace vton {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const std::string t = trim(text);
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      v = static_cast<T>(std::stod(t, &used));
      if (used != t.size()) throw std::invalid_argument(t);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected a number, got '" + text + "'");
    }
  } else {
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size()) {
      throw ConfigError("config key '" + key + "': expected an integer, got '" + text + "'");
    }
  }
  return v;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::function<void(const std::string&, const std::string&)> set;
  std::function<std::string()> get;
};

template <typename T>
Field bind(T& ref) {
  if constexpr (std::is_same_v<T, std::string>) {
    return {[&ref](const std::string&, const std::string& v) { ref = trim(v); }, [&ref] { return ref; }};
  } else if constexpr (std::is_floating_point_v<T>) {
    return {[&ref](const std::string& k, const std::string& v) { ref = parse_number<T>(k, v); },
            [&ref] { return fmt_double(ref); }};
  } else {
    return {[&ref](const std::string& k, const std::string& v) { ref = parse_number<T>(k, v); },
            [&ref] { return std::to_string(ref); }};
  }
}

Field bind_triple(std::array<double, 3>& ref) {
  return {[&ref](const std::string& k, const std::string& v) {
            std::stringstream ss(v);
            std::string part;
            int i = 0;
            while (std::getline(ss, part, ',')) {
              if (i >= 3) throw ConfigError("config key '" + k + "': expected three comma-separated values");
              ref[static_cast<std::size_t>(i++)] = parse_number<double>(k, part);
            }
            if (i != 3) throw ConfigError("config key '" + k + "': expected three comma-separated values");
          },
          [&ref] { return fmt_double(ref[0]) + "," + fmt_double(ref[1]) + "," + fmt_double(ref[2]); }};
}

std::map<std::string, Field> fields(ExperimentConfig& c) {
  return {
      {"seed", bind(c.seed)},
      {"data.root", bind(c.data_root)},
      {"out.dir", bind(c.out_dir)},
      {"data.split", bind(c.split)},
      {"data.limit", bind(c.limit)},
      {"encoder.checkpoint", bind(c.encoder_checkpoint)},
      {"denoiser.checkpoint", bind(c.denoiser_checkpoint)},
      {"eval.infer_dir", bind(c.infer_dir)},
      {"vit.image_height", bind(c.vit.image_height)},
      {"vit.image_width", bind(c.vit.image_width)},
      {"vit.patch_size", bind(c.vit.patch_size)},
      {"vit.embed_dim", bind(c.vit.embed_dim)},
      {"vit.num_heads", bind(c.vit.num_heads)},
      {"vit.depth", bind(c.vit.depth)},
      {"vit.mlp_ratio", bind(c.vit.mlp_ratio)},
      {"vit.proj_dim", bind(c.vit.proj_dim)},
      {"vit.condition_dim", bind(c.vit.condition_dim)},
      {"vit.local_size", bind(c.vit.local_size)},
      {"vit.init_seed", bind(c.vit.init_seed)},
      {"ssl.crop_mode", bind(c.crop_mode)},
      {"ssl.global_crops", bind(c.ssl.global_crops)},
      {"ssl.local_crops", bind(c.ssl.local_crops)},
      {"ssl.student_temp", bind(c.ssl.student_temp)},
      {"ssl.teacher_temp", bind(c.ssl.teacher_temp)},
      {"ssl.center_momentum", bind(c.ssl.center_momentum)},
      {"ssl.ema_start", bind(c.ssl.ema_start)},
      {"ssl.ema_end", bind(c.ssl.ema_end)},
      {"ssl.learning_rate", bind(c.ssl.learning_rate)},
      {"ssl.min_learning_rate", bind(c.ssl.min_learning_rate)},
      {"ssl.weight_decay", bind(c.ssl.weight_decay)},
      {"ssl.batch_size", bind(c.ssl.batch_size)},
      {"ssl.epochs", bind(c.ssl.epochs)},
      {"ssl.mass_fraction", bind(c.ssl.mass_fraction)},
      {"ssl.attention_layer", bind(c.ssl.attention_layer)},
      {"ssl.seed", bind(c.ssl.seed)},
      {"augment.flip_prob", bind(c.augment.flip_prob)},
      {"augment.brightness", bind(c.augment.brightness)},
      {"augment.contrast", bind(c.augment.contrast)},
      {"augment.saturation", bind(c.augment.saturation)},
      {"augment.blur_prob", bind(c.augment.blur_prob)},
      {"augment.blur_sigma_min", bind(c.augment.blur_sigma.first)},
      {"augment.blur_sigma_max", bind(c.augment.blur_sigma.second)},
      {"augment.mean", bind_triple(c.augment.mean)},
      {"augment.std", bind_triple(c.augment.std)},
      {"augment.seed", bind(c.augment.rng_seed)},
      {"diffusion.steps", bind(c.schedule.steps)},
      {"diffusion.beta_start", bind(c.schedule.beta_start)},
      {"diffusion.beta_end", bind(c.schedule.beta_end)},
      {"diffusion.schedule", bind(c.schedule.shape)},
      {"denoiser.base_channels", bind(c.denoiser.base_channels)},
      {"denoiser.levels", bind(c.denoiser.levels)},
      {"denoiser.time_dim", bind(c.denoiser.time_dim)},
      {"denoiser.attention_dim", bind(c.denoiser.attention_dim)},
      {"denoiser.prior_std", bind(c.denoiser.prior_std)},
      {"denoiser.init_seed", bind(c.denoiser.init_seed)},
      {"inpaint.epochs", bind(c.inpaint.epochs)},
      {"inpaint.batch_size", bind(c.inpaint.batch_size)},
      {"inpaint.learning_rate", bind(c.inpaint.learning_rate)},
      {"inpaint.min_learning_rate", bind(c.inpaint.min_learning_rate)},
      {"sample.steps", bind(c.sample.steps)},
      {"sample.method", bind(c.sample.method)},
      {"metrics.ssim_window", bind(c.ssim.window)},
      {"metrics.ssim_sigma", bind(c.ssim.sigma)},
      {"metrics.ssim_k1", bind(c.ssim.k1)},
      {"metrics.ssim_k2", bind(c.ssim.k2)},
      {"gen.pairs", bind(c.gen.pairs)},
      {"gen.test_fraction", bind(c.gen.test_fraction)},
  };
}

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  auto f = fields(*this);
  auto it = f.find(trim(key));
  if (it == f.end()) throw ConfigError("unknown config key '" + trim(key) + "'");
  it->second.set(it->first, value);
}

std::string ExperimentConfig::get(const std::string& key) const {
  auto f = fields(const_cast<ExperimentConfig&>(*this));
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get();
}

std::map<std::string, std::string> ExperimentConfig::snapshot() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : fields(const_cast<ExperimentConfig&>(*this))) out[k] = f.get();
  return out;
}

void ExperimentConfig::validate() const {
  auto wrap = [](const std::string& key, const std::function<void()>& check) {
    try {
      check();
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  };
  wrap("vit.*", [&] { vit.validate(); });
  wrap("ssl.*", [&] { ssl.validate(); });
  wrap("ssl.crop_mode", [&] { parse_crop_mode(crop_mode); });
  wrap("augment.*", [&] { augment.validate(); });
  wrap("diffusion.*", [&] {
    if (schedule.shape != "linear") throw ConfigError("only the linear schedule is supported");
    build_schedule(schedule.steps, schedule.beta_start, schedule.beta_end).validate();
  });
  wrap("denoiser.*", [&] { denoiser.validate(); });
  wrap("sample.method", [&] { parse_sampler(sample.method); });
  if (sample.steps < 1 || sample.steps > schedule.steps) throw ConfigError("config key 'sample.steps': must lie in [1, diffusion.steps]");
  if (inpaint.epochs < 0 || inpaint.batch_size < 1 || inpaint.learning_rate < 0.0) {
    throw ConfigError("config key 'inpaint.*': epochs >= 0, batch_size >= 1, learning_rate >= 0 required");
  }
  if (gen.pairs < 1) throw ConfigError("config key 'gen.pairs': must be positive");
  if (!(gen.test_fraction >= 0.0 && gen.test_fraction < 1.0)) throw ConfigError("config key 'gen.test_fraction': must lie in [0,1)");
  if (split != "train" && split != "test" && split != "all") throw ConfigError("config key 'data.split': train, test, or all");
  if (limit < 0) throw ConfigError("config key 'data.limit': must be >= 0");
  if (ssim.window < 1 || ssim.window % 2 == 0 || !(ssim.sigma > 0.0)) throw ConfigError("config key 'metrics.ssim_window': odd positive window and positive sigma required");
  if (vit.image_height % kLatentFactor != 0 || vit.image_width % kLatentFactor != 0) {
    throw ConfigError("config key 'vit.image_height': image size must be divisible by the latent factor 4");
  }
}

void ExperimentConfig::apply_seed(std::uint64_t s) {
  seed = s;
  vit.init_seed = s;
  ssl.seed = s + 1;
  augment.rng_seed = s + 2;
  denoiser.init_seed = s + 3;
}

void parse_config_text(const std::string& text, ExperimentConfig& config, const std::string& source) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  std::vector<std::pair<std::string, std::string>> explicit_seeds;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key == "seed") {
      config.apply_seed(parse_number<std::uint64_t>(key, value));
      continue;
    }
    if (key == "vit.init_seed" || key == "ssl.seed" || key == "augment.seed" || key == "denoiser.init_seed") {
      explicit_seeds.emplace_back(key, value);
      continue;
    }
    config.set(key, value);
  }
  for (const auto& [k, v] : explicit_seeds) config.set(k, v);
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw ConfigError("cannot read config file " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  ExperimentConfig c;
  parse_config_text(ss.str(), c, file.string());
  return c;
}

std::string render_config(const ExperimentConfig& config) {
  std::string out;
  for (const auto& [k, v] : config.snapshot()) out += k + " = " + v + "\n";
  return out;
}

}  // namespace vton
