#include "vton/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>

#include <CLI11.hpp>

#include "vton/dataset.hpp"
#include "vton/diffusion.hpp"
#include "vton/errors.hpp"
#include "vton/metrics.hpp"
#include "vton/ssl.hpp"
#include "vton/synth.hpp"

namespace vton {

namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config_path;
  std::int64_t seed = -1;
  std::string out;
  std::string crop_mode;
  int steps = 0;
  std::string method;
  std::string data;
  std::string encoder;
  std::string denoiser;
  std::vector<std::string> overrides;
};

void add_common_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config_path, "flat key = value config file");
  cmd->add_option("--seed", f.seed, "global rng seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--crop-mode", f.crop_mode, "local crop policy")->check(CLI::IsMember({"random", "keypoint"}));
  cmd->add_option("--steps", f.steps, "sampler steps");
  cmd->add_option("--method", f.method, "sampler")->check(CLI::IsMember({"ddim", "plms"}));
  cmd->add_option("--data", f.data, "dataset root");
  cmd->add_option("--encoder", f.encoder, "condition encoder checkpoint");
  cmd->add_option("--denoiser", f.denoiser, "denoiser checkpoint");
  cmd->add_option("--set", f.overrides, "config override key=value (repeatable)");
}

ExperimentConfig build_config(const Flags& f) {
  ExperimentConfig c;
  if (!f.config_path.empty()) c = load_config(f.config_path);
  if (f.seed >= 0) c.apply_seed(static_cast<std::uint64_t>(f.seed));
  for (const std::string& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    if (key == "seed") {
      c.apply_seed(std::stoull(kv.substr(eq + 1)));
    } else {
      c.set(key, kv.substr(eq + 1));
    }
  }
  if (!f.out.empty()) c.out_dir = f.out;
  if (!f.crop_mode.empty()) c.crop_mode = f.crop_mode;
  if (f.steps > 0) c.sample.steps = f.steps;
  if (!f.method.empty()) c.sample.method = f.method;
  if (!f.data.empty()) c.data_root = f.data;
  if (!f.encoder.empty()) c.encoder_checkpoint = f.encoder;
  if (!f.denoiser.empty()) c.denoiser_checkpoint = f.denoiser;
  c.validate();
  return c;
}

void require_path(const std::string& key, const std::string& path) {
  if (path.empty()) throw ConfigError("config key '" + key + "' is required for this command");
  if (!fs::exists(path)) throw ConfigError("config key '" + key + "': path '" + path + "' does not exist");
}

class Manifest {
 public:
  Manifest(std::string command, const ExperimentConfig& config, const std::vector<std::string>& argv)
      : command_(std::move(command)), config_(config), argv_(argv) {}

  void add_input(const fs::path& file) {
    if (fs::is_regular_file(file)) inputs_[file.generic_string()] = git_blob_hash_file(file);
  }
  void add_dataset(const PairedDatasetIndex& index, const std::vector<PairRecord>& records) {
    add_input(index.root / "index.json");
    for (const PairRecord& r : records) {
      for (const std::string* rel : {&r.person, &r.garment, &r.mask, &r.agnostic, &r.flow}) {
        if (!rel->empty()) add_input(index.path(*rel));
      }
    }
  }
  void add_output(const std::string& rel) { outputs_.push_back(rel); }
  nlohmann::json& extra() { return extra_; }

  void write(const fs::path& dir) const {
    nlohmann::json cfg = nlohmann::json::object();
    for (const auto& [k, v] : config_.snapshot()) cfg[k] = v;
    std::string digest_src;
    for (const auto& [path, hash] : inputs_) digest_src += path + " " + hash + "\n";
    nlohmann::json j = {{"command", command_},
                        {"argv", argv_},
                        {"seed", config_.seed},
                        {"config", cfg},
                        {"inputs", inputs_},
                        {"inputs_hash", git_blob_hash(digest_src)},
                        {"outputs", outputs_}};
    if (!extra_.is_null()) j["summary"] = extra_;
    write_json(j, dir / "manifest.json");
    std::ofstream(dir / "config.txt") << render_config(config_);
  }

 private:
  std::string command_;
  const ExperimentConfig& config_;
  std::vector<std::string> argv_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
  nlohmann::json extra_;
};

std::vector<Image> load_garments(const PairedDatasetIndex& index, const std::vector<PairRecord>& records,
                                 const ViTConfig& vit) {
  std::vector<Image> out;
  for (const PairRecord& r : records) {
    Image g = read_image(index.path(r.garment));
    if (g.height() != vit.image_height || g.width() != vit.image_width) {
      throw ConfigError("record " + r.id + ": garment is " + std::to_string(g.height()) + "x" +
                        std::to_string(g.width()) + ", vit.image_* expects " + std::to_string(vit.image_height) +
                        "x" + std::to_string(vit.image_width));
    }
    out.push_back(std::move(g));
  }
  return out;
}

Color jet(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return {std::clamp(1.5 - std::abs(4.0 * v - 3.0), 0.0, 1.0), std::clamp(1.5 - std::abs(4.0 * v - 2.0), 0.0, 1.0),
          std::clamp(1.5 - std::abs(4.0 * v - 1.0), 0.0, 1.0)};
}

Image upscale_nearest(const Image& img, int scale) {
  Image out(img.height() * scale, img.width() * scale, img.channels());
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = img.at(y / scale, x / scale, c);
  return out;
}

// -------------------------------------------------------------------------
// Subcommands

int cmd_gen_data(const ExperimentConfig& c, const std::vector<std::string>& argv, std::ostream& out) {
  const fs::path dir = c.out_dir;
  const PairedDatasetIndex index = gen_synthetic_dataset(c.gen.pairs, c.vit.image_height, c.vit.image_width, c.seed,
                                                         dir, c.gen.test_fraction);
  Manifest m("gen-data", c, argv);
  m.add_output("index.json");
  m.extra() = {{"pairs", index.records.size()},
               {"train", index.select("train").size()},
               {"test", index.select("test").size()}};
  m.write(dir);
  out << "wrote " << index.records.size() << " pairs to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_train_ssl(const ExperimentConfig& c, const std::vector<std::string>& argv, std::ostream& out) {
  require_path("data.root", c.data_root);
  const PairedDatasetIndex index = PairedDatasetIndex::load(c.data_root);
  const std::vector<PairRecord> records = index.select("train", c.limit);
  if (records.empty()) throw ConfigError("config key 'data.root': no training records");
  const std::vector<Image> garments = load_garments(index, records, c.vit);
  const fs::path dir = c.out_dir;
  fs::create_directories(dir / "checkpoints");

  Manifest m("train-ssl", c, argv);
  m.add_dataset(index, records);
  ParamStore init = init_vit_params(c.vit);
  if (!c.encoder_checkpoint.empty()) {
    require_path("encoder.checkpoint", c.encoder_checkpoint);
    auto [loaded, cfg] = load_vit(c.encoder_checkpoint);
    if (cfg.to_json() != c.vit.to_json()) {
      nlohmann::json a = cfg.to_json(), b = c.vit.to_json();
      a.erase("init_seed");
      b.erase("init_seed");
      if (a != b) throw ConfigError("config key 'encoder.checkpoint': checkpoint config differs from vit.*");
    }
    init = std::move(loaded);
    m.add_input(c.encoder_checkpoint);
  }

  SslTrainer trainer(c.vit, c.ssl, c.augment, parse_crop_mode(c.crop_mode), std::move(init));
  std::ofstream log(dir / "train_log.jsonl");
  nlohmann::json epochs = nlohmann::json::array();
  trainer.train(garments, &log, [&](const EpochLog& e) {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03d", e.epoch);
    save_vit(trainer.teacher().params, c.vit, dir / "checkpoints" / (std::string(name) + "_teacher.vtw"), "teacher");
    save_vit(trainer.student(), c.vit, dir / "checkpoints" / (std::string(name) + "_student.vtw"), "student");
    epochs.push_back({{"epoch", e.epoch},
                      {"mean_loss", e.mean_loss},
                      {"attention_spread", e.attention_spread},
                      {"reduced_keypoint_sets", e.reduced_keypoint_sets}});
    out << "epoch " << e.epoch << " loss " << e.mean_loss << " attention_spread " << e.attention_spread << "\n";
  });
  save_vit(trainer.teacher().params, c.vit, dir / "teacher.vtw", "teacher");
  save_vit(trainer.student(), c.vit, dir / "student.vtw", "student");
  write_json(epochs, dir / "epochs.json");
  m.add_output("teacher.vtw");
  m.add_output("student.vtw");
  m.add_output("train_log.jsonl");
  m.add_output("epochs.json");
  m.extra() = {{"epochs", epochs}, {"crop_mode", c.crop_mode}};
  m.write(dir);
  return kExitOk;
}

struct Encoder {
  ParamStore params;
  ViTConfig config;
  std::string hash;
};

Encoder load_encoder(const ExperimentConfig& c) {
  require_path("encoder.checkpoint", c.encoder_checkpoint);
  auto [params, cfg] = load_vit(c.encoder_checkpoint);
  return {std::move(params), cfg, git_blob_hash_file(c.encoder_checkpoint)};
}

int cmd_extract_keypoints(const ExperimentConfig& c, const std::vector<std::string>& argv, std::ostream& out) {
  require_path("data.root", c.data_root);
  const Encoder enc = load_encoder(c);
  const PairedDatasetIndex index = PairedDatasetIndex::load(c.data_root);
  const std::vector<PairRecord> records = index.select(c.split, c.limit);
  const std::vector<Image> garments = load_garments(index, records, enc.config);
  const fs::path dir = fs::path(c.out_dir) / "keypoints";
  fs::create_directories(dir);
  Manifest m("extract-keypoints", c, argv);
  m.add_input(c.encoder_checkpoint);
  m.add_dataset(index, records);
  Rng rng(c.seed);
  KeypointOptions opts;
  opts.mass_fraction = c.ssl.mass_fraction;
  opts.num_keypoints = std::max(1, c.ssl.local_crops);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const AttentionMap map =
        vit_forward(enc.params, encoder_input(garments[i], c.augment), enc.config, c.ssl.attention_layer).attention;
    std::vector<HighAttentionPoints> per_head;
    for (int h = 0; h < map.num_heads(); ++h) per_head.push_back(head_points(map, h, opts.mass_fraction));
    const HighAttentionPoints merged = merge_heads(per_head);
    const KeypointSet keys = cluster_keypoints(merged, opts.num_keypoints, rng, opts.kmeans);
    const std::vector<CropBox> boxes =
        keypoint_crop_boxes(keys, kLocalScale, enc.config.patch_size, garments[i].height(), garments[i].width(), rng);

    nlohmann::json heads = nlohmann::json::array();
    for (const HighAttentionPoints& hp : per_head) {
      nlohmann::json pts = nlohmann::json::array();
      for (std::size_t k = 0; k < hp.size(); ++k) {
        pts.push_back({{"row", hp.points[k].row}, {"col", hp.points[k].col}, {"weight", hp.weight[k]}});
      }
      heads.push_back(pts);
    }
    nlohmann::json cents = nlohmann::json::array();
    for (const auto& ct : keys.centroids) cents.push_back({ct[0], ct[1]});
    nlohmann::json rects = nlohmann::json::array();
    for (const CropBox& b : boxes) rects.push_back({b.left, b.top, b.width, b.height});
    const nlohmann::json doc = {{"id", records[i].id},
                                {"grid_shape", {map.rows, map.cols}},
                                {"mass_fraction", opts.mass_fraction},
                                {"head_points", heads},
                                {"centroids", cents},
                                {"effective_k", keys.effective_k},
                                {"reduced", keys.reduced},
                                {"crop_rects", rects}};
    write_json(doc, dir / (records[i].id + ".json"));
    write_png(keypoint_overlay(garments[i], keys, merged, enc.config.patch_size), dir / (records[i].id + "_overlay.png"));
    m.add_output("keypoints/" + records[i].id + ".json");
    m.add_output("keypoints/" + records[i].id + "_overlay.png");
  }
  m.write(c.out_dir);
  out << "extracted keypoints for " << records.size() << " garments\n";
  return kExitOk;
}

int cmd_visualize_attention(const ExperimentConfig& c, const std::vector<std::string>& argv, std::ostream& out) {
  require_path("data.root", c.data_root);
  const Encoder enc = load_encoder(c);
  const PairedDatasetIndex index = PairedDatasetIndex::load(c.data_root);
  const std::vector<PairRecord> records = index.select(c.split, c.limit);
  const std::vector<Image> garments = load_garments(index, records, enc.config);
  const fs::path dir = fs::path(c.out_dir) / "attention";
  fs::create_directories(dir);
  Manifest m("visualize-attention", c, argv);
  m.add_input(c.encoder_checkpoint);
  m.add_dataset(index, records);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const AttentionMap map =
        vit_forward(enc.params, encoder_input(garments[i], c.augment), enc.config, c.ssl.attention_layer).attention;
    for (int h = 0; h < map.num_heads(); ++h) {
      const std::string name = records[i].id + "_head" + std::to_string(h) + ".png";
      write_png(attention_overlay(garments[i], map.head_rows.row(h), map.rows, map.cols), dir / name);
      m.add_output("attention/" + name);
    }
    const std::string name = records[i].id + "_mean.png";
    write_png(attention_overlay(garments[i], map.head_average(), map.rows, map.cols), dir / name);
    m.add_output("attention/" + name);
  }
  m.write(c.out_dir);
  out << "wrote attention overlays for " << records.size() << " garments\n";
  return kExitOk;
}

struct PreparedPair {
  PairRecord record;
  InpaintSample sample;
  ConditionEmbedding condition;
};

std::vector<PreparedPair> prepare_pairs(const PairedDatasetIndex& index, const std::vector<PairRecord>& records,
                                        const Encoder& enc, const AugmentPolicy& policy) {
  std::vector<PreparedPair> out;
  for (const PairRecord& r : records) {
    LoadedPair p = load_pair(index, r);
    if (p.flow.empty()) p.flow = affine_box_flow(p.garment, p.mask);
    PreparedPair pp;
    pp.record = r;
    pp.sample = assemble_coarse(p.person, p.garment, p.mask, p.flow);
    if (!p.agnostic.empty()) {
      // The coarse input is built from the clothes-agnostic person.
      pp.sample.coarse = composite(p.agnostic, warp_apply(p.garment, p.flow), p.mask);
    }
    pp.condition = vit_forward(enc.params, encoder_input(p.garment, policy), enc.config).condition;
    out.push_back(std::move(pp));
  }
  return out;
}

int cmd_train_inpaint(const ExperimentConfig& c, const std::vector<std::string>& argv, std::ostream& out) {
  require_path("data.root", c.data_root);
  const Encoder enc = load_encoder(c);
  const PairedDatasetIndex index = PairedDatasetIndex::load(c.data_root);
  const std::vector<PairRecord> records = index.select("train", c.limit);
  if (records.empty()) throw ConfigError("config key 'data.root': no training records");
  std::vector<PreparedPair> pairs = prepare_pairs(index, records, enc, c.augment);
  DenoiserConfig dcfg = c.denoiser;
  dcfg.condition_dim = enc.config.condition_dim;
  const DiffusionSchedule sched = build_schedule(c.schedule.steps, c.schedule.beta_start, c.schedule.beta_end);
  ParamStore params = init_denoiser_params(dcfg);
  AdamW opt(0.9, 0.999, 1e-8, 0.0);
  Rng rng(c.seed + 17);
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  std::ofstream log(dir / "inpaint_log.jsonl");
  Manifest m("train-inpaint", c, argv);
  m.add_input(c.encoder_checkpoint);
  m.add_dataset(index, records);

  const long per_epoch = (static_cast<long>(pairs.size()) + c.inpaint.batch_size - 1) / c.inpaint.batch_size;
  const long total = std::max<long>(1, per_epoch * c.inpaint.epochs);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  double epoch_loss = std::numeric_limits<double>::quiet_NaN();
  nlohmann::json epochs = nlohmann::json::array();
  for (int e = 0; e < c.inpaint.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double acc = 0.0;
    long n = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(c.inpaint.batch_size)) {
      const std::size_t len = std::min(order.size() - start, static_cast<std::size_t>(c.inpaint.batch_size));
      params.zero_grad();
      double loss = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const PreparedPair& p = pairs[order[start + k]];
        loss += train_step(params, p.sample, p.condition, sched, dcfg, rng, 1.0 / static_cast<double>(len)).loss;
      }
      loss /= static_cast<double>(len);
      if (!std::isfinite(loss)) throw NumericalError("train-inpaint: loss diverged at step " + std::to_string(step));
      const double lr = cosine_schedule(c.inpaint.learning_rate, c.inpaint.min_learning_rate,
                                        static_cast<double>(step) / static_cast<double>(total));
      opt.step(params, lr);
      log << nlohmann::json{{"step", step}, {"epoch", e}, {"loss", loss}, {"lr", lr}}.dump() << "\n";
      acc += loss;
      ++n;
      ++step;
    }
    epoch_loss = acc / static_cast<double>(std::max<long>(1, n));
    epochs.push_back({{"epoch", e}, {"mean_loss", epoch_loss}});
    out << "epoch " << e << " loss " << epoch_loss << "\n";
  }
  save_denoiser(params, dcfg, dir / "denoiser.vtw",
                {{"encoder_hash", enc.hash}, {"schedule_hash", sched.hash()}, {"final_loss", epoch_loss}});
  m.add_output("denoiser.vtw");
  m.add_output("inpaint_log.jsonl");
  m.extra() = {{"epochs", epochs}, {"final_loss", epoch_loss}};
  m.write(dir);
  return kExitOk;
}

int cmd_infer(const ExperimentConfig& c, const std::vector<std::string>& argv, std::ostream& out) {
  require_path("data.root", c.data_root);
  require_path("denoiser.checkpoint", c.denoiser_checkpoint);
  const Encoder enc = load_encoder(c);
  auto [params, dcfg] = load_denoiser(c.denoiser_checkpoint);
  if (dcfg.condition_dim != enc.config.condition_dim) {
    throw ConfigError("config key 'denoiser.checkpoint': condition width differs from the encoder's");
  }
  const PairedDatasetIndex index = PairedDatasetIndex::load(c.data_root);
  const std::vector<PairRecord> records = index.select(c.split, c.limit);
  const std::vector<PreparedPair> pairs = prepare_pairs(index, records, enc, c.augment);
  const DiffusionSchedule sched = build_schedule(c.schedule.steps, c.schedule.beta_start, c.schedule.beta_end);
  const SamplerMethod method = parse_sampler(c.sample.method);
  const fs::path dir = fs::path(c.out_dir) / "infer";
  fs::create_directories(dir);
  Manifest m("infer", c, argv);
  m.add_input(c.encoder_checkpoint);
  m.add_input(c.denoiser_checkpoint);
  m.add_dataset(index, records);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const PreparedPair& p = pairs[i];
    LoadedPair raw = load_pair(index, p.record);
    const Image& keep = raw.agnostic.empty() ? raw.person : raw.agnostic;
    const std::uint64_t seed = c.seed + i;
    SampleInputs in{&keep, &p.sample.mask, &p.sample.coarse, &p.condition};
    const Image result = sample(params, in, sched, dcfg, c.sample.steps, method, seed);
    const std::string id = p.record.id;
    write_png(result, dir / (id + ".png"));
    write_png(p.sample.coarse, dir / (id + "_coarse.png"));
    write_json({{"id", id},
                {"seed", seed},
                {"steps", c.sample.steps},
                {"method", to_string(method)},
                {"schedule_hash", sched.hash()},
                {"encoder_hash", enc.hash},
                {"denoiser_hash", git_blob_hash_file(c.denoiser_checkpoint)}},
               dir / (id + ".json"));
    m.add_output("infer/" + id + ".png");
  }
  m.write(c.out_dir);
  out << "inpainted " << pairs.size() << " samples\n";
  return kExitOk;
}

double mean_of(const std::vector<double>& v) { return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

int cmd_eval(const ExperimentConfig& c, const std::vector<std::string>& argv, std::ostream& out) {
  require_path("data.root", c.data_root);
  const Encoder enc = load_encoder(c);
  const fs::path infer_dir = c.infer_dir.empty() ? fs::path(c.out_dir) / "infer" : fs::path(c.infer_dir);
  if (!fs::is_directory(infer_dir)) throw ConfigError("config key 'eval.infer_dir': '" + infer_dir.string() + "' does not exist");
  const PairedDatasetIndex index = PairedDatasetIndex::load(c.data_root);
  std::map<std::string, PairRecord> by_id;
  for (const PairRecord& r : index.records) by_id[r.id] = r;

  std::vector<fs::path> sidecars;
  for (const auto& entry : fs::directory_iterator(infer_dir)) {
    if (entry.path().extension() == ".json") sidecars.push_back(entry.path());
  }
  std::sort(sidecars.begin(), sidecars.end());
  if (sidecars.empty()) throw ConfigError("eval: no inference outputs in " + infer_dir.string());

  Manifest m("eval", c, argv);
  m.add_input(c.encoder_checkpoint);
  nlohmann::json pairs = nlohmann::json::array();
  std::vector<double> scores, coarse_scores;
  std::vector<Image> generated, truth;
  for (const fs::path& sc : sidecars) {
    const nlohmann::json meta = read_json(sc);
    const std::string id = meta.at("id");
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ConfigError("eval: inference output '" + id + "' has no dataset record");
    const fs::path gen_path = infer_dir / (id + ".png");
    const fs::path coarse_path = infer_dir / (id + "_coarse.png");
    m.add_input(gen_path);
    const Image gen = read_image(gen_path);
    const Image gt = read_image(index.path(it->second.person));
    const double s = ssim(gen, gt, c.ssim);
    nlohmann::json row = {{"id", id}, {"ssim", s}};
    if (fs::exists(coarse_path)) {
      const double sc2 = ssim(read_image(coarse_path), gt, c.ssim);
      row["ssim_coarse"] = sc2;
      coarse_scores.push_back(sc2);
    }
    pairs.push_back(row);
    scores.push_back(s);
    generated.push_back(encoder_input(gen, c.augment));
    truth.push_back(encoder_input(gt, c.augment));
  }
  const GaussianStats gs = embed_stats(enc.params, enc.config, generated);
  const GaussianStats ts = embed_stats(enc.params, enc.config, truth);
  const double fd = frechet_embed_distance(gs, ts);
  nlohmann::json report = {{"pairs", pairs},
                           {"ssim_mean", mean_of(scores)},
                           {"ssim_std", std_of(scores)},
                           {"frechet_embed_distance", fd},
                           {"frechet_note", "computed on the condition encoder's class-token embeddings"},
                           {"generated_count", gs.n},
                           {"reference_count", ts.n},
                           {"rank_deficient", gs.rank_deficient || ts.rank_deficient},
                           {"encoder_hash", enc.hash}};
  if (!coarse_scores.empty()) {
    report["coarse_ssim_mean"] = mean_of(coarse_scores);
    report["coarse_ssim_std"] = std_of(coarse_scores);
  }
  write_json(report, fs::path(c.out_dir) / "report.json");
  m.add_output("report.json");
  m.write(c.out_dir);
  out << "ssim_mean " << mean_of(scores) << " frechet " << fd << "\n";
  return kExitOk;
}

}  // namespace

Image attention_overlay(const Image& image, const RowVec& attention, int grid_rows, int grid_cols, int scale) {
  const SparseMat up = bilinear_operator(grid_rows, grid_cols, image.height(), image.width());
  const Vec heat = up * attention.transpose();
  const double lo = heat.minCoeff(), hi = heat.maxCoeff();
  Image blended(image.height(), image.width(), 3);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      const double v = hi > lo ? (heat(y * image.width() + x) - lo) / (hi - lo) : 0.0;
      const Color col = jet(v);
      for (int ch = 0; ch < 3; ++ch) blended.at(y, x, ch) = 0.45 * image.at(y, x, ch) + 0.55 * col[static_cast<std::size_t>(ch)];
    }
  return upscale_nearest(blended, scale);
}

Image keypoint_overlay(const Image& image, const KeypointSet& keys, const HighAttentionPoints& points, int patch_size,
                       int scale) {
  Image out = upscale_nearest(image, scale);
  for (const GridPoint& p : points.points) {
    fill_disk(out, (p.col + 0.5) * patch_size * scale, (p.row + 0.5) * patch_size * scale, 1.5 * scale / 2.0,
              {1.0, 0.85, 0.1});
  }
  for (const auto& ct : keys.centroids) {
    fill_disk(out, (ct[1] + 0.5) * patch_size * scale, (ct[0] + 0.5) * patch_size * scale, 1.2 * scale, {0.9, 0.05, 0.05});
  }
  return out;
}

int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-supervised ViT conditioning for diffusion try-on", argv.empty() ? "vton" : argv.front()};
  app.require_subcommand(1);
  Flags flags;
  struct Entry {
    const char* name;
    const char* help;
    int (*fn)(const ExperimentConfig&, const std::vector<std::string>&, std::ostream&);
  };
  static constexpr Entry kCommands[] = {
      {"gen-data", "synthesize a paired garment/person dataset", cmd_gen_data},
      {"train-ssl", "self-distillation fine-tuning of the ViT encoder", cmd_train_ssl},
      {"extract-keypoints", "attention keypoints and local crop boxes per garment", cmd_extract_keypoints},
      {"visualize-attention", "per-head and head-average class attention overlays", cmd_visualize_attention},
      {"train-inpaint", "train the conditioned latent denoiser", cmd_train_inpaint},
      {"infer", "inpaint persons with the trained denoiser", cmd_infer},
      {"eval", "SSIM and embedding Frechet distance report", cmd_eval},
  };
  std::vector<CLI::App*> subs;
  for (const Entry& e : kCommands) {
    CLI::App* sub = app.add_subcommand(e.name, e.help);
    add_common_flags(sub, flags);
    subs.push_back(sub);
  }

  std::vector<std::string> args(argv.begin() + (argv.empty() ? 0 : 1), argv.end());
  std::reverse(args.begin(), args.end());  // CLI11 consumes a reversed vector
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      const ExperimentConfig config = build_config(flags);
      return kCommands[i].fn(config, argv, out);
    }
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kExitConfig;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace vton
