#include "vton/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "vton/errors.hpp"

namespace vton {

CropMode parse_crop_mode(const std::string& s) {
  if (s == "random") return CropMode::kRandom;
  if (s == "keypoint") return CropMode::kKeypoint;
  throw ConfigError("crop mode must be 'random' or 'keypoint', got '" + s + "'");
}

std::string to_string(CropMode mode) { return mode == CropMode::kRandom ? "random" : "keypoint"; }

void DistillConfig::validate() const {
  if (global_crops < 1 || local_crops < 0) throw ConfigError("ssl: need global_crops >= 1 and local_crops >= 0");
  if (!(student_temp > 0.0) || !(teacher_temp > 0.0)) throw ConfigError("ssl: temperatures must be positive");
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(center_momentum) || !unit(ema_start) || !unit(ema_end)) throw ConfigError("ssl: momenta must lie in [0,1]");
  if (learning_rate < 0.0 || min_learning_rate < 0.0 || weight_decay < 0.0) throw ConfigError("ssl: negative lr or decay");
  if (batch_size < 1 || epochs < 0) throw ConfigError("ssl: batch_size >= 1 and epochs >= 0 required");
  if (!(mass_fraction > 0.0 && mass_fraction < 1.0)) throw ConfigError("ssl: mass_fraction must be in (0,1)");
}

double cross_entropy(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cross_entropy: length mismatch");
  double h = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) h -= a[i] * std::log(std::max(b[i], 1e-12));
  return h;
}

SsLoss ss_loss(const std::vector<Vec>& teacher_dists, const std::vector<Vec>& student_dists, int global_crops,
               int local_crops) {
  if (static_cast<int>(teacher_dists.size()) != global_crops ||
      static_cast<int>(student_dists.size()) != global_crops + local_crops) {
    throw ShapeError("ss_loss: expected " + std::to_string(global_crops) + " teacher and " +
                     std::to_string(global_crops + local_crops) + " student distributions");
  }
  SsLoss out;
  for (int i = 0; i < global_crops; ++i) {
    const Vec& a = teacher_dists[static_cast<std::size_t>(i)];
    for (int j = 0; j < global_crops + local_crops; ++j) {
      if (j == i) continue;
      const Vec& b = student_dists[static_cast<std::size_t>(j)];
      out.value += cross_entropy({a.data(), static_cast<std::size_t>(a.size())}, {b.data(), static_cast<std::size_t>(b.size())});
      ++out.terms;
    }
  }
  return out;
}

Vec teacher_distribution(const RowVec& logits, const Vec& center, double temperature) {
  if (logits.size() != center.size()) throw ShapeError("teacher_distribution: center width mismatch");
  const Mat scaled = ((logits - center.transpose()) / temperature);
  return softmax_rows(scaled).row(0).transpose();
}

Vec teacher_distribution(const TeacherState& state, const Image& view, const ViTConfig& config, double temperature) {
  return teacher_distribution(vit_forward(state.params, view, config).logits, state.center, temperature);
}

Var student_loss_graph(Tape& tape, ParamStore& student, const std::vector<Image>& views,
                       const std::vector<Vec>& teacher_dists, const ViTConfig& vit, const DistillConfig& distill) {
  const int m = distill.global_crops;
  if (static_cast<int>(teacher_dists.size()) != m || static_cast<int>(views.size()) != m + distill.local_crops) {
    throw ShapeError("student_loss_graph: view counts do not match the distillation config");
  }
  std::vector<Var> terms;
  for (std::size_t j = 0; j < views.size(); ++j) {
    Mat targets(0, vit.proj_dim);
    for (int i = 0; i < m; ++i) {
      if (static_cast<std::size_t>(i) == j) continue;
      targets.conservativeResize(targets.rows() + 1, Eigen::NoChange);
      targets.row(targets.rows() - 1) = teacher_dists[static_cast<std::size_t>(i)].transpose();
    }
    if (targets.rows() == 0) continue;
    ViTGraph g = vit_graph(tape, student, views[j], vit);
    terms.push_back(ag::soft_cross_entropy(g.logits, targets, distill.student_temp));
  }
  if (terms.empty()) return tape.constant(Mat::Zero(1, 1));
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ag::add(total, terms[i]);
  return total;
}

Image encoder_input(const Image& image, const AugmentPolicy& policy) { return normalize(image, policy); }

double attention_spread(const TeacherState& teacher, const std::vector<Image>& inputs, const ViTConfig& config,
                        double mass_fraction) {
  if (inputs.empty()) return 0.0;
  double acc = 0.0;
  int count = 0;
  for (const Image& img : inputs) {
    const AttentionMap map = vit_forward(teacher.params, img, config).attention;
    for (int h = 0; h < map.num_heads(); ++h) {
      const RowVec row = map.head_rows.row(h);
      acc += static_cast<double>(threshold_head({row.data(), static_cast<std::size_t>(row.size())}, mass_fraction).size()) /
             map.num_patches();
      ++count;
    }
  }
  return acc / count;
}

SslTrainer::SslTrainer(ViTConfig vit, DistillConfig distill, AugmentPolicy policy, CropMode mode,
                       ParamStore student_init)
    : vit_(vit),
      distill_(distill),
      policy_(policy),
      mode_(mode),
      student_(std::move(student_init)),
      optimizer_(0.9, 0.999, 1e-8, distill.weight_decay),
      rng_(distill.seed) {
  vit_.validate();
  distill_.validate();
  policy_.validate();
  validate_vit_params(student_, vit_);
  teacher_.params = student_;
  teacher_.center = Vec::Zero(vit_.proj_dim);
}

double SslTrainer::current_lambda() const {
  return cosine_schedule(distill_.ema_start, distill_.ema_end,
                         static_cast<double>(step_) / static_cast<double>(std::max<long>(1, total_steps_)));
}

double SslTrainer::current_lr() const {
  return cosine_schedule(distill_.learning_rate, distill_.min_learning_rate,
                         static_cast<double>(step_) / static_cast<double>(std::max<long>(1, total_steps_)));
}

void SslTrainer::begin_epoch(const std::vector<Image>& dataset) {
  keypoints_.assign(dataset.size(), std::nullopt);
  reduced_sets_ = 0;
  if (mode_ != CropMode::kKeypoint || distill_.local_crops == 0) return;
  KeypointOptions opts;
  opts.mass_fraction = distill_.mass_fraction;
  opts.num_keypoints = distill_.local_crops;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const AttentionMap map =
        vit_forward(teacher_.params, encoder_input(dataset[i], policy_), vit_, distill_.attention_layer).attention;
    KeypointSet keys = keypoints_from_attention(map, opts, rng_);
    if (keys.reduced) ++reduced_sets_;
    keypoints_[i] = std::move(keys);
  }
}

std::vector<Image> SslTrainer::make_views(const std::vector<Image>& dataset, std::size_t index) {
  const Image& img = dataset[index];
  std::vector<Image> views;
  views.reserve(static_cast<std::size_t>(distill_.global_crops + distill_.local_crops));
  for (int g = 0; g < distill_.global_crops; ++g) {
    AugmentPolicy p = policy_;
    if (g == 0) p.blur_prob = 1.0;
    const CropBox box = sample_crop_box(rng_, kGlobalScale, kAspectRange, img.height(), img.width()).box;
    views.push_back(augment_view(img, box, p, rng_, vit_.image_height, vit_.image_width));
  }
  std::vector<CropBox> local_boxes;
  if (mode_ == CropMode::kKeypoint && distill_.local_crops > 0) {
    if (index >= keypoints_.size() || !keypoints_[index]) {
      throw ConfigError("ssl: keypoints missing; call begin_epoch() before stepping");
    }
    local_boxes = keypoint_crop_boxes(*keypoints_[index], kLocalScale, vit_.patch_size, img.height(), img.width(), rng_);
  } else {
    for (int l = 0; l < distill_.local_crops; ++l) {
      local_boxes.push_back(sample_crop_box(rng_, kLocalScale, kAspectRange, img.height(), img.width()).box);
    }
  }
  for (const CropBox& box : local_boxes) {
    views.push_back(augment_view(img, box, policy_, rng_, vit_.local_size, vit_.local_size));
  }
  return views;
}

StepLog SslTrainer::step(const std::vector<Image>& dataset, std::span<const std::size_t> batch) {
  const double lambda = current_lambda();
  const double lr = current_lr();
  const int m = distill_.global_crops;
  const int terms = distill_.term_count();
  student_.zero_grad();
  Vec logit_sum = Vec::Zero(vit_.proj_dim);
  int logit_count = 0;
  double loss_sum = 0.0;
  const double norm = 1.0 / (static_cast<double>(batch.size()) * std::max(1, terms));
  for (std::size_t idx : batch) {
    const std::vector<Image> views = make_views(dataset, idx);
    std::vector<Vec> teacher_dists;
    for (int g = 0; g < m; ++g) {
      const RowVec logits = vit_forward(teacher_.params, views[static_cast<std::size_t>(g)], vit_).logits;
      teacher_dists.push_back(teacher_distribution(logits, teacher_.center, distill_.teacher_temp));
      logit_sum += logits.transpose();
      ++logit_count;
    }
    Tape tape;
    Var loss = student_loss_graph(tape, student_, views, teacher_dists, vit_, distill_);
    loss_sum += loss.value()(0, 0);
    tape.backward(ag::scale(loss, norm));
  }
  const double mean_loss = loss_sum * norm;
  if (!std::isfinite(mean_loss)) {
    throw NumericalError("ssl: loss diverged at step " + std::to_string(step_));
  }
  optimizer_.step(student_, lr);
  ema_update(teacher_.params, student_, lambda);
  const double mom = distill_.center_momentum;
  teacher_.center = mom * teacher_.center + (1.0 - mom) * (logit_sum / std::max(1, logit_count));

  StepLog log;
  log.step = step_;
  log.epoch = epoch_;
  log.loss = mean_loss;
  log.terms = terms;
  log.lambda = lambda;
  log.lr = lr;
  ++step_;
  return log;
}

std::vector<EpochLog> SslTrainer::train(const std::vector<Image>& dataset, std::ostream* jsonl_log,
                                        const std::function<void(const EpochLog&)>& on_epoch) {
  if (dataset.empty()) throw ConfigError("ssl: dataset is empty");
  const long batches_per_epoch =
      (static_cast<long>(dataset.size()) + distill_.batch_size - 1) / distill_.batch_size;
  total_steps_ = std::max<long>(1, batches_per_epoch * distill_.epochs);
  std::vector<EpochLog> epochs;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < distill_.epochs; ++e) {
    epoch_ = e;
    begin_epoch(dataset);
    std::shuffle(order.begin(), order.end(), rng_);
    double loss_acc = 0.0;
    long n_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(distill_.batch_size)) {
      const std::size_t len = std::min(order.size() - start, static_cast<std::size_t>(distill_.batch_size));
      const StepLog s = step(dataset, std::span<const std::size_t>(order.data() + start, len));
      loss_acc += s.loss;
      ++n_steps;
      if (jsonl_log != nullptr) {
        nlohmann::json j = {{"step", s.step}, {"epoch", s.epoch}, {"loss", s.loss},
                            {"terms", s.terms}, {"lambda", s.lambda}, {"lr", s.lr}};
        *jsonl_log << j.dump() << "\n";
      }
    }
    EpochLog log;
    log.epoch = e;
    log.mean_loss = loss_acc / static_cast<double>(std::max<long>(1, n_steps));
    std::vector<Image> probe;
    for (std::size_t i = 0; i < std::min<std::size_t>(16, dataset.size()); ++i) {
      probe.push_back(encoder_input(dataset[i], policy_));
    }
    log.attention_spread = attention_spread(teacher_, probe, vit_, distill_.mass_fraction);
    log.reduced_keypoint_sets = reduced_sets_;
    epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return epochs;
}

}  // namespace vton
