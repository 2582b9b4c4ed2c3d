#pragma once

// Teacher/student self-distillation with an EMA teacher and either random or
// attention-keypoint-centred local crops.

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vton/augment.hpp"
#include "vton/keypoints.hpp"
#include "vton/vit.hpp"

namespace vton {

enum class CropMode { kRandom, kKeypoint };

CropMode parse_crop_mode(const std::string& s);
std::string to_string(CropMode mode);

struct DistillConfig {
  int global_crops = 2;   // M
  int local_crops = 10;   // N
  double student_temp = 0.1;
  double teacher_temp = 0.04;
  double center_momentum = 0.9;
  double ema_start = 0.996;
  double ema_end = 1.0;
  double learning_rate = 2e-5;
  double min_learning_rate = 0.0;
  double weight_decay = 0.04;
  int batch_size = 8;
  int epochs = 30;
  double mass_fraction = 0.6;
  int attention_layer = -1;  // keypoint source layer, -1 = final
  std::uint64_t seed = 0;

  void validate() const;
  int term_count() const { return global_crops * (global_crops + local_crops - 1); }
};

struct TeacherState {
  ParamStore params;
  Vec center;  // running mean of teacher logits, proj_dim
};

// -sum_i a_i log b_i with b clamped to >= 1e-12.
double cross_entropy(std::span<const double> a, std::span<const double> b);

struct SsLoss {
  double value = 0.0;
  int terms = 0;
};

// Sums H(teacher[i], student[j]) over i < M and j != i. Global views occupy
// the first M slots of both lists.
SsLoss ss_loss(const std::vector<Vec>& teacher_dists, const std::vector<Vec>& student_dists, int global_crops,
               int local_crops);

// softmax((logits - center) / temperature)
Vec teacher_distribution(const RowVec& logits, const Vec& center, double temperature);
Vec teacher_distribution(const TeacherState& state, const Image& view, const ViTConfig& config, double temperature);

// Differentiable student side of the objective for one image: the summed
// cross-entropy of every (teacher global i, student view j != i) pair.
Var student_loss_graph(Tape& tape, ParamStore& student, const std::vector<Image>& views,
                       const std::vector<Vec>& teacher_dists, const ViTConfig& vit, const DistillConfig& distill);

struct StepLog {
  long step = 0;
  int epoch = 0;
  double loss = 0.0;  // mean per cross-entropy term over the batch
  int terms = 0;      // per image
  double lambda = 0.0;
  double lr = 0.0;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  // Mean fraction of patches needed to cover the mass threshold of the
  // teacher's class attention (lower = more concentrated).
  double attention_spread = 0.0;
  int reduced_keypoint_sets = 0;
};

// Ground-truth free diagnostic used in epoch logs.
double attention_spread(const TeacherState& teacher, const std::vector<Image>& inputs, const ViTConfig& config,
                        double mass_fraction);

class SslTrainer {
 public:
  SslTrainer(ViTConfig vit, DistillConfig distill, AugmentPolicy policy, CropMode mode, ParamStore student_init);

  // Recomputes keypoints (keypoint mode) for the dataset from the current teacher.
  void begin_epoch(const std::vector<Image>& dataset);
  StepLog step(const std::vector<Image>& dataset, std::span<const std::size_t> batch);
  // Runs config.epochs epochs over shuffled batches.
  std::vector<EpochLog> train(const std::vector<Image>& dataset, std::ostream* jsonl_log = nullptr,
                              const std::function<void(const EpochLog&)>& on_epoch = {});

  const TeacherState& teacher() const { return teacher_; }
  const ParamStore& student() const { return student_; }
  void set_total_steps(long total) { total_steps_ = total; }
  long steps_done() const { return step_; }

  // Views for one image: M global views then N local views, normalized.
  std::vector<Image> make_views(const std::vector<Image>& dataset, std::size_t index);

 private:
  double current_lambda() const;
  double current_lr() const;

  ViTConfig vit_;
  DistillConfig distill_;
  AugmentPolicy policy_;
  CropMode mode_;
  ParamStore student_;
  TeacherState teacher_;
  AdamW optimizer_;
  Rng rng_;
  long step_ = 0;
  long total_steps_ = 1;
  int epoch_ = 0;
  std::vector<std::optional<KeypointSet>> keypoints_;
  int reduced_sets_ = 0;
};

// Normalizes an unaugmented garment image for the encoder.
Image encoder_input(const Image& image, const AugmentPolicy& policy);

}  // namespace vton
