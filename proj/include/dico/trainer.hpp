#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dico/data.hpp"
#include "dico/losses.hpp"
#include "dico/metrics.hpp"
#include "dico/networks.hpp"

namespace dico {

/// Training variants: the three DiCo backbone pairings, the static
/// mean-teacher baseline, and M1 trained on labeled data only.
enum class Variant { dico_ct, dico_cc, dico_tt, mt_baseline, supervised };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);
bool is_dico(Variant v);

/// Backbone pairing used by a variant. `base.m1` holds the convolutional
/// settings and `base.m2` the transformer settings:
///   dico-ct: (m1, m2 + multi-view)    dico-cc: (m1, m1 + multi-view)
///   dico-tt: (m2, m2 + multi-view)    mt-baseline / supervised: (m1, m1)
ModelConfig resolve_models(const ModelConfig& base, Variant v);

enum class Role { m1, m2 };
std::string to_string(Role r);

struct RoleAssignment {
  Role teacher = Role::m1;
  Role student = Role::m2;
  double l1_sup = 0.0;
  double l2_sup = 0.0;

  bool operator==(const RoleAssignment&) const = default;
};

/// M1 teaches iff l1_sup <= l2_sup (ties go to M1). Throws DivergenceError
/// on a non-finite loss.
RoleAssignment assign_roles(double l1_sup, double l2_sup);

struct TrainConfig {
  int64_t total_iterations = 40000;
  double lr_base = 1e-2;
  double gamma = 0.9;
  int64_t batch_size = 2;  ///< split evenly between labeled and unlabeled
  Extent3 crop{96, 96, 96};
  CropMode crop_mode = CropMode::center;
  uint64_t seed = 0;
  Variant variant = Variant::dico_ct;
  double weight_decay = 0.01;
  double disc_lr_base = 1e-4;
  /// Adversarial terms (generator and discriminator updates) start here.
  int64_t adv_start_iteration = 0;
  double ema_decay = 0.99;
  int64_t checkpoint_interval = 1000;
  int64_t val_interval = 0;  ///< 0 disables periodic validation
  bool audit_gradients = false;

  void validate() const;
};

/// lr_base * (1 - t / T)^gamma, and 0 for t >= T.
double lr_schedule(int64_t t, const TrainConfig& config);
double lr_schedule(int64_t t, int64_t total, double lr_base, double gamma);

/// Exact-zero gradient checks recorded when TrainConfig::audit_gradients is
/// set. Values are the largest absolute gradient entry seen.
struct GradientAudit {
  bool performed = false;
  double unsup_to_teacher = 0.0;    ///< d L^u / d teacher params
  double unsup_to_student = 0.0;    ///< d L^u / d student params (must be > 0)
  double adv_to_discriminator = 0.0;     ///< D grads after the generator backward
  double disc_to_generators = 0.0;       ///< M1/M2 grads after the D backward

  bool ok() const {
    return !performed || (unsup_to_teacher == 0.0 && unsup_to_student > 0.0 &&
                          adv_to_discriminator == 0.0 && disc_to_generators == 0.0);
  }
};

struct IterationState {
  int64_t iteration = 0;  ///< 0-based index of the step just taken
  double lr = 0.0;
  std::string rng_state;
  std::optional<RoleAssignment> roles;
  std::string teacher;  ///< "M1", "M2", "ema" or "none"
  LossReport losses;
  GradientAudit audit;
};

/// One key=value log line: t, lr, teacher and every LossReport field.
std::string format_log_line(const IterationState& s);

/// theta_teacher <- decay * theta_teacher + (1 - decay) * theta_student.
void ema_update(const std::vector<torch::Tensor>& teacher,
                const std::vector<torch::Tensor>& student, double decay);

struct CheckpointManifest {
  std::string config_hash;
  int64_t iteration = 0;
  std::string variant;
  std::string rng_state;
  std::string torch_rng_state;  // hex
  nlohmann::json config;
};

CheckpointManifest read_checkpoint_manifest(const std::filesystem::path& dir);

/// Owns the networks, optimizers and sampling RNG of one experiment.
///
/// M1 and M2 share one AdamW optimizer since roles alternate between
/// iterations; the discriminator has its own. For mt-baseline, M2 is the
/// EMA teacher of M1 and is not optimized.
class Trainer {
 public:
  Trainer(ModelConfig models, TrainConfig train, LossWeights weights,
          PseudoLabelMode pseudo_label = PseudoLabelMode::soft_dice_hard_ce);

  /// Dispatches to the step of the configured variant.
  IterationState step(const CropPair& labeled, const torch::Tensor& unlabeled);

  IterationState train_step(const CropPair& labeled, const torch::Tensor& unlabeled);
  IterationState train_step_mt_baseline(const CropPair& labeled, const torch::Tensor& unlabeled);
  IterationState train_step_supervised(const CropPair& labeled);

  int64_t iteration() const { return iteration_; }
  std::mt19937_64& rng() { return rng_; }
  std::string rng_state() const;

  const SegNet& m1() const { return m1_; }
  const SegNet& m2() const { return m2_; }
  const Discriminator2D& discriminator() const { return disc_; }
  const TrainConfig& config() const { return train_; }
  const ModelConfig& models() const { return models_; }

  void save_checkpoint(const std::filesystem::path& dir, const nlohmann::json& resolved_config,
                       const std::string& config_hash) const;
  /// Restores parameters, optimizer state, iteration counter and RNG state.
  CheckpointManifest load_checkpoint(const std::filesystem::path& dir);

 private:
  void set_learning_rates(int64_t t);
  void require_finite(const torch::Tensor& loss, const char* name) const;

  ModelConfig models_;
  TrainConfig train_;
  LossWeights weights_;
  PseudoLabelMode pseudo_label_;
  SegNet m1_;
  SegNet m2_;
  Discriminator2D disc_{nullptr};
  std::unique_ptr<torch::optim::AdamW> gen_opt_;
  std::unique_ptr<torch::optim::AdamW> disc_opt_;
  std::mt19937_64 rng_;
  int64_t iteration_ = 0;
};

struct RunOptions {
  std::filesystem::path output_dir;
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this many completed iterations (the schedule still uses
  /// the configured total). Simulates an interrupted run.
  std::optional<int64_t> stop_after;
  nlohmann::json resolved_config = nlohmann::json::object();
  std::string config_hash;
  /// Periodic validation of M1; called every val_interval iterations and
  /// at the end when set.
  std::function<MetricReport(const SegNet&)> validate;
};

struct RunResult {
  int64_t iterations_completed = 0;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<IterationState> history;
  std::optional<MetricReport> final_validation;
};

/// Training loop: appends one line per iteration to `train.log`, writes
/// checkpoints to `checkpoints/iter_NNNNNN` every checkpoint_interval and
/// at the final iteration, and validation lines to `val.log`.
RunResult run_training(Trainer& trainer, TrainingStream& stream, const RunOptions& options);

std::filesystem::path checkpoint_dir(const std::filesystem::path& output_dir, int64_t iteration);

}  // namespace dico
