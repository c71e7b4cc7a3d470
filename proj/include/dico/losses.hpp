#pragma once

#include <torch/torch.h>

#include <string>

#include "dico/volume.hpp"

namespace dico {

struct LossWeights {
  double alpha = 0.5;       ///< Dice weight
  double beta = 0.5;        ///< cross-entropy weight
  double lambda_adv = 1.0;  ///< adversarial weight
  double lambda_u = 1.0;    ///< unsupervised weight

  void validate() const;
};

/// How the teacher's unlabeled prediction supervises the student.
enum class PseudoLabelMode {
  soft_dice_hard_ce,  ///< Dice against soft probabilities, CE against argmax
  hard,               ///< both terms against the argmax label
  soft,               ///< both terms against soft probabilities
};

std::string to_string(PseudoLabelMode mode);
PseudoLabelMode parse_pseudo_label_mode(const std::string& s);

/// Scalar summary of one training iteration.
struct LossReport {
  double l1_sup = 0.0;
  double l2_sup = 0.0;
  double l_unsup = 0.0;
  double l_adv = 0.0;
  double l_disc = 0.0;
  double l_total = 0.0;

  bool operator==(const LossReport&) const = default;
};

inline constexpr double kDiceEpsilon = 1e-5;

/// Soft Dice loss over the foreground channels of `prob` (B, K, ...),
/// pooled over the batch: 1 - (2 sum(p t) + eps) / (sum p + sum t + eps),
/// averaged over channels 1..K-1. `target` is either an integer label map
/// (B, 1, ...) or a probability map with the same shape as `prob`.
torch::Tensor dice_loss(const torch::Tensor& prob, const torch::Tensor& target,
                        double eps = kDiceEpsilon);

/// Mean per-voxel negative log-likelihood of the integer target class.
torch::Tensor ce_loss(const torch::Tensor& logits, const torch::Tensor& target);

/// Mean per-voxel cross-entropy against a soft target distribution.
torch::Tensor soft_ce_loss(const torch::Tensor& logits, const torch::Tensor& target_prob);

/// alpha * Dice(softmax(logits), target) + beta * CE(logits, target).
torch::Tensor seg_loss(const torch::Tensor& logits, const torch::Tensor& target,
                       const LossWeights& w);

/// Student-vs-teacher segmentation loss. `teacher_prob` is detached here.
torch::Tensor unsup_loss(const torch::Tensor& student_logits, const torch::Tensor& teacher_prob,
                         const LossWeights& w, PseudoLabelMode mode);

/// Sigmoid BCE on logits, mean over the batch.
torch::Tensor bce_with_logits(const torch::Tensor& logits, double label);

/// BCE(real, 1) + BCE(fake1, 0) + BCE(fake2, 0).
torch::Tensor discriminator_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake1,
                                 const torch::Tensor& d_fake2);

/// BCE(fake1, 1) + BCE(fake2, 1). Callers freeze the discriminator.
torch::Tensor adversarial_loss(const torch::Tensor& d_fake1, const torch::Tensor& d_fake2);

}  // namespace dico
