#include "dico/losses.hpp"

#include <vector>

namespace dico {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

void LossWeights::validate() const {
  if (alpha < 0 || beta < 0 || lambda_adv < 0 || lambda_u < 0) {
    throw ConfigError("loss weights must be non-negative");
  }
  if (alpha + beta <= 0) throw ConfigError("alpha + beta must be positive");
}

std::string to_string(PseudoLabelMode mode) {
  switch (mode) {
    case PseudoLabelMode::soft_dice_hard_ce: return "soft_dice_hard_ce";
    case PseudoLabelMode::hard: return "hard";
    case PseudoLabelMode::soft: return "soft";
  }
  return "soft_dice_hard_ce";
}

PseudoLabelMode parse_pseudo_label_mode(const std::string& s) {
  if (s == "soft_dice_hard_ce") return PseudoLabelMode::soft_dice_hard_ce;
  if (s == "hard") return PseudoLabelMode::hard;
  if (s == "soft") return PseudoLabelMode::soft;
  throw ConfigError("unknown pseudo_label mode '" + s + "'");
}

namespace {

void require_same_grid(const torch::Tensor& a, const torch::Tensor& b, const char* who) {
  if (a.dim() != b.dim() || a.size(0) != b.size(0)) {
    throw ShapeError(std::string(who) + ": batch or rank mismatch");
  }
  for (int64_t i = 2; i < a.dim(); ++i) {
    if (a.size(i) != b.size(i)) throw ShapeError(std::string(who) + ": grid mismatch");
  }
}

torch::Tensor one_hot_channels(const torch::Tensor& labels, int64_t classes) {
  // (B, 1, ...) integer -> (B, K, ...) float
  auto idx = labels.to(torch::kLong).squeeze(1);
  auto oh = F::one_hot(idx, classes).to(torch::kFloat);
  std::vector<int64_t> perm{0, oh.dim() - 1};
  for (int64_t i = 1; i < oh.dim() - 1; ++i) perm.push_back(i);
  return oh.permute(perm);
}

torch::Tensor as_target_prob(const torch::Tensor& prob, const torch::Tensor& target) {
  if (target.is_floating_point() && target.size(1) == prob.size(1)) return target;
  if (target.size(1) != 1) throw ShapeError("loss target must have 1 or K channels");
  return one_hot_channels(target, prob.size(1)).to(prob.dtype());
}

}  // namespace

torch::Tensor dice_loss(const torch::Tensor& prob, const torch::Tensor& target, double eps) {
  require_same_grid(prob, target, "dice_loss");
  auto t = as_target_prob(prob, target);
  const auto k = prob.size(1);
  std::vector<int64_t> reduce{0};
  for (int64_t i = 2; i < prob.dim(); ++i) reduce.push_back(i);
  auto p_fg = prob.index({Slice(), Slice(1, k)});
  auto t_fg = t.index({Slice(), Slice(1, k)});
  auto inter = (p_fg * t_fg).sum(reduce);
  auto denom = p_fg.sum(reduce) + t_fg.sum(reduce);
  return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean();
}

torch::Tensor ce_loss(const torch::Tensor& logits, const torch::Tensor& target) {
  require_same_grid(logits, target, "ce_loss");
  if (target.size(1) != 1) throw ShapeError("ce_loss: target must be a (B, 1, ...) label map");
  auto logp = torch::log_softmax(logits, 1);
  return -logp.gather(1, target.to(torch::kLong)).mean();
}

torch::Tensor soft_ce_loss(const torch::Tensor& logits, const torch::Tensor& target_prob) {
  require_same_grid(logits, target_prob, "soft_ce_loss");
  auto logp = torch::log_softmax(logits, 1);
  return -(target_prob * logp).sum(1).mean();
}

torch::Tensor seg_loss(const torch::Tensor& logits, const torch::Tensor& target,
                       const LossWeights& w) {
  auto loss = torch::zeros({}, logits.options());
  if (w.alpha != 0.0) loss = loss + w.alpha * dice_loss(torch::softmax(logits, 1), target);
  if (w.beta != 0.0) loss = loss + w.beta * ce_loss(logits, target);
  return loss;
}

torch::Tensor unsup_loss(const torch::Tensor& student_logits, const torch::Tensor& teacher_prob,
                         const LossWeights& w, PseudoLabelMode mode) {
  auto soft = teacher_prob.detach();
  auto hard = soft.argmax(1, /*keepdim=*/true);
  auto prob = torch::softmax(student_logits, 1);
  auto loss = torch::zeros({}, student_logits.options());
  if (w.alpha != 0.0) {
    loss = loss + w.alpha * dice_loss(prob, mode == PseudoLabelMode::hard ? hard : soft);
  }
  if (w.beta != 0.0) {
    loss = loss + w.beta * (mode == PseudoLabelMode::soft ? soft_ce_loss(student_logits, soft)
                                                          : ce_loss(student_logits, hard));
  }
  return loss;
}

torch::Tensor bce_with_logits(const torch::Tensor& logits, double label) {
  return F::binary_cross_entropy_with_logits(logits, torch::full_like(logits, label));
}

torch::Tensor discriminator_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake1,
                                 const torch::Tensor& d_fake2) {
  return bce_with_logits(d_real, 1.0) + bce_with_logits(d_fake1, 0.0) +
         bce_with_logits(d_fake2, 0.0);
}

torch::Tensor adversarial_loss(const torch::Tensor& d_fake1, const torch::Tensor& d_fake2) {
  return bce_with_logits(d_fake1, 1.0) + bce_with_logits(d_fake2, 1.0);
}

}  // namespace dico
