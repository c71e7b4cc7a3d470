#include <gtest/gtest.h>
#include <torch/torch.h>

#include <cmath>

#include "dico/losses.hpp"

using namespace dico;

namespace {

double dice_oracle(const torch::Tensor& prob, const torch::Tensor& labels, double eps) {
  auto p = prob.to(torch::kDouble).contiguous();
  auto l = labels.to(torch::kLong).contiguous();
  const auto b = p.size(0), k = p.size(1), n = p[0][0].numel();
  double total = 0;
  for (int64_t c = 1; c < k; ++c) {
    double inter = 0, ps = 0, ts = 0;
    for (int64_t i = 0; i < b; ++i) {
      auto pv = p[i][c].reshape(-1);
      auto lv = l[i][0].reshape(-1);
      for (int64_t v = 0; v < n; ++v) {
        const double pp = pv[v].item<double>();
        const double tt = lv[v].item<int64_t>() == c ? 1.0 : 0.0;
        inter += pp * tt;
        ps += pp;
        ts += tt;
      }
    }
    total += 1.0 - (2 * inter + eps) / (ps + ts + eps);
  }
  return total / double(k - 1);
}

double ce_oracle(const torch::Tensor& logits, const torch::Tensor& labels) {
  auto z = logits.to(torch::kDouble);
  const auto b = z.size(0), k = z.size(1);
  auto zf = z.reshape({b, k, -1});
  auto lf = labels.to(torch::kLong).reshape({b, -1});
  double sum = 0;
  int64_t count = 0;
  for (int64_t i = 0; i < b; ++i)
    for (int64_t v = 0; v < zf.size(2); ++v) {
      double m = -1e300;
      for (int64_t c = 0; c < k; ++c) m = std::max(m, zf[i][c][v].item<double>());
      double s = 0;
      for (int64_t c = 0; c < k; ++c) s += std::exp(zf[i][c][v].item<double>() - m);
      sum += -(zf[i][lf[i][v].item<int64_t>()][v].item<double>() - m - std::log(s));
      ++count;
    }
  return sum / double(count);
}

}  // namespace

TEST(Dice, HalfOverlapFixture) {
  auto prob = torch::zeros({1, 2, 2, 2, 1});
  prob[0][1][0][0][0] = 1;
  prob[0][1][0][1][0] = 1;
  prob[0][0] = 1 - prob[0][1];
  auto gt = torch::zeros({1, 1, 2, 2, 1}, torch::kUInt8);
  gt[0][0][0][0][0] = 1;
  gt[0][0][1][0][0] = 1;
  const double eps = kDiceEpsilon;
  EXPECT_NEAR(dice_loss(prob, gt).item<double>(), 1 - (2 + eps) / (4 + eps), 1e-7);
}

TEST(Dice, MatchesLoopOracle) {
  auto gen = at::detail::createCPUGenerator(1);
  for (int k : {2, 3}) {
    auto prob = torch::softmax(torch::randn({2, k, 3, 2, 4}, gen), 1);
    auto labels = torch::randint(0, k, {2, 1, 3, 2, 4}, gen);
    EXPECT_NEAR(dice_loss(prob, labels).item<double>(), dice_oracle(prob, labels, kDiceEpsilon), 1e-6);
  }
}

TEST(Dice, PerfectPredictionIsZeroAndEmptyIsZero) {
  auto labels = torch::randint(0, 2, {1, 1, 4, 4, 4});
  auto prob = torch::cat({1 - labels.to(torch::kFloat), labels.to(torch::kFloat)}, 1);
  EXPECT_NEAR(dice_loss(prob, labels).item<double>(), 0.0, 1e-6);
  auto empty = torch::zeros({1, 1, 4, 4, 4});
  auto bg = torch::cat({torch::ones({1, 1, 4, 4, 4}), torch::zeros({1, 1, 4, 4, 4})}, 1);
  EXPECT_NEAR(dice_loss(bg, empty).item<double>(), 0.0, 1e-9);
}

TEST(Dice, RejectsGridMismatch) {
  EXPECT_THROW(dice_loss(torch::zeros({1, 2, 2, 2, 2}), torch::zeros({1, 1, 2, 2, 3})), ShapeError);
}

TEST(CrossEntropy, UniformLogitsGiveLog2) {
  auto labels = torch::randint(0, 2, {2, 1, 3, 3, 3});
  EXPECT_NEAR(ce_loss(torch::zeros({2, 2, 3, 3, 3}), labels).item<double>(), std::log(2.0), 1e-7);
}

TEST(CrossEntropy, MatchesLoopOracle) {
  auto gen = at::detail::createCPUGenerator(2);
  auto logits = torch::randn({2, 3, 2, 3, 2}, gen) * 3;
  auto labels = torch::randint(0, 3, {2, 1, 2, 3, 2}, gen);
  EXPECT_NEAR(ce_loss(logits, labels).item<double>(), ce_oracle(logits, labels), 1e-6);
}

TEST(CrossEntropy, SoftTargetEqualsHardForOneHot) {
  auto gen = at::detail::createCPUGenerator(3);
  auto logits = torch::randn({1, 2, 3, 3, 3}, gen);
  auto labels = torch::randint(0, 2, {1, 1, 3, 3, 3}, gen);
  auto onehot = torch::cat({1 - labels.to(torch::kFloat), labels.to(torch::kFloat)}, 1);
  EXPECT_NEAR(soft_ce_loss(logits, onehot).item<double>(), ce_loss(logits, labels).item<double>(), 1e-6);
}

TEST(SegLoss, IsWeightedSum) {
  auto gen = at::detail::createCPUGenerator(4);
  auto logits = torch::randn({1, 2, 2, 2, 2}, gen);
  auto labels = torch::randint(0, 2, {1, 1, 2, 2, 2}, gen);
  LossWeights w;
  w.alpha = 0.3;
  w.beta = 0.7;
  const double expected = 0.3 * dice_loss(torch::softmax(logits, 1), labels).item<double>() +
                          0.7 * ce_loss(logits, labels).item<double>();
  EXPECT_NEAR(seg_loss(logits, labels, w).item<double>(), expected, 1e-6);
}

TEST(SegLoss, CentralFiniteDifference) {
  auto gen = at::detail::createCPUGenerator(5);
  auto logits = torch::randn({1, 2, 2, 2, 2}, gen).to(torch::kDouble).requires_grad_(true);
  auto labels = torch::randint(0, 2, {1, 1, 2, 2, 2}, gen);
  const LossWeights w;
  seg_loss(logits, labels, w).backward();
  const auto grad = logits.grad().clone();
  auto flat = logits.data().view(-1);
  const double h = 1e-6;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = seg_loss(logits.detach(), labels, w).item<double>();
    flat[i] = orig - h;
    const double down = seg_loss(logits.detach(), labels, w).item<double>();
    flat[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grad.view(-1)[i].item<double>();
    EXPECT_LT(std::abs(analytic - numeric), 1e-3 * std::max(std::abs(numeric), 1e-3)) << i;
  }
}

TEST(UnsupLoss, TeacherReceivesNoGradient) {
  auto gen = at::detail::createCPUGenerator(6);
  auto student = torch::randn({1, 2, 2, 2, 2}, gen).requires_grad_(true);
  auto teacher_logits = torch::randn({1, 2, 2, 2, 2}, gen).requires_grad_(true);
  auto teacher_prob = torch::softmax(teacher_logits, 1);
  for (auto mode : {PseudoLabelMode::soft_dice_hard_ce, PseudoLabelMode::hard, PseudoLabelMode::soft}) {
    auto loss = unsup_loss(student, teacher_prob, LossWeights{}, mode);
    auto g = torch::autograd::grad({loss}, {student, teacher_logits}, {}, false, false, true);
    EXPECT_TRUE(g[0].defined());
    EXPECT_GT(g[0].abs().sum().item<double>(), 0.0);
    EXPECT_FALSE(g[1].defined());
  }
}

TEST(UnsupLoss, ModesAgreeOnOneHotTeacher) {
  auto gen = at::detail::createCPUGenerator(7);
  auto student = torch::randn({1, 2, 3, 3, 3}, gen);
  auto labels = torch::randint(0, 2, {1, 1, 3, 3, 3}, gen).to(torch::kFloat);
  auto teacher = torch::cat({1 - labels, labels}, 1);
  const LossWeights w;
  const auto a = unsup_loss(student, teacher, w, PseudoLabelMode::soft_dice_hard_ce).item<double>();
  EXPECT_NEAR(unsup_loss(student, teacher, w, PseudoLabelMode::hard).item<double>(), a, 1e-6);
  EXPECT_NEAR(unsup_loss(student, teacher, w, PseudoLabelMode::soft).item<double>(), a, 1e-6);
}

TEST(Adversarial, ZeroLogitsGiveLogMultiples) {
  const auto z = torch::zeros({4, 1});
  EXPECT_NEAR(discriminator_loss(z, z, z).item<double>(), 3 * std::log(2.0), 1e-6);
  EXPECT_NEAR(adversarial_loss(z, z).item<double>(), 2 * std::log(2.0), 1e-6);
}

TEST(Adversarial, BceMatchesClosedForm) {
  auto gen = at::detail::createCPUGenerator(8);
  auto z = torch::randn({5, 1}, gen).to(torch::kDouble);
  for (double y : {0.0, 1.0}) {
    double expected = 0;
    for (int64_t i = 0; i < 5; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-z[i][0].item<double>()));
      expected += -(y * std::log(s) + (1 - y) * std::log(1 - s));
    }
    EXPECT_NEAR(bce_with_logits(z, y).item<double>(), expected / 5, 1e-9);
  }
}

TEST(LossWeightsConfig, RejectsNegative) {
  LossWeights w;
  w.lambda_u = -1;
  EXPECT_THROW(w.validate(), ConfigError);
  w = {};
  w.alpha = 0;
  w.beta = 0;
  EXPECT_THROW(w.validate(), ConfigError);
  EXPECT_EQ(parse_pseudo_label_mode(to_string(PseudoLabelMode::soft)), PseudoLabelMode::soft);
  EXPECT_THROW(parse_pseudo_label_mode("fuzzy"), ConfigError);
}
