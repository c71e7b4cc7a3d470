#include <gtest/gtest.h>
#include <torch/torch.h>

#include <cmath>
#include <fstream>

#include "dico/trainer.hpp"
#include "support.hpp"

using namespace dico;

namespace {

TrainingStream phantom_stream(int labeled, int unlabeled, Extent3 crop = {8, 8, 8}) {
  std::vector<LoadedCase> l, u;
  for (int i = 0; i < labeled + unlabeled; ++i) {
    PhantomSpec s;
    s.grid = 16;
    s.seed = uint64_t(100 + i);
    auto p = generate_phantom(s);
    LoadedCase c{"p" + std::to_string(i), Volume(normalize_intensity(p.image.data, {})), p.mask, {}};
    (i < labeled ? l : u).push_back(c);
  }
  return TrainingStream(l, u, crop, CropMode::random);
}

TrainConfig short_run(int64_t iterations, Variant v = Variant::dico_ct) {
  TrainConfig c;
  c.total_iterations = iterations;
  c.crop = {8, 8, 8};
  c.variant = v;
  c.checkpoint_interval = 5;
  c.audit_gradients = true;
  c.seed = 3;
  return c;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Roles, TableAndTies) {
  EXPECT_EQ(assign_roles(0.3, 0.5).teacher, Role::m1);
  EXPECT_EQ(assign_roles(0.5, 0.3).teacher, Role::m2);
  EXPECT_EQ(assign_roles(0.4, 0.4).teacher, Role::m1);
  EXPECT_EQ(assign_roles(0.5, 0.3).student, Role::m1);
  EXPECT_THROW(assign_roles(NAN, 0.3), DivergenceError);
  EXPECT_THROW(assign_roles(0.3, INFINITY), DivergenceError);
}

TEST(Schedule, PolyDecay) {
  TrainConfig c;
  c.total_iterations = 1000;
  EXPECT_DOUBLE_EQ(lr_schedule(0, c), 1e-2);
  EXPECT_DOUBLE_EQ(lr_schedule(1000, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(5000, c), 0.0);
  EXPECT_NEAR(lr_schedule(500, c), 1e-2 * std::pow(0.5, 0.9), 1e-15);
  double prev = INFINITY;
  for (int64_t t = 0; t <= 1000; t += 7) {
    const double lr = lr_schedule(t, c);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_THROW(lr_schedule(-1, c), ConfigError);
}

TEST(Ema, ClosedForm) {
  auto t = std::vector<torch::Tensor>{torch::full({3}, 1.0)};
  auto s = std::vector<torch::Tensor>{torch::full({3}, 3.0)};
  ema_update(t, s, 0.99);
  EXPECT_TRUE(torch::allclose(t[0], torch::full({3}, 0.99 + 0.03)));
  ema_update(t, s, 1.0);
  EXPECT_TRUE(torch::allclose(t[0], torch::full({3}, 1.02)));
  ema_update(t, s, 0.0);
  EXPECT_TRUE(torch::equal(t[0], s[0]));
  // n updates toward a fixed student: teacher = s + (t0 - s) * decay^n
  auto t2 = std::vector<torch::Tensor>{torch::zeros({1}, torch::kDouble)};
  auto s2 = std::vector<torch::Tensor>{torch::ones({1}, torch::kDouble)};
  for (int i = 0; i < 50; ++i) ema_update(t2, s2, 0.9);
  EXPECT_NEAR(t2[0].item<double>(), 1.0 - std::pow(0.9, 50), 1e-12);
}

TEST(Variants, ResolvedPairings) {
  const auto m = test_support::tiny_models();
  auto cc = resolve_models(m, Variant::dico_cc);
  EXPECT_EQ(cc.m2.kind, BackboneKind::conv);
  EXPECT_TRUE(cc.m2_multiview);
  auto tt = resolve_models(m, Variant::dico_tt);
  EXPECT_EQ(tt.m1.kind, BackboneKind::transformer);
  auto mt = resolve_models(m, Variant::mt_baseline);
  EXPECT_EQ(mt.m2.kind, BackboneKind::conv);
  EXPECT_FALSE(mt.m2_multiview);
  EXPECT_EQ(parse_variant("mt-baseline"), Variant::mt_baseline);
  EXPECT_THROW(parse_variant("dico"), ConfigError);
}

TEST(Trainer, GradientRoutingHoldsEveryStep) {
  torch::manual_seed(0);
  Trainer trainer(test_support::tiny_models(), short_run(8), LossWeights{});
  auto stream = phantom_stream(2, 4);
  for (int i = 0; i < 8; ++i) {
    auto s = trainer.step(stream.next_labeled(1, trainer.rng()), stream.next_unlabeled(1, trainer.rng()));
    ASSERT_TRUE(s.audit.performed);
    EXPECT_EQ(s.audit.unsup_to_teacher, 0.0);
    EXPECT_GT(s.audit.unsup_to_student, 0.0);
    EXPECT_EQ(s.audit.adv_to_discriminator, 0.0);
    EXPECT_EQ(s.audit.disc_to_generators, 0.0);
    EXPECT_EQ(s.iteration, i);
    EXPECT_DOUBLE_EQ(s.lr, lr_schedule(i, trainer.config()));
    const auto& l = s.losses;
    EXPECT_NEAR(l.l_total, l.l1_sup + l.l2_sup + l.l_unsup + l.l_adv, 1e-5);
  }
}

TEST(Trainer, TeacherFollowsLowerSupervisedLoss) {
  Trainer trainer(test_support::tiny_models(), short_run(6), LossWeights{});
  auto stream = phantom_stream(2, 2);
  for (int i = 0; i < 6; ++i) {
    auto s = trainer.step(stream.next_labeled(1, trainer.rng()), stream.next_unlabeled(1, trainer.rng()));
    EXPECT_EQ(s.teacher, s.losses.l1_sup <= s.losses.l2_sup ? "M1" : "M2");
  }
}

TEST(Trainer, AdversarialTermsWaitForStartIteration) {
  auto cfg = short_run(4);
  cfg.adv_start_iteration = 2;
  Trainer trainer(test_support::tiny_models(), cfg, LossWeights{});
  auto stream = phantom_stream(1, 1);
  for (int i = 0; i < 4; ++i) {
    auto s = trainer.step(stream.next_labeled(1, trainer.rng()), stream.next_unlabeled(1, trainer.rng()));
    EXPECT_EQ(s.losses.l_adv == 0.0, i < 2);
    EXPECT_EQ(s.losses.l_disc == 0.0, i < 2);
  }
}

TEST(Trainer, NonFiniteInputRaisesDivergence) {
  Trainer trainer(test_support::tiny_models(), short_run(2), LossWeights{});
  CropPair l{torch::full({1, 1, 8, 8, 8}, NAN), torch::zeros({1, 1, 8, 8, 8}, torch::kUInt8)};
  EXPECT_THROW(trainer.step(l, torch::zeros({1, 1, 8, 8, 8})), DivergenceError);
}

TEST(Trainer, MeanTeacherFollowsEma) {
  auto cfg = short_run(3, Variant::mt_baseline);
  Trainer trainer(test_support::tiny_models(), cfg, LossWeights{});
  auto stream = phantom_stream(1, 1);
  std::vector<torch::Tensor> teacher_before;
  for (const auto& p : trainer.m2()->parameters()) teacher_before.push_back(p.clone());
  auto s = trainer.step(stream.next_labeled(1, trainer.rng()), stream.next_unlabeled(1, trainer.rng()));
  EXPECT_EQ(s.teacher, "ema");
  const auto t = trainer.m2()->parameters();
  const auto st = trainer.m1()->parameters();
  for (size_t i = 0; i < t.size(); ++i) {
    EXPECT_FALSE(t[i].requires_grad());
    EXPECT_TRUE(torch::allclose(t[i], 0.99 * teacher_before[i] + 0.01 * st[i], 1e-6, 1e-7));
  }
  EXPECT_THROW(trainer.train_step(stream.next_labeled(1, trainer.rng()), stream.next_unlabeled(1, trainer.rng())),
               ConfigError);
}

TEST(Trainer, SupervisedOnlyTouchesM1) {
  Trainer trainer(test_support::tiny_models(), short_run(2, Variant::supervised), LossWeights{});
  auto stream = phantom_stream(1, 1);
  auto s = trainer.step(stream.next_labeled(1, trainer.rng()), torch::Tensor());
  EXPECT_EQ(s.teacher, "none");
  EXPECT_EQ(s.losses.l_unsup, 0.0);
  EXPECT_DOUBLE_EQ(s.losses.l_total, s.losses.l1_sup);
}

TEST(Trainer, LogLineFormat) {
  IterationState s;
  s.iteration = 4;
  s.lr = 0.5;
  s.teacher = "M2";
  s.losses = {1, 2, 3, 4, 5, 6};
  EXPECT_EQ(format_log_line(s), "t=4 lr=0.5 teacher=M2 l1_sup=1 l2_sup=2 l_unsup=3 l_adv=4 l_disc=5 l_total=6");
}

TEST(Run, SeededRunsAreIdenticalAndResumeIsBitExact) {
  test_support::TempDir dir("run");
  auto run = [&](const std::string& name, std::optional<int64_t> stop, std::optional<std::filesystem::path> resume) {
    Trainer trainer(test_support::tiny_models(), short_run(10), LossWeights{});
    auto stream = phantom_stream(2, 3);
    RunOptions o;
    o.output_dir = dir / name;
    o.stop_after = stop;
    o.resume_from = resume;
    o.config_hash = "test";
    run_training(trainer, stream, o);
    return parameter_list(*trainer.m2());
  };
  const auto a = run("a", std::nullopt, std::nullopt);
  run("b", std::nullopt, std::nullopt);
  const auto log_a = read_file(dir / "a/train.log");
  EXPECT_EQ(std::count(log_a.begin(), log_a.end(), '\n'), 10);
  EXPECT_EQ(log_a, read_file(dir / "b/train.log"));

  run("c", 5, std::nullopt);
  EXPECT_TRUE(std::filesystem::exists(checkpoint_dir(dir / "c", 5) / "manifest.json"));
  const auto c = run("c", std::nullopt, checkpoint_dir(dir / "c", 5));
  EXPECT_EQ(read_file(dir / "c/train.log"), log_a);
  for (size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(torch::equal(a[i], c[i]));

  const auto m = read_checkpoint_manifest(checkpoint_dir(dir / "a", 10));
  EXPECT_EQ(m.iteration, 10);
  EXPECT_EQ(m.variant, "dico-ct");
  EXPECT_EQ(m.config_hash, "test");
}

TEST(TrainConfigValidation, RejectsBadValues) {
  TrainConfig c;
  c.batch_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.total_iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.ema_decay = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}
