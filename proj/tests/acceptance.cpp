// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails. Pass criterion numbers as arguments to
// run a subset.

#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dico/commands.hpp"
#include "dico/evaluation.hpp"
#include "dico/losses.hpp"
#include "dico/metrics.hpp"
#include "dico/networks.hpp"
#include "dico/trainer.hpp"
#include "dico/volume_ops.hpp"
#include "support.hpp"

using namespace dico;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ------------------------------------------------------------------ oracles

BinaryGrid random_grid(Extent3 e, double p, std::mt19937_64& rng) {
  BinaryGrid g(e);
  std::bernoulli_distribution coin(p);
  for (auto& v : g.voxels) v = coin(rng) ? 1 : 0;
  return g;
}

std::vector<Voxel> surface_oracle(const BinaryGrid& g) {
  std::vector<Voxel> out;
  const auto e = g.extent;
  const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int64_t h = 0; h < e.h; ++h)
    for (int64_t w = 0; w < e.w; ++w)
      for (int64_t d = 0; d < e.d; ++d) {
        if (!g.at(h, w, d)) continue;
        bool s = false;
        for (const auto& o : off) {
          const int64_t a = h + o[0], b = w + o[1], c = d + o[2];
          if (a < 0 || b < 0 || c < 0 || a >= e.h || b >= e.w || c >= e.d || !g.at(a, b, c)) s = true;
        }
        if (s) out.push_back({h, w, d});
      }
  return out;
}

std::vector<double> nearest(const std::vector<Voxel>& from, const std::vector<Voxel>& to) {
  std::vector<double> out;
  for (const auto& a : from) {
    double best = INFINITY;
    for (const auto& b : to) {
      const double dh = double(a.h - b.h), dw = double(a.w - b.w), dd = double(a.d - b.d);
      best = std::min(best, std::sqrt(dh * dh + dw * dw + dd * dd));
    }
    out.push_back(best);
  }
  return out;
}

torch::Tensor mip_oracle(const torch::Tensor& x) {
  const auto a = x.accessor<float, 5>();
  auto out = torch::empty({x.size(0), x.size(1), x.size(2), x.size(3)});
  auto o = out.accessor<float, 4>();
  for (int64_t b = 0; b < x.size(0); ++b)
    for (int64_t c = 0; c < x.size(1); ++c)
      for (int64_t h = 0; h < x.size(2); ++h)
        for (int64_t w = 0; w < x.size(3); ++w) {
          float m = a[b][c][h][w][0];
          for (int64_t d = 1; d < x.size(4); ++d) m = std::max(m, a[b][c][h][w][d]);
          o[b][c][h][w] = m;
        }
  return out;
}

// ---------------------------------------------------------------- fixtures

LoadedCase phantom_case(const std::string& id, const PhantomSpec& spec) {
  auto p = generate_phantom(spec);
  return {id, Volume(normalize_intensity(p.image.data, {})), p.mask, {}};
}

TrainingStream phantom_stream(int labeled, int unlabeled, Extent3 crop, int64_t grid = 16) {
  std::vector<LoadedCase> l, u;
  for (int i = 0; i < labeled + unlabeled; ++i) {
    PhantomSpec s;
    s.grid = grid;
    s.seed = uint64_t(100 + i);
    (i < labeled ? l : u).push_back(phantom_case("p" + std::to_string(i), s));
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

// ---------------------------------------------------------------- criteria

Outcome metrics_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  int compared = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Extent3 e{1 + int64_t(rng() % 8), 1 + int64_t(rng() % 8), 1 + int64_t(rng() % 8)};
    const double density = 0.05 + 0.5 * std::uniform_real_distribution<double>()(rng);
    const auto p = random_grid(e, density, rng), g = random_grid(e, density, rng);
    int64_t inter = 0, np = 0, ng = 0;
    for (size_t i = 0; i < p.voxels.size(); ++i) {
      inter += p.voxels[i] && g.voxels[i];
      np += p.voxels[i];
      ng += g.voxels[i];
    }
    const double dsc_o = np + ng == 0 ? 1.0 : 2.0 * double(inter) / double(np + ng);
    worst = std::max(worst, std::abs(dsc(p, g) - dsc_o));
    const auto sp = surface_oracle(p), sg = surface_oracle(g);
    const auto n = nsd(p, g), a = asd(p, g);
    const bool defined = !sp.empty() && !sg.empty();
    if (n.has_value() != defined || a.has_value() != defined) {
      return {false, "definedness differs on trial " + std::to_string(trial)};
    }
    if (!defined) continue;
    const auto x = nearest(sp, sg), y = nearest(sg, sp);
    double sx = 0, sy = 0;
    int64_t within = 0;
    for (double v : x) sx += v, within += v <= 1.0;
    for (double v : y) sy += v, within += v <= 1.0;
    const double asd_o = 0.5 * (sx / double(x.size()) + sy / double(y.size()));
    const double nsd_o = double(within) / double(x.size() + y.size());
    worst = std::max({worst, std::abs(*n - nsd_o), std::abs(*a - asd_o)});
    ++compared;
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 60.0, "200 pairs, " + std::to_string(compared) +
                                            " with surfaces, max abs error " + fmt(worst) + ", " +
                                            fmt(secs) + " s"};
}

Outcome mip_oracle_check() {
  auto gen = at::detail::createCPUGenerator(7);
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto b = 1 + int64_t(rng() % 2), c = 1 + int64_t(rng() % 2);
    const auto h = 1 + int64_t(rng() % 8), w = 1 + int64_t(rng() % 8), d = 1 + int64_t(rng() % 8);
    const auto x = torch::randn({b, c, h, w, d}, gen);
    if (!torch::equal(mip_project(x).data, mip_oracle(x))) {
      return {false, "mismatch on trial " + std::to_string(trial)};
    }
  }
  return {true, "100 volumes bit-exact"};
}

Outcome multiview_round_trip() {
  auto gen = at::detail::createCPUGenerator(11);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    ViewGeometry g;
    g.n1 = 1 + int64_t(rng() % 3);
    g.n2 = 1 + int64_t(rng() % 3);
    g.n3 = 1 + int64_t(rng() % 2);
    const auto b = 1 + int64_t(rng() % 2), c = 1 + int64_t(rng() % 3);
    const auto x = torch::randn({b, c, g.n1 * (1 + int64_t(rng() % 4)), g.n2 * (1 + int64_t(rng() % 4)),
                                 g.n3 * (1 + int64_t(rng() % 4))},
                                gen);
    const auto views = decompose_views(x, g);
    if (!torch::equal(recompose_views(views).locals, x)) {
      return {false, "local path differs on trial " + std::to_string(trial)};
    }
  }
  const auto paper = decompose_views(torch::zeros({2, 1, 96, 96, 96}), ViewGeometry{});
  const std::vector<int64_t> expected{10, 1, 48, 48, 96};
  if (paper.data.sizes().vec() != expected) return {false, "(2,1,96^3) decomposes to " + fmt(paper.data.size(0))};
  const auto back = recompose_views(paper);
  if (back.locals.sizes() != torch::IntArrayRef{2, 1, 96, 96, 96} ||
      back.global.sizes() != torch::IntArrayRef{2, 1, 96, 96, 96}) {
    return {false, "recomposed shape wrong for (2,1,96^3)"};
  }
  return {true, "100 shapes bit-exact; (2,1,96,96,96) -> (10,1,48,48,96) -> (2,1,96,96,96)"};
}

Outcome role_switch() {
  const bool table = assign_roles(0.3, 0.5).teacher == Role::m1 && assign_roles(0.5, 0.3).teacher == Role::m2 &&
                     assign_roles(0.4, 0.4).teacher == Role::m1;
  auto cfg = short_run(200);
  cfg.audit_gradients = false;
  Trainer trainer(test_support::tiny_models(), cfg, LossWeights{});
  auto stream = phantom_stream(2, 4, cfg.crop);
  std::map<std::string, int> counts;
  for (int i = 0; i < 200; ++i) {
    auto s = trainer.step(stream.next_labeled(1, trainer.rng()), stream.next_unlabeled(1, trainer.rng()));
    ++counts[s.teacher];
  }
  const bool both = counts["M1"] >= 1 && counts["M2"] >= 1;
  return {table && both, std::string("table ") + (table ? "ok" : "wrong") + "; 200 steps: M1 teacher " +
                             std::to_string(counts["M1"]) + ", M2 teacher " + std::to_string(counts["M2"])};
}

Outcome gradient_routing() {
  Trainer trainer(test_support::tiny_models(), short_run(20), LossWeights{});
  auto stream = phantom_stream(2, 4, {8, 8, 8});
  double teacher = 0, adv_to_d = 0, d_to_gen = 0, student_min = INFINITY;
  for (int i = 0; i < 20; ++i) {
    auto s = trainer.step(stream.next_labeled(1, trainer.rng()), stream.next_unlabeled(1, trainer.rng()));
    if (!s.audit.performed) return {false, "audit missing at step " + std::to_string(i)};
    teacher = std::max(teacher, s.audit.unsup_to_teacher);
    adv_to_d = std::max(adv_to_d, s.audit.adv_to_discriminator);
    d_to_gen = std::max(d_to_gen, s.audit.disc_to_generators);
    student_min = std::min(student_min, s.audit.unsup_to_student);
  }
  const bool ok = teacher == 0.0 && adv_to_d == 0.0 && d_to_gen == 0.0 && student_min > 0.0;
  return {ok, "20 steps: max |dLu/dteacher|=" + fmt(teacher) + " max |dLadv/dD|=" + fmt(adv_to_d) +
                  " max |dLd/dM|=" + fmt(d_to_gen) + " min |dLu/dstudent|=" + fmt(student_min)};
}

double seg_loss_fd_error() {
  auto gen = at::detail::createCPUGenerator(5);
  auto logits = torch::randn({1, 2, 2, 2, 2}, gen).to(torch::kDouble).requires_grad_(true);
  auto labels = torch::randint(0, 2, {1, 1, 2, 2, 2}, gen);
  const LossWeights w;
  seg_loss(logits, labels, w).backward();
  const auto grad = logits.grad().clone().view(-1);
  auto flat = logits.data().view(-1);
  const double h = 1e-6;
  double worst = 0;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = seg_loss(logits.detach(), labels, w).item<double>();
    flat[i] = orig - h;
    const double down = seg_loss(logits.detach(), labels, w).item<double>();
    flat[i] = orig;
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(grad[i].item<double>() - numeric) / std::max(std::abs(numeric), 1e-3));
  }
  return worst;
}

// Worst relative error over three entries of three sampled parameters.
double network_fd_error(const SegNet& net, const torch::Tensor& x) {
  net->to(torch::kDouble);
  const auto input = x.to(torch::kDouble);
  const auto weights = torch::linspace(-1, 1, 2, torch::kDouble).view({1, 2, 1, 1, 1});
  auto objective = [&] { return (net->forward(input) * weights).sum(); };
  net->zero_grad();
  objective().backward();
  auto params = parameter_list(*net);
  const std::array<size_t, 3> picks{0, params.size() / 2, params.size() - 2};
  double worst = 0;
  for (auto pi : picks) {
    auto flat = params[pi].data().view(-1);
    const auto grad = params[pi].grad().view(-1);
    for (int64_t k : {int64_t{0}, flat.numel() / 2, flat.numel() - 1}) {
      const double h = 1e-5;
      const double orig = flat[k].item<double>();
      double up, down;
      {
        torch::NoGradGuard g;
        flat[k] = orig + h;
        up = objective().item<double>();
        flat[k] = orig - h;
        down = objective().item<double>();
        flat[k] = orig;
      }
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(grad[k].item<double>() - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

Outcome gradient_correctness() {
  const double loss_err = seg_loss_fd_error();
  BackboneConfig c;
  c.base_channels = 4;
  c.depth = 2;
  c.patch_size = 2;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.norm = NormKind::none;
  double net_err = 0;
  for (auto kind : {BackboneKind::conv, BackboneKind::transformer}) {
    c.kind = kind;
    torch::manual_seed(1);
    net_err = std::max(net_err, network_fd_error(make_backbone(c), torch::randn({1, 1, 2, 2, 2})));
  }
  return {loss_err < 1e-3 && net_err < 1e-2,
          "seg_loss rel err " + fmt(loss_err) + ", network params rel err " + fmt(net_err)};
}

Outcome schedule() {
  TrainConfig c;
  c.total_iterations = 40000;
  const bool ends = lr_schedule(0, c) == c.lr_base && lr_schedule(c.total_iterations, c) == 0.0;
  std::mt19937_64 rng(9);
  std::vector<int64_t> ts;
  for (int i = 0; i < 1000; ++i) ts.push_back(int64_t(rng() % uint64_t(c.total_iterations + 1)));
  std::sort(ts.begin(), ts.end());
  bool monotone = true;
  for (size_t i = 1; i < ts.size(); ++i) monotone = monotone && lr_schedule(ts[i], c) <= lr_schedule(ts[i - 1], c);
  return {ends && monotone, std::string("endpoints ") + (ends ? "exact" : "wrong") + ", 1000 sampled t " +
                                (monotone ? "monotone" : "not monotone")};
}

Outcome determinism() {
  test_support::TempDir dir("acceptance_resume");
  auto run = [&](const std::string& name, std::optional<int64_t> stop, std::optional<fs::path> resume) {
    Trainer trainer(test_support::tiny_models(), short_run(10), LossWeights{});
    auto stream = phantom_stream(2, 3, {8, 8, 8});
    RunOptions o;
    o.output_dir = dir / name;
    o.stop_after = stop;
    o.resume_from = resume;
    o.config_hash = "acceptance";
    run_training(trainer, stream, o);
    auto params = parameter_list(*trainer.m1());
    for (const auto& p : parameter_list(*trainer.m2())) params.push_back(p);
    return params;
  };
  const auto a = run("a", std::nullopt, std::nullopt);
  run("b", std::nullopt, std::nullopt);
  const auto log_a = read_file(dir / "a/train.log");
  const bool lines = std::count(log_a.begin(), log_a.end(), '\n') == 10;
  const bool same = log_a == read_file(dir / "b/train.log");
  run("c", 5, std::nullopt);
  const auto c = run("c", std::nullopt, checkpoint_dir(dir / "c", 5));
  bool resumed = read_file(dir / "c/train.log") == log_a && a.size() == c.size();
  for (size_t i = 0; resumed && i < a.size(); ++i) resumed = torch::equal(a[i], c[i]);
  return {lines && same && resumed, std::string("repeat run ") + (same && lines ? "identical" : "differs") +
                                        ", resume at 5 " + (resumed ? "bit-identical" : "differs") +
                                        " through 10"};
}

// Desk-scale phantom experiment: DiCo C+T against M1 trained on the two
// labeled volumes only.
struct DeskResult {
  double init = 0.0;
  double dico = 0.0;
  double supervised = 0.0;
};

ModelConfig desk_models() {
  ModelConfig m;
  m.m1.kind = BackboneKind::conv;
  m.m1.base_channels = 8;
  m.m1.depth = 3;
  m.m2.kind = BackboneKind::transformer;
  m.m2.base_channels = 8;
  m.m2.depth = 2;
  m.m2.patch_size = 4;
  m.m2.embed_dim = 32;
  m.m2.num_heads = 4;
  m.discriminator.base_channels = 8;
  m.discriminator.layers = 3;
  return m;
}

TrainConfig desk_train(Variant v, uint64_t seed, int64_t iterations) {
  TrainConfig c;
  c.total_iterations = iterations;
  c.lr_base = 1e-3;
  c.batch_size = 4;
  c.crop = {16, 16, 16};
  c.crop_mode = CropMode::random;
  c.variant = v;
  c.seed = seed;
  c.adv_start_iteration = iterations / 5;
  c.checkpoint_interval = iterations;
  return c;
}

// Noisy phantoms, where two labeled volumes leave room for unlabeled data to help.
PhantomSpec desk_phantom(uint64_t seed) {
  PhantomSpec s;
  s.grid = 32;
  s.noise_sigma = 1.0;
  s.seed = seed;
  return s;
}

Outcome desk_experiment() {
  const int64_t iterations = 500;
  std::vector<LoadedCase> labeled, unlabeled, val;
  for (int i = 0; i < 10; ++i) {
    (i < 2 ? labeled : unlabeled).push_back(phantom_case("train" + std::to_string(i), desk_phantom(1000 + i)));
  }
  for (int i = 0; i < 4; ++i) val.push_back(phantom_case("val" + std::to_string(i), desk_phantom(2000 + i)));
  const SlidingWindowConfig window{{16, 16, 16}, 0.5, Blending::gaussian};
  test_support::TempDir dir("acceptance_desk");

  auto train = [&](Variant v, uint64_t seed, double* init) {
    const auto cfg = desk_train(v, seed, iterations);
    Trainer trainer(desk_models(), cfg, LossWeights{});
    if (init) *init = evaluate_network(trainer.m1(), val, window, {}).mean_dsc;
    TrainingStream stream(labeled, unlabeled, cfg.crop, cfg.crop_mode);
    RunOptions o;
    o.output_dir = dir / (to_string(v) + "_" + std::to_string(seed));
    o.config_hash = "desk";
    const auto t0 = std::chrono::steady_clock::now();
    run_training(trainer, stream, o);
    const double dsc = evaluate_network(trainer.m1(), val, window, {}).mean_dsc;
    std::cerr << "  " << to_string(v) << " seed " << seed << ": val dsc " << dsc << " (" << seconds_since(t0)
              << " s)\n";
    return dsc;
  };

  DeskResult mean;
  std::string per_seed;
  for (uint64_t seed : {0, 1, 2}) {
    double init = 0;
    const double dico = train(Variant::dico_ct, seed, &init);
    const double supervised = train(Variant::supervised, seed, nullptr);
    mean.dico += dico / 3.0;
    mean.init += init / 3.0;
    mean.supervised += supervised / 3.0;
    per_seed += " " + fmt(dico) + "/" + fmt(supervised);
  }
  const bool a = mean.dico >= mean.supervised;
  const bool b = mean.dico - mean.init >= 0.2;
  return {a && b, "mean val DSC over 3 seeds: init " + fmt(mean.init) + ", supervised " + fmt(mean.supervised) +
                      ", dico-ct " + fmt(mean.dico) + " (dico/supervised per seed:" + per_seed + ")"};
}

bool well_formed_log(const std::string& log, int64_t lines, const std::string& teacher_pattern) {
  std::istringstream in(log);
  std::string line;
  int64_t t = 0;
  for (; std::getline(in, line); ++t) {
    if (line.rfind("t=" + std::to_string(t) + " ", 0) != 0) return false;
    for (const auto* key : {" lr=", " teacher=", " l1_sup=", " l2_sup=", " l_unsup=", " l_adv=", " l_disc=",
                            " l_total="}) {
      if (line.find(key) == std::string::npos) return false;
    }
    const auto tp = line.find(" teacher=") + 9;
    const auto teacher = line.substr(tp, line.find(' ', tp) - tp);
    if (teacher_pattern.find("|" + teacher + "|") == std::string::npos) return false;
  }
  return t == lines;
}

Outcome ablation_plumbing() {
  test_support::TempDir dir("acceptance_ablation");
  PhantomArgs p;
  p.out_dir = dir / "data";
  p.train_count = 6;
  p.val_count = 2;
  p.spec.grid = 16;
  std::ostringstream out, err;
  if (cmd_phantom(p, out, err) != kExitOk) return {false, "phantom generation failed: " + err.str()};
  auto j = json::parse(R"({
    "data": {"labeled_fraction": 0.5},
    "model": {
      "m1": {"base_channels": 4, "depth": 2},
      "m2": {"base_channels": 4, "depth": 2, "patch_size": 2, "embed_dim": 16, "num_heads": 2},
      "discriminator": {"base_channels": 4, "layers": 3}
    },
    "trainer": {"iterations": 20, "crop": [16, 16, 16], "checkpoint_interval": 10, "seed": 4},
    "inference": {"window": [16, 16, 16]}
  })");
  j["data"]["manifest"] = (dir / "data/manifest.txt").string();
  j["output_dir"] = (dir / "runs").string();
  std::ofstream(dir / "config.json") << j.dump(2);

  const std::vector<std::pair<std::string, std::string>> variants{
      {"dico-ct", "|M1|M2|"}, {"dico-cc", "|M1|M2|"}, {"dico-tt", "|M1|M2|"}, {"mt-baseline", "|ema|"}};
  std::string detail;
  bool ok = true;
  for (const auto& [name, teachers] : variants) {
    TrainArgs a;
    a.config = dir / "config.json";
    a.overrides = {"output_dir=" + (dir / "runs" / name).string()};
    a.variant = name;
    const int code = cmd_train(a, out, err);
    const auto run = dir / "runs" / name;
    bool good = code == kExitOk && well_formed_log(read_file(run / "train.log"), 20, teachers);
    for (int64_t it : {10, 20}) {
      const auto ckpt = checkpoint_dir(run, it);
      good = good && fs::exists(ckpt / "manifest.json");
      if (good) {
        const auto m = read_checkpoint_manifest(ckpt);
        good = m.iteration == it && m.variant == name;
      }
    }
    ok = ok && good;
    detail += (detail.empty() ? "" : ", ") + name + (good ? " ok" : " bad");
  }
  if (!ok) detail += "; " + err.str();
  return {ok, detail};
}

Outcome discriminator_sanity() {
  torch::manual_seed(21);
  Discriminator2D disc(DiscriminatorConfig{8, 3});
  auto gen = at::detail::createCPUGenerator(21);
  // Real: bright ring image with matching mask; fake: noise with a blank mask.
  const int64_t n = 8, size = 16;
  auto yy = torch::arange(size).view({-1, 1}).expand({size, size}).to(torch::kFloat) - 7.5;
  auto xx = torch::arange(size).view({1, -1}).expand({size, size}).to(torch::kFloat) - 7.5;
  auto ring = ((yy * yy + xx * xx).sqrt() - 5.0).abs().lt(1.5).to(torch::kFloat);
  auto real = torch::stack({ring, ring}).unsqueeze(0).repeat({n, 1, 1, 1}) +
              0.1 * torch::randn({n, 2, size, size}, gen);
  auto fake_a = 0.5 * torch::randn({n, 2, size, size}, gen);
  auto fake_b = 0.5 * torch::randn({n, 2, size, size}, gen);

  torch::optim::Adam opt(disc->parameters(), torch::optim::AdamOptions(1e-3));
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    discriminator_loss(disc->forward(real), disc->forward(fake_a), disc->forward(fake_b)).backward();
    opt.step();
  }
  torch::NoGradGuard no_grad_eval;
  const auto correct = disc->forward(real).gt(0).sum().item<int64_t>() +
                       disc->forward(fake_a).le(0).sum().item<int64_t>() +
                       disc->forward(fake_b).le(0).sum().item<int64_t>();
  const double accuracy = double(correct) / double(3 * n);

  for (auto& p : disc->parameters()) p.set_requires_grad(false);
  torch::GradMode::set_enabled(true);
  auto ga = fake_a.clone().requires_grad_(true);
  auto gb = fake_b.clone().requires_grad_(true);
  torch::optim::Adam gen_opt({ga, gb}, torch::optim::AdamOptions(1e-2));
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    gen_opt.zero_grad();
    auto loss = adversarial_loss(disc->forward(ga), disc->forward(gb));
    if (i == 0) first = loss.item<double>();
    last = loss.item<double>();
    loss.backward();
    gen_opt.step();
  }
  return {accuracy == 1.0 && last < first, "D accuracy " + fmt(100 * accuracy) + "% after 200 steps; L_adv " +
                                              fmt(first) + " -> " + fmt(last) + " over 50 generator steps"};
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"metrics match brute-force oracles", metrics_oracle},
      {"MIP matches triple-loop oracle", mip_oracle_check},
      {"multi-view decompose/recompose round trip", multiview_round_trip},
      {"role switch", role_switch},
      {"gradient routing", gradient_routing},
      {"finite-difference gradients", gradient_correctness},
      {"learning-rate schedule", schedule},
      {"determinism and resume", determinism},
      {"desk-scale phantom experiment", desk_experiment},
      {"ablation variants", ablation_plumbing},
      {"discriminator sanity", discriminator_sanity},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  bool all = true;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int number = int(i) + 1;
    if (!selected.empty() && !selected.count(number)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << number << " " << criteria[i].first << ": " << o.detail
              << " [" << fmt(seconds_since(t0)) << " s]" << std::endl;
  }
  return all ? 0 : 1;
}
