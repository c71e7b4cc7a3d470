#include "dico/trainer.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dico/volume_ops.hpp"

namespace dico {

namespace fs = std::filesystem;
using torch::indexing::None;
using torch::indexing::Slice;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::dico_ct: return "dico-ct";
    case Variant::dico_cc: return "dico-cc";
    case Variant::dico_tt: return "dico-tt";
    case Variant::mt_baseline: return "mt-baseline";
    case Variant::supervised: return "supervised";
  }
  return "dico-ct";
}

Variant parse_variant(const std::string& s) {
  if (s == "dico-ct") return Variant::dico_ct;
  if (s == "dico-cc") return Variant::dico_cc;
  if (s == "dico-tt") return Variant::dico_tt;
  if (s == "mt-baseline") return Variant::mt_baseline;
  if (s == "supervised") return Variant::supervised;
  throw ConfigError("unknown variant '" + s +
                    "' (expected dico-ct, dico-cc, dico-tt, mt-baseline or supervised)");
}

bool is_dico(Variant v) {
  return v == Variant::dico_ct || v == Variant::dico_cc || v == Variant::dico_tt;
}

ModelConfig resolve_models(const ModelConfig& base, Variant v) {
  ModelConfig out = base;
  switch (v) {
    case Variant::dico_ct:
      break;
    case Variant::dico_cc:
      out.m2 = base.m1;
      break;
    case Variant::dico_tt:
      out.m1 = base.m2;
      break;
    case Variant::mt_baseline:
    case Variant::supervised:
      out.m2 = base.m1;
      out.m2_multiview = false;
      break;
  }
  return out;
}

std::string to_string(Role r) { return r == Role::m1 ? "M1" : "M2"; }

RoleAssignment assign_roles(double l1_sup, double l2_sup) {
  if (!std::isfinite(l1_sup)) throw DivergenceError("non-finite supervised loss l1_sup");
  if (!std::isfinite(l2_sup)) throw DivergenceError("non-finite supervised loss l2_sup");
  if (l1_sup <= l2_sup) return {Role::m1, Role::m2, l1_sup, l2_sup};
  return {Role::m2, Role::m1, l1_sup, l2_sup};
}

void TrainConfig::validate() const {
  if (total_iterations < 1) throw ConfigError("trainer.iterations must be >= 1");
  if (!(lr_base > 0)) throw ConfigError("trainer.lr_base must be > 0");
  if (gamma < 0) throw ConfigError("trainer.gamma must be >= 0");
  if (batch_size < 2 || batch_size % 2 != 0) {
    throw ConfigError("trainer.batch_size must be even and >= 2 (labeled/unlabeled halves)");
  }
  if (crop.h < 1 || crop.w < 1 || crop.d < 1) throw ConfigError("trainer.crop must be positive");
  if (!(disc_lr_base > 0)) throw ConfigError("trainer.disc_lr_base must be > 0");
  if (weight_decay < 0) throw ConfigError("trainer.weight_decay must be >= 0");
  if (ema_decay < 0 || ema_decay > 1) throw ConfigError("trainer.ema_decay must be in [0, 1]");
  if (adv_start_iteration < 0) throw ConfigError("trainer.adv_start_iteration must be >= 0");
  if (checkpoint_interval < 1) throw ConfigError("trainer.checkpoint_interval must be >= 1");
  if (val_interval < 0) throw ConfigError("trainer.val_interval must be >= 0");
}

double lr_schedule(int64_t t, int64_t total, double lr_base, double gamma) {
  if (t < 0) throw ConfigError("lr_schedule: negative iteration");
  if (t >= total) return 0.0;
  return lr_base * std::pow(1.0 - double(t) / double(total), gamma);
}

double lr_schedule(int64_t t, const TrainConfig& config) {
  return lr_schedule(t, config.total_iterations, config.lr_base, config.gamma);
}

std::string format_log_line(const IterationState& s) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "t=" << s.iteration << " lr=" << s.lr << " teacher=" << s.teacher
      << " l1_sup=" << s.losses.l1_sup << " l2_sup=" << s.losses.l2_sup
      << " l_unsup=" << s.losses.l_unsup << " l_adv=" << s.losses.l_adv
      << " l_disc=" << s.losses.l_disc << " l_total=" << s.losses.l_total;
  return out.str();
}

void ema_update(const std::vector<torch::Tensor>& teacher,
                const std::vector<torch::Tensor>& student, double decay) {
  if (teacher.size() != student.size()) throw ShapeError("ema_update: parameter count mismatch");
  torch::NoGradGuard guard;
  for (size_t i = 0; i < teacher.size(); ++i) {
    teacher[i].mul_(decay).add_(student[i].detach(), 1.0 - decay);
  }
}

namespace {

double max_abs_grad(const std::vector<torch::Tensor>& params) {
  double m = 0.0;
  for (const auto& p : params) {
    const auto& g = p.grad();
    if (g.defined()) m = std::max(m, g.abs().max().item<double>());
  }
  return m;
}

double max_abs(const std::vector<torch::Tensor>& grads) {
  double m = 0.0;
  for (const auto& g : grads) {
    if (g.defined()) m = std::max(m, g.abs().max().item<double>());
  }
  return m;
}

void set_requires_grad(const std::vector<torch::Tensor>& params, bool flag) {
  for (auto p : params) p.requires_grad_(flag);
}

void zero_grads(const std::vector<torch::Tensor>& params) {
  for (auto p : params) p.mutable_grad().reset();
}

std::vector<torch::Tensor> concat(std::vector<torch::Tensor> a, const std::vector<torch::Tensor>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::string to_hex(const torch::Tensor& bytes) {
  auto t = bytes.contiguous();
  const auto* p = t.data_ptr<uint8_t>();
  std::string out;
  out.reserve(size_t(t.numel()) * 2);
  static constexpr char digits[] = "0123456789abcdef";
  for (int64_t i = 0; i < t.numel(); ++i) {
    out.push_back(digits[p[i] >> 4]);
    out.push_back(digits[p[i] & 0xF]);
  }
  return out;
}

torch::Tensor from_hex(const std::string& hex) {
  auto t = torch::empty({int64_t(hex.size() / 2)}, torch::kUInt8);
  auto* p = t.data_ptr<uint8_t>();
  for (size_t i = 0; i + 1 < hex.size(); i += 2) {
    p[i / 2] = static_cast<uint8_t>(std::stoi(hex.substr(i, 2), nullptr, 16));
  }
  return t;
}

void save_module(const torch::nn::Module& m, const fs::path& path) {
  torch::serialize::OutputArchive archive;
  m.save(archive);
  archive.save_to(path.string());
}

void load_module(torch::nn::Module& m, const fs::path& path) {
  if (!fs::exists(path)) throw IngestError("checkpoint file missing: " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  m.load(archive);
}

}  // namespace

Trainer::Trainer(ModelConfig models, TrainConfig train, LossWeights weights,
                 PseudoLabelMode pseudo_label)
    : models_(resolve_models(models, train.variant)),
      train_(train),
      weights_(weights),
      pseudo_label_(pseudo_label),
      rng_(train.seed) {
  models_.validate();
  train_.validate();
  weights_.validate();
  torch::manual_seed(train_.seed);
  m1_ = make_m1(models_);
  m2_ = make_m2(models_);
  disc_ = Discriminator2D(models_.discriminator);

  const bool mean_teacher = train_.variant == Variant::mt_baseline;
  const bool supervised = train_.variant == Variant::supervised;
  if (mean_teacher) {
    // The EMA teacher starts as an exact copy of the student.
    torch::NoGradGuard guard;
    auto t = m2_->parameters();
    auto s = m1_->parameters();
    for (size_t i = 0; i < t.size(); ++i) t[i].copy_(s[i]);
    set_requires_grad(t, false);
  }
  auto gen_params = (mean_teacher || supervised) ? m1_->parameters()
                                                 : concat(m1_->parameters(), m2_->parameters());
  auto opts = torch::optim::AdamWOptions(train_.lr_base).weight_decay(train_.weight_decay);
  gen_opt_ = std::make_unique<torch::optim::AdamW>(gen_params, opts);
  disc_opt_ = std::make_unique<torch::optim::AdamW>(
      disc_->parameters(),
      torch::optim::AdamWOptions(train_.disc_lr_base).weight_decay(train_.weight_decay));
}

std::string Trainer::rng_state() const {
  std::ostringstream s;
  s << rng_;
  return s.str();
}

void Trainer::set_learning_rates(int64_t t) {
  const double factor = lr_schedule(t, train_.total_iterations, 1.0, train_.gamma);
  for (auto& g : gen_opt_->param_groups()) {
    static_cast<torch::optim::AdamWOptions&>(g.options()).lr(train_.lr_base * factor);
  }
  for (auto& g : disc_opt_->param_groups()) {
    static_cast<torch::optim::AdamWOptions&>(g.options()).lr(train_.disc_lr_base * factor);
  }
}

void Trainer::require_finite(const torch::Tensor& loss, const char* name) const {
  if (!std::isfinite(loss.item<double>())) {
    throw DivergenceError(std::string("non-finite loss ") + name + " at iteration " +
                          std::to_string(iteration_));
  }
}

IterationState Trainer::step(const CropPair& labeled, const torch::Tensor& unlabeled) {
  switch (train_.variant) {
    case Variant::mt_baseline: return train_step_mt_baseline(labeled, unlabeled);
    case Variant::supervised: return train_step_supervised(labeled);
    default: return train_step(labeled, unlabeled);
  }
}

IterationState Trainer::train_step(const CropPair& labeled, const torch::Tensor& unlabeled) {
  if (!is_dico(train_.variant)) throw ConfigError("train_step requires a DiCo variant");
  if (labeled.image.size(0) < 1 || unlabeled.size(0) < 1) {
    throw ShapeError("train_step: labeled and unlabeled batches must be non-empty");
  }
  const int64_t t = iteration_;
  IterationState state;
  state.iteration = t;
  state.lr = lr_schedule(t, train_);
  set_learning_rates(t);
  m1_->train();
  m2_->train();
  disc_->train();

  const auto& xl = labeled.image;
  const auto& yl = labeled.label;
  const auto& xu = unlabeled;
  const int64_t nl = xl.size(0);
  const auto x = torch::cat({xl, xu}, 0);

  // (1) both networks on labeled + unlabeled
  const auto out1 = m1_->forward(x);
  const auto out2 = m2_->forward(x);
  const auto y1l = out1.index({Slice(0, nl)});
  const auto y1u = out1.index({Slice(nl, None)});
  const auto y2l = out2.index({Slice(0, nl)});
  const auto y2u = out2.index({Slice(nl, None)});

  // (2) supervised losses, (3) roles
  const auto l1 = seg_loss(y1l, yl, weights_);
  const auto l2 = seg_loss(y2l, yl, weights_);
  require_finite(l1, "l1_sup");
  require_finite(l2, "l2_sup");
  const auto roles = assign_roles(l1.item<double>(), l2.item<double>());
  state.roles = roles;
  state.teacher = to_string(roles.teacher);

  // (4) detached pseudo-label from the teacher, (5) unsupervised loss
  const bool m1_teaches = roles.teacher == Role::m1;
  const auto teacher_prob = torch::softmax(m1_teaches ? y1u : y2u, 1).detach();
  const auto& student_logits = m1_teaches ? y2u : y1u;
  const auto lu = unsup_loss(student_logits, teacher_prob, weights_, pseudo_label_);
  require_finite(lu, "l_unsup");

  // (6) projections + fusion + frozen discriminator
  const bool adversarial = t >= train_.adv_start_iteration;
  const auto disc_params = disc_->parameters();
  const auto m1_params = m1_->parameters();
  const auto m2_params = m2_->parameters();
  const auto gen_params = concat(m1_params, m2_params);
  torch::Tensor ladv = torch::zeros({});
  torch::Tensor fake1, fake2;
  if (adversarial) {
    const auto xu2d = mip_project(xu);
    fake1 = fuse_for_discriminator(xu2d, mip_project(torch::softmax(y1u, 1)));
    fake2 = fuse_for_discriminator(xu2d, mip_project(torch::softmax(y2u, 1)));
    set_requires_grad(disc_params, false);
    ladv = adversarial_loss(disc_->forward(fake1), disc_->forward(fake2));
    require_finite(ladv, "l_adv");
  }

  // (7) generator step
  auto total = l1 + l2 + weights_.lambda_u * lu + weights_.lambda_adv * ladv;
  require_finite(total, "l_total");
  gen_opt_->zero_grad();
  zero_grads(disc_params);
  if (train_.audit_gradients) {
    state.audit.performed = true;
    const auto& teacher_params = m1_teaches ? m1_params : m2_params;
    const auto& student_params = m1_teaches ? m2_params : m1_params;
    state.audit.unsup_to_teacher = max_abs(torch::autograd::grad(
        {lu}, teacher_params, {}, /*retain_graph=*/true, false, /*allow_unused=*/true));
    state.audit.unsup_to_student = max_abs(torch::autograd::grad(
        {lu}, student_params, {}, /*retain_graph=*/true, false, /*allow_unused=*/true));
  }
  total.backward();
  if (train_.audit_gradients) state.audit.adv_to_discriminator = max_abs_grad(disc_params);
  gen_opt_->step();
  set_requires_grad(disc_params, true);

  // (8) discriminator step on detached fakes
  torch::Tensor ld = torch::zeros({});
  if (adversarial) {
    gen_opt_->zero_grad();
    disc_opt_->zero_grad();
    const auto real = fuse_for_discriminator(mip_project(xl), mip_project(yl));
    ld = discriminator_loss(disc_->forward(real), disc_->forward(fake1.detach()),
                            disc_->forward(fake2.detach()));
    require_finite(ld, "l_disc");
    ld.backward();
    if (train_.audit_gradients) state.audit.disc_to_generators = max_abs_grad(gen_params);
    disc_opt_->step();
  }
  gen_opt_->zero_grad();
  disc_opt_->zero_grad();

  state.losses = {l1.item<double>(), l2.item<double>(), lu.item<double>(),
                  ladv.item<double>(), ld.item<double>(), total.item<double>()};
  // (9) advance; the next step picks up lr_schedule(t + 1)
  ++iteration_;
  state.rng_state = rng_state();
  return state;
}

IterationState Trainer::train_step_mt_baseline(const CropPair& labeled,
                                               const torch::Tensor& unlabeled) {
  if (train_.variant != Variant::mt_baseline) throw ConfigError("variant is not mt-baseline");
  if (labeled.image.size(0) < 1 || unlabeled.size(0) < 1) {
    throw ShapeError("train_step_mt_baseline: labeled and unlabeled batches must be non-empty");
  }
  const int64_t t = iteration_;
  IterationState state;
  state.iteration = t;
  state.lr = lr_schedule(t, train_);
  state.teacher = "ema";
  set_learning_rates(t);
  m1_->train();
  m2_->train();

  const int64_t nl = labeled.image.size(0);
  const auto out = m1_->forward(torch::cat({labeled.image, unlabeled}, 0));
  const auto ysl = out.index({Slice(0, nl)});
  const auto ysu = out.index({Slice(nl, None)});
  torch::Tensor teacher_l, teacher_u;
  {
    torch::NoGradGuard guard;
    const auto tout = m2_->forward(torch::cat({labeled.image, unlabeled}, 0));
    teacher_l = tout.index({Slice(0, nl)});
    teacher_u = tout.index({Slice(nl, None)});
  }
  const auto l1 = seg_loss(ysl, labeled.label, weights_);
  require_finite(l1, "l1_sup");
  const auto lu = torch::mse_loss(torch::softmax(ysu, 1), torch::softmax(teacher_u, 1));
  require_finite(lu, "l_unsup");
  const auto total = l1 + weights_.lambda_u * lu;

  gen_opt_->zero_grad();
  total.backward();
  gen_opt_->step();
  gen_opt_->zero_grad();
  ema_update(m2_->parameters(), m1_->parameters(), train_.ema_decay);
  {
    torch::NoGradGuard guard;
    auto tb = m2_->buffers();
    auto sb = m1_->buffers();
    for (size_t i = 0; i < tb.size(); ++i) tb[i].copy_(sb[i]);
  }

  double l2 = 0.0;
  {
    torch::NoGradGuard guard;
    l2 = seg_loss(teacher_l, labeled.label, weights_).item<double>();
  }
  state.losses = {l1.item<double>(), l2, lu.item<double>(), 0.0, 0.0, total.item<double>()};
  ++iteration_;
  state.rng_state = rng_state();
  return state;
}

IterationState Trainer::train_step_supervised(const CropPair& labeled) {
  if (labeled.image.size(0) < 1) throw ShapeError("train_step_supervised: empty labeled batch");
  const int64_t t = iteration_;
  IterationState state;
  state.iteration = t;
  state.lr = lr_schedule(t, train_);
  state.teacher = "none";
  set_learning_rates(t);
  m1_->train();

  const auto l1 = seg_loss(m1_->forward(labeled.image), labeled.label, weights_);
  require_finite(l1, "l1_sup");
  gen_opt_->zero_grad();
  l1.backward();
  gen_opt_->step();
  gen_opt_->zero_grad();
  state.losses = {l1.item<double>(), 0.0, 0.0, 0.0, 0.0, l1.item<double>()};
  ++iteration_;
  state.rng_state = rng_state();
  return state;
}

// -------------------------------------------------------------- checkpoints

fs::path checkpoint_dir(const fs::path& output_dir, int64_t iteration) {
  char name[32];
  std::snprintf(name, sizeof(name), "iter_%06lld", static_cast<long long>(iteration));
  return output_dir / "checkpoints" / name;
}

void Trainer::save_checkpoint(const fs::path& dir, const nlohmann::json& resolved_config,
                              const std::string& config_hash) const {
  fs::create_directories(dir);
  save_module(*m1_, dir / "m1.pt");
  save_module(*m2_, dir / "m2.pt");
  save_module(*disc_, dir / "discriminator.pt");
  {
    torch::serialize::OutputArchive a;
    gen_opt_->save(a);
    a.save_to((dir / "optimizer_generators.pt").string());
  }
  {
    torch::serialize::OutputArchive a;
    disc_opt_->save(a);
    a.save_to((dir / "optimizer_discriminator.pt").string());
  }
  nlohmann::json manifest = {
      {"config_hash", config_hash},
      {"iteration", iteration_},
      {"variant", to_string(train_.variant)},
      {"rng_state", rng_state()},
      {"torch_rng_state", to_hex(at::detail::getDefaultCPUGenerator().get_state())},
      {"config", resolved_config},
  };
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IngestError("cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

CheckpointManifest read_checkpoint_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IngestError("checkpoint manifest missing: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    CheckpointManifest m;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.iteration = j.at("iteration").get<int64_t>();
    m.variant = j.at("variant").get<std::string>();
    m.rng_state = j.at("rng_state").get<std::string>();
    m.torch_rng_state = j.at("torch_rng_state").get<std::string>();
    m.config = j.at("config");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IngestError("malformed checkpoint manifest " + path.string() + ": " + e.what());
  }
}

CheckpointManifest Trainer::load_checkpoint(const fs::path& dir) {
  auto manifest = read_checkpoint_manifest(dir);
  if (manifest.variant != to_string(train_.variant)) {
    throw ConfigError("checkpoint variant " + manifest.variant + " does not match configured " +
                      to_string(train_.variant));
  }
  load_module(*m1_, dir / "m1.pt");
  load_module(*m2_, dir / "m2.pt");
  load_module(*disc_, dir / "discriminator.pt");
  for (auto& [opt, name] : {std::pair{gen_opt_.get(), "optimizer_generators.pt"},
                            std::pair{disc_opt_.get(), "optimizer_discriminator.pt"}}) {
    const auto path = dir / name;
    if (!fs::exists(path)) throw IngestError("checkpoint file missing: " + path.string());
    torch::serialize::InputArchive a;
    a.load_from(path.string());
    opt->load(a);
  }
  std::istringstream rs(manifest.rng_state);
  rs >> rng_;
  auto generator = at::detail::getDefaultCPUGenerator();
  generator.set_state(from_hex(manifest.torch_rng_state));
  iteration_ = manifest.iteration;
  if (train_.variant == Variant::mt_baseline) set_requires_grad(m2_->parameters(), false);
  return manifest;
}

// ----------------------------------------------------------------- run loop

namespace {

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IngestError("cannot append to " + path.string());
  out << line << '\n';
}

std::string format_val_line(int64_t t, const MetricReport& r) {
  std::ostringstream out;
  out << std::setprecision(17) << "t=" << t << " dsc=" << r.mean_dsc << " nsd=" << r.mean_nsd
      << " asd=" << r.mean_asd << " missing=" << r.missing_surface;
  return out.str();
}

}  // namespace

RunResult run_training(Trainer& trainer, TrainingStream& stream, const RunOptions& options) {
  fs::create_directories(options.output_dir);
  if (options.resume_from) trainer.load_checkpoint(*options.resume_from);
  const auto& cfg = trainer.config();
  const auto log_path = options.output_dir / "train.log";
  const auto val_path = options.output_dir / "val.log";
  const int64_t half = cfg.batch_size / 2;
  const int64_t stop = std::min(cfg.total_iterations, options.stop_after.value_or(cfg.total_iterations));

  RunResult result;
  while (trainer.iteration() < stop) {
    auto labeled = stream.next_labeled(half, trainer.rng());
    torch::Tensor unlabeled;
    if (cfg.variant != Variant::supervised) unlabeled = stream.next_unlabeled(half, trainer.rng());
    auto state = trainer.step(labeled, unlabeled);
    append_line(log_path, format_log_line(state));
    result.history.push_back(state);

    const int64_t done = trainer.iteration();
    if (done % cfg.checkpoint_interval == 0 || done == cfg.total_iterations) {
      const auto dir = checkpoint_dir(options.output_dir, done);
      trainer.save_checkpoint(dir, options.resolved_config, options.config_hash);
      result.checkpoints.push_back(dir);
    }
    if (options.validate && cfg.val_interval > 0 && done % cfg.val_interval == 0 &&
        done != cfg.total_iterations) {
      append_line(val_path, format_val_line(done, options.validate(trainer.m1())));
    }
  }
  result.iterations_completed = trainer.iteration();
  if (options.validate && trainer.iteration() == cfg.total_iterations) {
    result.final_validation = options.validate(trainer.m1());
    append_line(val_path, format_val_line(trainer.iteration(), *result.final_validation));
  }
  return result;
}

}  // namespace dico
