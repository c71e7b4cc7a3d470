#include <torch/torch.h>

#include <CLI11.hpp>
#include <iostream>

#include "dico/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"dico: semi-supervised 3D vessel segmentation"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Intra-op CPU threads (0 keeps the torch default)");

  dico::TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("config", train.config, "Config file (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--set", train.overrides, "Override section.key=value (repeatable)");
  train_cmd->add_option("--resume", train.resume, "Checkpoint directory to resume from");
  train_cmd->add_option("--variant", train.variant, "dico-ct, dico-cc, dico-tt, mt-baseline or supervised");
  train_cmd->add_option("--stop-after", train.stop_after, "Stop after this many completed iterations");

  dico::EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
  eval_cmd->add_option("config", eval.config, "Config file (JSON)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--split", eval.split, "val, test, labeled-train, unlabeled-train or train")
      ->capture_default_str();
  eval_cmd->add_option("--set", eval.overrides, "Override section.key=value (repeatable)");
  eval_cmd->add_option("--out", eval.out_dir, "Output directory (default: the config output_dir)");

  dico::InferArgs infer;
  auto* infer_cmd = app.add_subcommand("infer", "Write predicted masks as NIfTI");
  infer_cmd->add_option("config", infer.config, "Config file (JSON)")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--checkpoint", infer.checkpoint, "Checkpoint directory")->required();
  infer_cmd->add_option("--input", infer.inputs, "Input NIfTI volume (repeatable)");
  infer_cmd->add_option("--split", infer.split, "Manifest split used when no --input is given")
      ->capture_default_str();
  infer_cmd->add_option("--set", infer.overrides, "Override section.key=value (repeatable)");
  infer_cmd->add_option("--out", infer.out_dir, "Output directory (default: <output_dir>/predictions)");

  dico::PhantomArgs phantom;
  auto* phantom_cmd = app.add_subcommand("phantom", "Generate a synthetic vessel phantom suite");
  phantom_cmd->add_option("out", phantom.out_dir, "Output directory")->required();
  phantom_cmd->add_option("--train", phantom.train_count, "Training cases")->capture_default_str();
  phantom_cmd->add_option("--val", phantom.val_count, "Validation cases")->capture_default_str();
  phantom_cmd->add_option("--grid", phantom.spec.grid, "Cubic grid size")->capture_default_str();
  phantom_cmd->add_option("--tubes", phantom.spec.tubes, "Tubes per volume")->capture_default_str();
  phantom_cmd->add_option("--radius-min", phantom.spec.radius_min, "Minimum tube radius")->capture_default_str();
  phantom_cmd->add_option("--radius-max", phantom.spec.radius_max, "Maximum tube radius")->capture_default_str();
  phantom_cmd->add_option("--curvature", phantom.spec.curvature, "Direction jitter")->capture_default_str();
  phantom_cmd->add_option("--contrast", phantom.spec.contrast, "Tube intensity above background")
      ->capture_default_str();
  phantom_cmd->add_option("--noise", phantom.spec.noise_sigma, "Gaussian noise sigma")->capture_default_str();
  phantom_cmd->add_option("--seed", phantom.spec.seed, "Seed of the first case")->capture_default_str();

  dico::ProjectArgs project;
  auto* project_cmd = app.add_subcommand("project", "Depth MIP of an image and mask as 2D images");
  project_cmd->add_option("image", project.image, "Image NIfTI")->required()->check(CLI::ExistingFile);
  project_cmd->add_option("mask", project.mask, "Mask NIfTI")->required()->check(CLI::ExistingFile);
  project_cmd->add_option("out", project.out, "Output prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? dico::kExitOk : dico::kExitValidation;
  }
  if (threads > 0) torch::set_num_threads(threads);

  if (*train_cmd) return dico::cmd_train(train, std::cout, std::cerr);
  if (*eval_cmd) return dico::cmd_eval(eval, std::cout, std::cerr);
  if (*infer_cmd) return dico::cmd_infer(infer, std::cout, std::cerr);
  if (*phantom_cmd) return dico::cmd_phantom(phantom, std::cout, std::cerr);
  return dico::cmd_project(project, std::cout, std::cerr);
}
