#include "dico/commands.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "dico/config.hpp"
#include "dico/evaluation.hpp"
#include "dico/nifti.hpp"
#include "dico/trainer.hpp"
#include "dico/volume_ops.hpp"

namespace dico {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const IngestError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "runtime failure: " << e.what() << "\n";
    return kExitRuntime;
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

std::vector<CaseRecord> manifest_records(const ExperimentConfig& config) {
  const auto& path = config.data.manifest;
  if (path.empty()) throw ConfigError("data.manifest is not set");
  if (!fs::exists(path)) throw ConfigError("manifest not found: " + path.string());
  return resolve_split(read_manifest(path), config.data.labeled_fraction, config.data.split_seed);
}

std::vector<CaseRecord> with_tag(const std::vector<CaseRecord>& records, SplitTag tag) {
  std::vector<CaseRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [&](const CaseRecord& r) { return r.split == tag; });
  return out;
}

std::vector<LoadedCase> load_all(const std::vector<CaseRecord>& records,
                                 const NormalizationConfig& normalization) {
  std::vector<LoadedCase> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(load_case(r, normalization));
  return out;
}

/// Builds networks for `config` and loads `checkpoint`, refusing on a
/// config hash mismatch.
std::unique_ptr<Trainer> restore(const ExperimentConfig& config, const fs::path& checkpoint,
                                 std::ostream& err, CheckpointManifest& manifest) {
  manifest = read_checkpoint_manifest(checkpoint);
  const auto expected = config_hash(config);
  if (manifest.config_hash != expected) {
    err << "checkpoint config hash: " << manifest.config_hash << "\n"
        << "current config hash:    " << expected << "\n";
    throw ConfigError("checkpoint " + checkpoint.string() + " is incompatible with the config");
  }
  auto trainer = std::make_unique<Trainer>(config.resolved_models(), config.trainer, config.losses,
                                           config.pseudo_label);
  trainer->load_checkpoint(checkpoint);
  return trainer;
}

std::string case_id_from_path(const fs::path& p) {
  auto name = p.filename().string();
  for (const std::string ext : {".nii.gz", ".nii"}) {
    if (name.size() > ext.size() && name.ends_with(ext)) return name.substr(0, name.size() - ext.size());
  }
  return p.stem().string();
}

void write_pgm(const fs::path& path, const torch::Tensor& bytes) {
  const auto t = bytes.to(torch::kUInt8).contiguous();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "P5\n" << t.size(1) << " " << t.size(0) << "\n255\n";
  f.write(reinterpret_cast<const char*>(t.data_ptr<uint8_t>()), t.numel());
}

NiftiImage image_2d(const torch::Tensor& t, double sh, double sw) {
  NiftiImage img;
  img.dims = {t.size(0), t.size(1), 1};
  img.pixdim = {sh, sw, 1.0};
  img.affine = {{{sh, 0, 0, 0}, {0, sw, 0, 0}, {0, 0, 1, 0}}};
  img.datatype = NiftiDataType::float32;
  const auto xfast = t.to(torch::kFloat).t().contiguous();
  img.data.assign(xfast.data_ptr<float>(), xfast.data_ptr<float>() + xfast.numel());
  return img;
}

}  // namespace

std::vector<CaseRecord> resolve_split(const std::vector<CaseRecord>& records,
                                      double labeled_fraction, uint64_t seed) {
  const bool unassigned = std::any_of(records.begin(), records.end(),
                                      [](const CaseRecord& r) { return r.split == SplitTag::train; });
  return unassigned ? make_split(records, labeled_fraction, seed) : records;
}

std::vector<CaseRecord> select_split(const std::vector<CaseRecord>& records, const std::string& split) {
  std::vector<CaseRecord> out;
  if (split == "train") {
    for (const auto& r : records) {
      const bool training = r.split == SplitTag::train || r.split == SplitTag::labeled_train ||
                            r.split == SplitTag::unlabeled_train;
      if (training && r.label) out.push_back(r);
    }
    return out;
  }
  return with_tag(records, parse_split_tag(split));
}

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto overrides = args.overrides;
    if (args.variant) overrides.push_back("trainer.variant=" + *args.variant);
    const auto config = load_config(args.config, overrides);
    const auto records = manifest_records(config);
    const auto labeled = with_tag(records, SplitTag::labeled_train);
    const auto unlabeled = with_tag(records, SplitTag::unlabeled_train);
    const auto val = with_tag(records, SplitTag::val);
    if (labeled.empty()) throw ConfigError("manifest has no labeled training cases");
    if (unlabeled.empty() && config.trainer.variant != Variant::supervised) {
      throw ConfigError("manifest has no unlabeled training cases");
    }

    const auto& dir = config.output_dir;
    fs::create_directories(dir);
    const auto resolved = to_json(config);
    write_text(dir / "config.json", resolved.dump(2) + "\n");
    write_manifest(dir / "split_manifest.txt", records);

    const auto& norm = config.data.normalization;
    std::optional<TrainingStream> stream;
    if (config.data.preload) {
      stream.emplace(load_all(labeled, norm), load_all(unlabeled, norm), config.trainer.crop,
                     config.trainer.crop_mode);
    } else {
      stream.emplace(labeled, unlabeled, config.trainer.crop, config.trainer.crop_mode, norm);
    }

    RunOptions options;
    options.output_dir = dir;
    options.resolved_config = resolved;
    options.config_hash = config_hash(config);
    options.stop_after = args.stop_after;
    if (args.resume) {
      const auto manifest = read_checkpoint_manifest(*args.resume);
      if (manifest.config_hash != options.config_hash) {
        err << "checkpoint config hash: " << manifest.config_hash << "\n"
            << "current config hash:    " << options.config_hash << "\n";
        throw ConfigError("checkpoint " + args.resume->string() + " is incompatible with the config");
      }
      options.resume_from = *args.resume;
    }
    std::vector<LoadedCase> val_cases;
    if (!val.empty()) {
      val_cases = load_all(val, norm);
      options.validate = [&](const SegNet& m1) {
        return evaluate_network(m1, val_cases, config.inference.window, config.metrics.options());
      };
    }

    Trainer trainer(config.resolved_models(), config.trainer, config.losses, config.pseudo_label);
    const auto result = run_training(trainer, *stream, options);
    out << "completed " << result.iterations_completed << " of " << config.trainer.total_iterations
        << " iterations (" << to_string(config.trainer.variant) << ")\n";
    if (!result.checkpoints.empty()) out << "last checkpoint: " << result.checkpoints.back().string() << "\n";
    if (result.final_validation) {
      const auto& m = *result.final_validation;
      out << std::setprecision(6) << "val dsc=" << m.mean_dsc << " nsd=" << m.mean_nsd
          << " asd=" << m.mean_asd << "\n";
    }
    return kExitOk;
  });
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto config = load_config(args.config, args.overrides);
    const auto cases = select_split(manifest_records(config), args.split);
    if (cases.empty()) throw ConfigError("split '" + args.split + "' has no cases");
    for (const auto& c : cases) {
      if (!c.label) throw ConfigError("case '" + c.id + "' has no label to evaluate against");
    }
    CheckpointManifest manifest;
    const auto trainer = restore(config, args.checkpoint, err, manifest);
    const auto loaded = load_all(cases, config.data.normalization);
    const SegNet partner = config.inference.average_m1_m2 ? trainer->m2() : nullptr;
    const auto report = evaluate_network(trainer->m1(), loaded, config.inference.window,
                                         config.metrics.options(), partner);

    const auto dir = args.out_dir.value_or(config.output_dir);
    fs::create_directories(dir);
    const auto csv = dir / ("eval_" + args.split + ".csv");
    std::ostringstream table;
    write_metrics_csv(table, report);
    write_text(csv, table.str());
    const json provenance = {{"checkpoint", args.checkpoint.string()},
                             {"checkpoint_iteration", manifest.iteration},
                             {"config_hash", manifest.config_hash},
                             {"split", args.split},
                             {"config", to_json(config)}};
    write_text(dir / ("eval_" + args.split + ".config.json"), provenance.dump(2) + "\n");
    out << std::setprecision(6) << "cases=" << report.cases.size() << " dsc=" << report.mean_dsc
        << " nsd=" << report.mean_nsd << " asd=" << report.mean_asd << "\n"
        << "wrote " << csv.string() << "\n";
    return kExitOk;
  });
}

int cmd_infer(const InferArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto config = load_config(args.config, args.overrides);
    std::vector<CaseRecord> cases;
    if (!args.inputs.empty()) {
      for (const auto& p : args.inputs) cases.push_back({case_id_from_path(p), p, std::nullopt, SplitTag::test});
    } else {
      cases = select_split(manifest_records(config), args.split);
    }
    if (cases.empty()) throw ConfigError("no input volumes");
    CheckpointManifest manifest;
    const auto trainer = restore(config, args.checkpoint, err, manifest);
    const SegNet partner = config.inference.average_m1_m2 ? trainer->m2() : nullptr;

    const auto dir = args.out_dir.value_or(config.output_dir / "predictions");
    fs::create_directories(dir);
    json written = json::array();
    for (const auto& record : cases) {
      auto without_label = record;
      without_label.label.reset();
      const auto c = load_case(without_label, config.data.normalization);
      const auto prob = predict_volume(trainer->m1(), c.image, config.inference.window, partner);
      const auto mask = final_prediction(prob);
      const auto path = dir / (record.id + "_pred.nii.gz");
      write_nifti(path, to_nifti(mask.data, c.geometry, NiftiDataType::uint8));
      written.push_back({{"id", record.id}, {"image", record.image.string()}, {"prediction", path.string()}});
      out << "wrote " << path.string() << "\n";
    }
    const json provenance = {{"checkpoint", args.checkpoint.string()},
                             {"checkpoint_iteration", manifest.iteration},
                             {"config_hash", manifest.config_hash},
                             {"cases", written},
                             {"config", to_json(config)}};
    write_text(dir / "infer.config.json", provenance.dump(2) + "\n");
    return kExitOk;
  });
}

int cmd_phantom(const PhantomArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    args.spec.validate();
    if (args.train_count < 1) throw ConfigError("--train must be at least 1");
    if (args.val_count < 0) throw ConfigError("--val must be non-negative");
    fs::create_directories(args.out_dir / "images");
    fs::create_directories(args.out_dir / "labels");
    std::vector<CaseRecord> records;
    const int64_t total = args.train_count + args.val_count;
    for (int64_t i = 0; i < total; ++i) {
      auto spec = args.spec;
      spec.seed = args.spec.seed + static_cast<uint64_t>(i);
      const auto phantom = generate_phantom(spec);
      std::ostringstream id;
      id << "case_" << std::setw(3) << std::setfill('0') << i;
      const fs::path image = args.out_dir / "images" / (id.str() + ".nii.gz");
      const fs::path label = args.out_dir / "labels" / (id.str() + ".nii.gz");
      SourceGeometry geometry;
      geometry.dims = {spec.grid, spec.grid, spec.grid};
      write_nifti(image, to_nifti(phantom.image.data, geometry, NiftiDataType::float32));
      write_nifti(label, to_nifti(phantom.mask.data, geometry, NiftiDataType::uint8));
      records.push_back({id.str(), image, label, i < args.train_count ? SplitTag::train : SplitTag::val});
    }
    write_manifest(args.out_dir / "manifest.txt", records);
    const auto& s = args.spec;
    const json spec = {{"grid", s.grid},         {"tubes", s.tubes},
                       {"radius_min", s.radius_min}, {"radius_max", s.radius_max},
                       {"curvature", s.curvature}, {"control_points", s.control_points},
                       {"segment_fraction", s.segment_fraction}, {"contrast", s.contrast},
                       {"background", s.background}, {"noise_sigma", s.noise_sigma},
                       {"seed", s.seed},           {"train", args.train_count},
                       {"val", args.val_count}};
    write_text(args.out_dir / "phantom.json", spec.dump(2) + "\n");
    out << "wrote " << total << " phantoms and " << (args.out_dir / "manifest.txt").string() << "\n";
    return kExitOk;
  });
}

int cmd_project(const ProjectArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto image = read_nifti(args.image);
    const auto mask = read_nifti(args.mask);
    if (image.dims != mask.dims) {
      throw ShapeError("grid mismatch between " + args.image.string() + " and " + args.mask.string());
    }
    const auto img_proj = mip_project(oriented_voxels(image)).data;
    const auto mask_proj = mip_project(oriented_voxels(mask)).data;

    const auto order = orientation_order(image.affine);
    const double sh = image.pixdim[order[0]];
    const double sw = image.pixdim[order[1]];

    const auto base = args.out.string();
    if (args.out.has_parent_path()) fs::create_directories(args.out.parent_path());
    const auto lo = img_proj.min().item<float>();
    const auto hi = img_proj.max().item<float>();
    const auto scaled = hi > lo ? ((img_proj - lo) / (hi - lo) * 255.0).round() : torch::zeros_like(img_proj);
    write_pgm(base + "_image.pgm", scaled);
    write_pgm(base + "_mask.pgm", (mask_proj > 0.5).to(torch::kFloat) * 255.0);
    write_nifti(base + "_image.nii.gz", image_2d(img_proj, sh, sw));
    write_nifti(base + "_mask.nii.gz", image_2d(mask_proj, sh, sw));
    const json provenance = {{"image", args.image.string()}, {"mask", args.mask.string()},
                             {"axis", "depth"}, {"height", img_proj.size(0)}, {"width", img_proj.size(1)}};
    write_text(base + "_projection.json", provenance.dump(2) + "\n");
    out << "wrote " << base << "_{image,mask}.{pgm,nii.gz}\n";
    return kExitOk;
  });
}

}  // namespace dico
