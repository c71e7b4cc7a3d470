#pragma once

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "dico/data.hpp"
#include "dico/inference.hpp"
#include "dico/losses.hpp"
#include "dico/metrics.hpp"
#include "dico/networks.hpp"
#include "dico/trainer.hpp"

namespace dico {

struct DataConfig {
  std::filesystem::path manifest;
  double labeled_fraction = 0.05;
  uint64_t split_seed = 0;
  NormalizationConfig normalization{};
  bool preload = true;
};

struct MetricsConfig {
  double tau = 1.0;
  Connectivity connectivity = Connectivity::six;
  bool spacing_aware = false;

  MetricOptions options() const { return {tau, connectivity, spacing_aware, {}}; }
};

struct InferenceConfig {
  SlidingWindowConfig window{};
  bool average_m1_m2 = false;
};

/// Every knob of one experiment. Loaded from a JSON file; unknown keys are
/// rejected and all violations are reported together.
struct ExperimentConfig {
  DataConfig data{};
  ModelConfig model{};
  LossWeights losses{};
  PseudoLabelMode pseudo_label = PseudoLabelMode::soft_dice_hard_ce;
  TrainConfig trainer{};
  InferenceConfig inference{};
  MetricsConfig metrics{};
  std::filesystem::path output_dir = "runs/default";

  /// Model pairing after applying the trainer variant.
  ModelConfig resolved_models() const { return resolve_models(model, trainer.variant); }
};

/// Fully expanded JSON form (all keys, defaults included).
nlohmann::json to_json(const ExperimentConfig& config);

/// Parses and validates. `base_dir` resolves a relative manifest path.
/// Throws ConfigError listing every violation, one per line.
ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

/// Applies `section.key=value` overrides to a JSON document. Values parse as
/// JSON when possible and fall back to plain strings.
void apply_overrides(nlohmann::json& j, const std::vector<std::string>& overrides);

/// Reads the file, applies overrides, validates. A relative output_dir is
/// placed under $DICO_OUTPUT_ROOT when that variable is set.
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides = {});

/// Hash of everything that determines network shapes (resolved model
/// pairing and variant), as 16 hex digits. Checkpoints record it.
std::string config_hash(const ExperimentConfig& config);

}  // namespace dico
