#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dico/data.hpp"

namespace dico {

/// Process exit codes of every command.
enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitRuntime = 2 };

struct TrainArgs {
  std::filesystem::path config;
  std::vector<std::string> overrides;  ///< `section.key=value`
  std::optional<std::filesystem::path> resume;
  std::optional<std::string> variant;
  std::optional<int64_t> stop_after;
};

struct EvalArgs {
  std::filesystem::path config;
  std::vector<std::string> overrides;
  std::filesystem::path checkpoint;
  std::string split = "val";  ///< val, test, labeled-train, unlabeled-train or train
  std::optional<std::filesystem::path> out_dir;  ///< defaults to the config output_dir
};

struct InferArgs {
  std::filesystem::path config;
  std::vector<std::string> overrides;
  std::filesystem::path checkpoint;
  std::vector<std::filesystem::path> inputs;  ///< NIfTI images; empty means use `split`
  std::string split = "test";
  std::optional<std::filesystem::path> out_dir;
};

struct PhantomArgs {
  std::filesystem::path out_dir;
  int64_t train_count = 10;
  int64_t val_count = 4;
  PhantomSpec spec{};  ///< spec.seed is the seed of the first case
};

struct ProjectArgs {
  std::filesystem::path image;
  std::filesystem::path mask;
  std::filesystem::path out;  ///< prefix; `_image` / `_mask` suffixes are appended
};

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err);
int cmd_infer(const InferArgs& args, std::ostream& out, std::ostream& err);
int cmd_phantom(const PhantomArgs& args, std::ostream& out, std::ostream& err);
int cmd_project(const ProjectArgs& args, std::ostream& out, std::ostream& err);

/// Manifest records after make_split (when any record is still tagged
/// `train`), as used by training and evaluation.
std::vector<CaseRecord> resolve_split(const std::vector<CaseRecord>& records,
                                      double labeled_fraction, uint64_t seed);

/// Records of one split name. `train` selects every labeled training record.
std::vector<CaseRecord> select_split(const std::vector<CaseRecord>& records, const std::string& split);

}  // namespace dico
