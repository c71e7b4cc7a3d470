#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dico/metrics.hpp"
#include "dico/nifti.hpp"
#include "dico/volume.hpp"

namespace dico {

/// `train` marks a training case not yet assigned by make_split.
enum class SplitTag { train, labeled_train, unlabeled_train, val, test };

std::string to_string(SplitTag tag);
SplitTag parse_split_tag(const std::string& s);

struct CaseRecord {
  std::string id;
  std::filesystem::path image;
  std::optional<std::filesystem::path> label;
  SplitTag split = SplitTag::train;

  bool operator==(const CaseRecord&) const = default;
  /// Labeled-train, val and test records need a label path.
  void validate() const;
};

/// Manifest: one case per line, whitespace separated
/// `id image_path label_path|- split`. Blank lines and `#` comments are
/// skipped. Relative paths resolve against the manifest's directory.
std::vector<CaseRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<CaseRecord>& cases);

enum class NormalizationMode { zscore, window };

struct NormalizationConfig {
  NormalizationMode mode = NormalizationMode::zscore;
  double clip_sigma = 5.0;
  double window_min = -200.0;  ///< window mode: intensity mapped to 0
  double window_max = 800.0;   ///< window mode: intensity mapped to 1
};

/// Source-grid bookkeeping needed to write predictions back in the
/// original voxel order and affine.
struct SourceGeometry {
  std::array<int64_t, 3> dims{1, 1, 1};
  std::array<double, 3> pixdim{1, 1, 1};
  std::array<std::array<double, 4>, 3> affine{{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}}};
  /// Source voxel axis placed at tensor axis H, W, D. The axis that runs
  /// most nearly along world z is always last.
  std::array<int64_t, 3> axis_order{0, 1, 2};
};

struct LoadedCase {
  std::string id;
  Volume image;
  std::optional<LabelMask> label;
  SourceGeometry geometry;
};

/// Per-volume z-score (constant volumes map to zeros), clipped to
/// +/- clip_sigma; or fixed windowing to [0, 1].
torch::Tensor normalize_intensity(const torch::Tensor& t, const NormalizationConfig& config);

/// Source voxel axes in tensor order (H, W, D): the axis running most
/// nearly along world z goes last, the others keep their order.
std::array<int64_t, 3> orientation_order(const std::array<std::array<double, 4>, 3>& affine);

/// Raw voxels of `img` as an (H, W, D) tensor in the same axis order
/// load_case uses, without intensity normalization.
torch::Tensor oriented_voxels(const NiftiImage& img);

LoadedCase load_case(const CaseRecord& record, const NormalizationConfig& config = {});

/// Volume tensor (1, 1, H, W, D) in tensor axis order -> NIfTI image in the
/// source voxel order with the source affine.
NiftiImage to_nifti(const torch::Tensor& volume, const SourceGeometry& geometry,
                    NiftiDataType type);

/// Assigns labeled-train / unlabeled-train to every training record
/// (tags train, labeled-train, unlabeled-train); val/test records pass
/// through. The labeled count is round-half-up of n * fraction and must be
/// at least one. Deterministic for a given seed.
std::vector<CaseRecord> make_split(const std::vector<CaseRecord>& cases, double labeled_fraction,
                                   uint64_t seed);

enum class CropMode { center, random };

std::string to_string(CropMode mode);
CropMode parse_crop_mode(const std::string& s);

struct CropPair {
  torch::Tensor image;  // (B, C, h, w, d)
  torch::Tensor label;  // (B, 1, h, w, d) uint8, undefined when no label
};

/// Center crop (training default) or a uniformly random crop origin, both
/// zero-padding volumes smaller than `size`.
CropPair sample_crop(const torch::Tensor& image, const torch::Tensor& label, Extent3 size,
                     CropMode mode, std::mt19937_64& rng);

/// Synthetic vessel-like phantom: random smooth tubes of varying radius.
struct PhantomSpec {
  int64_t grid = 32;
  int64_t tubes = 3;
  double radius_min = 1.0;
  double radius_max = 2.0;
  double curvature = 0.4;        ///< direction jitter between control points
  int64_t control_points = 6;
  double segment_fraction = 0.25;  ///< control-point spacing as a fraction of grid
  double contrast = 1.0;
  double background = 0.0;
  double noise_sigma = 0.3;
  uint64_t seed = 0;

  void validate() const;
};

struct Phantom {
  Volume image;     // (1, 1, g, g, g)
  LabelMask mask;   // (1, 1, g, g, g)
  std::vector<BinaryGrid> tubes;  // per-tube masks before the union
};

Phantom generate_phantom(const PhantomSpec& spec);

/// Source of cropped training samples drawn from labeled and unlabeled cases.
/// Cases are kept in memory, or re-read from disk on each draw when
/// constructed from records.
class TrainingStream {
 public:
  TrainingStream(std::vector<LoadedCase> labeled, std::vector<LoadedCase> unlabeled, Extent3 crop,
                 CropMode mode);
  TrainingStream(std::vector<CaseRecord> labeled, std::vector<CaseRecord> unlabeled, Extent3 crop,
                 CropMode mode, NormalizationConfig normalization);

  /// `count` labeled crops stacked along the batch axis.
  CropPair next_labeled(int64_t count, std::mt19937_64& rng);
  /// `count` unlabeled crops stacked along the batch axis.
  torch::Tensor next_unlabeled(int64_t count, std::mt19937_64& rng);

  size_t labeled_size() const;
  size_t unlabeled_size() const;

 private:
  LoadedCase fetch(bool labeled, size_t index) const;

  std::vector<LoadedCase> labeled_cases_;
  std::vector<LoadedCase> unlabeled_cases_;
  std::vector<CaseRecord> labeled_records_;
  std::vector<CaseRecord> unlabeled_records_;
  bool lazy_ = false;
  Extent3 crop_;
  CropMode mode_;
  NormalizationConfig normalization_;
};

}  // namespace dico
