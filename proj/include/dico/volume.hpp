#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>

#include "dico/errors.hpp"

namespace dico {

/// Physical voxel size in mm along (H, W, D).
struct Spacing {
  double h = 1.0;
  double w = 1.0;
  double d = 1.0;

  bool operator==(const Spacing&) const = default;
};

/// Spatial extents (H, W, D) of a grid or crop.
struct Extent3 {
  int64_t h = 0;
  int64_t w = 0;
  int64_t d = 0;

  bool operator==(const Extent3&) const = default;
  int64_t voxels() const { return h * w * d; }
  std::array<int64_t, 3> as_array() const { return {h, w, d}; }
};

/// Spatial extents of a 5-axis (B, C, H, W, D) tensor.
Extent3 spatial_extent(const torch::Tensor& t);

/// Intensity volume (B, C, H, W, D), float32, with voxel spacing.
struct Volume {
  torch::Tensor data;
  Spacing spacing{};

  Volume() = default;
  explicit Volume(torch::Tensor t, Spacing s = {});

  int64_t batch() const { return data.size(0); }
  int64_t channels() const { return data.size(1); }
  Extent3 extent() const { return spatial_extent(data); }
};

/// Binary ground-truth mask (B, 1, H, W, D), stored as uint8.
struct LabelMask {
  torch::Tensor data;

  LabelMask() = default;
  /// Accepts any integral or floating tensor holding only 0/1 values.
  explicit LabelMask(torch::Tensor t);

  Extent3 extent() const { return spatial_extent(data); }
  /// Class indices as int64, the layout cross-entropy expects.
  torch::Tensor indices() const { return data.to(torch::kLong); }
};

/// Per-voxel class probabilities (B, K, H, W, D).
struct ProbMap {
  torch::Tensor data;

  ProbMap() = default;
  explicit ProbMap(torch::Tensor t);

  int64_t classes() const { return data.size(1); }
  Extent3 extent() const { return spatial_extent(data); }
};

/// Depth-projected image or mask (B, C, H, W).
struct Projection2D {
  torch::Tensor data;
};

/// Throws ShapeError unless `t` is 5-D with all extents >= 1.
void require_5d(const torch::Tensor& t, const char* what);

}  // namespace dico
