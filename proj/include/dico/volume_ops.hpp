#pragma once

#include <torch/torch.h>

#include <cstdint>

#include "dico/volume.hpp"

namespace dico {

/// Split factors per spatial axis plus the extents of the volume that was
/// split. The extents are filled in by decompose_views.
struct ViewGeometry {
  int64_t n1 = 2;
  int64_t n2 = 2;
  int64_t n3 = 1;
  Extent3 original{};

  int64_t local_views() const { return n1 * n2 * n3; }
  /// Global view plus all local views.
  int64_t total_views() const { return local_views() + 1; }
  Extent3 view_extent() const { return {original.h / n1, original.w / n2, original.d / n3}; }
  void validate_factors() const;
};

/// Views stacked along the batch axis. Block order: the global view (B
/// entries) first, then one B-sized block per local view in row-major
/// (h-block, w-block, d-block) order.
struct ViewBatch {
  torch::Tensor data;
  ViewGeometry geometry;

  int64_t batch() const { return data.size(0) / geometry.total_views(); }
};

/// Output of recompose_views: the upsampled global component and the local
/// components pasted back at their source offsets, both (B, C, H, W, D).
struct RecomposedViews {
  torch::Tensor global;
  torch::Tensor locals;
};

/// Maximum-intensity projection along the last (depth) axis. Gradients flow
/// to the arg-max voxel of each ray.
Projection2D mip_project(const torch::Tensor& input);
inline Projection2D mip_project(const Volume& v) { return mip_project(v.data); }
inline Projection2D mip_project(const LabelMask& m) { return mip_project(m.data); }
inline Projection2D mip_project(const ProbMap& p) { return mip_project(p.data); }

/// Builds the global + local view stack. Local views are exact crops; the
/// global view is a corner-aligned trilinear resize to the local extent.
ViewBatch decompose_views(const torch::Tensor& input, ViewGeometry geometry);
inline ViewBatch decompose_views(const Volume& v, ViewGeometry geometry) {
  return decompose_views(v.data, geometry);
}

/// Inverse layout of decompose_views. Channel count may differ from the
/// decomposed input (network features are recomposed the same way).
RecomposedViews recompose_views(const torch::Tensor& stacked, const ViewGeometry& geometry);
inline RecomposedViews recompose_views(const ViewBatch& views) {
  return recompose_views(views.data, views.geometry);
}

/// Centered crop of the spatial axes. Axes shorter than `size` are zero
/// padded symmetrically (the extra voxel of an odd pad goes to the high side);
/// odd crop remainders put the extra voxel on the high side as well.
torch::Tensor center_crop(const torch::Tensor& input, Extent3 size);
inline Volume center_crop(const Volume& v, Extent3 size) {
  return Volume(center_crop(v.data, size), v.spacing);
}

/// Crop of `size` starting at `origin` in the (possibly padded) grid. The
/// input is first padded the same way center_crop pads.
torch::Tensor crop_at(const torch::Tensor& input, Extent3 origin, Extent3 size);

/// Extent after center_crop-style padding so that every axis is >= size.
Extent3 padded_extent(Extent3 extent, Extent3 size);

}  // namespace dico
