#include "dico/volume_ops.hpp"

#include <string>
#include <vector>

namespace dico {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

void ViewGeometry::validate_factors() const {
  if (n1 < 1 || n2 < 1 || n3 < 1) {
    throw ShapeError("ViewGeometry: split factors must be positive");
  }
}

Projection2D mip_project(const torch::Tensor& input) {
  if (!input.defined() || input.dim() < 3) {
    throw ShapeError("mip_project: input needs a depth axis");
  }
  if (input.size(-1) == 0) throw ShapeError("mip_project: depth axis has zero extent");
  auto source = input.is_floating_point() ? input : input.to(torch::kFloat);
  // max(dim) routes the gradient to a single arg-max voxel per ray.
  return {std::get<0>(source.max(-1))};
}

namespace {

void check_divisible(const Extent3& e, const ViewGeometry& g) {
  const std::array<std::pair<const char*, std::pair<int64_t, int64_t>>, 3> axes{{
      {"H", {e.h, g.n1}},
      {"W", {e.w, g.n2}},
      {"D", {e.d, g.n3}},
  }};
  for (const auto& [name, ext] : axes) {
    if (ext.first % ext.second != 0) {
      throw ShapeError(std::string("decompose_views: axis ") + name + " extent " +
                       std::to_string(ext.first) + " is not divisible by split factor " +
                       std::to_string(ext.second));
    }
  }
}

torch::Tensor resize_trilinear(const torch::Tensor& x, Extent3 to) {
  if (spatial_extent(x) == to) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{to.h, to.w, to.d})
                               .mode(torch::kTrilinear)
                               .align_corners(true));
}

}  // namespace

ViewBatch decompose_views(const torch::Tensor& input, ViewGeometry geometry) {
  require_5d(input, "decompose_views");
  geometry.validate_factors();
  const auto extent = spatial_extent(input);
  check_divisible(extent, geometry);
  geometry.original = extent;
  const auto v = geometry.view_extent();

  std::vector<torch::Tensor> blocks;
  blocks.reserve(static_cast<size_t>(geometry.total_views()));
  blocks.push_back(resize_trilinear(input, v));
  for (int64_t i = 0; i < geometry.n1; ++i) {
    for (int64_t j = 0; j < geometry.n2; ++j) {
      for (int64_t k = 0; k < geometry.n3; ++k) {
        blocks.push_back(input.index({Slice(), Slice(), Slice(i * v.h, (i + 1) * v.h),
                                      Slice(j * v.w, (j + 1) * v.w),
                                      Slice(k * v.d, (k + 1) * v.d)}));
      }
    }
  }
  return {torch::cat(blocks, 0), geometry};
}

RecomposedViews recompose_views(const torch::Tensor& stacked, const ViewGeometry& geometry) {
  require_5d(stacked, "recompose_views");
  geometry.validate_factors();
  const int64_t views = geometry.total_views();
  if (stacked.size(0) % views != 0) {
    throw ShapeError("recompose_views: leading extent " + std::to_string(stacked.size(0)) +
                     " is not a multiple of " + std::to_string(views) + " views");
  }
  const auto v = geometry.view_extent();
  if (spatial_extent(stacked) != v || v.h * geometry.n1 != geometry.original.h ||
      v.w * geometry.n2 != geometry.original.w || v.d * geometry.n3 != geometry.original.d) {
    throw ShapeError("recompose_views: view extents do not match the recorded geometry");
  }
  const int64_t batch = stacked.size(0) / views;
  auto chunks = stacked.split(batch, 0);

  // Rebuild along D, then W, then H so every paste lands at its crop offset.
  std::vector<torch::Tensor> rows_h;
  int64_t index = 1;
  for (int64_t i = 0; i < geometry.n1; ++i) {
    std::vector<torch::Tensor> rows_w;
    for (int64_t j = 0; j < geometry.n2; ++j) {
      std::vector<torch::Tensor> rows_d;
      for (int64_t k = 0; k < geometry.n3; ++k) rows_d.push_back(chunks[index++]);
      rows_w.push_back(torch::cat(rows_d, 4));
    }
    rows_h.push_back(torch::cat(rows_w, 3));
  }
  return {resize_trilinear(chunks[0], geometry.original), torch::cat(rows_h, 2)};
}

Extent3 padded_extent(Extent3 extent, Extent3 size) {
  return {std::max(extent.h, size.h), std::max(extent.w, size.w), std::max(extent.d, size.d)};
}

namespace {

torch::Tensor pad_to(const torch::Tensor& input, Extent3 size) {
  const auto e = spatial_extent(input);
  const auto target = padded_extent(e, size);
  if (target == e) return input;
  auto low = [](int64_t have, int64_t want) { return (want - have) / 2; };
  auto high = [](int64_t have, int64_t want) { return (want - have) - (want - have) / 2; };
  // F::pad takes (last axis low, last axis high, ...) pairs.
  return F::pad(input, F::PadFuncOptions({low(e.d, target.d), high(e.d, target.d),
                                          low(e.w, target.w), high(e.w, target.w),
                                          low(e.h, target.h), high(e.h, target.h)}));
}

}  // namespace

torch::Tensor crop_at(const torch::Tensor& input, Extent3 origin, Extent3 size) {
  if (input.dim() < 3) throw ShapeError("crop_at: needs three spatial axes");
  if (size.h < 1 || size.w < 1 || size.d < 1) throw ShapeError("crop_at: empty crop size");
  auto padded = pad_to(input, size);
  const auto e = spatial_extent(padded);
  if (origin.h < 0 || origin.w < 0 || origin.d < 0 || origin.h + size.h > e.h ||
      origin.w + size.w > e.w || origin.d + size.d > e.d) {
    throw ShapeError("crop_at: crop window leaves the padded grid");
  }
  return padded
      .index({"...", Slice(origin.h, origin.h + size.h), Slice(origin.w, origin.w + size.w),
              Slice(origin.d, origin.d + size.d)})
      .contiguous();
}

torch::Tensor center_crop(const torch::Tensor& input, Extent3 size) {
  if (input.dim() < 3) throw ShapeError("center_crop: needs three spatial axes");
  const auto e = padded_extent(spatial_extent(input), size);
  return crop_at(input, {(e.h - size.h) / 2, (e.w - size.w) / 2, (e.d - size.d) / 2}, size);
}

}  // namespace dico
