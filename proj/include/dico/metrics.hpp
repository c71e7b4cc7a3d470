#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dico/volume.hpp"

namespace dico {

/// Dense binary 3D grid, row-major over (h, w, d) with d fastest.
struct BinaryGrid {
  Extent3 extent{};
  std::vector<uint8_t> voxels;

  BinaryGrid() = default;
  explicit BinaryGrid(Extent3 e) : extent(e), voxels(static_cast<size_t>(e.voxels()), 0) {}

  size_t index(int64_t h, int64_t w, int64_t d) const {
    return static_cast<size_t>((h * extent.w + w) * extent.d + d);
  }
  uint8_t at(int64_t h, int64_t w, int64_t d) const { return voxels[index(h, w, d)]; }
  void set(int64_t h, int64_t w, int64_t d, uint8_t v = 1) { voxels[index(h, w, d)] = v; }
  int64_t count() const;
  bool empty() const { return count() == 0; }
};

/// Grid of batch item `b` of a (B, 1, H, W, D) mask.
BinaryGrid to_grid(const LabelMask& mask, int64_t b = 0);
BinaryGrid to_grid(const torch::Tensor& mask3d);
LabelMask to_mask(const BinaryGrid& grid);

enum class Connectivity { six = 6, twenty_six = 26 };

struct Voxel {
  int64_t h, w, d;
  bool operator==(const Voxel&) const = default;
  auto operator<=>(const Voxel&) const = default;
};

struct MetricOptions {
  double tau = 1.0;  ///< NSD tolerance, in voxels (or mm with use_spacing)
  Connectivity connectivity = Connectivity::six;
  bool use_spacing = false;
  Spacing spacing{};
};

/// 2|P & G| / (|P| + |G|); 1.0 when both are empty.
double dsc(const BinaryGrid& pred, const BinaryGrid& gt);

/// Foreground voxels with at least one background or out-of-grid neighbour.
std::vector<Voxel> surface_voxels(const BinaryGrid& mask,
                                  Connectivity connectivity = Connectivity::six);

/// Euclidean distance from every voxel to the nearest voxel in `sites`
/// (exact separable distance transform). Infinity when `sites` is empty.
std::vector<double> distance_to_sites(Extent3 extent, const std::vector<Voxel>& sites,
                                      const Spacing& spacing = {});

/// Symmetric average surface distance; nullopt when either mask is empty.
std::optional<double> asd(const BinaryGrid& pred, const BinaryGrid& gt,
                          const MetricOptions& options = {});

/// Pooled normalized surface Dice: fraction of both surfaces lying within
/// tau of the opposing surface; nullopt when either mask is empty.
std::optional<double> nsd(const BinaryGrid& pred, const BinaryGrid& gt,
                          const MetricOptions& options = {});

struct CaseMetrics {
  std::string case_id;
  double dsc = 0.0;
  std::optional<double> nsd;
  std::optional<double> asd;
};

struct MetricReport {
  std::vector<CaseMetrics> cases;
  double mean_dsc = 0.0;
  double mean_nsd = 0.0;
  double mean_asd = 0.0;
  /// Cases whose surface metrics were undefined (an empty mask).
  int64_t missing_surface = 0;
};

CaseMetrics evaluate_case(const std::string& case_id, const BinaryGrid& pred,
                          const BinaryGrid& gt, const MetricOptions& options = {});

/// Means over cases; undefined surface metrics are excluded and counted.
MetricReport summarize(std::vector<CaseMetrics> cases);

/// CSV with header `case_id,dsc,nsd,asd`, one row per case and a final
/// `mean` row. Missing values are written as `nan`.
void write_metrics_csv(std::ostream& out, const MetricReport& report);

}  // namespace dico
