#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace dico {

enum class NiftiDataType : int16_t {
  uint8 = 2,
  int16 = 4,
  int32 = 8,
  float32 = 16,
  float64 = 64,
  int8 = 256,
  uint16 = 512,
  uint32 = 768,
};

/// A single-channel NIfTI-1 volume (2D images have nz == 1). Voxel data is
/// stored x fastest, as on disk, already scaled by scl_slope/scl_inter.
struct NiftiImage {
  std::array<int64_t, 3> dims{1, 1, 1};
  std::array<double, 3> pixdim{1.0, 1.0, 1.0};
  /// Voxel-to-world rows (srow_x, srow_y, srow_z).
  std::array<std::array<double, 4>, 3> affine{{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}}};
  NiftiDataType datatype = NiftiDataType::float32;
  std::vector<float> data;

  size_t voxel_count() const { return static_cast<size_t>(dims[0] * dims[1] * dims[2]); }
};

/// Reads .nii or .nii.gz. Throws IngestError with the path on any failure.
NiftiImage read_nifti(const std::filesystem::path& path);

/// Writes .nii or .nii.gz (chosen by extension) using `image.datatype`.
void write_nifti(const std::filesystem::path& path, const NiftiImage& image);

}  // namespace dico
