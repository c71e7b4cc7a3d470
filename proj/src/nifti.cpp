#include "dico/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "dico/errors.hpp"

namespace dico {

namespace {

constexpr int32_t kHeaderSize = 348;
constexpr int64_t kVoxOffset = 352;

// Byte offsets of the NIfTI-1 header fields used here.
namespace off {
constexpr size_t sizeof_hdr = 0;
constexpr size_t dim = 40;
constexpr size_t datatype = 70;
constexpr size_t bitpix = 72;
constexpr size_t pixdim = 76;
constexpr size_t vox_offset = 108;
constexpr size_t scl_slope = 112;
constexpr size_t scl_inter = 116;
constexpr size_t xyzt_units = 123;
constexpr size_t qform_code = 252;
constexpr size_t sform_code = 254;
constexpr size_t quatern_b = 256;
constexpr size_t srow_x = 280;
constexpr size_t magic = 344;
}  // namespace off

bool is_gz(const std::filesystem::path& p) { return p.extension() == ".gz"; }

struct GzFile {
  gzFile handle = nullptr;
  GzFile(const std::filesystem::path& p, const char* mode) : handle(gzopen(p.c_str(), mode)) {}
  ~GzFile() {
    if (handle) gzclose(handle);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;
};

template <typename T>
T read_field(const std::vector<char>& h, size_t offset, bool swap) {
  T v;
  std::memcpy(&v, h.data() + offset, sizeof(T));
  if (swap && sizeof(T) > 1) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <typename T>
void write_field(std::vector<char>& h, size_t offset, T v) {
  std::memcpy(h.data() + offset, &v, sizeof(T));
}

int bytes_per_voxel(NiftiDataType t) {
  switch (t) {
    case NiftiDataType::uint8:
    case NiftiDataType::int8: return 1;
    case NiftiDataType::int16:
    case NiftiDataType::uint16: return 2;
    case NiftiDataType::int32:
    case NiftiDataType::uint32:
    case NiftiDataType::float32: return 4;
    case NiftiDataType::float64: return 8;
  }
  return 0;
}

template <typename T>
void decode(const std::vector<char>& raw, std::vector<float>& out, bool swap) {
  const size_t n = out.size();
  for (size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
    if (swap && sizeof(T) > 1) {
      auto* b = reinterpret_cast<unsigned char*>(&v);
      std::reverse(b, b + sizeof(T));
    }
    out[i] = static_cast<float>(v);
  }
}

template <typename T>
void encode(const std::vector<float>& in, std::vector<char>& raw) {
  raw.resize(in.size() * sizeof(T));
  for (size_t i = 0; i < in.size(); ++i) {
    T v;
    if constexpr (std::is_integral_v<T>) {
      v = static_cast<T>(std::lround(in[i]));
    } else {
      v = static_cast<T>(in[i]);
    }
    std::memcpy(raw.data() + i * sizeof(T), &v, sizeof(T));
  }
}

std::array<std::array<double, 4>, 3> quaternion_affine(const std::vector<char>& h, bool swap,
                                                       const std::array<double, 3>& pixdim,
                                                       double qfac_raw) {
  const double b = read_field<float>(h, off::quatern_b, swap);
  const double c = read_field<float>(h, off::quatern_b + 4, swap);
  const double d = read_field<float>(h, off::quatern_b + 8, swap);
  const double qx = read_field<float>(h, off::quatern_b + 12, swap);
  const double qy = read_field<float>(h, off::quatern_b + 16, swap);
  const double qz = read_field<float>(h, off::quatern_b + 20, swap);
  double a = 1.0 - (b * b + c * c + d * d);
  a = a < 1e-7 ? 0.0 : std::sqrt(a);
  const double qfac = qfac_raw < 0 ? -1.0 : 1.0;
  const double r[3][3] = {
      {a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
      {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
      {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}};
  const double scale[3] = {pixdim[0], pixdim[1], pixdim[2] * qfac};
  const double origin[3] = {qx, qy, qz};
  std::array<std::array<double, 4>, 3> m{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) m[i][j] = r[i][j] * scale[j];
    m[i][3] = origin[i];
  }
  return m;
}

}  // namespace

NiftiImage read_nifti(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IngestError("missing file: " + path.string());
  GzFile f(path, "rb");
  if (!f.handle) throw IngestError("cannot open " + path.string());

  std::vector<char> h(kHeaderSize);
  if (gzread(f.handle, h.data(), kHeaderSize) != kHeaderSize) {
    throw IngestError("truncated NIfTI header: " + path.string());
  }
  bool swap = false;
  if (read_field<int32_t>(h, off::sizeof_hdr, false) != kHeaderSize) {
    swap = true;
    if (read_field<int32_t>(h, off::sizeof_hdr, true) != kHeaderSize) {
      throw IngestError("not a NIfTI-1 file: " + path.string());
    }
  }
  const std::string magic(h.data() + off::magic, 3);
  if (magic != "n+1") throw IngestError("unsupported NIfTI variant (need single-file n+1): " + path.string());

  NiftiImage img;
  const auto ndim = read_field<int16_t>(h, off::dim, swap);
  if (ndim < 1 || ndim > 7) throw IngestError("invalid dim[0] in " + path.string());
  for (int i = 0; i < 3; ++i) {
    img.dims[i] = i < ndim ? read_field<int16_t>(h, off::dim + 2 * (i + 1), swap) : 1;
    if (img.dims[i] < 1) throw IngestError("non-positive extent in " + path.string());
  }
  for (int i = 4; i <= ndim; ++i) {
    if (read_field<int16_t>(h, off::dim + 2 * i, swap) > 1) {
      throw IngestError("multi-volume NIfTI not supported: " + path.string());
    }
  }
  for (int i = 0; i < 3; ++i) {
    const double p = read_field<float>(h, off::pixdim + 4 * (i + 1), swap);
    img.pixdim[i] = p > 0 ? p : 1.0;
  }
  img.datatype = static_cast<NiftiDataType>(read_field<int16_t>(h, off::datatype, swap));
  const int bpv = bytes_per_voxel(img.datatype);
  if (bpv == 0) {
    throw IngestError("unsupported NIfTI datatype " +
                      std::to_string(static_cast<int>(img.datatype)) + " in " + path.string());
  }

  if (read_field<int16_t>(h, off::sform_code, swap) > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c)
        img.affine[r][c] = read_field<float>(h, off::srow_x + 16 * r + 4 * c, swap);
  } else if (read_field<int16_t>(h, off::qform_code, swap) > 0) {
    img.affine = quaternion_affine(h, swap, img.pixdim, read_field<float>(h, off::pixdim, swap));
  } else {
    img.affine = {{{img.pixdim[0], 0, 0, 0}, {0, img.pixdim[1], 0, 0}, {0, 0, img.pixdim[2], 0}}};
  }

  const auto vox_offset = static_cast<int64_t>(read_field<float>(h, off::vox_offset, swap));
  if (vox_offset < kHeaderSize) throw IngestError("invalid vox_offset in " + path.string());
  std::vector<char> skip(static_cast<size_t>(vox_offset - kHeaderSize));
  if (!skip.empty() && gzread(f.handle, skip.data(), unsigned(skip.size())) != int(skip.size())) {
    throw IngestError("truncated NIfTI extension block: " + path.string());
  }

  img.data.resize(img.voxel_count());
  std::vector<char> raw(img.data.size() * size_t(bpv));
  size_t got = 0;
  while (got < raw.size()) {
    const auto chunk = static_cast<unsigned>(std::min<size_t>(raw.size() - got, 1u << 30));
    const int n = gzread(f.handle, raw.data() + got, chunk);
    if (n <= 0) throw IngestError("truncated voxel data in " + path.string());
    got += size_t(n);
  }
  switch (img.datatype) {
    case NiftiDataType::uint8: decode<uint8_t>(raw, img.data, swap); break;
    case NiftiDataType::int8: decode<int8_t>(raw, img.data, swap); break;
    case NiftiDataType::int16: decode<int16_t>(raw, img.data, swap); break;
    case NiftiDataType::uint16: decode<uint16_t>(raw, img.data, swap); break;
    case NiftiDataType::int32: decode<int32_t>(raw, img.data, swap); break;
    case NiftiDataType::uint32: decode<uint32_t>(raw, img.data, swap); break;
    case NiftiDataType::float32: decode<float>(raw, img.data, swap); break;
    case NiftiDataType::float64: decode<double>(raw, img.data, swap); break;
  }

  const double slope = read_field<float>(h, off::scl_slope, swap);
  const double inter = read_field<float>(h, off::scl_inter, swap);
  if (slope != 0.0 && std::isfinite(slope) && (slope != 1.0 || inter != 0.0)) {
    for (auto& v : img.data) v = static_cast<float>(v * slope + inter);
  }
  return img;
}

void write_nifti(const std::filesystem::path& path, const NiftiImage& image) {
  if (image.data.size() != image.voxel_count()) {
    throw IngestError("write_nifti: voxel count does not match dims for " + path.string());
  }
  const int bpv = bytes_per_voxel(image.datatype);
  if (bpv == 0) throw IngestError("write_nifti: unsupported datatype");

  std::vector<char> h(kVoxOffset, 0);
  write_field<int32_t>(h, off::sizeof_hdr, kHeaderSize);
  const int16_t ndim = image.dims[2] > 1 ? 3 : 2;
  write_field<int16_t>(h, off::dim, ndim);
  for (int i = 0; i < 3; ++i) write_field<int16_t>(h, off::dim + 2 * (i + 1), int16_t(image.dims[i]));
  for (int i = 4; i < 8; ++i) write_field<int16_t>(h, off::dim + 2 * i, 1);
  write_field<int16_t>(h, off::datatype, static_cast<int16_t>(image.datatype));
  write_field<int16_t>(h, off::bitpix, int16_t(8 * bpv));
  write_field<float>(h, off::pixdim, 1.0f);
  for (int i = 0; i < 3; ++i) write_field<float>(h, off::pixdim + 4 * (i + 1), float(image.pixdim[i]));
  write_field<float>(h, off::vox_offset, float(kVoxOffset));
  write_field<float>(h, off::scl_slope, 1.0f);
  write_field<float>(h, off::scl_inter, 0.0f);
  h[off::xyzt_units] = 2;  // millimetres
  write_field<int16_t>(h, off::sform_code, 1);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      write_field<float>(h, off::srow_x + 16 * r + 4 * c, float(image.affine[r][c]));
  std::memcpy(h.data() + off::magic, "n+1\0", 4);

  std::vector<char> raw;
  switch (image.datatype) {
    case NiftiDataType::uint8: encode<uint8_t>(image.data, raw); break;
    case NiftiDataType::int8: encode<int8_t>(image.data, raw); break;
    case NiftiDataType::int16: encode<int16_t>(image.data, raw); break;
    case NiftiDataType::uint16: encode<uint16_t>(image.data, raw); break;
    case NiftiDataType::int32: encode<int32_t>(image.data, raw); break;
    case NiftiDataType::uint32: encode<uint32_t>(image.data, raw); break;
    case NiftiDataType::float32: encode<float>(image.data, raw); break;
    case NiftiDataType::float64: encode<double>(image.data, raw); break;
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  GzFile f(path, is_gz(path) ? "wb6" : "wbT");
  if (!f.handle) throw IngestError("cannot write " + path.string());
  if (gzwrite(f.handle, h.data(), unsigned(h.size())) != int(h.size())) {
    throw IngestError("failed writing header to " + path.string());
  }
  size_t put = 0;
  while (put < raw.size()) {
    const auto chunk = static_cast<unsigned>(std::min<size_t>(raw.size() - put, 1u << 30));
    if (gzwrite(f.handle, raw.data() + put, chunk) != int(chunk)) {
      throw IngestError("failed writing voxels to " + path.string());
    }
    put += chunk;
  }
}

}  // namespace dico
