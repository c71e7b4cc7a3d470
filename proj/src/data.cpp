#include "dico/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dico/volume_ops.hpp"

namespace dico {

namespace fs = std::filesystem;

std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::labeled_train: return "labeled-train";
    case SplitTag::unlabeled_train: return "unlabeled-train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
  }
  return "train";
}

SplitTag parse_split_tag(const std::string& s) {
  if (s == "train") return SplitTag::train;
  if (s == "labeled-train") return SplitTag::labeled_train;
  if (s == "unlabeled-train") return SplitTag::unlabeled_train;
  if (s == "val") return SplitTag::val;
  if (s == "test") return SplitTag::test;
  throw IngestError("unknown split tag '" + s + "'");
}

void CaseRecord::validate() const {
  if (id.empty()) throw IngestError("case record without id");
  const bool needs_label =
      split == SplitTag::labeled_train || split == SplitTag::val || split == SplitTag::test;
  if (needs_label && !label) {
    throw IngestError("case '" + id + "' in split " + to_string(split) + " has no label path");
  }
}

std::vector<CaseRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open manifest: " + path.string());
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  std::vector<CaseRecord> cases;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<std::string> cols;
    for (std::string c; fields >> c;) cols.push_back(c);
    if (cols.empty()) continue;
    if (cols.size() != 4) {
      throw IngestError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 4 columns (id image label|- split)");
    }
    CaseRecord rec;
    rec.id = cols[0];
    rec.image = resolve(cols[1]);
    if (cols[2] != "-") rec.label = resolve(cols[2]);
    try {
      rec.split = parse_split_tag(cols[3]);
      rec.validate();
    } catch (const IngestError& e) {
      throw IngestError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    cases.push_back(std::move(rec));
  }
  return cases;
}

void write_manifest(const fs::path& path, const std::vector<CaseRecord>& cases) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IngestError("cannot write manifest: " + path.string());
  const auto base = fs::absolute(path).parent_path().lexically_normal();
  auto rel = [&](const fs::path& p) {
    const auto r = fs::absolute(p).lexically_normal().lexically_relative(base);
    return (r.empty() ? p : r).string();
  };
  out << "# id image label split\n";
  for (const auto& c : cases) {
    out << c.id << ' ' << rel(c.image) << ' ' << (c.label ? rel(*c.label) : std::string("-"))
        << ' ' << to_string(c.split) << '\n';
  }
}

torch::Tensor normalize_intensity(const torch::Tensor& t, const NormalizationConfig& config) {
  auto x = t.to(torch::kFloat);
  if (config.mode == NormalizationMode::window) {
    if (!(config.window_max > config.window_min)) throw ConfigError("window_max must exceed window_min");
    return ((x.clamp(config.window_min, config.window_max) - config.window_min) /
            (config.window_max - config.window_min));
  }
  const auto x64 = x.to(torch::kDouble);
  const double mean = x64.mean().item<double>();
  const double sd = x64.std(/*unbiased=*/false).item<double>();
  if (!(sd > 0.0)) return torch::zeros_like(x);
  return ((x64 - mean) / sd).clamp(-config.clip_sigma, config.clip_sigma).to(torch::kFloat);
}

std::array<int64_t, 3> orientation_order(const std::array<std::array<double, 4>, 3>& affine) {
  int64_t z_axis = 2;
  double best = -1.0;
  for (int64_t a = 0; a < 3; ++a) {
    const double m = std::abs(affine[2][a]);
    if (m > best + 1e-12) {
      best = m;
      z_axis = a;
    }
  }
  std::array<int64_t, 3> order{};
  int64_t k = 0;
  for (int64_t a = 0; a < 3; ++a)
    if (a != z_axis) order[k++] = a;
  order[2] = z_axis;
  return order;
}

namespace {

// NIfTI data is x fastest; the tensor is (x, y, z) with z fastest.
torch::Tensor to_tensor_xyz(const NiftiImage& img) {
  auto t = torch::from_blob(const_cast<float*>(img.data.data()),
                            {img.dims[2], img.dims[1], img.dims[0]}, torch::kFloat);
  return t.permute({2, 1, 0}).contiguous();
}

}  // namespace

torch::Tensor oriented_voxels(const NiftiImage& img) {
  const auto order = orientation_order(img.affine);
  return to_tensor_xyz(img).permute({order[0], order[1], order[2]}).contiguous();
}

LoadedCase load_case(const CaseRecord& record, const NormalizationConfig& config) {
  auto img = read_nifti(record.image);
  LoadedCase out;
  out.id = record.id;
  out.geometry.dims = img.dims;
  out.geometry.pixdim = img.pixdim;
  out.geometry.affine = img.affine;
  out.geometry.axis_order = orientation_order(img.affine);
  const auto& order = out.geometry.axis_order;

  auto raw = to_tensor_xyz(img).permute({order[0], order[1], order[2]}).contiguous();
  if (!torch::isfinite(raw).all().item<bool>()) {
    throw IngestError("non-finite intensities in " + record.image.string());
  }
  Spacing spacing{img.pixdim[order[0]], img.pixdim[order[1]], img.pixdim[order[2]]};
  out.image = Volume(normalize_intensity(raw, config).unsqueeze(0).unsqueeze(0), spacing);

  if (record.label) {
    auto lab = read_nifti(*record.label);
    if (lab.dims != img.dims) {
      throw IngestError("label grid of case '" + record.id + "' does not match its image (" +
                        record.label->string() + ")");
    }
    for (float v : lab.data) {
      if (v != 0.0f && v != 1.0f) {
        std::ostringstream msg;
        msg << "label of case '" << record.id << "' contains non-binary value " << v << " ("
            << record.label->string() << ")";
        throw IngestError(msg.str());
      }
    }
    auto t = to_tensor_xyz(lab).permute({order[0], order[1], order[2]}).contiguous();
    out.label = LabelMask(t.unsqueeze(0).unsqueeze(0));
  }
  return out;
}

NiftiImage to_nifti(const torch::Tensor& volume, const SourceGeometry& geometry,
                    NiftiDataType type) {
  auto t = volume.reshape({volume.size(-3), volume.size(-2), volume.size(-1)}).to(torch::kFloat);
  // Undo the axis permutation applied on load.
  std::array<int64_t, 3> inverse{};
  for (int64_t i = 0; i < 3; ++i) inverse[geometry.axis_order[i]] = i;
  auto xyz = t.permute({inverse[0], inverse[1], inverse[2]});
  NiftiImage img;
  img.dims = {xyz.size(0), xyz.size(1), xyz.size(2)};
  if (img.dims != geometry.dims) throw ShapeError("to_nifti: volume does not match the source grid");
  img.pixdim = geometry.pixdim;
  img.affine = geometry.affine;
  img.datatype = type;
  auto zyx = xyz.permute({2, 1, 0}).contiguous();
  img.data.assign(zyx.data_ptr<float>(), zyx.data_ptr<float>() + zyx.numel());
  return img;
}

std::vector<CaseRecord> make_split(const std::vector<CaseRecord>& cases, double labeled_fraction,
                                   uint64_t seed) {
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
    throw ConfigError("labeled_fraction must be in (0, 1]");
  }
  auto is_training = [](const CaseRecord& c) {
    return c.split == SplitTag::train || c.split == SplitTag::labeled_train ||
           c.split == SplitTag::unlabeled_train;
  };
  std::vector<size_t> training, capable;
  for (size_t i = 0; i < cases.size(); ++i) {
    if (!is_training(cases[i])) continue;
    training.push_back(i);
    if (cases[i].label) capable.push_back(i);
  }
  const auto n = static_cast<int64_t>(training.size());
  // Round half up, tolerant of representation error in the fraction.
  const auto labeled = static_cast<int64_t>(std::floor(double(n) * labeled_fraction + 0.5 + 1e-9));
  if (labeled < 1) {
    throw ConfigError("labeled fraction " + std::to_string(labeled_fraction) + " of " +
                      std::to_string(n) + " training cases rounds to zero labeled cases");
  }
  if (labeled > static_cast<int64_t>(capable.size())) {
    throw ConfigError("split needs " + std::to_string(labeled) + " labeled cases but only " +
                      std::to_string(capable.size()) + " training cases have labels");
  }
  std::mt19937_64 rng(seed);
  for (size_t i = capable.size(); i > 1; --i) {
    std::uniform_int_distribution<size_t> pick(0, i - 1);
    std::swap(capable[i - 1], capable[pick(rng)]);
  }
  std::vector<CaseRecord> out = cases;
  for (auto i : training) out[i].split = SplitTag::unlabeled_train;
  for (int64_t k = 0; k < labeled; ++k) out[capable[size_t(k)]].split = SplitTag::labeled_train;
  return out;
}

std::string to_string(CropMode mode) { return mode == CropMode::center ? "center" : "random"; }

CropMode parse_crop_mode(const std::string& s) {
  if (s == "center") return CropMode::center;
  if (s == "random") return CropMode::random;
  throw ConfigError("unknown crop mode '" + s + "' (expected center or random)");
}

CropPair sample_crop(const torch::Tensor& image, const torch::Tensor& label, Extent3 size,
                     CropMode mode, std::mt19937_64& rng) {
  const auto padded = padded_extent(spatial_extent(image), size);
  Extent3 origin{(padded.h - size.h) / 2, (padded.w - size.w) / 2, (padded.d - size.d) / 2};
  if (mode == CropMode::random) {
    auto pick = [&](int64_t span) {
      return std::uniform_int_distribution<int64_t>(0, span)(rng);
    };
    origin = {pick(padded.h - size.h), pick(padded.w - size.w), pick(padded.d - size.d)};
  }
  CropPair out;
  out.image = crop_at(image, origin, size);
  if (label.defined()) out.label = crop_at(label, origin, size);
  return out;
}

// ------------------------------------------------------------------ phantom

void PhantomSpec::validate() const {
  if (grid < 16) throw ConfigError("phantom grid must be >= 16");
  if (tubes < 1) throw ConfigError("phantom needs at least one tube");
  if (radius_min < 1.0 || radius_max < radius_min) {
    throw ConfigError("phantom radii must satisfy 1 <= radius_min <= radius_max");
  }
  if (control_points < 2) throw ConfigError("phantom needs >= 2 control points");
  if (!(segment_fraction > 0)) throw ConfigError("phantom segment_fraction must be positive");
  if (noise_sigma < 0 || curvature < 0) throw ConfigError("phantom noise/curvature must be >= 0");
}

namespace {

struct Vec3 {
  double x = 0, y = 0, z = 0;
  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double norm() const { return std::sqrt(x * x + y * y + z * z); }
};

Vec3 catmull_rom(const Vec3& p0, const Vec3& p1, const Vec3& p2, const Vec3& p3, double t) {
  const double t2 = t * t, t3 = t2 * t;
  return (p1 * 2.0 + (p2 - p0) * t + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * t2 +
          (p1 * 3.0 - p0 - p2 * 3.0 + p3) * t3) *
         0.5;
}

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  while (true) {
    Vec3 v{n(rng), n(rng), n(rng)};
    const double l = v.norm();
    if (l > 1e-8) return v * (1.0 / l);
  }
}

void stamp_ball(BinaryGrid& g, const Vec3& c, double r) {
  const auto e = g.extent;
  auto clampi = [](int64_t v, int64_t hi) { return std::clamp<int64_t>(v, 0, hi - 1); };
  g.set(clampi(std::llround(c.x), e.h), clampi(std::llround(c.y), e.w), clampi(std::llround(c.z), e.d));
  const int64_t h0 = clampi(int64_t(std::floor(c.x - r)), e.h), h1 = clampi(int64_t(std::ceil(c.x + r)), e.h);
  const int64_t w0 = clampi(int64_t(std::floor(c.y - r)), e.w), w1 = clampi(int64_t(std::ceil(c.y + r)), e.w);
  const int64_t d0 = clampi(int64_t(std::floor(c.z - r)), e.d), d1 = clampi(int64_t(std::ceil(c.z + r)), e.d);
  const double r2 = r * r;
  for (int64_t h = h0; h <= h1; ++h)
    for (int64_t w = w0; w <= w1; ++w)
      for (int64_t d = d0; d <= d1; ++d) {
        const double dx = double(h) - c.x, dy = double(w) - c.y, dz = double(d) - c.z;
        if (dx * dx + dy * dy + dz * dz <= r2) g.set(h, w, d);
      }
}

BinaryGrid render_tube(const PhantomSpec& spec, std::mt19937_64& rng) {
  const double g = double(spec.grid);
  const double margin = std::min(spec.radius_max + 1.0, g / 4.0);
  const double lo = margin, hi = g - 1.0 - margin;
  std::uniform_real_distribution<double> pos(lo, hi);
  std::uniform_real_distribution<double> rad(spec.radius_min, spec.radius_max);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const double step = spec.segment_fraction * g;

  std::vector<Vec3> points{{pos(rng), pos(rng), pos(rng)}};
  std::vector<double> radii{rad(rng)};
  Vec3 dir = random_unit(rng);
  for (int64_t i = 1; i < spec.control_points; ++i) {
    Vec3 d = dir + Vec3{jitter(rng), jitter(rng), jitter(rng)} * spec.curvature;
    d = d * (1.0 / std::max(d.norm(), 1e-8));
    Vec3 next = points.back() + d * step;
    // Reflect off the margin box so the curve stays inside the grid.
    auto reflect = [&](double& p, double& v) {
      if (p < lo) { p = 2 * lo - p; v = -v; }
      if (p > hi) { p = 2 * hi - p; v = -v; }
      p = std::clamp(p, lo, hi);
    };
    reflect(next.x, d.x);
    reflect(next.y, d.y);
    reflect(next.z, d.z);
    dir = d;
    points.push_back(next);
    radii.push_back(rad(rng));
  }

  BinaryGrid tube({spec.grid, spec.grid, spec.grid});
  const auto n = points.size();
  auto at = [&](int64_t i) { return points[size_t(std::clamp<int64_t>(i, 0, int64_t(n) - 1))]; };
  for (size_t s = 0; s + 1 < n; ++s) {
    const auto p0 = at(int64_t(s) - 1), p1 = at(int64_t(s)), p2 = at(int64_t(s) + 1), p3 = at(int64_t(s) + 2);
    const auto samples = std::max<int64_t>(2, int64_t(std::ceil((p2 - p1).norm() / 0.25)) * 2);
    for (int64_t k = 0; k <= samples; ++k) {
      const double t = double(k) / double(samples);
      Vec3 c = catmull_rom(p0, p1, p2, p3, t);
      c = {std::clamp(c.x, 0.0, g - 1), std::clamp(c.y, 0.0, g - 1), std::clamp(c.z, 0.0, g - 1)};
      stamp_ball(tube, c, radii[s] * (1.0 - t) + radii[s + 1] * t);
    }
  }
  return tube;
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  Phantom out;
  BinaryGrid mask({spec.grid, spec.grid, spec.grid});
  for (int64_t t = 0; t < spec.tubes; ++t) {
    auto tube = render_tube(spec, rng);
    for (size_t i = 0; i < mask.voxels.size(); ++i) mask.voxels[i] |= tube.voxels[i];
    out.tubes.push_back(std::move(tube));
  }
  const auto g = spec.grid;
  auto image = torch::empty({1, 1, g, g, g}, torch::kFloat);
  auto* px = image.data_ptr<float>();
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0 ? spec.noise_sigma : 1.0);
  for (size_t i = 0; i < mask.voxels.size(); ++i) {
    double v = spec.background + spec.contrast * double(mask.voxels[i]);
    if (spec.noise_sigma > 0) v += noise(rng);
    px[i] = static_cast<float>(v);
  }
  out.image = Volume(image);
  out.mask = to_mask(mask);
  return out;
}

// ------------------------------------------------------------------ stream

TrainingStream::TrainingStream(std::vector<LoadedCase> labeled, std::vector<LoadedCase> unlabeled,
                               Extent3 crop, CropMode mode)
    : labeled_cases_(std::move(labeled)),
      unlabeled_cases_(std::move(unlabeled)),
      crop_(crop),
      mode_(mode) {
  if (labeled_cases_.empty()) throw ConfigError("training stream needs labeled cases");
  for (const auto& c : labeled_cases_) {
    if (!c.label) throw ConfigError("labeled case '" + c.id + "' has no label");
  }
  if (unlabeled_cases_.empty()) throw ConfigError("training stream needs unlabeled cases");
}

TrainingStream::TrainingStream(std::vector<CaseRecord> labeled, std::vector<CaseRecord> unlabeled,
                               Extent3 crop, CropMode mode, NormalizationConfig normalization)
    : labeled_records_(std::move(labeled)),
      unlabeled_records_(std::move(unlabeled)),
      lazy_(true),
      crop_(crop),
      mode_(mode),
      normalization_(normalization) {
  if (labeled_records_.empty()) throw ConfigError("training stream needs labeled cases");
  if (unlabeled_records_.empty()) throw ConfigError("training stream needs unlabeled cases");
}

size_t TrainingStream::labeled_size() const {
  return lazy_ ? labeled_records_.size() : labeled_cases_.size();
}

size_t TrainingStream::unlabeled_size() const {
  return lazy_ ? unlabeled_records_.size() : unlabeled_cases_.size();
}

LoadedCase TrainingStream::fetch(bool labeled, size_t index) const {
  if (!lazy_) return labeled ? labeled_cases_[index] : unlabeled_cases_[index];
  auto rec = labeled ? labeled_records_[index] : unlabeled_records_[index];
  if (!labeled) rec.label.reset();
  return load_case(rec, normalization_);
}

CropPair TrainingStream::next_labeled(int64_t count, std::mt19937_64& rng) {
  std::vector<torch::Tensor> images, labels;
  for (int64_t i = 0; i < count; ++i) {
    const auto idx = std::uniform_int_distribution<size_t>(0, labeled_size() - 1)(rng);
    const auto c = fetch(true, idx);
    auto pair = sample_crop(c.image.data, c.label->data, crop_, mode_, rng);
    images.push_back(pair.image);
    labels.push_back(pair.label);
  }
  return {torch::cat(images, 0), torch::cat(labels, 0)};
}

torch::Tensor TrainingStream::next_unlabeled(int64_t count, std::mt19937_64& rng) {
  std::vector<torch::Tensor> images;
  for (int64_t i = 0; i < count; ++i) {
    const auto idx = std::uniform_int_distribution<size_t>(0, unlabeled_size() - 1)(rng);
    const auto c = fetch(false, idx);
    images.push_back(sample_crop(c.image.data, torch::Tensor(), crop_, mode_, rng).image);
  }
  return torch::cat(images, 0);
}

}  // namespace dico
