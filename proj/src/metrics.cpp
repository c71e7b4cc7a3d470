#include "dico/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace dico {

int64_t BinaryGrid::count() const {
  return std::count_if(voxels.begin(), voxels.end(), [](uint8_t v) { return v != 0; });
}

BinaryGrid to_grid(const torch::Tensor& mask3d) {
  if (mask3d.dim() != 3) throw ShapeError("to_grid: expected an (H, W, D) tensor");
  auto t = (mask3d != 0).to(torch::kUInt8).contiguous();
  BinaryGrid g({t.size(0), t.size(1), t.size(2)});
  std::copy_n(t.data_ptr<uint8_t>(), g.voxels.size(), g.voxels.begin());
  return g;
}

BinaryGrid to_grid(const LabelMask& mask, int64_t b) { return to_grid(mask.data[b][0]); }

LabelMask to_mask(const BinaryGrid& grid) {
  auto t = torch::from_blob(const_cast<uint8_t*>(grid.voxels.data()),
                            {1, 1, grid.extent.h, grid.extent.w, grid.extent.d}, torch::kUInt8);
  return LabelMask(t.clone());
}

namespace {

void require_same_extent(const BinaryGrid& a, const BinaryGrid& b, const char* who) {
  if (a.extent != b.extent) throw ShapeError(std::string(who) + ": grid mismatch");
}

// One-dimensional squared distance transform of a sampled function
// (Felzenszwalb & Huttenlocher lower envelope of parabolas).
void edt_1d(const double* f, double* out, int64_t n, double step, std::vector<int64_t>& v,
            std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(static_cast<size_t>(n), 0);
  z.assign(static_cast<size_t>(n) + 1, 0.0);
  int64_t k = -1;
  const double s2 = step * step;
  for (int64_t q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s = 0.0;
    while (true) {
      const int64_t p = v[k];
      s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (k < 0) {
    std::fill(out, out + n, inf);
    return;
  }
  int64_t j = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double d = step * double(q - v[j]);
    out[q] = d * d + f[v[j]];
  }
}

}  // namespace

double dsc(const BinaryGrid& pred, const BinaryGrid& gt) {
  require_same_extent(pred, gt, "dsc");
  int64_t p = 0, g = 0, both = 0;
  for (size_t i = 0; i < pred.voxels.size(); ++i) {
    const bool a = pred.voxels[i] != 0;
    const bool b = gt.voxels[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(both) / double(p + g);
}

std::vector<Voxel> surface_voxels(const BinaryGrid& mask, Connectivity connectivity) {
  const auto e = mask.extent;
  std::vector<Voxel> out;
  auto background = [&](int64_t h, int64_t w, int64_t d) {
    if (h < 0 || w < 0 || d < 0 || h >= e.h || w >= e.w || d >= e.d) return true;
    return mask.at(h, w, d) == 0;
  };
  for (int64_t h = 0; h < e.h; ++h) {
    for (int64_t w = 0; w < e.w; ++w) {
      for (int64_t d = 0; d < e.d; ++d) {
        if (mask.at(h, w, d) == 0) continue;
        bool surface = false;
        for (int64_t dh = -1; dh <= 1 && !surface; ++dh) {
          for (int64_t dw = -1; dw <= 1 && !surface; ++dw) {
            for (int64_t dd = -1; dd <= 1 && !surface; ++dd) {
              const int64_t manhattan = std::abs(dh) + std::abs(dw) + std::abs(dd);
              if (manhattan == 0) continue;
              if (connectivity == Connectivity::six && manhattan != 1) continue;
              surface = background(h + dh, w + dw, d + dd);
            }
          }
        }
        if (surface) out.push_back({h, w, d});
      }
    }
  }
  return out;
}

std::vector<double> distance_to_sites(Extent3 e, const std::vector<Voxel>& sites,
                                      const Spacing& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const auto n = static_cast<size_t>(e.voxels());
  std::vector<double> dist(n, inf);
  auto idx = [&](int64_t h, int64_t w, int64_t d) {
    return static_cast<size_t>((h * e.w + w) * e.d + d);
  };
  for (const auto& s : sites) dist[idx(s.h, s.w, s.d)] = 0.0;
  if (sites.empty()) return dist;

  const int64_t longest = std::max({e.h, e.w, e.d});
  std::vector<double> line(static_cast<size_t>(longest)), result(static_cast<size_t>(longest));
  std::vector<int64_t> v;
  std::vector<double> z;
  // Pass along d, then w, then h; each pass is a 1D squared transform.
  for (int64_t h = 0; h < e.h; ++h)
    for (int64_t w = 0; w < e.w; ++w) {
      for (int64_t d = 0; d < e.d; ++d) line[d] = dist[idx(h, w, d)];
      edt_1d(line.data(), result.data(), e.d, spacing.d, v, z);
      for (int64_t d = 0; d < e.d; ++d) dist[idx(h, w, d)] = result[d];
    }
  for (int64_t h = 0; h < e.h; ++h)
    for (int64_t d = 0; d < e.d; ++d) {
      for (int64_t w = 0; w < e.w; ++w) line[w] = dist[idx(h, w, d)];
      edt_1d(line.data(), result.data(), e.w, spacing.w, v, z);
      for (int64_t w = 0; w < e.w; ++w) dist[idx(h, w, d)] = result[w];
    }
  for (int64_t w = 0; w < e.w; ++w)
    for (int64_t d = 0; d < e.d; ++d) {
      for (int64_t h = 0; h < e.h; ++h) line[h] = dist[idx(h, w, d)];
      edt_1d(line.data(), result.data(), e.h, spacing.h, v, z);
      for (int64_t h = 0; h < e.h; ++h) dist[idx(h, w, d)] = result[h];
    }
  for (auto& x : dist) x = std::sqrt(x);
  return dist;
}

namespace {

struct SurfaceDistances {
  std::vector<double> pred_to_gt;
  std::vector<double> gt_to_pred;
};

std::optional<SurfaceDistances> surface_distances(const BinaryGrid& pred, const BinaryGrid& gt,
                                                  const MetricOptions& o) {
  require_same_extent(pred, gt, "surface distance");
  if (pred.empty() || gt.empty()) return std::nullopt;
  const Spacing spacing = o.use_spacing ? o.spacing : Spacing{};
  const auto sp = surface_voxels(pred, o.connectivity);
  const auto sg = surface_voxels(gt, o.connectivity);
  const auto to_gt = distance_to_sites(pred.extent, sg, spacing);
  const auto to_pred = distance_to_sites(pred.extent, sp, spacing);
  SurfaceDistances out;
  out.pred_to_gt.reserve(sp.size());
  out.gt_to_pred.reserve(sg.size());
  for (const auto& v : sp) out.pred_to_gt.push_back(to_gt[pred.index(v.h, v.w, v.d)]);
  for (const auto& v : sg) out.gt_to_pred.push_back(to_pred[gt.index(v.h, v.w, v.d)]);
  return out;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

}  // namespace

std::optional<double> asd(const BinaryGrid& pred, const BinaryGrid& gt,
                          const MetricOptions& options) {
  auto s = surface_distances(pred, gt, options);
  if (!s) return std::nullopt;
  return 0.5 * (mean_of(s->pred_to_gt) + mean_of(s->gt_to_pred));
}

std::optional<double> nsd(const BinaryGrid& pred, const BinaryGrid& gt,
                          const MetricOptions& options) {
  if (!(options.tau > 0)) throw ConfigError("nsd: tau must be positive");
  auto s = surface_distances(pred, gt, options);
  if (!s) return std::nullopt;
  auto within = [&](const std::vector<double>& v) {
    return std::count_if(v.begin(), v.end(), [&](double x) { return x <= options.tau; });
  };
  return double(within(s->pred_to_gt) + within(s->gt_to_pred)) /
         double(s->pred_to_gt.size() + s->gt_to_pred.size());
}

CaseMetrics evaluate_case(const std::string& case_id, const BinaryGrid& pred,
                          const BinaryGrid& gt, const MetricOptions& options) {
  CaseMetrics m{case_id, dsc(pred, gt), std::nullopt, std::nullopt};
  if (auto s = surface_distances(pred, gt, options)) {
    m.asd = 0.5 * (mean_of(s->pred_to_gt) + mean_of(s->gt_to_pred));
    auto within = [&](const std::vector<double>& v) {
      return std::count_if(v.begin(), v.end(), [&](double x) { return x <= options.tau; });
    };
    m.nsd = double(within(s->pred_to_gt) + within(s->gt_to_pred)) /
            double(s->pred_to_gt.size() + s->gt_to_pred.size());
  }
  return m;
}

MetricReport summarize(std::vector<CaseMetrics> cases) {
  MetricReport r;
  r.cases = std::move(cases);
  if (r.cases.empty()) return r;
  int64_t surface_cases = 0;
  for (const auto& c : r.cases) {
    r.mean_dsc += c.dsc;
    if (c.nsd && c.asd) {
      r.mean_nsd += *c.nsd;
      r.mean_asd += *c.asd;
      ++surface_cases;
    } else {
      ++r.missing_surface;
    }
  }
  r.mean_dsc /= double(r.cases.size());
  if (surface_cases > 0) {
    r.mean_nsd /= double(surface_cases);
    r.mean_asd /= double(surface_cases);
  } else {
    r.mean_nsd = r.mean_asd = std::numeric_limits<double>::quiet_NaN();
  }
  return r;
}

void write_metrics_csv(std::ostream& out, const MetricReport& report) {
  auto num = [](std::optional<double> v) -> std::string {
    if (!v || std::isnan(*v)) return "nan";
    std::ostringstream s;
    s << std::setprecision(10) << *v;
    return s.str();
  };
  out << "case_id,dsc,nsd,asd\n";
  for (const auto& c : report.cases) {
    out << c.case_id << ',' << num(c.dsc) << ',' << num(c.nsd) << ',' << num(c.asd) << '\n';
  }
  out << "mean," << num(report.mean_dsc) << ',' << num(report.mean_nsd) << ','
      << num(report.mean_asd) << '\n';
}

}  // namespace dico
