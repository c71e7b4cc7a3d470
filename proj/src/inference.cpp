#include "dico/inference.hpp"

#include <cmath>

#include "dico/volume_ops.hpp"

namespace dico {

using torch::indexing::Slice;

std::string to_string(Blending b) { return b == Blending::uniform ? "uniform" : "gaussian"; }

Blending parse_blending(const std::string& s) {
  if (s == "uniform") return Blending::uniform;
  if (s == "gaussian") return Blending::gaussian;
  throw ConfigError("unknown blending '" + s + "' (expected uniform or gaussian)");
}

void SlidingWindowConfig::validate() const {
  if (window.h < 1 || window.w < 1 || window.d < 1) {
    throw ConfigError("sliding window extents must be positive");
  }
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("sliding window overlap must be in [0, 1)");
}

std::vector<int64_t> window_starts(int64_t extent, int64_t window, double overlap) {
  if (window > extent) {
    throw ConfigError("window extent " + std::to_string(window) + " exceeds padded volume extent " +
                      std::to_string(extent));
  }
  const auto stride = std::max<int64_t>(1, int64_t(std::floor(double(window) * (1.0 - overlap))));
  std::vector<int64_t> starts;
  for (int64_t s = 0;; s += stride) {
    if (s + window >= extent) {
      starts.push_back(extent - window);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

torch::Tensor blend_weights(Extent3 window, Blending blending) {
  if (blending == Blending::uniform) return torch::ones({window.h, window.w, window.d});
  auto axis = [](int64_t n) {
    const double sigma = double(n) / 8.0;
    const double centre = (double(n) - 1.0) / 2.0;
    auto x = torch::arange(n, torch::kDouble);
    return torch::exp(-(x - centre).pow(2) / (2.0 * sigma * sigma));
  };
  auto w = axis(window.h).view({-1, 1, 1}) * axis(window.w).view({1, -1, 1}) *
           axis(window.d).view({1, 1, -1});
  w = w / w.max();
  // Keep the border strictly positive so every voxel receives weight.
  return w.clamp_min(1e-3).to(torch::kFloat);
}

ProbMap sliding_window_predict(const LogitFn& net, const Volume& volume,
                               const SlidingWindowConfig& config) {
  config.validate();
  const auto source = volume.extent();
  const auto win = config.window;
  const auto padded_ext = padded_extent(source, win);
  auto padded = center_crop(volume.data, padded_ext);  // pads only

  const auto hs = window_starts(padded_ext.h, win.h, config.overlap);
  const auto ws = window_starts(padded_ext.w, win.w, config.overlap);
  const auto ds = window_starts(padded_ext.d, win.d, config.overlap);
  const auto weights = blend_weights(win, config.blending);

  torch::NoGradGuard no_grad;
  torch::Tensor accum;
  auto norm = torch::zeros({padded_ext.h, padded_ext.w, padded_ext.d});
  for (auto h : hs) {
    for (auto w : ws) {
      for (auto d : ds) {
        const auto region = std::vector<torch::indexing::TensorIndex>{
            Slice(), Slice(), Slice(h, h + win.h), Slice(w, w + win.w), Slice(d, d + win.d)};
        auto prob = torch::softmax(net(padded.index(region)), 1);
        if (!accum.defined()) {
          accum = torch::zeros({padded.size(0), prob.size(1), padded_ext.h, padded_ext.w, padded_ext.d});
        }
        accum.index(region).add_(prob * weights);
        norm.index({Slice(h, h + win.h), Slice(w, w + win.w), Slice(d, d + win.d)}).add_(weights);
      }
    }
  }
  auto prob = accum / norm;
  // Strip the symmetric padding added above.
  const Extent3 low{(padded_ext.h - source.h) / 2, (padded_ext.w - source.w) / 2,
                    (padded_ext.d - source.d) / 2};
  prob = prob.index({Slice(), Slice(), Slice(low.h, low.h + source.h), Slice(low.w, low.w + source.w),
                     Slice(low.d, low.d + source.d)})
             .contiguous();
  return ProbMap(prob);
}

LabelMask final_prediction(const ProbMap& prob) {
  const auto& p = prob.data;
  auto best = p.index({Slice(), Slice(0, 1)});
  auto label = torch::zeros_like(best, torch::kUInt8);
  for (int64_t k = 1; k < p.size(1); ++k) {
    auto candidate = p.index({Slice(), Slice(k, k + 1)});
    auto better = candidate > best;
    label = torch::where(better, torch::full_like(label, k), label);
    best = torch::where(better, candidate, best);
  }
  return LabelMask(label);
}

}  // namespace dico
