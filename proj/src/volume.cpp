#include "dico/volume.hpp"

#include <string>

namespace dico {

void require_5d(const torch::Tensor& t, const char* what) {
  if (!t.defined() || t.dim() != 5) {
    throw ShapeError(std::string(what) + ": expected a 5-axis (B, C, H, W, D) tensor, got " +
                     (t.defined() ? std::to_string(t.dim()) + " axes" : "undefined"));
  }
  for (int64_t i = 0; i < 5; ++i) {
    if (t.size(i) < 1) {
      throw ShapeError(std::string(what) + ": axis " + std::to_string(i) + " has zero extent");
    }
  }
}

Extent3 spatial_extent(const torch::Tensor& t) {
  return {t.size(-3), t.size(-2), t.size(-1)};
}

Volume::Volume(torch::Tensor t, Spacing s) : data(std::move(t)), spacing(s) {
  require_5d(data, "Volume");
  if (!data.is_floating_point()) data = data.to(torch::kFloat);
}

LabelMask::LabelMask(torch::Tensor t) {
  require_5d(t, "LabelMask");
  if (t.size(1) != 1) throw ShapeError("LabelMask: expected a single channel");
  auto bad = (t != 0).logical_and(t != 1);
  if (bad.any().item<bool>()) {
    auto value = t.masked_select(bad)[0].item<double>();
    throw ShapeError("LabelMask: non-binary value " + std::to_string(value));
  }
  data = t.to(torch::kUInt8);
}

ProbMap::ProbMap(torch::Tensor t) : data(std::move(t)) {
  require_5d(data, "ProbMap");
  if (!data.is_floating_point()) throw ShapeError("ProbMap: expected a floating tensor");
  auto sums = data.sum(1);
  if ((sums - 1).abs().max().item<double>() > 1e-5) {
    throw ShapeError("ProbMap: class probabilities do not sum to 1");
  }
  if (data.min().item<double>() < 0.0 || data.max().item<double>() > 1.0) {
    throw ShapeError("ProbMap: probabilities outside [0, 1]");
  }
}

}  // namespace dico
