#pragma once

#include <torch/torch.h>

#include <functional>
#include <string>
#include <vector>

#include "dico/volume.hpp"

namespace dico {

enum class Blending { uniform, gaussian };

std::string to_string(Blending b);
Blending parse_blending(const std::string& s);

struct SlidingWindowConfig {
  Extent3 window{96, 96, 96};
  double overlap = 0.5;
  Blending blending = Blending::gaussian;

  void validate() const;
};

/// Maps a (B, C, h, w, d) window batch to (B, K, h, w, d) logits.
using LogitFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// Window origins along one axis of length `extent` (already padded to at
/// least `window`). The last window is aligned to the end of the axis.
std::vector<int64_t> window_starts(int64_t extent, int64_t window, double overlap);

/// Per-voxel blend weights of one window: all ones (uniform) or a separable
/// Gaussian with sigma = window / 8 per axis.
torch::Tensor blend_weights(Extent3 window, Blending blending);

/// Sliding-window softmax prediction over the whole volume. Windows are
/// weighted by blend_weights and normalised by the accumulated weight; the
/// zero padding added for volumes smaller than the window is stripped.
ProbMap sliding_window_predict(const LogitFn& net, const Volume& volume,
                               const SlidingWindowConfig& config);

/// Voxel-wise argmax; ties resolve to the lower class index (background).
LabelMask final_prediction(const ProbMap& prob);

}  // namespace dico
