#pragma once

#include <vector>

#include "dico/data.hpp"
#include "dico/inference.hpp"
#include "dico/metrics.hpp"
#include "dico/networks.hpp"

namespace dico {

/// Logits of `net` with gradients disabled; the network is put in eval mode
/// for the call and restored afterwards.
LogitFn as_logit_fn(const SegNet& net);

/// Whole-volume probabilities. By default only M1 is used; with
/// `average_with` set the two networks' probabilities are averaged.
ProbMap predict_volume(const SegNet& m1, const Volume& volume, const SlidingWindowConfig& window,
                       const SegNet& average_with = nullptr);

/// Sliding-window prediction + final_prediction + metrics for every case.
MetricReport evaluate_network(const SegNet& m1, const std::vector<LoadedCase>& cases,
                              const SlidingWindowConfig& window, const MetricOptions& metrics,
                              const SegNet& average_with = nullptr);

}  // namespace dico
