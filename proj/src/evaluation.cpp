#include "dico/evaluation.hpp"

namespace dico {

LogitFn as_logit_fn(const SegNet& net) {
  return [net](const torch::Tensor& x) {
    torch::NoGradGuard guard;
    const bool was_training = net->is_training();
    net->eval();
    auto logits = net->forward(x);
    if (was_training) net->train();
    return logits;
  };
}

ProbMap predict_volume(const SegNet& m1, const Volume& volume, const SlidingWindowConfig& window,
                       const SegNet& average_with) {
  auto p1 = sliding_window_predict(as_logit_fn(m1), volume, window);
  if (!average_with) return p1;
  auto p2 = sliding_window_predict(as_logit_fn(average_with), volume, window);
  return ProbMap((p1.data + p2.data) * 0.5);
}

MetricReport evaluate_network(const SegNet& m1, const std::vector<LoadedCase>& cases,
                              const SlidingWindowConfig& window, const MetricOptions& metrics,
                              const SegNet& average_with) {
  std::vector<CaseMetrics> per_case;
  per_case.reserve(cases.size());
  for (const auto& c : cases) {
    if (!c.label) throw ConfigError("evaluation case '" + c.id + "' has no label");
    auto pred = final_prediction(predict_volume(m1, c.image, window, average_with));
    auto options = metrics;
    options.spacing = c.image.spacing;
    per_case.push_back(evaluate_case(c.id, to_grid(pred), to_grid(*c.label), options));
  }
  return summarize(std::move(per_case));
}

}  // namespace dico
