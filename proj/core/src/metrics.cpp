#include "skinmamba/metrics.hpp"

#include <cmath>

#include "skinmamba/errors.hpp"

namespace skinmamba::metrics {
namespace {

std::optional<double> ratio(uint64_t num, uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

nlohmann::json percent(const std::optional<double>& v) {
  if (!v) return nullptr;
  return std::round(*v * 10000.0) / 100.0;
}

}  // namespace

ConfusionCounts accumulate(const torch::Tensor& pred, const torch::Tensor& gt, ConfusionCounts counts) {
  if (pred.sizes() != gt.sizes()) {
    throw ShapeError("prediction " + shape_string(pred.sizes().vec()) + " and ground truth " +
                     shape_string(gt.sizes().vec()) + " differ in shape");
  }
  const auto p = pred.ne(0);
  const auto g = gt.ne(0);
  const auto tp = static_cast<uint64_t>((p & g).sum().item<int64_t>());
  const auto fp = static_cast<uint64_t>((p & ~g).sum().item<int64_t>());
  const auto fn = static_cast<uint64_t>((~p & g).sum().item<int64_t>());
  const auto total = static_cast<uint64_t>(p.numel());
  counts.tp += tp;
  counts.fp += fp;
  counts.fn += fn;
  counts.tn += total - tp - fp - fn;
  return counts;
}

Metrics compute_metrics(const ConfusionCounts& c) {
  Metrics m;
  m.miou = ratio(c.tp, c.tp + c.fp + c.fn);
  m.dsc = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  m.acc = ratio(c.tp + c.tn, c.total());
  m.sen = ratio(c.tp, c.tp + c.fn);
  m.spe = ratio(c.tn, c.tn + c.fp);
  return m;
}

nlohmann::json report_json(const ConfusionCounts& c) {
  const auto m = compute_metrics(c);
  nlohmann::json j;
  j["aggregation"] = "micro";
  j["counts"] = {{"TP", c.tp}, {"FP", c.fp}, {"FN", c.fn}, {"TN", c.tn}};
  j["metrics"] = {{"mIoU", percent(m.miou)},
                  {"DSC", percent(m.dsc)},
                  {"Acc", percent(m.acc)},
                  {"Sen", percent(m.sen)},
                  {"Spe", percent(m.spe)}};
  return j;
}

}  // namespace skinmamba::metrics
