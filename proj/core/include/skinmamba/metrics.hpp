#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

namespace skinmamba::metrics {

// Pixel-level confusion counts, summed over every evaluated image
// (micro-averaging).
struct ConfusionCounts {
  uint64_t tp = 0;
  uint64_t fp = 0;
  uint64_t fn = 0;
  uint64_t tn = 0;

  uint64_t total() const { return tp + fp + fn + tn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }
  bool operator==(const ConfusionCounts&) const = default;
};

// Adds the pixelwise comparison of two binary masks of equal shape.
// Any nonzero value counts as foreground. Throws ShapeError.
ConfusionCounts accumulate(const torch::Tensor& pred, const torch::Tensor& gt,
                           ConfusionCounts counts = {});

// Each metric is empty when its denominator is zero.
struct Metrics {
  std::optional<double> miou;  // TP / (TP + FP + FN), foreground IoU
  std::optional<double> dsc;   // 2TP / (2TP + FP + FN)
  std::optional<double> acc;   // (TP + TN) / total
  std::optional<double> sen;   // TP / (TP + FN)
  std::optional<double> spe;   // TN / (TN + FP)
};

Metrics compute_metrics(const ConfusionCounts& c);

// {"aggregation": "micro", "counts": {...}, "metrics": {"mIoU": 80.65, ...}}
// Metrics are percentages rounded to two decimals; undefined ones are null.
nlohmann::json report_json(const ConfusionCounts& c);

}  // namespace skinmamba::metrics
