#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

#include "skinmamba/layers.hpp"
#include "skinmamba/scan.hpp"

namespace skinmamba::scan {

enum class ScanDirection { RowForward, RowReverse, ColumnForward, ColumnReverse };

inline constexpr std::array<ScanDirection, 4> kScanDirections = {
    ScanDirection::RowForward, ScanDirection::RowReverse, ScanDirection::ColumnForward,
    ScanDirection::ColumnReverse};

std::string_view direction_name(ScanDirection dir);

// order[s] is the row-major spatial index visited at sequence position s.
std::vector<int64_t> direction_order(ScanDirection dir, int64_t height, int64_t width);

// Four direction-ordered selective scans over a flattened feature map plus
// the normalization applied to their merged output.
class SS2DImpl : public torch::nn::Module {
 public:
  SS2DImpl(int64_t channels, int64_t state_dim = 16);

  // Sum of the four direction outputs, un-permuted to spatial layout.
  torch::Tensor merged(const torch::Tensor& f);

  // out_norm(merged(f))
  torch::Tensor forward(const torch::Tensor& f);

  SelectiveScan& scan(ScanDirection dir) { return scans_[static_cast<size_t>(dir)]; }

  LayerNorm2d out_norm{nullptr};

 private:
  std::array<SelectiveScan, 4> scans_{nullptr, nullptr, nullptr, nullptr};
  int64_t channels_;
};
TORCH_MODULE(SS2D);

// f: (B, C, H, W) -> (B, C, H, W); the raw four-way merge without norm.
torch::Tensor ss2d(const torch::Tensor& f, SS2DImpl& params);

}  // namespace skinmamba::scan
