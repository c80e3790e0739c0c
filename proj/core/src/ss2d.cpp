#include "skinmamba/ss2d.hpp"

#include <numeric>
#include <string>

#include "skinmamba/errors.hpp"

namespace skinmamba {

LayerNorm2dImpl::LayerNorm2dImpl(int64_t channels, double eps) : channels_(channels), eps_(eps) {
  weight = register_parameter("weight", torch::ones({channels}));
  bias = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor LayerNorm2dImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != channels_) {
    throw ShapeError("LayerNorm2d expects (B, " + std::to_string(channels_) + ", H, W), got " +
                     shape_string(x.sizes().vec()));
  }
  const auto y = torch::layer_norm(to_channels_last(x), {channels_}, weight, bias, eps_);
  return to_channels_first(y);
}

namespace scan {

std::string_view direction_name(ScanDirection dir) {
  switch (dir) {
    case ScanDirection::RowForward:
      return "row_fwd";
    case ScanDirection::RowReverse:
      return "row_rev";
    case ScanDirection::ColumnForward:
      return "col_fwd";
    case ScanDirection::ColumnReverse:
      return "col_rev";
  }
  return "unknown";
}

std::vector<int64_t> direction_order(ScanDirection dir, int64_t height, int64_t width) {
  const int64_t n = height * width;
  std::vector<int64_t> order(static_cast<size_t>(n));
  switch (dir) {
    case ScanDirection::RowForward:
      std::iota(order.begin(), order.end(), int64_t{0});
      break;
    case ScanDirection::RowReverse:
      for (int64_t s = 0; s < n; ++s) order[static_cast<size_t>(s)] = n - 1 - s;
      break;
    case ScanDirection::ColumnForward:
      for (int64_t s = 0; s < n; ++s) order[static_cast<size_t>(s)] = (s % height) * width + s / height;
      break;
    case ScanDirection::ColumnReverse:
      for (int64_t s = 0; s < n; ++s) {
        const int64_t r = n - 1 - s;
        order[static_cast<size_t>(s)] = (r % height) * width + r / height;
      }
      break;
  }
  return order;
}

SS2DImpl::SS2DImpl(int64_t channels, int64_t state_dim) : channels_(channels) {
  for (const auto dir : kScanDirections) {
    scans_[static_cast<size_t>(dir)] = register_module(
        "scan_" + std::string(direction_name(dir)), SelectiveScan(channels, state_dim));
  }
  out_norm = register_module("out_norm", LayerNorm2d(channels));
}

torch::Tensor SS2DImpl::merged(const torch::Tensor& f) {
  if (f.dim() != 4 || f.size(1) != channels_) {
    throw ShapeError("SS2D expects (B, " + std::to_string(channels_) + ", H, W), got " +
                     shape_string(f.sizes().vec()));
  }
  const int64_t batch = f.size(0);
  const int64_t height = f.size(2);
  const int64_t width = f.size(3);
  if (height * width == 0) throw EmptyInputError("SS2D input has no spatial positions");

  const auto tokens = f.flatten(2).transpose(1, 2);  // (B, HW, C)
  const auto index_opts = torch::TensorOptions().dtype(torch::kLong);
  torch::Tensor total;
  for (const auto dir : kScanDirections) {
    auto& scan = *scans_[static_cast<size_t>(dir)];
    torch::Tensor out;
    if (dir == ScanDirection::RowForward) {
      out = scan.forward(tokens);
    } else {
      auto order = direction_order(dir, height, width);
      std::vector<int64_t> inverse(order.size());
      for (size_t s = 0; s < order.size(); ++s) inverse[static_cast<size_t>(order[s])] = static_cast<int64_t>(s);
      const auto order_t = torch::tensor(order, index_opts);
      const auto inverse_t = torch::tensor(inverse, index_opts);
      out = scan.forward(tokens.index_select(1, order_t)).index_select(1, inverse_t);
    }
    total = total.defined() ? total + out : out;
  }
  return total.transpose(1, 2).reshape({batch, channels_, height, width});
}

torch::Tensor SS2DImpl::forward(const torch::Tensor& f) { return out_norm->forward(merged(f)); }

torch::Tensor ss2d(const torch::Tensor& f, SS2DImpl& params) { return params.merged(f); }

}  // namespace scan
}  // namespace skinmamba
