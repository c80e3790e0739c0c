#pragma once

#include <torch/torch.h>

namespace skinmamba {

// Layer normalization over the channel axis of a (B, C, H, W) feature map,
// i.e. one normalization per pixel token.
class LayerNorm2dImpl : public torch::nn::Module {
 public:
  explicit LayerNorm2dImpl(int64_t channels, double eps = 1e-5);

  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight;
  torch::Tensor bias;

 private:
  int64_t channels_;
  double eps_;
};
TORCH_MODULE(LayerNorm2d);

// (B, C, H, W) <-> (B, H, W, C)
inline torch::Tensor to_channels_last(const torch::Tensor& x) { return x.permute({0, 2, 3, 1}); }
inline torch::Tensor to_channels_first(const torch::Tensor& x) { return x.permute({0, 3, 1, 2}); }

}  // namespace skinmamba
