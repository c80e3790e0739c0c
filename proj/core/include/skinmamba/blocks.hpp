#pragma once

#include <torch/torch.h>

#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>

#include "skinmamba/layers.hpp"
#include "skinmamba/ss2d.hpp"

namespace skinmamba::blocks {

// Token mixer used inside each SRSSB. VSSB is the full model; the other two
// are the ablation substitutes.
enum class MixerVariant { VSSB, Conv3x3, SelfAttention };

std::string_view to_string(MixerVariant v);
MixerVariant mixer_from_string(std::string_view s);

// How a decoder stage combines the upsampled path with its skip.
enum class SkipMode { Add, Concat };

std::string_view to_string(SkipMode m);
SkipMode skip_mode_from_string(std::string_view s);

struct BlockConfig {
  int64_t channels = 16;
  int64_t ssm_state_dim = 16;
  double smffl_hidden_ratio = 0.5;
  int64_t csffl_expansion = 2;
  MixerVariant variant = MixerVariant::VSSB;
  bool use_srssb = true;
  bool use_fbgm = true;

  // Reduced width of each SMFFL branch.
  int64_t smffl_hidden() const;
  // Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const BlockConfig& c);
void from_json(const nlohmann::json& j, BlockConfig& c);

// Optional instrumentation callback: (tag, tensor) at named points.
using Probe = std::function<void(const std::string&, const torch::Tensor&)>;

// Common interface of the three token mixers.
class TokenMixer : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& x) = 0;
  // Zeroes the last affine layer so the mixer outputs exactly zero.
  virtual void zero_output() = 0;
};

class VSSB : public TokenMixer {
 public:
  VSSB(int64_t channels, int64_t state_dim);

  struct Streams {
    torch::Tensor refined;  // LN(SS2D(SiLU(DW(F))))
    torch::Tensor gate;     // SiLU(F)
  };
  Streams streams(const torch::Tensor& x);
  // out_proj applied to an explicit pair of streams.
  torch::Tensor combine(const Streams& s);

  torch::Tensor forward(const torch::Tensor& x) override;
  void zero_output() override;

  LayerNorm2d norm{nullptr};
  torch::nn::Linear in_proj{nullptr};
  torch::nn::Conv2d dwconv{nullptr};
  scan::SS2D ss2d{nullptr};
  torch::nn::Linear out_proj{nullptr};
};

class ConvMixer : public TokenMixer {
 public:
  explicit ConvMixer(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x) override;
  void zero_output() override;

  torch::nn::Conv2d conv{nullptr};
};

// Single-head scaled dot-product attention over flattened spatial tokens.
class AttentionMixer : public TokenMixer {
 public:
  explicit AttentionMixer(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x) override;
  void zero_output() override;

  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};
};

std::shared_ptr<TokenMixer> make_mixer(const BlockConfig& cfg);

// Dual-branch 3x3 / 5x5 feed-forward on a reduced width.
class SMFFLImpl : public torch::nn::Module {
 public:
  SMFFLImpl(int64_t channels, double hidden_ratio);

  // Linear(GELU([conv3(Linear(LN x)), conv5(Linear(LN x))])), no residual.
  torch::Tensor branch(const torch::Tensor& x);
  // branch(x) + x
  torch::Tensor forward(const torch::Tensor& x);
  void zero_output();

  int64_t hidden() const { return hidden_; }

  LayerNorm2d norm{nullptr};
  torch::nn::Linear proj3{nullptr}, proj5{nullptr};
  torch::nn::Conv2d conv3{nullptr}, conv5{nullptr};
  torch::nn::Linear out_proj{nullptr};
  Probe probe;

 private:
  int64_t hidden_;
};
TORCH_MODULE(SMFFL);

// x' = x + mixer(LN x); out = x' + SMFFL-branch(LN x')
class SRSSBImpl : public torch::nn::Module {
 public:
  explicit SRSSBImpl(const BlockConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);
  void zero_residual_branches();

  LayerNorm2d norm1{nullptr};
  std::shared_ptr<TokenMixer> mixer;
  LayerNorm2d norm2{nullptr};
  SMFFL smffl{nullptr};
};
TORCH_MODULE(SRSSB);

// Inverse FFT of the FFT over the two spatial axes, real part.
torch::Tensor spectral_roundtrip(const torch::Tensor& x);

// Frequency-domain gate: sigmoid(Re IFFT2(PW(ReLU(PW(FFT2 x))))) * x, with the
// pointwise convs acting on stacked real/imaginary channels.
class FFGMLImpl : public torch::nn::Module {
 public:
  explicit FFGMLImpl(int64_t channels);
  torch::Tensor gate(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x);
  void zero_weights();

  torch::nn::Conv2d pw1{nullptr}, pw2{nullptr};

 private:
  int64_t channels_;
};
TORCH_MODULE(FFGML);

// PW(GELU(conv3x3 expanding channels))
class CSFFLImpl : public torch::nn::Module {
 public:
  CSFFLImpl(int64_t channels, int64_t expansion = 2);
  torch::Tensor forward(const torch::Tensor& x);
  void zero_output();

  torch::nn::Conv2d expand{nullptr};
  torch::nn::Conv2d project{nullptr};
  Probe probe;
};
TORCH_MODULE(CSFFL);

// K' = K + FFGML(LN K); out = K' + CSFFL(LN K')
class FBGMImpl : public torch::nn::Module {
 public:
  FBGMImpl(int64_t channels, int64_t expansion = 2);
  torch::Tensor forward(const torch::Tensor& k);
  // Zeroes the affine of the norm feeding FFGML and the CSFFL projection.
  void zero_residual_branches();

  LayerNorm2d norm1{nullptr};
  FFGML ffgml{nullptr};
  LayerNorm2d norm2{nullptr};
  CSFFL csffl{nullptr};
};
TORCH_MODULE(FBGM);

struct EncoderOutput {
  torch::Tensor skip;
  torch::Tensor out;
};

// y = ReLU(BN(conv3x3(SRSSB x))); the same tensor feeds the skip and the
// downsampler.
class EncoderBlockImpl : public torch::nn::Module {
 public:
  explicit EncoderBlockImpl(const BlockConfig& cfg);
  EncoderOutput forward(const torch::Tensor& x);

  SRSSB srssb{nullptr};  // null when use_srssb is false
  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
};
TORCH_MODULE(EncoderBlock);

// y = ReLU(BN(conv3x3(fuse(up, skip)))); out = SRSSB(y)
class DecoderBlockImpl : public torch::nn::Module {
 public:
  DecoderBlockImpl(const BlockConfig& cfg, SkipMode mode);
  torch::Tensor forward(const torch::Tensor& up, const torch::Tensor& skip);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
  SRSSB srssb{nullptr};

 private:
  SkipMode mode_;
};
TORCH_MODULE(DecoderBlock);

}  // namespace skinmamba::blocks
