#include "skinmamba/blocks.hpp"

#include <cmath>
#include <string>

#include "skinmamba/errors.hpp"

namespace skinmamba::blocks {
namespace {

namespace F = torch::nn::functional;

void require_channels(const torch::Tensor& x, int64_t channels, const char* block) {
  if (x.dim() != 4 || x.size(1) != channels) {
    throw ConfigError(std::string(block) + " configured for " + std::to_string(channels) +
                      " channels, got input " + shape_string(x.sizes().vec()));
  }
}

// Linear on the channel axis of a (B, C, H, W) map.
torch::Tensor channel_linear(torch::nn::Linear& layer, const torch::Tensor& x) {
  return to_channels_first(layer->forward(to_channels_last(x)));
}

void zero_in_place(torch::Tensor& t) {
  torch::NoGradGuard no_grad;
  t.zero_();
}

template <typename Layer>
void zero_affine(Layer& layer) {
  zero_in_place(layer->weight);
  if (layer->bias.defined()) zero_in_place(layer->bias);
}

torch::nn::BatchNorm2d make_bn(int64_t channels) {
  return torch::nn::BatchNorm2d(
      torch::nn::BatchNorm2dOptions(channels).momentum(0.1).eps(1e-5));
}

torch::nn::Conv2d conv3x3(int64_t in, int64_t out) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1));
}

}  // namespace

std::string_view to_string(MixerVariant v) {
  switch (v) {
    case MixerVariant::VSSB:
      return "vssb";
    case MixerVariant::Conv3x3:
      return "conv3x3";
    case MixerVariant::SelfAttention:
      return "self_attention";
  }
  return "unknown";
}

MixerVariant mixer_from_string(std::string_view s) {
  if (s == "vssb") return MixerVariant::VSSB;
  if (s == "conv3x3") return MixerVariant::Conv3x3;
  if (s == "self_attention") return MixerVariant::SelfAttention;
  throw ConfigError("unknown mixer variant '" + std::string(s) +
                    "' (expected vssb, conv3x3 or self_attention)");
}

std::string_view to_string(SkipMode m) { return m == SkipMode::Add ? "add" : "concat"; }

SkipMode skip_mode_from_string(std::string_view s) {
  if (s == "add") return SkipMode::Add;
  if (s == "concat") return SkipMode::Concat;
  throw ConfigError("unknown skip mode '" + std::string(s) + "' (expected add or concat)");
}

int64_t BlockConfig::smffl_hidden() const {
  return static_cast<int64_t>(std::floor(static_cast<double>(channels) * smffl_hidden_ratio));
}

void BlockConfig::validate() const {
  if (channels < 1) throw ConfigError("block channels must be >= 1");
  if (ssm_state_dim < 1) throw ConfigError("ssm_state_dim must be >= 1");
  if (!(smffl_hidden_ratio > 0.0)) throw ConfigError("smffl_hidden_ratio must be positive");
  if (smffl_hidden() < 1) {
    throw ConfigError("SMFFL hidden width " + std::to_string(smffl_hidden()) + " is below 1 for " +
                      std::to_string(channels) + " channels");
  }
  if (csffl_expansion < 1) throw ConfigError("csffl_expansion must be >= 1");
}

void to_json(nlohmann::json& j, const BlockConfig& c) {
  j = nlohmann::json{{"ssm_state_dim", c.ssm_state_dim},
                     {"smffl_hidden_ratio", c.smffl_hidden_ratio},
                     {"csffl_expansion", c.csffl_expansion},
                     {"variant", std::string(to_string(c.variant))},
                     {"use_srssb", c.use_srssb},
                     {"use_fbgm", c.use_fbgm}};
}

void from_json(const nlohmann::json& j, BlockConfig& c) {
  c.ssm_state_dim = j.value("ssm_state_dim", c.ssm_state_dim);
  c.smffl_hidden_ratio = j.value("smffl_hidden_ratio", c.smffl_hidden_ratio);
  c.csffl_expansion = j.value("csffl_expansion", c.csffl_expansion);
  if (j.contains("variant")) c.variant = mixer_from_string(j.at("variant").get<std::string>());
  c.use_srssb = j.value("use_srssb", c.use_srssb);
  c.use_fbgm = j.value("use_fbgm", c.use_fbgm);
}

// ---- token mixers -------------------------------------------------------

VSSB::VSSB(int64_t channels, int64_t state_dim) {
  norm = register_module("norm", LayerNorm2d(channels));
  in_proj = register_module("in_proj", torch::nn::Linear(channels, channels));
  dwconv = register_module(
      "dwconv",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1).groups(channels)));
  ss2d = register_module("ss2d", scan::SS2D(channels, state_dim));
  out_proj = register_module("out_proj", torch::nn::Linear(channels, channels));
}

VSSB::Streams VSSB::streams(const torch::Tensor& x) {
  require_channels(x, in_proj->options.in_features(), "VSSB");
  // One shared projection feeds both streams.
  const auto f = channel_linear(in_proj, norm->forward(x));
  Streams s;
  s.refined = ss2d->forward(torch::silu(dwconv->forward(f)));
  s.gate = torch::silu(f);
  return s;
}

torch::Tensor VSSB::combine(const Streams& s) {
  return channel_linear(out_proj, s.refined * s.gate);
}

torch::Tensor VSSB::forward(const torch::Tensor& x) { return combine(streams(x)); }

void VSSB::zero_output() { zero_affine(out_proj); }

ConvMixer::ConvMixer(int64_t channels) {
  conv = register_module("conv", conv3x3(channels, channels));
}

torch::Tensor ConvMixer::forward(const torch::Tensor& x) {
  require_channels(x, conv->options.in_channels(), "conv mixer");
  return conv->forward(x);
}

void ConvMixer::zero_output() { zero_affine(conv); }

AttentionMixer::AttentionMixer(int64_t channels) {
  q_proj = register_module("q_proj", torch::nn::Linear(channels, channels));
  k_proj = register_module("k_proj", torch::nn::Linear(channels, channels));
  v_proj = register_module("v_proj", torch::nn::Linear(channels, channels));
  out_proj = register_module("out_proj", torch::nn::Linear(channels, channels));
}

torch::Tensor AttentionMixer::forward(const torch::Tensor& x) {
  require_channels(x, q_proj->options.in_features(), "attention mixer");
  const int64_t batch = x.size(0), ch = x.size(1), h = x.size(2), w = x.size(3);
  const auto tokens = x.flatten(2).transpose(1, 2);  // (B, HW, C)
  const auto q = q_proj->forward(tokens).unsqueeze(1);
  const auto k = k_proj->forward(tokens).unsqueeze(1);
  const auto v = v_proj->forward(tokens).unsqueeze(1);
  const auto attended = torch::scaled_dot_product_attention(q, k, v).squeeze(1);
  return out_proj->forward(attended).transpose(1, 2).reshape({batch, ch, h, w});
}

void AttentionMixer::zero_output() { zero_affine(out_proj); }

std::shared_ptr<TokenMixer> make_mixer(const BlockConfig& cfg) {
  switch (cfg.variant) {
    case MixerVariant::VSSB:
      return std::make_shared<VSSB>(cfg.channels, cfg.ssm_state_dim);
    case MixerVariant::Conv3x3:
      return std::make_shared<ConvMixer>(cfg.channels);
    case MixerVariant::SelfAttention:
      return std::make_shared<AttentionMixer>(cfg.channels);
  }
  throw ConfigError("unhandled mixer variant");
}

// ---- SMFFL / SRSSB -------------------------------------------------------

SMFFLImpl::SMFFLImpl(int64_t channels, double hidden_ratio) {
  BlockConfig probe_cfg;
  probe_cfg.channels = channels;
  probe_cfg.smffl_hidden_ratio = hidden_ratio;
  probe_cfg.validate();
  hidden_ = probe_cfg.smffl_hidden();

  norm = register_module("norm", LayerNorm2d(channels));
  proj3 = register_module("proj3", torch::nn::Linear(channels, hidden_));
  proj5 = register_module("proj5", torch::nn::Linear(channels, hidden_));
  conv3 = register_module("conv3", conv3x3(hidden_, hidden_));
  conv5 = register_module(
      "conv5", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden_, hidden_, 5).padding(2)));
  out_proj = register_module("out_proj", torch::nn::Linear(2 * hidden_, channels));
}

torch::Tensor SMFFLImpl::branch(const torch::Tensor& x) {
  require_channels(x, out_proj->options.out_features(), "SMFFL");
  const auto normed = norm->forward(x);
  const auto map3 = conv3->forward(channel_linear(proj3, normed));
  const auto map5 = conv5->forward(channel_linear(proj5, normed));
  if (probe) {
    probe("smffl.branch3x3", map3);
    probe("smffl.branch5x5", map5);
  }
  return channel_linear(out_proj, torch::gelu(torch::cat({map3, map5}, 1)));
}

torch::Tensor SMFFLImpl::forward(const torch::Tensor& x) { return branch(x) + x; }

void SMFFLImpl::zero_output() { zero_affine(out_proj); }

SRSSBImpl::SRSSBImpl(const BlockConfig& cfg) {
  cfg.validate();
  norm1 = register_module("norm1", LayerNorm2d(cfg.channels));
  mixer = register_module("mixer", make_mixer(cfg));
  norm2 = register_module("norm2", LayerNorm2d(cfg.channels));
  smffl = register_module("smffl", SMFFL(cfg.channels, cfg.smffl_hidden_ratio));
}

torch::Tensor SRSSBImpl::forward(const torch::Tensor& x) {
  const auto mid = x + mixer->forward(norm1->forward(x));
  // The SMFFL residual is this block's second residual.
  return mid + smffl->branch(norm2->forward(mid));
}

void SRSSBImpl::zero_residual_branches() {
  mixer->zero_output();
  smffl->zero_output();
}

// ---- frequency branch ----------------------------------------------------

torch::Tensor spectral_roundtrip(const torch::Tensor& x) {
  return torch::real(torch::fft::ifft2(torch::fft::fft2(x)));
}

FFGMLImpl::FFGMLImpl(int64_t channels) : channels_(channels) {
  pw1 = register_module(
      "pw1", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * channels, 2 * channels, 1)));
  pw2 = register_module(
      "pw2", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * channels, 2 * channels, 1)));
}

torch::Tensor FFGMLImpl::gate(const torch::Tensor& x) {
  require_channels(x, channels_, "FFGML");
  if (x.size(2) == 0 || x.size(3) == 0) throw EmptyInputError("FFGML input has no spatial positions");
  const auto spectrum = torch::fft::fft2(x);
  const auto stacked = torch::cat({torch::real(spectrum), torch::imag(spectrum)}, 1);
  const auto filtered = pw2->forward(torch::relu(pw1->forward(stacked)));
  const auto modulated = torch::complex(filtered.narrow(1, 0, channels_).contiguous(),
                                        filtered.narrow(1, channels_, channels_).contiguous());
  return torch::sigmoid(torch::real(torch::fft::ifft2(modulated)));
}

torch::Tensor FFGMLImpl::forward(const torch::Tensor& x) { return gate(x) * x; }

void FFGMLImpl::zero_weights() {
  zero_affine(pw1);
  zero_affine(pw2);
}

CSFFLImpl::CSFFLImpl(int64_t channels, int64_t expansion) {
  if (channels < 1 || expansion < 1) throw ConfigError("CSFFL needs channels and expansion >= 1");
  expand = register_module("expand", conv3x3(channels, channels * expansion));
  project = register_module(
      "project", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels * expansion, channels, 1)));
}

torch::Tensor CSFFLImpl::forward(const torch::Tensor& x) {
  require_channels(x, project->options.out_channels(), "CSFFL");
  const auto hidden = torch::gelu(expand->forward(x));
  if (probe) probe("csffl.hidden", hidden);
  return project->forward(hidden);
}

void CSFFLImpl::zero_output() { zero_affine(project); }

FBGMImpl::FBGMImpl(int64_t channels, int64_t expansion) {
  norm1 = register_module("norm1", LayerNorm2d(channels));
  ffgml = register_module("ffgml", FFGML(channels));
  norm2 = register_module("norm2", LayerNorm2d(channels));
  csffl = register_module("csffl", CSFFL(channels, expansion));
}

torch::Tensor FBGMImpl::forward(const torch::Tensor& k) {
  const auto mid = k + ffgml->forward(norm1->forward(k));
  return mid + csffl->forward(norm2->forward(mid));
}

void FBGMImpl::zero_residual_branches() {
  zero_in_place(norm1->weight);
  zero_in_place(norm1->bias);
  csffl->zero_output();
}

// ---- encoder / decoder ---------------------------------------------------

EncoderBlockImpl::EncoderBlockImpl(const BlockConfig& cfg) {
  cfg.validate();
  if (cfg.use_srssb) srssb = register_module("srssb", SRSSB(cfg));
  conv = register_module("conv", conv3x3(cfg.channels, cfg.channels));
  bn = register_module("bn", make_bn(cfg.channels));
}

EncoderOutput EncoderBlockImpl::forward(const torch::Tensor& x) {
  require_channels(x, conv->options.in_channels(), "encoder block");
  const auto mixed = srssb ? srssb->forward(x) : x;
  const auto y = torch::relu(bn->forward(conv->forward(mixed)));
  return {y, y};
}

DecoderBlockImpl::DecoderBlockImpl(const BlockConfig& cfg, SkipMode mode) : mode_(mode) {
  cfg.validate();
  const int64_t fused = mode == SkipMode::Concat ? 2 * cfg.channels : cfg.channels;
  conv = register_module("conv", conv3x3(fused, cfg.channels));
  bn = register_module("bn", make_bn(cfg.channels));
  if (cfg.use_srssb) srssb = register_module("srssb", SRSSB(cfg));
}

torch::Tensor DecoderBlockImpl::forward(const torch::Tensor& up, const torch::Tensor& skip) {
  if (up.sizes() != skip.sizes()) {
    throw ShapeError("decoder cannot fuse upsampled features " + shape_string(up.sizes().vec()) +
                     " with skip " + shape_string(skip.sizes().vec()));
  }
  const auto fused = mode_ == SkipMode::Concat ? torch::cat({up, skip}, 1) : up + skip;
  require_channels(fused, conv->options.in_channels(), "decoder block");
  const auto y = torch::relu(bn->forward(conv->forward(fused)));
  return srssb ? srssb->forward(y) : y;
}

}  // namespace skinmamba::blocks
