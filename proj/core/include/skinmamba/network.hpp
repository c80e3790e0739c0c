#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "skinmamba/blocks.hpp"

namespace skinmamba::network {

inline constexpr int64_t kNumStages = 5;

struct NetworkConfig {
  int64_t base_channels = 16;
  int64_t num_stages = kNumStages;
  int64_t num_classes = 1;
  int64_t input_channels = 3;
  int64_t input_height = 224;
  int64_t input_width = 224;
  blocks::BlockConfig block;
  blocks::SkipMode skip_mode = blocks::SkipMode::Concat;

  // Channel width of encoder stage `stage` (1-based) before downsampling.
  int64_t stage_channels(int64_t stage) const;
  // Spatial divisor every input side must honour (2^num_stages).
  int64_t size_divisor() const;
  // Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

struct StageShape {
  std::string tag;
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;

  bool operator==(const StageShape&) const = default;
};

struct StageShapeLedger {
  std::vector<StageShape> encoder;  // pre-downsample outputs, stage 1..5
  StageShape bottleneck;
  std::vector<StageShape> decoder;  // decoder stage 1 (deepest) .. 5

  bool operator==(const StageShapeLedger&) const = default;
};

// Shapes implied by the configuration for an input of height x width.
StageShapeLedger expected_ledger(const NetworkConfig& cfg, int64_t height, int64_t width);

// One resolution level: the encoder block and downsampler going down, the
// upsampler and decoder block coming back up.
class StageImpl : public torch::nn::Module {
 public:
  StageImpl(const NetworkConfig& cfg, int64_t level);

  blocks::EncoderBlock encoder{nullptr};
  torch::nn::Conv2d down{nullptr};  // 2x2 stride 2, doubles channels
  torch::nn::Conv2d up{nullptr};    // 1x1 after nearest 2x, halves channels
  blocks::DecoderBlock decoder{nullptr};
};
TORCH_MODULE(Stage);

class SkinMambaImpl : public torch::nn::Module {
 public:
  explicit SkinMambaImpl(const NetworkConfig& cfg);

  // (B, 3, H, W) -> (B, num_classes, H, W) logits.
  torch::Tensor forward(const torch::Tensor& x);

  const NetworkConfig& config() const { return cfg_; }

  // Called with tags "encoder{i}.skip", "bottleneck", "decoder{j}.skip" and
  // "decoder{j}.out"; decoder stage j consumes encoder stage 6 - j.
  blocks::Probe probe;

  torch::nn::Conv2d stem{nullptr};
  std::vector<Stage> stages;
  blocks::FBGM bottleneck{nullptr};  // null when use_fbgm is false
  torch::nn::Conv2d head{nullptr};

 private:
  NetworkConfig cfg_;
};
TORCH_MODULE(SkinMamba);

// Validates cfg, seeds the global generator and constructs the model.
SkinMamba build_model(const NetworkConfig& cfg, uint64_t seed = 42);

int64_t parameter_count(const torch::nn::Module& model);

// Runs one no-grad forward and records the instrumented stage shapes.
StageShapeLedger trace_ledger(SkinMambaImpl& model, const torch::Tensor& x);

}  // namespace skinmamba::network
