#include "skinmamba/network.hpp"

#include <string>

#include "skinmamba/errors.hpp"

namespace skinmamba::network {
namespace {

namespace F = torch::nn::functional;

blocks::BlockConfig stage_block(const NetworkConfig& cfg, int64_t channels) {
  blocks::BlockConfig b = cfg.block;
  b.channels = channels;
  return b;
}

}  // namespace

int64_t NetworkConfig::stage_channels(int64_t stage) const {
  return base_channels << (stage - 1);
}

int64_t NetworkConfig::size_divisor() const { return int64_t{1} << num_stages; }

void NetworkConfig::validate() const {
  if (num_stages != kNumStages) {
    throw ConfigError("num_stages is fixed at " + std::to_string(kNumStages) + ", got " +
                      std::to_string(num_stages));
  }
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
  const int64_t div = size_divisor();
  if (input_height < div || input_width < div || input_height % div != 0 ||
      input_width % div != 0) {
    throw ConfigError("input size " + std::to_string(input_height) + "x" +
                      std::to_string(input_width) + " must be a positive multiple of " +
                      std::to_string(div) + " (2^num_stages) in both dimensions");
  }
  for (int64_t s = 1; s <= num_stages; ++s) stage_block(*this, stage_channels(s)).validate();
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"base_channels", c.base_channels},
                     {"num_stages", c.num_stages},
                     {"num_classes", c.num_classes},
                     {"input_channels", c.input_channels},
                     {"input_size", {c.input_height, c.input_width}},
                     {"skip_mode", std::string(blocks::to_string(c.skip_mode))},
                     {"block", c.block}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c.base_channels = j.value("base_channels", c.base_channels);
  c.num_stages = j.value("num_stages", c.num_stages);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.input_channels = j.value("input_channels", c.input_channels);
  if (j.contains("input_size")) {
    const auto& s = j.at("input_size");
    if (s.is_array() && s.size() == 2) {
      c.input_height = s[0].get<int64_t>();
      c.input_width = s[1].get<int64_t>();
    } else if (s.is_number_integer()) {
      c.input_height = c.input_width = s.get<int64_t>();
    } else {
      throw ConfigError("input_size must be an integer or [height, width]");
    }
  }
  if (j.contains("skip_mode")) {
    c.skip_mode = blocks::skip_mode_from_string(j.at("skip_mode").get<std::string>());
  }
  if (j.contains("block")) j.at("block").get_to(c.block);
}

StageShapeLedger expected_ledger(const NetworkConfig& cfg, int64_t height, int64_t width) {
  StageShapeLedger ledger;
  for (int64_t i = 1; i <= cfg.num_stages; ++i) {
    const int64_t scale = int64_t{1} << (i - 1);
    ledger.encoder.push_back({"encoder" + std::to_string(i) + ".skip", cfg.stage_channels(i),
                              height / scale, width / scale});
  }
  const int64_t deep = cfg.size_divisor();
  ledger.bottleneck = {"bottleneck", cfg.base_channels * deep, height / deep, width / deep};
  for (int64_t j = 1; j <= cfg.num_stages; ++j) {
    auto shape = ledger.encoder[static_cast<size_t>(cfg.num_stages - j)];
    shape.tag = "decoder" + std::to_string(j) + ".out";
    ledger.decoder.push_back(shape);
  }
  return ledger;
}

StageImpl::StageImpl(const NetworkConfig& cfg, int64_t level) {
  const int64_t ch = cfg.stage_channels(level);
  const auto block = stage_block(cfg, ch);
  encoder = register_module("encoder", blocks::EncoderBlock(block));
  down = register_module("down",
                         torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 2 * ch, 2).stride(2)));
  up = register_module("up", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * ch, ch, 1)));
  decoder = register_module("decoder", blocks::DecoderBlock(block, cfg.skip_mode));
}

SkinMambaImpl::SkinMambaImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  stem = register_module(
      "stem", torch::nn::Conv2d(
                  torch::nn::Conv2dOptions(cfg.input_channels, cfg.base_channels, 3).padding(1)));
  for (int64_t i = 1; i <= cfg.num_stages; ++i) {
    stages.push_back(register_module("stage" + std::to_string(i), Stage(cfg, i)));
  }
  const int64_t deep = cfg.stage_channels(cfg.num_stages) * 2;
  if (cfg.block.use_fbgm) {
    bottleneck = register_module("bottleneck", blocks::FBGM(deep, cfg.block.csffl_expansion));
  }
  head = register_module(
      "head", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.base_channels, cfg.num_classes, 1)));
}

torch::Tensor SkinMambaImpl::forward(const torch::Tensor& x) {
  const int64_t div = cfg_.size_divisor();
  if (x.dim() != 4 || x.size(1) != cfg_.input_channels || x.size(2) < div || x.size(3) < div ||
      x.size(2) % div != 0 || x.size(3) % div != 0) {
    throw ShapeError("model expects (B, " + std::to_string(cfg_.input_channels) +
                     ", H, W) with H and W positive multiples of " + std::to_string(div) +
                     ", got " + shape_string(x.sizes().vec()));
  }
  auto h = stem->forward(x);
  std::vector<torch::Tensor> skips;
  skips.reserve(stages.size());
  for (size_t i = 0; i < stages.size(); ++i) {
    auto encoded = stages[i]->encoder->forward(h);
    if (probe) probe("encoder" + std::to_string(i + 1) + ".skip", encoded.skip);
    skips.push_back(encoded.skip);
    h = stages[i]->down->forward(encoded.out);
  }
  if (bottleneck) h = bottleneck->forward(h);
  if (probe) probe("bottleneck", h);
  for (size_t i = stages.size(); i-- > 0;) {
    const auto tag = "decoder" + std::to_string(stages.size() - i);
    const auto upsampled = F::interpolate(
        h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    const auto up = stages[i]->up->forward(upsampled);
    if (probe) probe(tag + ".skip", skips[i]);
    h = stages[i]->decoder->forward(up, skips[i]);
    if (probe) probe(tag + ".out", h);
  }
  return head->forward(h);
}

SkinMamba build_model(const NetworkConfig& cfg, uint64_t seed) {
  cfg.validate();
  torch::manual_seed(seed);
  return SkinMamba(cfg);
}

int64_t parameter_count(const torch::nn::Module& model) {
  int64_t total = 0;
  for (const auto& p : model.parameters()) total += p.numel();
  return total;
}

StageShapeLedger trace_ledger(SkinMambaImpl& model, const torch::Tensor& x) {
  StageShapeLedger ledger;
  auto shape_of = [](const std::string& tag, const torch::Tensor& t) {
    return StageShape{tag, t.size(1), t.size(2), t.size(3)};
  };
  auto saved = model.probe;
  model.probe = [&](const std::string& tag, const torch::Tensor& t) {
    if (tag.ends_with(".skip") && tag.starts_with("encoder")) {
      ledger.encoder.push_back(shape_of(tag, t));
    } else if (tag == "bottleneck") {
      ledger.bottleneck = shape_of(tag, t);
    } else if (tag.ends_with(".out")) {
      ledger.decoder.push_back(shape_of(tag, t));
    }
    if (saved) saved(tag, t);
  };
  try {
    torch::NoGradGuard no_grad;
    model.forward(x);
  } catch (...) {
    model.probe = saved;
    throw;
  }
  model.probe = saved;
  return ledger;
}

}  // namespace skinmamba::network
