#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

namespace skinmamba::checkpoint {

// Little-endian archive:
//
//   "SKMBCKPT" u32 version u32 section_count
//   section := tag[4] u64 payload_bytes payload
//     CONF  canonical JSON text of the run configuration
//     TENS  tensor table of model parameters and buffers
//     TRST  u32 json_bytes, JSON training counters, then a tensor table of
//           optimizer state
//   tensor table := u32 count, then per entry
//     u32 name_bytes, name, u32 ndim, u64 dims[ndim], f32 data[prod(dims)]
//
// Tensor names are the module's dotted paths (stage{i}.{block}.{layer}...).
using TensorMap = std::map<std::string, torch::Tensor>;

inline constexpr uint32_t kFormatVersion = 1;

struct TrainingState {
  int64_t epoch = 0;
  int64_t step = 0;
  std::optional<double> best_metric;
  int64_t best_epoch = -1;
  TensorMap optimizer;

  bool operator==(const TrainingState& other) const;
};

struct Checkpoint {
  nlohmann::json config;
  TensorMap tensors;
  TrainingState state;
};

// Parameters and floating-point buffers of `module`, detached, float32, CPU.
TensorMap collect_tensors(const torch::nn::Module& module);

// Copies `tensors` into `module`. Names and shapes must match exactly; any
// missing, extra or mis-shaped entry raises IoError.
void restore_tensors(torch::nn::Module& module, const TensorMap& tensors);

// Writes atomically (temporary file + rename). Throws IoError.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Throws IoError on unreadable or malformed archives.
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace skinmamba::checkpoint
