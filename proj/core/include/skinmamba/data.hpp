#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace skinmamba::data {

// One dermoscopy image with its lesion mask.
struct Sample {
  std::string id;
  torch::Tensor image;  // (H, W, 3) uint8 RGB
  torch::Tensor mask;   // (H, W) uint8 in {0, 1}
};

struct SampleFiles {
  std::string id;
  std::filesystem::path image;
  std::filesystem::path mask;
};

// Pairs root/images/* with root/masks/*. A mask matches an image when its
// stem equals the image stem, optionally followed by "_segmentation" (the
// ISIC naming). Result is sorted by id. Throws IoError, PairingError or
// EmptyInputError.
std::vector<SampleFiles> pair_dataset(const std::filesystem::path& root);

// Decodes one pair; masks are thresholded at > 127. Throws IoError.
Sample load_sample(const SampleFiles& files);

std::vector<Sample> load_dataset(const std::filesystem::path& root);

// Writes images/<id>.png and masks/<id>.png (mask stored as 0/255).
void write_dataset(const std::filesystem::path& root, std::span<const Sample> samples);

struct Normalization {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> stddev{0.5, 0.5, 0.5};
};

// Per-channel mean/std of the [0, 1]-scaled pixels of `samples`.
Normalization compute_normalization(std::span<const Sample> samples);

struct SplitManifest {
  std::string dataset_name;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  uint64_t seed = 42;
  double ratio = 0.7;
  Normalization normalization;
};

// Train-set size for `total` samples. At ratio 0.7 the two ISIC totals map
// to the published split sizes (2150 -> 1500, 2694 -> 1886); otherwise
// round(total * ratio) clamped to [1, total - 1].
int64_t train_count(int64_t total, double ratio);

// Sorts ids, shuffles them with a seeded portable Fisher-Yates and cuts at
// train_count. Both output lists are sorted. Throws ConfigError for a ratio
// outside (0, 1) and ContractError for fewer than two ids.
SplitManifest split(std::vector<std::string> ids, double ratio, uint64_t seed,
                    std::string dataset_name = {});
SplitManifest split(std::span<const Sample> samples, double ratio, uint64_t seed,
                    std::string dataset_name = {});

// First line: JSON header; remaining lines: "id,train" or "id,test".
void write_manifest(const std::filesystem::path& path, const SplitManifest& manifest);
SplitManifest read_manifest(const std::filesystem::path& path);

// Bilinear image / nearest mask resize, keeping uint8 storage.
Sample resize_sample(const Sample& s, int64_t height, int64_t width);

struct Tensors {
  torch::Tensor image;  // (3, H, W) float, normalized
  torch::Tensor mask;   // (1, H, W) float in {0, 1}
};

// Resize (bilinear image, nearest mask), scale to [0, 1], normalize, and
// move channels first.
Tensors preprocess(const Sample& s, int64_t height, int64_t width, const Normalization& norm);

// The geometric transform applied identically to image and mask.
struct AugmentPlan {
  bool hflip = false;
  bool vflip = false;
  int quarter_turns = 0;  // counter-clockwise, 0..3

  bool is_identity() const { return !hflip && !vflip && quarter_turns == 0; }
};

AugmentPlan draw_augment_plan(std::mt19937_64& rng);

// Works on channel-first tensors (C, H, W).
std::pair<torch::Tensor, torch::Tensor> apply_augment(const AugmentPlan& plan,
                                                      const torch::Tensor& image,
                                                      const torch::Tensor& mask);

std::pair<torch::Tensor, torch::Tensor> augment(const torch::Tensor& image,
                                                const torch::Tensor& mask, std::mt19937_64& rng);

// Seed of the random stream owned by (worker, epoch) under a global seed.
uint64_t stream_seed(uint64_t global_seed, uint64_t worker, uint64_t epoch);

// Uniform index in [0, n) by rejection sampling; identical on every platform.
uint64_t uniform_index(std::mt19937_64& rng, uint64_t n);

// Skin-toned noisy images each holding one darker disk, with the disk as mask.
std::vector<Sample> synthetic_disks(int count, int64_t size, uint64_t seed);

}  // namespace skinmamba::data
