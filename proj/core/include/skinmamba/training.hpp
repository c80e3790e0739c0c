#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "skinmamba/checkpoint.hpp"
#include "skinmamba/data.hpp"
#include "skinmamba/metrics.hpp"
#include "skinmamba/network.hpp"

namespace skinmamba::training {

enum class LossKind { BceDice };

struct TrainConfig {
  int64_t epochs = 300;
  int64_t batch_size = 32;
  double lr0 = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  uint64_t seed = 42;
  int64_t early_stop_patience = 50;  // counted in evaluations
  double lr_min = 1e-5;
  LossKind loss = LossKind::BceDice;
  int64_t eval_every = 1;  // epochs between test-split evaluations
  bool augment = true;
  bool deterministic = false;

  // Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// lr(t) = lr_min + (lr0 - lr_min) (1 + cos(pi t / epochs)) / 2, t in [0, epochs].
double cosine_lr(int64_t epoch, const TrainConfig& cfg);

// 0.5 * BCE-with-logits + 0.5 * (1 - soft Dice), Dice smoothed by 1e-5 and
// summed over the whole batch.
torch::Tensor loss_bce_dice(const torch::Tensor& logits, const torch::Tensor& target);

// Early stopping on a maximized metric. An undefined metric ranks below
// every defined value; the first evaluation always counts as improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(int64_t patience);

  // Returns true when `metric` improves on the best value so far.
  bool update(std::optional<double> metric);
  bool should_stop() const { return stale_ >= patience_; }
  std::optional<double> best() const { return best_; }

 private:
  int64_t patience_;
  int64_t stale_ = 0;
  std::optional<double> best_;
  bool seen_ = false;
};

// Per-channel-normalized dataset split, held at the model's input size.
struct DataSplit {
  std::span<const data::Sample> train;
  std::span<const data::Sample> test;
  data::Normalization normalization;
};

// Thresholds logistic(logits) at 0.5 and accumulates confusion counts over
// `samples` in eval mode. Throws EmptyInputError for an empty split.
metrics::ConfusionCounts evaluate(network::SkinMambaImpl& model,
                                  std::span<const data::Sample> samples,
                                  const data::Normalization& norm, int64_t batch_size);

// evaluate() rendered through metrics::report_json.
nlohmann::json evaluate_report(network::SkinMambaImpl& model, std::span<const data::Sample> samples,
                               const data::Normalization& norm, int64_t batch_size);

struct EpochRecord {
  int64_t epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  std::optional<metrics::ConfusionCounts> counts;  // set on evaluation epochs
  bool improved = false;
  double seconds = 0;
};

struct RunManifest {
  nlohmann::json config;
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;
  int64_t best_epoch = -1;
  std::optional<double> best_miou;
  std::map<std::string, std::string> checkpoints;
  bool stopped_early = false;
  double total_seconds = 0;

  nlohmann::json to_json() const;
};

struct RunOptions {
  // When set, receives manifest.json, log.txt, best.ckpt and last.ckpt.
  std::filesystem::path run_dir;
  // Extra configuration merged into the snapshot stored in checkpoints.
  nlohmann::json config_extra = nlohmann::json::object();
  std::function<void(const EpochRecord&)> on_epoch;
};

// Full configuration snapshot stored in checkpoints and manifests.
nlohmann::json config_snapshot(const network::NetworkConfig& net, const TrainConfig& cfg,
                               const data::Normalization& norm, const nlohmann::json& extra);

// Optimizer moments keyed "adamw.{exp_avg,exp_avg_sq,step}.<param name>".
checkpoint::TensorMap optimizer_tensors(const torch::optim::AdamW& optimizer,
                                        const torch::nn::Module& model);

// Switches the process to single-threaded, deterministic kernels.
void enable_deterministic_mode();

// Augment -> forward -> loss -> AdamW, with cosine learning rate per epoch,
// test-split evaluation every cfg.eval_every epochs, best/last checkpoints,
// and early stopping on test mIoU. Throws NumericError on a non-finite loss
// and IoError when a checkpoint cannot be written.
RunManifest train(network::SkinMambaImpl& model, const DataSplit& split, const TrainConfig& cfg,
                  const RunOptions& options = {});

}  // namespace skinmamba::training
