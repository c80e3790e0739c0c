#include "skinmamba/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "skinmamba/errors.hpp"

namespace skinmamba::training {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

nlohmann::json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

// Preprocessed, stacked batch of samples at the model input size.
std::pair<torch::Tensor, torch::Tensor> make_batch(std::span<const data::Sample> samples,
                                                   std::span<const size_t> indices,
                                                   const data::Normalization& norm,
                                                   int64_t height, int64_t width,
                                                   std::mt19937_64* rng) {
  std::vector<torch::Tensor> images, masks;
  images.reserve(indices.size());
  masks.reserve(indices.size());
  for (const size_t idx : indices) {
    auto t = data::preprocess(samples[idx], height, width, norm);
    if (rng != nullptr) std::tie(t.image, t.mask) = data::augment(t.image, t.mask, *rng);
    images.push_back(t.image);
    masks.push_back(t.mask);
  }
  return {torch::stack(images), torch::stack(masks)};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

bool has_trainable_parameters(const torch::nn::Module& model) {
  const auto params = model.parameters();
  return std::any_of(params.begin(), params.end(), [](const auto& p) { return p.requires_grad(); });
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr_min < lr0)) throw ConfigError("lr_min must be smaller than lr0");
  if (lr_min < 0) throw ConfigError("lr_min must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr0", c.lr0},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"weight_decay", c.weight_decay},
                     {"seed", c.seed},
                     {"early_stop_patience", c.early_stop_patience},
                     {"lr_min", c.lr_min},
                     {"loss", "bce_dice"},
                     {"eval_every", c.eval_every},
                     {"augment", c.augment},
                     {"deterministic", c.deterministic}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr0 = j.value("lr0", c.lr0);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.lr_min = j.value("lr_min", c.lr_min);
  if (j.contains("loss") && j.at("loss").get<std::string>() != "bce_dice") {
    throw ConfigError("unknown loss '" + j.at("loss").get<std::string>() + "' (expected bce_dice)");
  }
  c.eval_every = j.value("eval_every", c.eval_every);
  c.augment = j.value("augment", c.augment);
  c.deterministic = j.value("deterministic", c.deterministic);
}

double cosine_lr(int64_t epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch > cfg.epochs) {
    throw ContractError("epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(cfg.epochs) + "]");
  }
  const double phase = std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + std::cos(phase));
}

torch::Tensor loss_bce_dice(const torch::Tensor& logits, const torch::Tensor& target) {
  if (logits.sizes() != target.sizes()) {
    throw ShapeError("logits " + shape_string(logits.sizes().vec()) + " and target " +
                     shape_string(target.sizes().vec()) + " differ in shape");
  }
  constexpr double eps = 1e-5;
  const auto target_f = target.to(logits.scalar_type());
  const auto bce = torch::binary_cross_entropy_with_logits(logits, target_f);
  const auto prob = torch::sigmoid(logits);
  const auto dice = (2.0 * (prob * target_f).sum() + eps) / (prob.sum() + target_f.sum() + eps);
  return 0.5 * bce + 0.5 * (1.0 - dice);
}

EarlyStopping::EarlyStopping(int64_t patience) : patience_(patience) {
  if (patience < 1) throw ConfigError("early stopping patience must be >= 1");
}

bool EarlyStopping::update(std::optional<double> metric) {
  const bool improved =
      !seen_ || (metric && (!best_ || *metric > *best_));
  seen_ = true;
  if (improved) {
    best_ = metric;
    stale_ = 0;
  } else {
    ++stale_;
  }
  return improved;
}

metrics::ConfusionCounts evaluate(network::SkinMambaImpl& model, std::span<const data::Sample> samples,
                                  const data::Normalization& norm, int64_t batch_size) {
  if (samples.empty()) throw EmptyInputError("cannot evaluate an empty split");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const auto& net = model.config();
  model.eval();
  torch::NoGradGuard no_grad;
  metrics::ConfusionCounts counts;
  std::vector<size_t> indices(samples.size());
  std::iota(indices.begin(), indices.end(), size_t{0});
  for (size_t start = 0; start < indices.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(indices.size(), start + static_cast<size_t>(batch_size));
    const auto [images, masks] =
        make_batch(samples, std::span(indices).subspan(start, stop - start), norm,
                   net.input_height, net.input_width, nullptr);
    const auto logits = model.forward(images);
    // logistic(z) > 0.5 exactly when z > 0
    counts = metrics::accumulate(logits > 0, masks, counts);
  }
  return counts;
}

nlohmann::json evaluate_report(network::SkinMambaImpl& model, std::span<const data::Sample> samples,
                               const data::Normalization& norm, int64_t batch_size) {
  return metrics::report_json(evaluate(model, samples, norm, batch_size));
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json hist = nlohmann::json::array();
  std::vector<double> epoch_seconds;
  for (const auto& r : history) {
    nlohmann::json row{{"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.mean_loss}, {"improved", r.improved}};
    if (r.counts) row["evaluation"] = metrics::report_json(*r.counts);
    hist.push_back(std::move(row));
    epoch_seconds.push_back(r.seconds);
  }
  return nlohmann::json{{"config", config},
                        {"history", hist},
                        {"step_losses", step_losses},
                        {"best_epoch", best_epoch},
                        {"best_miou", optional_number(best_miou)},
                        {"checkpoints", checkpoints},
                        {"stopped_early", stopped_early},
                        {"timings", {{"total_seconds", total_seconds}, {"epoch_seconds", epoch_seconds}}}};
}

nlohmann::json config_snapshot(const network::NetworkConfig& net, const TrainConfig& cfg,
                               const data::Normalization& norm, const nlohmann::json& extra) {
  nlohmann::json j = extra.is_object() ? extra : nlohmann::json::object();
  j["network"] = net;
  j["train"] = cfg;
  j["normalization"] = {{"mean", norm.mean}, {"std", norm.stddev}};
  return j;
}

checkpoint::TensorMap optimizer_tensors(const torch::optim::AdamW& optimizer,
                                        const torch::nn::Module& model) {
  checkpoint::TensorMap out;
  const auto& state = optimizer.state();
  for (const auto& item : model.named_parameters(true)) {
    const auto it = state.find(item.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamWParamState&>(*it->second);
    out.emplace("adamw.exp_avg." + item.key(), s.exp_avg().detach().clone());
    out.emplace("adamw.exp_avg_sq." + item.key(), s.exp_avg_sq().detach().clone());
    out.emplace("adamw.step." + item.key(),
                torch::tensor({static_cast<float>(s.step())}, torch::kFloat32));
  }
  return out;
}

void enable_deterministic_mode() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
}

RunManifest train(network::SkinMambaImpl& model, const DataSplit& split, const TrainConfig& cfg,
                  const RunOptions& options) {
  cfg.validate();
  if (split.train.empty()) throw EmptyInputError("training split is empty");
  if (split.test.empty()) throw EmptyInputError("test split is empty");
  if (cfg.deterministic) enable_deterministic_mode();

  const auto& net = model.config();
  const auto t_start = Clock::now();
  RunManifest manifest;
  manifest.config = config_snapshot(net, cfg, split.normalization, options.config_extra);

  std::ofstream log;
  const bool persist = !options.run_dir.empty();
  if (persist) {
    fs::create_directories(options.run_dir);
    log.open(options.run_dir / "log.txt", std::ios::app);
    write_json(options.run_dir / "manifest.json", manifest.to_json());
  }
  auto log_line = [&](const std::string& line) {
    if (log) log << line << '\n' << std::flush;
  };

  auto optimizer = torch::optim::AdamW(
      model.parameters(), torch::optim::AdamWOptions(cfg.lr0)
                              .betas({cfg.beta1, cfg.beta2})
                              .weight_decay(cfg.weight_decay));
  const bool trainable = has_trainable_parameters(model);
  EarlyStopping stopper(cfg.early_stop_patience);
  int64_t step = 0;

  auto save = [&](const std::string& name, int64_t epoch) {
    if (!persist) return;
    checkpoint::Checkpoint ckpt;
    ckpt.config = manifest.config;
    ckpt.tensors = checkpoint::collect_tensors(model);
    ckpt.state.epoch = epoch;
    ckpt.state.step = step;
    ckpt.state.best_metric = manifest.best_miou;
    ckpt.state.best_epoch = manifest.best_epoch;
    ckpt.state.optimizer = optimizer_tensors(optimizer, model);
    const auto path = options.run_dir / (name + ".ckpt");
    checkpoint::write_checkpoint(path, ckpt);
    manifest.checkpoints[name] = path.string();
  };

  int64_t last_epoch = -1;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t_epoch = Clock::now();
    const double lr = cosine_lr(epoch, cfg);
    for (auto& group : optimizer.param_groups()) group.options().set_lr(lr);

    std::mt19937_64 rng(data::stream_seed(cfg.seed, 0, static_cast<uint64_t>(epoch)));
    std::vector<size_t> order(split.train.size());
    std::iota(order.begin(), order.end(), size_t{0});
    for (size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[data::uniform_index(rng, i + 1)]);

    model.train();
    double loss_sum = 0;
    int64_t batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      auto [images, masks] =
          make_batch(split.train, std::span(order).subspan(start, stop - start), split.normalization,
                     net.input_height, net.input_width, cfg.augment ? &rng : nullptr);
      const auto loss = loss_bce_dice(model.forward(images), masks);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches));
      }
      if (trainable) {
        optimizer.zero_grad();
        loss.backward();
        optimizer.step();
      }
      manifest.step_losses.push_back(value);
      loss_sum += value;
      ++batches;
      ++step;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.lr = lr;
    record.mean_loss = loss_sum / static_cast<double>(batches);
    const bool eval_epoch = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
    bool stop_now = false;
    if (eval_epoch) {
      record.counts = evaluate(model, split.test, split.normalization, cfg.batch_size);
      const auto miou = metrics::compute_metrics(*record.counts).miou;
      record.improved = stopper.update(miou);
      if (record.improved) {
        manifest.best_epoch = epoch;
        manifest.best_miou = miou;
        save("best", epoch);
      }
      stop_now = stopper.should_stop();
    }
    record.seconds = seconds_since(t_epoch);
    manifest.history.push_back(record);
    last_epoch = epoch;

    std::ostringstream line;
    line << "epoch " << epoch << " lr " << lr << " loss " << record.mean_loss;
    if (record.counts) line << " eval " << metrics::report_json(*record.counts)["metrics"].dump();
    log_line(line.str());
    if (options.on_epoch) options.on_epoch(record);
    if (persist) {
      manifest.total_seconds = seconds_since(t_start);
      write_json(options.run_dir / "manifest.json", manifest.to_json());
    }
    if (stop_now) {
      manifest.stopped_early = true;
      log_line("early stop after epoch " + std::to_string(epoch));
      break;
    }
  }

  save("last", last_epoch);
  manifest.total_seconds = seconds_since(t_start);
  if (persist) write_json(options.run_dir / "manifest.json", manifest.to_json());
  return manifest;
}

}  // namespace skinmamba::training
