#include <gtest/gtest.h>
#include <torch/torch.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "skinmamba/checkpoint.hpp"
#include "skinmamba/errors.hpp"
#include "skinmamba/training.hpp"

using namespace skinmamba;
using namespace skinmamba::training;
namespace fs = std::filesystem;
namespace st = skinmamba::testing;

namespace {

network::NetworkConfig tiny() {
  network::NetworkConfig c;
  c.input_height = c.input_width = 32;
  c.base_channels = 4;
  c.block.ssm_state_dim = 4;
  return c;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("skinmamba_train_" + name);
  fs::remove_all(dir);
  return dir;
}

// Switches every BatchNorm to a fixed-statistics mode so frozen weights
// produce identical outputs from one epoch to the next.
void freeze(torch::nn::Module& model) {
  for (auto& p : model.parameters()) p.requires_grad_(false);
  for (auto& m : model.modules()) {
    if (auto* bn = m->as<torch::nn::BatchNorm2d>()) bn->options.momentum(0.0);
  }
}

}  // namespace

TEST(CosineLr, Endpoints) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(cosine_lr(0, c), 1e-3);
  EXPECT_NEAR(cosine_lr(c.epochs, c), 1e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(c.epochs / 2, c), 5.05e-4, 1e-15);
  EXPECT_THROW(cosine_lr(-1, c), ContractError);
  EXPECT_THROW(cosine_lr(c.epochs + 1, c), ContractError);
}

TEST(CosineLr, NonIncreasing) {
  TrainConfig c;
  for (int64_t t = 1; t <= c.epochs; ++t) EXPECT_LE(cosine_lr(t, c), cosine_lr(t - 1, c));
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.lr_min = c.lr0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.early_stop_patience = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  const nlohmann::json j = c;
  EXPECT_EQ(j.at("epochs"), 300);
  EXPECT_EQ(j.at("batch_size"), 32);
  EXPECT_EQ(j.at("seed"), 42);
  auto bad = j;
  bad["loss"] = "focal";
  EXPECT_THROW(bad.get<TrainConfig>(), ConfigError);
}

TEST(Loss, PerfectFitLimit) {
  const auto loss = loss_bce_dice(torch::full({1, 1, 4, 4}, 20.0), torch::ones({1, 1, 4, 4}));
  EXPECT_LT(loss.item<double>(), 1e-3);
}

TEST(Loss, ZeroLogitsHalfTarget) {
  auto target = torch::zeros({1, 1, 4, 4}, torch::kFloat64);
  target.narrow(2, 0, 2).fill_(1.0);
  const auto loss = loss_bce_dice(torch::zeros({1, 1, 4, 4}, torch::kFloat64), target).item<double>();
  // p = 0.5 everywhere: BCE = ln 2, Dice = (2*4 + eps) / (8 + 8 + eps)
  const double eps = 1e-5;
  const double expected = 0.5 * std::log(2.0) + 0.5 * (1.0 - (8.0 + eps) / (16.0 + eps));
  EXPECT_NEAR(loss, expected, 1e-12);
}

TEST(Loss, NonNegativeAndShapeChecked) {
  torch::manual_seed(1);
  for (int k = 0; k < 20; ++k) {
    const auto l = loss_bce_dice(torch::randn({2, 1, 5, 5}) * 5, torch::randint(0, 2, {2, 1, 5, 5}).to(torch::kFloat32));
    EXPECT_GE(l.item<double>(), 0.0);
  }
  EXPECT_THROW(loss_bce_dice(torch::zeros({1, 1, 2, 2}), torch::zeros({1, 1, 2, 3})), ShapeError);
}

TEST(Loss, GradientCheck) {
  torch::manual_seed(2);
  const auto logits = torch::randn({1, 1, 4, 4}, torch::kFloat64).requires_grad_(true);
  const auto target = torch::randint(0, 2, {1, 1, 4, 4}).to(torch::kFloat64);
  const auto r = st::gradcheck([&] { return loss_bce_dice(logits, target); }, {{"logits", logits}}, 16, 1e-6, 2);
  EXPECT_EQ(r.within_tight, r.checked) << r.summary();
}

TEST(EarlyStopping, CountsStaleEvaluations) {
  EarlyStopping s(2);
  EXPECT_TRUE(s.update(0.5));
  EXPECT_FALSE(s.update(0.5));
  EXPECT_FALSE(s.should_stop());
  EXPECT_TRUE(s.update(0.6));
  EXPECT_FALSE(s.update(std::nullopt));
  EXPECT_FALSE(s.update(0.1));
  EXPECT_TRUE(s.should_stop());
  EXPECT_DOUBLE_EQ(*s.best(), 0.6);
}

TEST(EarlyStopping, UndefinedRanksBelowDefined) {
  EarlyStopping s(3);
  EXPECT_TRUE(s.update(std::nullopt));
  EXPECT_TRUE(s.update(0.0));
  EXPECT_THROW(EarlyStopping(0), ConfigError);
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParameters) {
  auto p = torch::randn({5}).requires_grad_(true);
  const auto before = p.detach().clone();
  torch::optim::AdamW opt({p}, torch::optim::AdamWOptions(1e-3).weight_decay(0.0));
  p.mutable_grad() = torch::zeros_like(p);
  for (int k = 0; k < 3; ++k) opt.step();
  EXPECT_TRUE(torch::equal(p.detach(), before));
}

TEST(Evaluate, AllForegroundPrediction) {
  auto model = network::build_model(tiny());
  {
    torch::NoGradGuard no_grad;
    model->head->weight.zero_();
    model->head->bias.fill_(5.0);
  }
  auto samples = data::synthetic_disks(3, 32, 1);
  for (auto& s : samples) s.mask.fill_(1);
  const auto report = evaluate_report(*model, samples, {}, 2);
  const auto& m = report.at("metrics");
  for (const char* k : {"mIoU", "DSC", "Acc", "Sen"}) EXPECT_DOUBLE_EQ(m.at(k).get<double>(), 100.0) << k;
  EXPECT_TRUE(m.at("Spe").is_null());
  EXPECT_EQ(report, evaluate_report(*model, samples, {}, 3));
  EXPECT_THROW(evaluate(*model, std::span<const data::Sample>(), {}, 2), EmptyInputError);
}

TEST(Train, FrozenModelStopsAfterTwoEvaluations) {
  auto model = network::build_model(tiny());
  freeze(*model);
  const auto samples = data::synthetic_disks(4, 32, 2);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 4;
  cfg.early_stop_patience = 1;
  cfg.augment = false;
  const auto m = train(*model, {samples, samples, {}}, cfg);
  EXPECT_TRUE(m.stopped_early);
  ASSERT_EQ(m.history.size(), 2u);
  EXPECT_TRUE(m.history[0].improved);
  EXPECT_FALSE(m.history[1].improved);
  EXPECT_EQ(m.best_epoch, 0);
}

TEST(Train, WritesRunDirectoryAndResumableCheckpoints) {
  const auto dir = scratch("rundir");
  auto model = network::build_model(tiny());
  const auto samples = data::synthetic_disks(6, 32, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  int calls = 0;
  RunOptions opts;
  opts.run_dir = dir;
  opts.config_extra = {{"name", "unit"}};
  opts.on_epoch = [&](const EpochRecord&) { ++calls; };
  const auto m = train(*model, {std::span(samples).subspan(0, 4), std::span(samples).subspan(4), {}}, cfg, opts);
  EXPECT_EQ(calls, 3);
  EXPECT_EQ(m.history.size(), 3u);
  EXPECT_EQ(m.step_losses.size(), 3u);
  for (const char* f : {"manifest.json", "log.txt", "best.ckpt", "last.ckpt"}) EXPECT_TRUE(fs::exists(dir / f)) << f;

  const auto last = checkpoint::read_checkpoint(dir / "last.ckpt");
  EXPECT_EQ(last.state.epoch, 2);
  EXPECT_EQ(last.state.step, 3);
  EXPECT_EQ(last.config.at("name"), "unit");
  EXPECT_TRUE(last.state.optimizer.contains("adamw.exp_avg.stem.weight"));
  EXPECT_EQ(last.state.optimizer.at("adamw.step.stem.weight").item<float>(), 3.0f);
  auto fresh = network::build_model(tiny(), 1);
  checkpoint::restore_tensors(*fresh, last.tensors);
  EXPECT_EQ(evaluate_report(*fresh, samples, {}, 4), evaluate_report(*model, samples, {}, 4));

  // best-epoch metric equals the max of the evaluated history
  double best = -1;
  for (const auto& r : m.history) best = std::max(best, *metrics::compute_metrics(*r.counts).miou);
  EXPECT_DOUBLE_EQ(*m.best_miou, best);
}

TEST(Train, LossDropsOnOverfitSet) {
  auto model = network::build_model(tiny());
  const auto samples = data::synthetic_disks(4, 32, 4);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.eval_every = 20;
  cfg.augment = false;
  cfg.lr0 = 1e-2;  // the tiny model needs a larger step to move in 20 steps
  const auto m = train(*model, {samples, samples, {}}, cfg);
  ASSERT_EQ(m.step_losses.size(), 20u);
  EXPECT_LT(m.step_losses.back(), 0.5 * m.step_losses.front());
}

TEST(Train, NonFiniteLossNamesCoordinates) {
  auto model = network::build_model(tiny());
  {
    torch::NoGradGuard no_grad;
    model->head->bias.fill_(NAN);
  }
  const auto samples = data::synthetic_disks(2, 32, 5);
  TrainConfig cfg;
  cfg.epochs = 2;
  try {
    train(*model, {samples, samples, {}}, cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0, batch 0"), std::string::npos) << e.what();
  }
}

TEST(Train, SameSeedSameLosses) {
  const auto samples = data::synthetic_disks(4, 32, 6);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.deterministic = true;
  auto a = network::build_model(tiny(), 42);
  auto b = network::build_model(tiny(), 42);
  const auto ma = train(*a, {samples, samples, {}}, cfg);
  const auto mb = train(*b, {samples, samples, {}}, cfg);
  EXPECT_EQ(ma.step_losses, mb.step_losses);
}
