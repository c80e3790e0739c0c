#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "skinmamba/network.hpp"
#include "skinmamba/scan.hpp"
#include "skinmamba/ss2d.hpp"

using namespace skinmamba;
using namespace skinmamba::scan;

namespace {

// args: sequence length, channels
void BM_ScanFused(benchmark::State& state) {
  torch::manual_seed(0);
  SelectiveScan s(state.range(1), 16);
  const auto x = torch::randn({1, state.range(0), state.range(1)});
  torch::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(selective_scan(x, *s));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ScanFused)->Args({256, 16})->Args({3136, 16})->Args({3136, 64})->Unit(benchmark::kMillisecond);

void BM_ScanSequential(benchmark::State& state) {
  torch::manual_seed(0);
  SelectiveScan s(state.range(1), 16);
  const auto x = torch::randn({1, state.range(0), state.range(1)});
  torch::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(selective_scan_sequential(x, *s));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ScanSequential)->Args({256, 16})->Unit(benchmark::kMillisecond);

void BM_ScanFusedBackward(benchmark::State& state) {
  torch::manual_seed(0);
  SelectiveScan s(16, 16);
  const auto x = torch::randn({1, state.range(0), 16}).requires_grad_(true);
  for (auto _ : state) selective_scan(x, *s).sum().backward();
}
BENCHMARK(BM_ScanFusedBackward)->Arg(256)->Arg(3136)->Unit(benchmark::kMillisecond);

// args: side, channels
void BM_SS2D(benchmark::State& state) {
  torch::manual_seed(0);
  SS2D m(state.range(1), 16);
  const auto f = torch::randn({1, state.range(1), state.range(0), state.range(0)});
  torch::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(m->forward(f));
}
BENCHMARK(BM_SS2D)->Args({14, 64})->Args({56, 16})->Unit(benchmark::kMillisecond);

void BM_NetworkForward(benchmark::State& state) {
  network::NetworkConfig cfg;
  cfg.input_height = cfg.input_width = state.range(0);
  auto model = network::build_model(cfg);
  model->eval();
  const auto x = torch::randn({1, 3, state.range(0), state.range(0)});
  torch::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model->forward(x));
}
BENCHMARK(BM_NetworkForward)->Arg(64)->Arg(224)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
