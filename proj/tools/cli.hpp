#pragma once

#include <filesystem>
#include <iosfwd>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "skinmamba/network.hpp"
#include "skinmamba/training.hpp"

namespace skinmamba::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitPartial = 1;
inline constexpr int kExitUsage = 2;

struct DatasetConfig {
  std::string name = "dataset";
  std::filesystem::path root;
  double ratio = 0.7;
  // Synthetic disk images stand in for a dataset root when count > 0.
  int synthetic_count = 0;
  // Train and evaluate on the same samples (overfit smoke runs).
  bool overfit = false;
};

struct RunConfig {
  std::string name = "run";
  std::filesystem::path runs_dir = "runs";
  DatasetConfig dataset;
  network::NetworkConfig network;
  training::TrainConfig train;
};

nlohmann::json to_json(const RunConfig& c);

// Dotted names of every settable leaf ("train.epochs", "network.block.variant", ...).
std::vector<std::string> valid_keys();

// Resolves a --set key. Bare keys are looked up in train, network,
// network.block, dataset and the top level, in that order. Throws
// ConfigError listing the valid keys.
std::string resolve_key(const std::string& key);

// Loads `path` (empty: defaults), applies "K=V" overrides and validates.
// Throws ConfigError for unknown keys or ill-typed values.
RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

// Entry point shared by the executable and the tests.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace skinmamba::cli
