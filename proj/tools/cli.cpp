#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <set>
#include <sstream>

#include "skinmamba/checkpoint.hpp"
#include "skinmamba/data.hpp"
#include "skinmamba/errors.hpp"
#include "skinmamba/metrics.hpp"

namespace skinmamba::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class LockError : public Error {
 public:
  using Error::Error;
};

// Exclusive marker file in a run directory, removed on destruction.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) {
      throw LockError("run directory " + dir.string() + " is locked by another process (" +
                      path_.string() + ")");
    }
    std::fputs("locked\n", f);
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out[prefix] = j;
  }
}

std::map<std::string, json> default_leaves() {
  std::map<std::string, json> leaves;
  flatten(to_json(RunConfig{}), "", leaves);
  return leaves;
}

std::string key_list() {
  std::string s;
  for (const auto& k : valid_keys()) s += (s.empty() ? "" : ", ") + k;
  return s;
}

json::json_pointer pointer_of(const std::string& dotted) {
  std::string p = "/" + dotted;
  std::replace(p.begin(), p.end(), '.', '/');
  return json::json_pointer(p);
}

bool same_kind(const json& expected, const json& value) {
  if (expected.is_number()) return value.is_number();
  if (expected.is_boolean()) return value.is_boolean();
  if (expected.is_array()) return value.is_array() || value.is_number_integer();
  return value.is_string();
}

RunConfig from_tree(const json& tree) {
  RunConfig c;
  try {
    c.name = tree.at("name").get<std::string>();
    c.runs_dir = tree.at("runs_dir").get<std::string>();
    const auto& d = tree.at("dataset");
    c.dataset.name = d.at("name").get<std::string>();
    c.dataset.root = d.at("root").get<std::string>();
    c.dataset.ratio = d.at("ratio").get<double>();
    c.dataset.synthetic_count = d.at("synthetic_count").get<int>();
    c.dataset.overfit = d.at("overfit").get<bool>();
    c.network = tree.at("network").get<network::NetworkConfig>();
    c.train = tree.at("train").get<training::TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid configuration value: ") + e.what());
  }
  if (!(c.dataset.ratio > 0 && c.dataset.ratio < 1)) throw ConfigError("dataset.ratio must lie in (0, 1)");
  if (c.dataset.synthetic_count < 0) throw ConfigError("dataset.synthetic_count must be >= 0");
  if (c.name.empty() || c.name.find('/') != std::string::npos) {
    throw ConfigError("run name must be non-empty and free of '/'");
  }
  c.network.validate();
  c.train.validate();
  return c;
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---- data --------------------------------------------------------------

struct LoadedData {
  std::vector<data::Sample> train;
  std::vector<data::Sample> test;
  data::Normalization normalization;
  data::SplitManifest manifest;
};

void require_dataset(const DatasetConfig& d) {
  if (d.synthetic_count > 0) return;
  if (d.root.empty()) throw ConfigError("dataset.root is not set (or use dataset.synthetic_count)");
  if (!fs::is_directory(d.root)) throw ConfigError("dataset root does not exist: " + d.root.string());
}

// Every sample of the configured dataset, resized to the model input.
std::vector<data::Sample> load_samples(const RunConfig& cfg) {
  const int64_t h = cfg.network.input_height, w = cfg.network.input_width;
  std::vector<data::Sample> samples;
  if (cfg.dataset.synthetic_count > 0) {
    samples = data::synthetic_disks(cfg.dataset.synthetic_count, h, cfg.train.seed);
    if (w != h) {
      for (auto& s : samples) s = data::resize_sample(s, h, w);
    }
    return samples;
  }
  require_dataset(cfg.dataset);
  for (const auto& files : data::pair_dataset(cfg.dataset.root)) {
    samples.push_back(data::resize_sample(data::load_sample(files), h, w));
  }
  return samples;
}

LoadedData prepare_data(const RunConfig& cfg) {
  auto samples = load_samples(cfg);
  LoadedData d;
  if (cfg.dataset.overfit) {
    d.manifest.dataset_name = cfg.dataset.name;
    d.manifest.seed = cfg.train.seed;
    d.manifest.ratio = 1.0;
    for (const auto& s : samples) d.manifest.train_ids.push_back(s.id);
    d.manifest.test_ids = d.manifest.train_ids;
    d.train = samples;
    d.test = std::move(samples);
  } else {
    d.manifest = data::split(samples, cfg.dataset.ratio, cfg.train.seed, cfg.dataset.name);
    const std::set<std::string> train_ids(d.manifest.train_ids.begin(), d.manifest.train_ids.end());
    for (auto& s : samples) (train_ids.contains(s.id) ? d.train : d.test).push_back(std::move(s));
  }
  d.normalization = data::compute_normalization(d.train);
  d.manifest.normalization = d.normalization;
  return d;
}

json ledger_json(const network::StageShapeLedger& l) {
  auto row = [](const network::StageShape& s) {
    return json{{"tag", s.tag}, {"shape", {s.channels, s.height, s.width}}};
  };
  json enc = json::array(), dec = json::array();
  for (const auto& s : l.encoder) enc.push_back(row(s));
  for (const auto& s : l.decoder) dec.push_back(row(s));
  return {{"encoder", enc}, {"bottleneck", row(l.bottleneck)}, {"decoder", dec}};
}

data::Normalization normalization_from(const json& snapshot) {
  data::Normalization n;
  try {
    n.mean = snapshot.at("normalization").at("mean").get<std::array<double, 3>>();
    n.stddev = snapshot.at("normalization").at("std").get<std::array<double, 3>>();
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint config lacks normalization: ") + e.what());
  }
  return n;
}

RunConfig config_from_snapshot(const json& snapshot) {
  json tree = to_json(RunConfig{});
  for (const char* key : {"name", "dataset", "network", "train"}) {
    if (snapshot.contains(key)) tree[key].merge_patch(snapshot.at(key));
  }
  return from_tree(tree);
}

struct LoadedModel {
  RunConfig cfg;
  data::Normalization normalization;
  network::SkinMamba model{nullptr};
};

LoadedModel load_model(const fs::path& checkpoint_path) {
  const auto ckpt = checkpoint::read_checkpoint(checkpoint_path);
  LoadedModel m;
  m.cfg = config_from_snapshot(ckpt.config);
  m.normalization = normalization_from(ckpt.config);
  m.model = network::build_model(m.cfg.network, m.cfg.train.seed);
  checkpoint::restore_tensors(*m.model, ckpt.tensors);
  m.model->eval();
  return m;
}

// ---- commands ----------------------------------------------------------

struct Options {
  fs::path config;
  std::vector<std::string> overrides;
  fs::path run_dir;
  std::optional<uint64_t> seed;
  bool deterministic = false;
  std::optional<int64_t> epochs;
  fs::path checkpoint;
  fs::path images;
  fs::path out;
  fs::path data_root;
  std::string split = "test";
  bool trace = false;
};

std::vector<std::string> all_overrides(const Options& o) {
  auto ov = o.overrides;
  if (o.seed) ov.push_back("train.seed=" + std::to_string(*o.seed));
  if (o.epochs) ov.push_back("train.epochs=" + std::to_string(*o.epochs));
  if (o.deterministic) ov.push_back("train.deterministic=true");
  return ov;
}

training::RunManifest train_run(const RunConfig& cfg, const std::vector<std::string>& overrides,
                                const fs::path& run_dir, std::ostream& out, const json& more = json::object()) {
  require_dataset(cfg.dataset);
  fs::create_directories(run_dir);
  RunLock lock(run_dir);
  if (cfg.train.deterministic) training::enable_deterministic_mode();

  const auto data = prepare_data(cfg);
  data::write_manifest(run_dir / "split.txt", data.manifest);

  json extra{{"name", cfg.name},
             {"dataset", to_json(cfg)["dataset"]},
             {"overrides", overrides},
             {"split", {{"train", data.train.size()}, {"test", data.test.size()}}}};
  extra.update(more);
  const auto snapshot = training::config_snapshot(cfg.network, cfg.train, data.normalization, extra);
  write_json(run_dir / "config.json", snapshot);
  training::RunManifest initial;
  initial.config = snapshot;
  write_json(run_dir / "manifest.json", initial.to_json());

  auto model = network::build_model(cfg.network, cfg.train.seed);
  training::RunOptions options;
  options.run_dir = run_dir;
  options.config_extra = extra;
  options.on_epoch = [&out](const training::EpochRecord& r) {
    out << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.mean_loss;
    if (r.counts) {
      const auto m = metrics::report_json(*r.counts)["metrics"];
      out << " mIoU " << m["mIoU"].dump() << " DSC " << m["DSC"].dump();
    }
    out << '\n' << std::flush;
  };
  training::DataSplit split{data.train, data.test, data.normalization};
  return training::train(*model, split, cfg.train, options);
}

fs::path default_run_dir(const RunConfig& cfg, const Options& o, const std::string& suffix = {}) {
  return o.run_dir.empty() ? cfg.runs_dir / (cfg.name + suffix) : o.run_dir;
}

int cmd_train(const Options& o, std::ostream& out) {
  const auto overrides = all_overrides(o);
  const auto cfg = load_config(o.config, overrides);
  const auto run_dir = default_run_dir(cfg, o);
  const auto manifest = train_run(cfg, overrides, run_dir, out);
  out << "run directory: " << run_dir.string() << "\n";
  out << "best epoch " << manifest.best_epoch << (manifest.stopped_early ? " (stopped early)" : "") << "\n";
  return kExitOk;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  auto loaded = load_model(o.checkpoint);
  std::vector<data::Sample> samples;
  std::string source;
  if (!o.data_root.empty()) {
    if (!fs::is_directory(o.data_root)) throw ConfigError("data root does not exist: " + o.data_root.string());
    auto cfg = loaded.cfg;
    cfg.dataset.root = o.data_root;
    cfg.dataset.synthetic_count = 0;
    samples = load_samples(cfg);
    source = o.data_root.string();
  } else {
    auto data = prepare_data(loaded.cfg);
    if (o.split == "train") {
      samples = std::move(data.train);
    } else if (o.split == "test") {
      samples = std::move(data.test);
    } else {
      samples = std::move(data.train);
      samples.insert(samples.end(), data.test.begin(), data.test.end());
    }
    source = loaded.cfg.dataset.name + ":" + o.split;
  }
  auto report = training::evaluate_report(*loaded.model, samples, loaded.normalization,
                                          loaded.cfg.train.batch_size);
  report["dataset"] = source;
  report["images"] = samples.size();
  out << report.dump(2) << "\n";
  if (!o.out.empty()) write_json(o.out, report);
  return kExitOk;
}

int cmd_predict(const Options& o, std::ostream& out, std::ostream& err) {
  if (!fs::is_directory(o.images)) throw ConfigError("image directory does not exist: " + o.images.string());
  auto loaded = load_model(o.checkpoint);
  const auto& net = loaded.cfg.network;
  fs::create_directories(o.out);

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(o.images)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".bmp") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no images found in " + o.images.string());

  int skipped = 0, written = 0;
  torch::NoGradGuard no_grad;
  for (const auto& path : files) {
    const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
      err << "warning: skipping unreadable image " << path.string() << "\n";
      ++skipped;
      continue;
    }
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    data::Sample s;
    s.id = path.stem().string();
    s.image = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
    s.mask = torch::zeros({rgb.rows, rgb.cols}, torch::kUInt8);
    const auto t = data::preprocess(s, net.input_height, net.input_width, loaded.normalization);
    const auto logits = loaded.model->forward(t.image.unsqueeze(0));
    const auto small = (logits[0][0] > 0).to(torch::kUInt8).mul(255).contiguous();
    const cv::Mat small_mat(int(small.size(0)), int(small.size(1)), CV_8UC1, small.data_ptr<uint8_t>());
    cv::Mat mask;
    cv::resize(small_mat, mask, bgr.size(), 0, 0, cv::INTER_NEAREST);

    cv::Mat overlay = bgr.clone();
    cv::Mat tint(bgr.size(), bgr.type(), cv::Scalar(0, 0, 255));
    cv::Mat blended;
    cv::addWeighted(bgr, 0.5, tint, 0.5, 0.0, blended);
    blended.copyTo(overlay, mask);

    const auto stem = path.stem().string();
    if (!cv::imwrite((o.out / (stem + ".png")).string(), mask) ||
        !cv::imwrite((o.out / (stem + "_overlay.png")).string(), overlay)) {
      throw IoError("cannot write prediction for " + stem + " into " + o.out.string());
    }
    ++written;
  }
  out << "wrote " << written << " masks to " << o.out.string();
  if (skipped > 0) out << ", skipped " << skipped;
  out << "\n";
  return skipped > 0 ? kExitPartial : kExitOk;
}

struct AblationCell {
  std::string name;
  std::function<void(blocks::BlockConfig&)> apply;
};

std::vector<AblationCell> ablation_cells() {
  using blocks::MixerVariant;
  auto toggles = [](bool srssb, bool fbgm) {
    return [=](blocks::BlockConfig& b) {
      b.variant = MixerVariant::VSSB;
      b.use_srssb = srssb;
      b.use_fbgm = fbgm;
    };
  };
  auto mixer = [](MixerVariant v) {
    return [=](blocks::BlockConfig& b) {
      b.variant = v;
      b.use_srssb = true;
      b.use_fbgm = true;
    };
  };
  return {{"ver1", toggles(false, false)},         {"ver2", toggles(true, false)},
          {"ver3", toggles(false, true)},          {"ver4", toggles(true, true)},
          {"conv3x3", mixer(MixerVariant::Conv3x3)}, {"self_attention", mixer(MixerVariant::SelfAttention)}};
}

std::string cell(const json& v) { return v.is_null() ? "-" : v.dump(); }

int cmd_ablate(const Options& o, std::ostream& out, std::ostream& err) {
  const auto overrides = all_overrides(o);
  const auto base = load_config(o.config, overrides);
  require_dataset(base.dataset);
  const auto root = default_run_dir(base, o, "-ablation");
  fs::create_directories(root);

  json rows = json::array();
  int failures = 0;
  for (const auto& c : ablation_cells()) {
    auto cfg = base;
    c.apply(cfg.network.block);
    cfg.name = base.name + "-" + c.name;
    json row{{"cell", c.name},
             {"variant", std::string(blocks::to_string(cfg.network.block.variant))},
             {"use_srssb", cfg.network.block.use_srssb},
             {"use_fbgm", cfg.network.block.use_fbgm}};
    out << "== " << c.name << "\n";
    try {
      row["parameters"] = network::parameter_count(*network::build_model(cfg.network, cfg.train.seed));
      const auto manifest = train_run(cfg, overrides, root / c.name, out, {{"ablation_cell", c.name}});
      row["status"] = "ok";
      row["best_epoch"] = manifest.best_epoch;
      row["metrics"] = nullptr;
      for (const auto& r : manifest.history) {
        if (r.epoch == manifest.best_epoch && r.counts) row["metrics"] = metrics::report_json(*r.counts)["metrics"];
      }
    } catch (const std::exception& e) {
      ++failures;
      row["status"] = std::string("failed: ") + e.what();
      err << "ablation cell " << c.name << " failed: " << e.what() << "\n";
    }
    rows.push_back(row);
  }

  std::ostringstream table;
  table << "| cell | mixer | SRSSB | FBGM | params | mIoU | DSC | Acc | Sen | Spe | status |\n"
        << "|---|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const json m = r.contains("metrics") && r["metrics"].is_object() ? r["metrics"] : json::object();
    auto metric = [&](const char* k) { return m.contains(k) ? cell(m[k]) : std::string("-"); };
    table << "| " << r["cell"].get<std::string>() << " | " << r["variant"].get<std::string>() << " | "
          << (r["use_srssb"].get<bool>() ? "on" : "off") << " | " << (r["use_fbgm"].get<bool>() ? "on" : "off")
          << " | " << (r.contains("parameters") ? r["parameters"].dump() : "-") << " | " << metric("mIoU")
          << " | " << metric("DSC") << " | " << metric("Acc") << " | " << metric("Sen") << " | " << metric("Spe")
          << " | " << r["status"].get<std::string>() << " |\n";
  }
  write_json(root / "ablation.json", {{"base", to_json(base)}, {"cells", rows}});
  std::ofstream(root / "ablation.md") << table.str();
  out << table.str();
  return failures == 0 ? kExitOk : kExitPartial;
}

int cmd_inspect(const Options& o, std::ostream& out) {
  json report;
  if (!o.checkpoint.empty()) {
    const auto ckpt = checkpoint::read_checkpoint(o.checkpoint);
    int64_t scalars = 0;
    for (const auto& [name, t] : ckpt.tensors) scalars += t.numel();
    report = {{"config", ckpt.config},
              {"state",
               {{"epoch", ckpt.state.epoch},
                {"step", ckpt.state.step},
                {"best_epoch", ckpt.state.best_epoch},
                {"best_metric", ckpt.state.best_metric ? json(*ckpt.state.best_metric) : json(nullptr)},
                {"optimizer_tensors", ckpt.state.optimizer.size()}}},
              {"tensors", ckpt.tensors.size()},
              {"scalars", scalars}};
  } else {
    const auto cfg = load_config(o.config, all_overrides(o));
    auto model = network::build_model(cfg.network, cfg.train.seed);
    const auto h = cfg.network.input_height, w = cfg.network.input_width;
    report = {{"config", to_json(cfg)},
              {"parameters", network::parameter_count(*model)},
              {"expected_ledger", ledger_json(network::expected_ledger(cfg.network, h, w))}};
    if (o.trace) {
      model->eval();
      const auto traced = network::trace_ledger(*model, torch::zeros({1, cfg.network.input_channels, h, w}));
      report["traced_ledger"] = ledger_json(traced);
      report["ledger_matches"] = traced == network::expected_ledger(cfg.network, h, w);
    }
  }
  out << report.dump(2) << "\n";
  return kExitOk;
}

void add_run_options(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  sub->add_option("--set", o.overrides, "Override a configuration key, K=V (repeatable)");
  sub->add_option("--run-dir", o.run_dir, "Run directory (default: <runs_dir>/<name>)");
  sub->add_option("--seed", o.seed, "Random seed (train.seed)");
  sub->add_flag("--deterministic", o.deterministic, "Single-threaded, deterministic kernels");
  sub->add_option("--epochs", o.epochs, "Shorthand for --set train.epochs=N");
}

}  // namespace

nlohmann::json to_json(const RunConfig& c) {
  return json{{"name", c.name},
              {"runs_dir", c.runs_dir.string()},
              {"dataset",
               {{"name", c.dataset.name},
                {"root", c.dataset.root.string()},
                {"ratio", c.dataset.ratio},
                {"synthetic_count", c.dataset.synthetic_count},
                {"overfit", c.dataset.overfit}}},
              {"network", c.network},
              {"train", c.train}};
}

std::vector<std::string> valid_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, v] : default_leaves()) keys.push_back(k);
  return keys;
}

std::string resolve_key(const std::string& key) {
  const auto leaves = default_leaves();
  if (leaves.contains(key)) return key;
  for (const char* section : {"train.", "network.", "network.block.", "dataset."}) {
    if (leaves.contains(section + key)) return section + key;
  }
  throw ConfigError("unknown configuration key '" + key + "'; valid keys: " + key_list());
}

RunConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  const auto leaves = default_leaves();
  json tree = to_json(RunConfig{});
  if (!path.empty()) {
    const auto file = read_json(path);
    if (!file.is_object()) throw ConfigError(path.string() + " must hold a JSON object");
    std::map<std::string, json> given;
    flatten(file, "", given);
    for (const auto& [k, v] : given) {
      if (!leaves.contains(k)) {
        throw ConfigError("unknown configuration key '" + k + "' in " + path.string() + "; valid keys: " + key_list());
      }
    }
    tree.merge_patch(file);
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + ov + "' is not of the form K=V");
    const auto key = ov.substr(0, eq);
    const auto resolved = resolve_key(key);
    const auto value = parse_value(ov.substr(eq + 1));
    if (!same_kind(leaves.at(resolved), value)) {
      throw ConfigError("override " + resolved + "=" + ov.substr(eq + 1) + " has the wrong type (default " +
                        leaves.at(resolved).dump() + ")");
    }
    tree[pointer_of(resolved)] = value;
  }
  return from_tree(tree);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"SkinMamba lesion segmentation: train, evaluate, predict, ablate, inspect", "skinmamba"};
  app.require_subcommand(1);
  Options o;

  auto* train = app.add_subcommand("train", "Train one model and populate a run directory");
  add_run_options(train, o);

  auto* ablate = app.add_subcommand("ablate", "Train the six ablation configurations and tabulate them");
  add_run_options(ablate, o);

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint and print the metrics report");
  evaluate->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--data-root", o.data_root, "Evaluate every pair under this root instead");
  evaluate->add_option("--split", o.split, "Split of the configured dataset")
      ->check(CLI::IsMember({"train", "test", "all"}));
  evaluate->add_option("--out", o.out, "Also write the report to this file");

  auto* predict = app.add_subcommand("predict", "Write binary masks and overlays for a folder of images");
  predict->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  predict->add_option("--images", o.images, "Input image directory")->required();
  predict->add_option("--out", o.out, "Output directory")->required();

  auto* inspect = app.add_subcommand("inspect", "Print configuration, parameter count and stage shapes");
  inspect->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  inspect->add_option("--set", o.overrides, "Override a configuration key, K=V (repeatable)");
  inspect->add_option("--checkpoint", o.checkpoint, "Describe a checkpoint instead")->check(CLI::ExistingFile);
  inspect->add_flag("--trace", o.trace, "Run one forward pass and record the traced stage shapes");

  std::vector<std::string> argv_store{"skinmamba"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train->parsed()) return cmd_train(o, out);
    if (ablate->parsed()) return cmd_ablate(o, out, err);
    if (evaluate->parsed()) return cmd_evaluate(o, out);
    if (predict->parsed()) return cmd_predict(o, out, err);
    if (inspect->parsed()) return cmd_inspect(o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const LockError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const PairingError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const EmptyInputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitPartial;
  }
  return kExitUsage;
}

}  // namespace skinmamba::cli
