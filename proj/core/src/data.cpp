#include "skinmamba/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <set>
#include <sstream>

#include "skinmamba/errors.hpp"

namespace skinmamba::data {
namespace {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool is_image_file(const fs::path& p) {
  const auto ext = lower(p.extension().string());
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png";
}

std::map<std::string, fs::path> list_files(const fs::path& dir, bool png_only) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) throw IoError("missing directory " + dir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto& p = entry.path();
    if (png_only ? lower(p.extension().string()) != ".png" : !is_image_file(p)) continue;
    out.emplace(p.stem().string(), p);
  }
  return out;
}

std::string offender_list(const std::vector<std::string>& names) {
  std::ostringstream out;
  const size_t shown = std::min<size_t>(names.size(), 10);
  for (size_t i = 0; i < shown; ++i) out << (i ? ", " : "") << names[i];
  if (names.size() > shown) out << " (+" << names.size() - shown << " more)";
  return out.str();
}

cv::Mat read_image(const fs::path& path, int flags) {
  cv::Mat m = cv::imread(path.string(), flags);
  if (m.empty()) throw IoError("cannot read image " + path.string());
  return m;
}

void write_png(const fs::path& path, const cv::Mat& m) {
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write image " + path.string());
}

torch::Tensor resize_bilinear(const torch::Tensor& nchw, int64_t height, int64_t width) {
  if (nchw.size(2) == height && nchw.size(3) == width) return nchw;
  return F::interpolate(nchw, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{height, width})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
}

torch::Tensor resize_nearest(const torch::Tensor& nchw, int64_t height, int64_t width) {
  if (nchw.size(2) == height && nchw.size(3) == width) return nchw;
  return F::interpolate(nchw, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{height, width})
                                  .mode(torch::kNearest));
}

void check_sample(const Sample& s) {
  if (s.image.dim() != 3 || s.image.size(2) != 3 || s.mask.dim() != 2) {
    throw ShapeError("sample '" + s.id + "' must hold an (H, W, 3) image and an (H, W) mask");
  }
  if (s.image.size(0) == 0 || s.image.size(1) == 0) {
    throw EmptyInputError("sample '" + s.id + "' has a zero-pixel image");
  }
  if (s.image.size(0) != s.mask.size(0) || s.image.size(1) != s.mask.size(1)) {
    throw ShapeError("sample '" + s.id + "' image and mask sizes differ");
  }
}

nlohmann::json normalization_json(const Normalization& n) {
  return {{"mean", n.mean}, {"std", n.stddev}};
}

void check_id(const std::string& id) {
  if (id.empty() || id.find_first_of(",\n\r") != std::string::npos) {
    throw ConfigError("sample id '" + id + "' cannot be stored in a split manifest");
  }
}

}  // namespace

std::vector<SampleFiles> pair_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset root does not exist: " + root.string());
  const auto images = list_files(root / "images", false);
  const auto masks = list_files(root / "masks", true);
  if (images.empty() && masks.empty()) throw EmptyInputError("dataset at " + root.string() + " is empty");

  std::vector<SampleFiles> pairs;
  std::set<std::string> used_masks;
  std::vector<std::string> orphans;
  for (const auto& [stem, image_path] : images) {
    auto it = masks.find(stem);
    if (it == masks.end()) it = masks.find(stem + "_segmentation");
    if (it == masks.end() || used_masks.contains(it->first)) {
      orphans.push_back("image " + image_path.filename().string());
      continue;
    }
    used_masks.insert(it->first);
    pairs.push_back({stem, image_path, it->second});
  }
  for (const auto& [stem, mask_path] : masks) {
    if (!used_masks.contains(stem)) orphans.push_back("mask " + mask_path.filename().string());
  }
  if (!orphans.empty()) {
    throw PairingError("unpaired files under " + root.string() + ": " + offender_list(orphans));
  }
  return pairs;  // std::map iteration keeps ids sorted
}

Sample load_sample(const SampleFiles& files) {
  cv::Mat bgr = read_image(files.image, cv::IMREAD_COLOR);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::Mat gray = read_image(files.mask, cv::IMREAD_GRAYSCALE);
  if (gray.rows != rgb.rows || gray.cols != rgb.cols) {
    throw PairingError("image " + files.image.string() + " and mask " + files.mask.string() +
                       " differ in size");
  }
  Sample s;
  s.id = files.id;
  s.image = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  s.mask = (torch::from_blob(gray.data, {gray.rows, gray.cols}, torch::kUInt8) > 127).to(torch::kUInt8);
  return s;
}

std::vector<Sample> load_dataset(const fs::path& root) {
  std::vector<Sample> out;
  for (const auto& files : pair_dataset(root)) out.push_back(load_sample(files));
  return out;
}

void write_dataset(const fs::path& root, std::span<const Sample> samples) {
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "masks", ec);
  if (ec) throw IoError("cannot create dataset directories under " + root.string());
  for (const auto& s : samples) {
    check_sample(s);
    const auto img = s.image.contiguous();
    cv::Mat rgb(static_cast<int>(img.size(0)), static_cast<int>(img.size(1)), CV_8UC3, img.data_ptr<uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    write_png(root / "images" / (s.id + ".png"), bgr);
    const auto m = (s.mask * 255).to(torch::kUInt8).contiguous();
    cv::Mat gray(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1, m.data_ptr<uint8_t>());
    write_png(root / "masks" / (s.id + ".png"), gray);
  }
}

Normalization compute_normalization(std::span<const Sample> samples) {
  std::array<double, 3> sum{}, sq{};
  double count = 0;
  for (const auto& s : samples) {
    const auto px = s.image.reshape({-1, 3}).to(torch::kFloat64) / 255.0;
    const auto sums = px.sum(0);
    const auto sqs = (px * px).sum(0);
    for (int c = 0; c < 3; ++c) {
      sum[c] += sums[c].item<double>();
      sq[c] += sqs[c].item<double>();
    }
    count += static_cast<double>(px.size(0));
  }
  if (count == 0) throw EmptyInputError("cannot compute normalization over zero pixels");
  Normalization n;
  for (int c = 0; c < 3; ++c) {
    n.mean[c] = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - n.mean[c] * n.mean[c]);
    n.stddev[c] = std::max(std::sqrt(var), 1e-6);
  }
  return n;
}

int64_t train_count(int64_t total, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
  if (total < 2) throw ContractError("splitting needs at least two samples");
  if (std::abs(ratio - 0.7) < 1e-12) {
    if (total == 2150) return 1500;  // ISIC2017
    if (total == 2694) return 1886;  // ISIC2018
  }
  const auto n = static_cast<int64_t>(std::llround(static_cast<double>(total) * ratio));
  return std::clamp<int64_t>(n, 1, total - 1);
}

uint64_t uniform_index(std::mt19937_64& rng, uint64_t n) {
  const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
  uint64_t draw;
  do {
    draw = rng();
  } while (draw >= limit);
  return draw % n;
}

SplitManifest split(std::vector<std::string> ids, double ratio, uint64_t seed,
                    std::string dataset_name) {
  const int64_t total = static_cast<int64_t>(ids.size());
  const int64_t n_train = train_count(total, ratio);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw ContractError("sample ids must be unique");
  }
  std::mt19937_64 rng(seed);
  for (size_t i = ids.size() - 1; i > 0; --i) {
    std::swap(ids[i], ids[uniform_index(rng, i + 1)]);
  }
  SplitManifest m;
  m.dataset_name = std::move(dataset_name);
  m.seed = seed;
  m.ratio = ratio;
  m.train_ids.assign(ids.begin(), ids.begin() + n_train);
  m.test_ids.assign(ids.begin() + n_train, ids.end());
  std::sort(m.train_ids.begin(), m.train_ids.end());
  std::sort(m.test_ids.begin(), m.test_ids.end());
  return m;
}

SplitManifest split(std::span<const Sample> samples, double ratio, uint64_t seed,
                    std::string dataset_name) {
  std::vector<std::string> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) ids.push_back(s.id);
  return split(std::move(ids), ratio, seed, std::move(dataset_name));
}

void write_manifest(const fs::path& path, const SplitManifest& m) {
  nlohmann::json header{{"dataset", m.dataset_name},
                        {"seed", m.seed},
                        {"ratio", m.ratio},
                        {"normalization", normalization_json(m.normalization)},
                        {"train", m.train_ids.size()},
                        {"test", m.test_ids.size()}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write split manifest " + path.string());
  out << header.dump() << '\n';
  for (const auto& id : m.train_ids) {
    check_id(id);
    out << id << ",train\n";
  }
  for (const auto& id : m.test_ids) {
    check_id(id);
    out << id << ",test\n";
  }
  if (!out) throw IoError("failed writing split manifest " + path.string());
}

SplitManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read split manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("split manifest " + path.string() + " is empty");
  SplitManifest m;
  try {
    const auto header = nlohmann::json::parse(line);
    m.dataset_name = header.value("dataset", std::string{});
    m.seed = header.value("seed", uint64_t{42});
    m.ratio = header.value("ratio", 0.7);
    const auto& norm = header.at("normalization");
    m.normalization.mean = norm.at("mean").get<std::array<double, 3>>();
    m.normalization.stddev = norm.at("std").get<std::array<double, 3>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad split manifest header in " + path.string() + ": " + e.what());
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw IoError("bad split manifest line: " + line);
    const auto id = line.substr(0, comma);
    const auto which = line.substr(comma + 1);
    if (which == "train") {
      m.train_ids.push_back(id);
    } else if (which == "test") {
      m.test_ids.push_back(id);
    } else {
      throw IoError("bad split label '" + which + "' in " + path.string());
    }
  }
  return m;
}

Sample resize_sample(const Sample& s, int64_t height, int64_t width) {
  check_sample(s);
  Sample out;
  out.id = s.id;
  const auto img = s.image.permute({2, 0, 1}).unsqueeze(0).to(torch::kFloat32);
  out.image = resize_bilinear(img, height, width)
                  .round()
                  .clamp(0, 255)
                  .squeeze(0)
                  .permute({1, 2, 0})
                  .to(torch::kUInt8)
                  .contiguous();
  const auto mask = s.mask.unsqueeze(0).unsqueeze(0).to(torch::kFloat32);
  out.mask = resize_nearest(mask, height, width).squeeze(0).squeeze(0).to(torch::kUInt8).contiguous();
  return out;
}

Tensors preprocess(const Sample& s, int64_t height, int64_t width, const Normalization& norm) {
  check_sample(s);
  if (height < 1 || width < 1) throw ConfigError("preprocess target size must be positive");
  const auto img = s.image.permute({2, 0, 1}).unsqueeze(0).to(torch::kFloat32) / 255.0;
  auto resized = resize_bilinear(img, height, width).squeeze(0);
  const auto mean = torch::tensor({norm.mean[0], norm.mean[1], norm.mean[2]}, torch::kFloat32).view({3, 1, 1});
  const auto stddev =
      torch::tensor({norm.stddev[0], norm.stddev[1], norm.stddev[2]}, torch::kFloat32).view({3, 1, 1});
  Tensors t;
  t.image = ((resized - mean) / stddev).contiguous();
  const auto mask = s.mask.unsqueeze(0).unsqueeze(0).to(torch::kFloat32);
  t.mask = resize_nearest(mask, height, width).squeeze(0).contiguous();
  return t;
}

AugmentPlan draw_augment_plan(std::mt19937_64& rng) {
  AugmentPlan plan;
  plan.hflip = (rng() >> 63) != 0;
  plan.vflip = (rng() >> 63) != 0;
  plan.quarter_turns = static_cast<int>(rng() >> 62);
  return plan;
}

std::pair<torch::Tensor, torch::Tensor> apply_augment(const AugmentPlan& plan,
                                                      const torch::Tensor& image,
                                                      const torch::Tensor& mask) {
  auto img = image;
  auto msk = mask;
  if (plan.hflip) {
    img = img.flip({-1});
    msk = msk.flip({-1});
  }
  if (plan.vflip) {
    img = img.flip({-2});
    msk = msk.flip({-2});
  }
  if (plan.quarter_turns % 4 != 0) {
    img = torch::rot90(img, plan.quarter_turns, {-2, -1});
    msk = torch::rot90(msk, plan.quarter_turns, {-2, -1});
  }
  return {img.contiguous(), msk.contiguous()};
}

std::pair<torch::Tensor, torch::Tensor> augment(const torch::Tensor& image,
                                                const torch::Tensor& mask, std::mt19937_64& rng) {
  return apply_augment(draw_augment_plan(rng), image, mask);
}

uint64_t stream_seed(uint64_t global_seed, uint64_t worker, uint64_t epoch) {
  // splitmix64 finalizer over a combined key
  auto mix = [](uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(global_seed) ^ worker) ^ epoch);
}

std::vector<Sample> synthetic_disks(int count, int64_t size, uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto unit = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  std::vector<Sample> out;
  const auto ys = torch::arange(size, torch::kFloat32).view({size, 1});
  const auto xs = torch::arange(size, torch::kFloat32).view({1, size});
  for (int i = 0; i < count; ++i) {
    const double cy = size * (0.3 + 0.4 * unit());
    const double cx = size * (0.3 + 0.4 * unit());
    const double radius = size * (0.12 + 0.13 * unit());
    const auto inside = ((ys - cy).square() + (xs - cx).square()) <= radius * radius;

    torch::Tensor noise = torch::empty({size, size, 3}, torch::kFloat32);
    float* p = noise.data_ptr<float>();
    for (int64_t k = 0; k < noise.numel(); ++k) p[k] = static_cast<float>(24.0 * (unit() - 0.5));

    const auto skin = torch::tensor({205.0f, 160.0f, 140.0f}).view({1, 1, 3});
    const auto lesion = torch::tensor({110.0f, 70.0f, 55.0f}).view({1, 1, 3});
    const auto base = torch::where(inside.unsqueeze(-1), lesion, skin);

    Sample s;
    char id[32];
    std::snprintf(id, sizeof(id), "disk_%04d", i);
    s.id = id;
    s.image = (base + noise).round().clamp(0, 255).to(torch::kUInt8).contiguous();
    s.mask = inside.to(torch::kUInt8).contiguous();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace skinmamba::data
