#include "skinmamba/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <span>
#include <string_view>
#include <vector>

#include "skinmamba/errors.hpp"

namespace skinmamba::checkpoint {
namespace {

constexpr std::string_view kMagic = "SKMBCKPT";
constexpr std::string_view kConfigTag = "CONF";
constexpr std::string_view kTensorTag = "TENS";
constexpr std::string_view kStateTag = "TRST";

class Writer {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename U>
  void uint(U v) {
    for (size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }

  void f32(float v) { uint(std::bit_cast<uint32_t>(v)); }

  void string(std::string_view s) {
    uint(static_cast<uint32_t>(s.size()));
    bytes(s);
  }

  void tensor_table(const TensorMap& tensors) {
    uint(static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
      string(name);
      const auto t = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
      uint(static_cast<uint32_t>(t.dim()));
      for (const auto d : t.sizes()) uint(static_cast<uint64_t>(d));
      const float* p = t.data_ptr<float>();
      for (int64_t i = 0; i < t.numel(); ++i) f32(p[i]);
    }
  }

  void section(std::string_view tag, const Writer& payload) {
    bytes(tag);
    uint(static_cast<uint64_t>(payload.buf_.size()));
    buf_.insert(buf_.end(), payload.buf_.begin(), payload.buf_.end());
  }

  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::span<const char> data, std::string context) : data_(data), context_(std::move(context)) {}

  std::string_view bytes(size_t n) {
    if (n > data_.size() - pos_) fail("truncated");
    std::string_view out(data_.data() + pos_, n);
    pos_ += n;
    return out;
  }

  template <typename U>
  U uint() {
    const auto raw = bytes(sizeof(U));
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(raw[i])) << (8 * i);
    }
    return v;
  }

  float f32() { return std::bit_cast<float>(uint<uint32_t>()); }

  std::string string() {
    const auto n = uint<uint32_t>();
    return std::string(bytes(n));
  }

  TensorMap tensor_table() {
    TensorMap out;
    const auto count = uint<uint32_t>();
    for (uint32_t k = 0; k < count; ++k) {
      auto name = string();
      const auto ndim = uint<uint32_t>();
      std::vector<int64_t> dims(ndim);
      int64_t numel = 1;
      for (auto& d : dims) {
        d = static_cast<int64_t>(uint<uint64_t>());
        numel *= d;
      }
      if (static_cast<size_t>(numel) * sizeof(float) > remaining()) fail("tensor '" + name + "' overruns the archive");
      auto t = torch::empty(dims, torch::kFloat32);
      float* p = t.data_ptr<float>();
      for (int64_t i = 0; i < numel; ++i) p[i] = f32();
      out.emplace(std::move(name), std::move(t));
    }
    return out;
  }

  size_t remaining() const { return data_.size() - pos_; }

  [[noreturn]] void fail(const std::string& why) const {
    throw IoError("malformed checkpoint " + context_ + ": " + why);
  }

 private:
  std::span<const char> data_;
  size_t pos_ = 0;
  std::string context_;
};

bool tensors_equal(const TensorMap& a, const TensorMap& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a) {
    const auto it = b.find(name);
    if (it == b.end() || !torch::equal(t, it->second)) return false;
  }
  return true;
}

nlohmann::json state_json(const TrainingState& s) {
  nlohmann::json j{{"epoch", s.epoch}, {"step", s.step}, {"best_epoch", s.best_epoch}};
  j["best_metric"] = s.best_metric ? nlohmann::json(*s.best_metric) : nlohmann::json(nullptr);
  return j;
}

}  // namespace

bool TrainingState::operator==(const TrainingState& other) const {
  return epoch == other.epoch && step == other.step && best_metric == other.best_metric &&
         best_epoch == other.best_epoch && tensors_equal(optimizer, other.optimizer);
}

TensorMap collect_tensors(const torch::nn::Module& module) {
  TensorMap out;
  for (const auto& item : module.named_parameters(/*recurse=*/true)) {
    out.emplace(item.key(), item.value().detach().to(torch::kCPU, torch::kFloat32).clone());
  }
  for (const auto& item : module.named_buffers(/*recurse=*/true)) {
    out.emplace(item.key(), item.value().detach().to(torch::kCPU, torch::kFloat32).clone());
  }
  return out;
}

void restore_tensors(torch::nn::Module& module, const TensorMap& tensors) {
  torch::NoGradGuard no_grad;
  size_t matched = 0;
  auto load = [&](const std::string& name, torch::Tensor& target) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("checkpoint is missing tensor '" + name + "'");
    if (it->second.sizes() != target.sizes()) {
      throw IoError("checkpoint tensor '" + name + "' has shape " +
                    shape_string(it->second.sizes().vec()) + ", model expects " +
                    shape_string(target.sizes().vec()));
    }
    target.copy_(it->second.to(target.scalar_type()));
    ++matched;
  };
  for (auto& item : module.named_parameters(true)) load(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) load(item.key(), item.value());
  if (matched != tensors.size()) {
    throw IoError("checkpoint holds " + std::to_string(tensors.size() - matched) +
                  " tensors the model does not have");
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer conf;
  conf.bytes(ckpt.config.dump());
  Writer tens;
  tens.tensor_table(ckpt.tensors);
  Writer state;
  state.string(state_json(ckpt.state).dump());
  state.tensor_table(ckpt.state.optimizer);

  Writer file;
  file.bytes(kMagic);
  file.uint(kFormatVersion);
  file.uint(uint32_t{3});
  file.section(kConfigTag, conf);
  file.section(kTensorTag, tens);
  file.section(kStateTag, state);

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(file.data().data(), static_cast<std::streamsize>(file.data().size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(data, path.string());
  if (r.bytes(kMagic.size()) != kMagic) r.fail("bad magic");
  const auto version = r.uint<uint32_t>();
  if (version != kFormatVersion) r.fail("unsupported version " + std::to_string(version));
  const auto sections = r.uint<uint32_t>();

  Checkpoint ckpt;
  bool have_config = false, have_tensors = false;
  for (uint32_t s = 0; s < sections; ++s) {
    const std::string tag(r.bytes(4));
    const auto size = r.uint<uint64_t>();
    if (size > r.remaining()) r.fail("section " + tag + " overruns the archive");
    const auto payload = r.bytes(static_cast<size_t>(size));
    Reader sub(std::span<const char>(payload.data(), payload.size()), path.string() + ":" + tag);
    if (tag == kConfigTag) {
      try {
        ckpt.config = nlohmann::json::parse(payload);
      } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("config section is not JSON: ") + e.what());
      }
      have_config = true;
    } else if (tag == kTensorTag) {
      ckpt.tensors = sub.tensor_table();
      have_tensors = true;
    } else if (tag == kStateTag) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(sub.string());
      } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("training state is not JSON: ") + e.what());
      }
      ckpt.state.epoch = j.value("epoch", int64_t{0});
      ckpt.state.step = j.value("step", int64_t{0});
      ckpt.state.best_epoch = j.value("best_epoch", int64_t{-1});
      if (j.contains("best_metric") && !j["best_metric"].is_null()) {
        ckpt.state.best_metric = j["best_metric"].get<double>();
      }
      ckpt.state.optimizer = sub.tensor_table();
    }
    // Unknown sections are skipped so later versions can add data.
  }
  if (!have_config || !have_tensors) r.fail("missing config or tensor section");
  return ckpt;
}

}  // namespace skinmamba::checkpoint
