#include "dped/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

namespace dped {

template <typename T>
NamedTensor<T>& ParamSet<T>::add(std::string name, std::vector<std::size_t> shape, bool trainable, T fill) {
  if (find(name)) throw SchemaError("duplicate tensor name " + name);
  NamedTensor<T> t;
  t.name = std::move(name);
  t.shape = std::move(shape);
  t.trainable = trainable;
  t.data.assign(t.numel(), fill);
  tensors_.push_back(std::move(t));
  return tensors_.back();
}

template <typename T>
const NamedTensor<T>* ParamSet<T>::find(std::string_view name) const {
  auto it = std::find_if(tensors_.begin(), tensors_.end(), [&](const auto& t) { return t.name == name; });
  return it == tensors_.end() ? nullptr : &*it;
}

template <typename T>
NamedTensor<T>* ParamSet<T>::find(std::string_view name) {
  auto it = std::find_if(tensors_.begin(), tensors_.end(), [&](const auto& t) { return t.name == name; });
  return it == tensors_.end() ? nullptr : &*it;
}

template <typename T>
const NamedTensor<T>& ParamSet<T>::at(std::string_view name) const {
  if (const auto* t = find(name)) return *t;
  throw SchemaError("missing tensor " + std::string(name));
}

template <typename T>
NamedTensor<T>& ParamSet<T>::at(std::string_view name) {
  if (auto* t = find(name)) return *t;
  throw SchemaError("missing tensor " + std::string(name));
}

template <typename T>
std::size_t ParamSet<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) {
    if (t.trainable) n += t.numel();
  }
  return n;
}

template <typename T>
ParamSet<T> ParamSet<T>::zeros_like_trainable() const {
  ParamSet out;
  for (const auto& t : tensors_) {
    if (t.trainable) out.add(t.name, t.shape, true);
  }
  return out;
}

template <typename T>
bool ParamSet<T>::all_finite() const {
  for (const auto& t : tensors_) {
    for (T v : t.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

template class ParamSet<float>;
template class ParamSet<double>;

namespace {

constexpr char kMagic[8] = {'D', 'P', 'E', 'D', 'W', '1', '\0', '\0'};

static_assert(std::endian::native == std::endian::little, "weights container I/O assumes a little-endian host");

}  // namespace

void write_weights(const std::filesystem::path& path, std::string_view network_kind, const ParamSet<float>& params) {
  nlohmann::json manifest;
  manifest["format_version"] = kWeightsFormatVersion;
  manifest["network_kind"] = std::string(network_kind);
  auto tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : params.tensors()) {
    const std::uint64_t bytes = t.data.size() * sizeof(float);
    tensors.push_back({{"name", t.name}, {"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}, {"byte_len", bytes}});
    offset += bytes;
  }
  manifest["tensors"] = tensors;
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const auto len = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : params.tensors()) {
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

WeightsFile read_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic))) throw IoError(path.string() + ": truncated header");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw SchemaError(path.string() + ": bad magic");
  std::uint32_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len))) throw IoError(path.string() + ": truncated header");
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw IoError(path.string() + ": truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": manifest is not valid JSON: " + e.what());
  }

  WeightsFile file;
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    if (manifest.at("format_version").get<int>() != kWeightsFormatVersion) {
      throw SchemaError(path.string() + ": unsupported format_version");
    }
    file.network_kind = manifest.at("network_kind").get<std::string>();
    for (const auto& entry : manifest.at("tensors")) {
      if (entry.at("dtype").get<std::string>() != "f32") throw SchemaError(path.string() + ": only f32 tensors supported");
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto bytes = entry.at("byte_len").get<std::uint64_t>();
      auto& t = file.params.add(entry.at("name").get<std::string>(), entry.at("shape").get<std::vector<std::size_t>>());
      if (bytes != t.numel() * sizeof(float)) throw SchemaError(path.string() + ": byte_len does not match shape of " + t.name);
      if (offset + bytes > payload.size()) throw IoError(path.string() + ": truncated payload for " + t.name);
      std::memcpy(t.data.data(), payload.data() + offset, bytes);
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": malformed manifest: " + e.what());
  }
  return file;
}

ParamSet<float> read_weights(const std::filesystem::path& path, std::string_view expected_kind) {
  auto file = read_weights(path);
  if (file.network_kind != expected_kind) {
    throw SchemaError(path.string() + ": expected " + std::string(expected_kind) + " weights, found " + file.network_kind);
  }
  return std::move(file.params);
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(bytes);
  return os.str();
}

}  // namespace dped
