#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dped/error.hpp"

namespace dped {

template <typename T>
struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> data;
  /// Optimizer-updated (as opposed to running statistics).
  bool trainable = true;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  bool operator==(const NamedTensor&) const = default;
};

/// Ordered set of named tensors. Order is significant for serialization.
template <typename T>
class ParamSet {
 public:
  NamedTensor<T>& add(std::string name, std::vector<std::size_t> shape, bool trainable = true, T fill = T(0));

  const NamedTensor<T>* find(std::string_view name) const;
  NamedTensor<T>* find(std::string_view name);
  const NamedTensor<T>& at(std::string_view name) const;
  NamedTensor<T>& at(std::string_view name);

  std::vector<NamedTensor<T>>& tensors() { return tensors_; }
  const std::vector<NamedTensor<T>>& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  /// Total number of scalars across trainable tensors.
  std::size_t trainable_count() const;

  /// Same names and shapes, all values zero, trainable tensors only.
  ParamSet zeros_like_trainable() const;

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& t : tensors_) {
      auto& o = out.add(t.name, t.shape, t.trainable);
      for (std::size_t i = 0; i < t.data.size(); ++i) o.data[i] = static_cast<U>(t.data[i]);
    }
    return out;
  }

  bool all_finite() const;
  bool operator==(const ParamSet&) const = default;

 private:
  std::vector<NamedTensor<T>> tensors_;
};

/// Reads/writes the binary weights container:
///   magic "DPEDW1\0\0" | u32 LE manifest length | UTF-8 JSON manifest | payload.
/// The manifest is {format_version, network_kind, tensors: [{name, dtype, shape,
/// offset, byte_len}]}; payloads are little-endian f32, row-major, in manifest
/// order, with offsets relative to the payload start.
struct WeightsFile {
  std::string network_kind;
  ParamSet<float> params;
};

inline constexpr int kWeightsFormatVersion = 1;

void write_weights(const std::filesystem::path& path, std::string_view network_kind, const ParamSet<float>& params);
WeightsFile read_weights(const std::filesystem::path& path);

/// Reads a container and checks its network_kind.
ParamSet<float> read_weights(const std::filesystem::path& path, std::string_view expected_kind);

/// FNV-1a 64-bit digest, lowercase hex.
std::string fnv1a_hex(std::string_view bytes);
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace dped
