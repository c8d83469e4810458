#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>

#include "dped/params.hpp"

namespace dped::detail {

template <typename T>
std::span<const T> cspan(const ParamSet<T>& p, const std::string& name) {
  const auto& t = p.at(name);
  return {t.data.data(), t.data.size()};
}

template <typename T>
std::span<T> mspan(ParamSet<T>& p, const std::string& name) {
  auto& t = p.at(name);
  return {t.data.data(), t.data.size()};
}

/// Normal(0, stddev) truncated at two standard deviations by resampling.
inline void fill_truncated_normal(std::vector<float>& data, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : data) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v = static_cast<float>(z * stddev);
  }
}

inline void he_init_tensors(ParamSet<float>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& t : p.tensors()) {
    const bool is_weight = t.name.size() > 7 && t.name.compare(t.name.size() - 7, 7, ".weight") == 0;
    if (!is_weight) continue;
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < t.shape.size(); ++d) fan_in *= t.shape[d];
    fill_truncated_normal(t.data, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
  }
}

inline void add_batchnorm(ParamSet<float>& p, const std::string& prefix, std::size_t channels) {
  p.add(prefix + ".gamma", {channels}, true, 1.0f);
  p.add(prefix + ".beta", {channels}, true, 0.0f);
  p.add(prefix + ".running_mean", {channels}, false, 0.0f);
  p.add(prefix + ".running_var", {channels}, false, 1.0f);
}

/// Returns `params` reordered to `layout`, after checking it carries exactly
/// the layout's names and shapes. Trainable flags come from the layout.
inline ParamSet<float> conform_to_layout(const ParamSet<float>& params, const ParamSet<float>& layout,
                                         const std::string& what) {
  if (params.size() != layout.size()) {
    throw SchemaError(what + ": expected " + std::to_string(layout.size()) + " tensors, found " +
                      std::to_string(params.size()));
  }
  ParamSet<float> out;
  for (const auto& ref : layout.tensors()) {
    const auto* t = params.find(ref.name);
    if (!t) throw SchemaError(what + ": missing tensor " + ref.name);
    if (t->shape != ref.shape) throw SchemaError(what + ": tensor " + ref.name + " has wrong shape");
    out.add(ref.name, ref.shape, ref.trainable).data = t->data;
  }
  return out;
}

}  // namespace dped::detail
