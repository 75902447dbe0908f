#pragma once

#include <cmath>
#include <random>
#include <string>

#include "ndbench/backbones.hpp"
#include "ndbench/ops.hpp"

namespace ndbench::detail {

inline std::string pname(const std::string& prefix, std::size_t layer, const std::string& leaf) {
  return prefix + "." + std::to_string(layer) + "." + leaf;
}

template <typename T>
void add_linear(ModelParams<T>& p, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias = true) {
  auto w = p.add(name + ".W", {in, out});
  xavier_uniform(w, in, out, rng);
  if (bias) p.add(name + ".b", {out});
}

template <typename T>
void add_layer_norm(ModelParams<T>& p, const std::string& name, std::size_t width) {
  auto g = p.add(name + ".g", {width});
  constant_fill(g, T(1));
  p.add(name + ".b", {width});
}

template <typename T>
Tensor<T> apply_linear(const ModelParams<T>& p, const std::string& name, const Tensor<T>& x) {
  return linear(x, p.get(name + ".W"), p.get(name + ".b"));
}

template <typename T>
Tensor<T> apply_layer_norm(const ModelParams<T>& p, const std::string& name, const Tensor<T>& x) {
  return layer_norm(x, p.get(name + ".g"), p.get(name + ".b"));
}

// Each family registers its groups between the input projection and the head,
// and maps the embedded sequence [B, S, E] (raw input for the plain GRU) to
// the final hidden sequence [B, S, E].
template <typename T> void build_gru(ModelParams<T>& p, const ModelConfig& cfg, std::mt19937_64& rng);
template <typename T> Tensor<T> forward_gru(const ModelParams<T>& p, const ModelConfig& cfg, const Tensor<T>& x);

template <typename T> void build_transformer(ModelParams<T>& p, const ModelConfig& cfg, std::mt19937_64& rng);
template <typename T>
Tensor<T> forward_transformer(const ModelParams<T>& p, const ModelConfig& cfg, const Tensor<T>& a, bool training, std::mt19937_64* rng);

template <typename T> void build_rwkv(ModelParams<T>& p, const ModelConfig& cfg, std::mt19937_64& rng);
template <typename T> Tensor<T> forward_rwkv(const ModelParams<T>& p, const ModelConfig& cfg, const Tensor<T>& x);

template <typename T> void build_mamba(ModelParams<T>& p, const ModelConfig& cfg, std::mt19937_64& rng);
template <typename T> Tensor<T> forward_mamba(const ModelParams<T>& p, const ModelConfig& cfg, const Tensor<T>& x);

}  // namespace ndbench::detail
