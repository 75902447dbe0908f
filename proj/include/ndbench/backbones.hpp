#pragma once

// The four sequence decoders: spike window [B, S, C] -> velocity [B, S, 2].

#include <array>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndbench/params.hpp"

namespace ndbench {

enum class ModelKind { GRU, Transformer, RWKV, Mamba };

std::string kind_name(ModelKind kind);
// Case-insensitive; throws std::invalid_argument on unknown names.
ModelKind parse_kind(const std::string& name);
inline constexpr std::array<ModelKind, 4> kAllKinds{ModelKind::GRU, ModelKind::Transformer, ModelKind::RWKV, ModelKind::Mamba};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  ModelKind kind = ModelKind::GRU;
  std::size_t input_channels = 96;
  std::size_t layers = 1;
  std::size_t embed = 256;
  std::size_t heads = 2;          // Transformer
  double ffn_ratio = 1.0;         // Transformer feed-forward, RWKV channel-mix
  std::size_t d_state = 8;        // Mamba
  std::size_t conv_width = 4;     // Mamba
  std::size_t expand = 2;         // Mamba
  double dropout_rate = 0.1;      // Transformer
  std::size_t max_timesteps = 1024;
  bool gru_input_projection = false;

  // Default size for each family.
  static ModelConfig defaults(ModelKind kind, std::size_t input_channels = 96);
  void validate() const;
  std::size_t ffn_hidden() const;
  std::size_t dt_rank() const;  // Mamba: ceil(embed / 16)

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Closed-form scalar parameter count.
std::size_t param_count(const ModelConfig& cfg);

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& message, std::size_t timestep) : std::runtime_error(message), timestep_(timestep) {}
  std::size_t timestep() const { return timestep_; }

 private:
  std::size_t timestep_;
};

class UnsupportedOperation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Model {
 public:
  // Registers and initializes every parameter group from `seed`.
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }

  // x is [B, S, C] (or [S, C]); returns [B, S, 2] (or [S, 2]). `rng` drives
  // dropout and is only needed when training. Throws NonFiniteError naming the
  // first timestep with a non-finite output.
  Tensor<T> forward(const Tensor<T>& x, bool training = false, std::mt19937_64* rng = nullptr) const;

 private:
  ModelConfig cfg_;
  ModelParams<T> params_;
};

// One-bin-at-a-time inference for the recurrent families. Keeps its own
// per-layer state and evaluates the recurrences directly on parameter values.
template <typename T>
class StreamingDecoder {
 public:
  // Throws UnsupportedOperation for the Transformer.
  explicit StreamingDecoder(const Model<T>& model);
  ~StreamingDecoder();
  StreamingDecoder(StreamingDecoder&&) noexcept;
  StreamingDecoder& operator=(StreamingDecoder&&) noexcept;

  void reset();
  std::array<T, 2> step(std::span<const T> x_t);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ndbench
