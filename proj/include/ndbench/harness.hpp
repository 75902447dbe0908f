#pragma once

// Experiment protocols: single-session, multi-session, fine-tuning and scaling.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndbench/backbones.hpp"
#include "ndbench/checkpoint.hpp"
#include "ndbench/datapipe.hpp"
#include "ndbench/metrics.hpp"

namespace ndbench {

enum class Strategy { Random, Sequential, RandomSession };
std::string strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t S = 128;
  std::size_t stride = 32;  // between training windows; test windows always tile with stride S
  Strategy strategy = Strategy::Random;
  std::uint64_t seed = 0;
  std::size_t max_retries = 3;  // Transformer only, learning rate halved per retry
  R2Mode r2_mode = R2Mode::AxisMean;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  bool operator==(const TrainConfig&) const = default;
};

struct SessionBatches {
  int date_index = 0;
  std::size_t batches = 0;
};

struct BatchRef {
  std::size_t session = 0;
  std::size_t batch = 0;
  bool operator==(const BatchRef&) const = default;
};

// Random: seeded permutation of all batches. Sequential: sessions by ascending
// date_index, batches in order. RandomSession: seeded session order, batches in order.
std::vector<BatchRef> schedule_batches(const std::vector<SessionBatches>& sessions, Strategy strategy, std::uint64_t seed);

struct Provenance {
  std::uint64_t seed = 0;
  std::string data_hash;
  std::size_t epoch = 0;
  bool operator==(const Provenance&) const = default;
};

struct SessionNorm {
  std::string session_id;
  int date_index = 0;
  NormStats stats;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<ArrayGroup> groups;
  std::vector<SessionNorm> norms;  // training sessions in date order
  Provenance provenance;
  nlohmann::json train = nlohmann::json::object();

  Model<float> instantiate() const;
  void capture(const Model<float>& model);
  // Statistics of the latest training session.
  const NormStats& reference_norm() const;
  const NormStats* norm_for(const std::string& session_id) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& model, std::size_t epoch, std::size_t step, double learning_rate);
  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return step_; }
  double learning_rate() const { return learning_rate_; }

 private:
  std::size_t epoch_, step_;
  double learning_rate_;
};

// FNV-1a 64 over session ids and the normalized feature/target arrays, as 16 hex digits.
std::string data_hash(const std::vector<PreparedSession>& sessions);

struct TrainResult {
  Checkpoint checkpoint;
  MetricsRecord metrics;                   // pooled test R²
  std::vector<MetricsRecord> per_session;  // one per session in date order
  std::vector<double> loss_history;        // mean training loss per epoch
  double learning_rate = 0.0;              // rate of the successful attempt
  std::size_t retries = 0;
};

// Throws DivergenceError once the retry policy is exhausted.
TrainResult train_single_session(const PreparedSession& session, const ModelConfig& model, const TrainConfig& train);
TrainResult train_multi_session(const std::vector<PreparedSession>& sessions, const ModelConfig& model, const TrainConfig& train);

// Test windows tiling the test segment with stride S.
WindowSet test_windows(const PreparedSession& session, std::size_t S);

inline constexpr std::size_t kAllIncrements = std::numeric_limits<std::size_t>::max();

struct FinetuneConfig {
  double increment_s = 10.0;
  std::size_t epochs_per_increment = 5;
  std::size_t increments = kAllIncrements;  // capped by the training split length
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t S = 128;
  std::size_t stride = 32;
  double threshold = 0.7;
  std::uint64_t seed = 0;
  R2Mode r2_mode = R2Mode::AxisMean;

  void validate() const;
  nlohmann::json to_json() const;
  static FinetuneConfig from_json(const nlohmann::json& j);
};

struct FinetuneResult {
  MetricsRecord zero_shot;
  MetricsRecord final;                             // after the last increment, recovery and zero-shot filled in
  std::vector<std::pair<double, double>> curve;    // (calibration seconds, test r2_avg), starting at (0, zero-shot)
  RecoveryTime recovery;
  Checkpoint checkpoint;
};

// Features keep the new session's own statistics; targets are re-expressed in
// the base checkpoint's reference velocity statistics.
FinetuneResult finetune_new_session(const Checkpoint& base, const PreparedSession& session, const FinetuneConfig& cfg);

struct ScalingRow {
  std::size_t layers = 0;
  std::size_t params = 0;
  std::vector<double> r2;  // per converged seed
  std::vector<MetricsRecord> records;
  double mean = 0.0;
  double stderr_ = 0.0;
  bool converged = true;
  std::string failure;
};

// One multi-session Random run per (layer count, seed). Sizes that diverge are
// recorded as not converged. Independent runs use up to `threads` workers.
std::vector<ScalingRow> scaling_sweep(const ModelConfig& base, const std::vector<std::size_t>& layer_counts,
                                      const std::vector<PreparedSession>& sessions, const TrainConfig& train,
                                      const std::vector<std::uint64_t>& seeds, std::size_t threads = 1);

}  // namespace ndbench
