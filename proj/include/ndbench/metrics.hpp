#pragma once

// R², evaluation over window sets, latency statistics and recovery curves.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ndbench/backbones.hpp"
#include "ndbench/datapipe.hpp"

namespace ndbench {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 1 - RSS/TSS. Throws MetricsError for n < 2, length mismatch or constant y.
double r_squared(std::span<const double> y, std::span<const double> y_hat);

struct LatencyReport {
  std::size_t S = 0;
  double window_ms = 0.0;
  std::size_t samples = 0;
  double median_s = 0.0;
  double p95_s = 0.0;
  int threads = 1;
  std::vector<double> sample_s;  // timed repetitions only, warmup excluded
};

// nullopt means the threshold was never reached.
using RecoveryTime = std::optional<double>;

struct MetricsRecord {
  std::string experiment;
  std::string model;
  std::string session;
  int date_index = 0;
  double r2_x = 0.0;
  double r2_y = 0.0;
  double r2_avg = 0.0;
  std::size_t params = 0;
  std::optional<LatencyReport> latency;
  std::optional<RecoveryTime> recovery;  // outer empty: not measured
  std::optional<double> zero_shot_r2;
  std::uint64_t seed = 0;
  bool converged = true;
};

enum class R2Mode { AxisMean, Stacked };

// De-normalized targets and predictions, one vector per axis, in window order.
struct Predictions {
  std::vector<double> y[2];
  std::vector<double> y_hat[2];
  void append(const Predictions& other);
};

// Windows must not overlap within a session; predictions follow (session, start_bin) order.
Predictions predict(const Model<float>& model, const NormStats& norm, const WindowSet& windows, std::size_t batch = 16);
// Fills r2_x, r2_y and r2_avg. Stacked computes one R² over both axes; r2_avg is then that value.
void score(const Predictions& p, MetricsRecord& rec, R2Mode mode = R2Mode::AxisMean);
MetricsRecord evaluate(const Model<float>& model, const NormStats& norm, const WindowSet& windows,
                       R2Mode mode = R2Mode::AxisMean);

struct LatencyOptions {
  std::size_t warmup = 10;
  std::size_t samples = 100;
  std::uint64_t seed = 0;
};

// Wall clock around a full [1, S, C] forward in evaluation mode.
LatencyReport bench_latency(const Model<float>& model, std::size_t S, const LatencyOptions& opt = {});
double quantile(std::vector<double> v, double q);

struct ComplexityProbe {
  std::vector<LatencyReport> reports;
  double ratio = 0.0;  // median(last S) / median(first S)
};
ComplexityProbe complexity_probe(const Model<float>& model, const std::vector<std::size_t>& S_list = {128, 1024},
                                 const LatencyOptions& opt = {});

// Smallest seconds with r2 >= threshold. Throws MetricsError on an empty curve
// or seconds that are not strictly increasing.
RecoveryTime recovery_time(const std::vector<std::pair<double, double>>& curve, double threshold = 0.7);

// CSV with the fixed column set; a not-recovered run writes "not_recovered".
extern const std::vector<std::string> kMetricsColumns;
std::string metrics_csv_row(const MetricsRecord& r);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

}  // namespace ndbench
