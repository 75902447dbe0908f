#pragma once

// Spike-event sessions to normalized, smoothed, windowed training samples.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ndbench {

inline constexpr int kBinWidthMs = 10;
inline constexpr double kKinematicRateHz = 250.0;

class DataError : public std::runtime_error {
 public:
  enum class Kind { Precondition, SpikeOrder, SampleCount, Manifest, ChannelMismatch, MissingFile, Parse, Io };
  DataError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}
  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  bool operator==(const Matrix&) const = default;
};

struct Kinematics {
  std::vector<double> t_s, finger_x, finger_y, cursor_x, cursor_y, target_x, target_y;
  std::size_t size() const { return t_s.size(); }
  bool operator==(const Kinematics&) const = default;
};

struct RawSession {
  std::string session_id;
  int date_index = 0;
  double duration_s = 0.0;
  // Per-channel ascending threshold-crossing times in seconds.
  std::vector<std::vector<double>> spike_events;
  Kinematics kinematics;

  std::size_t num_channels() const { return spike_events.size(); }
  bool operator==(const RawSession&) const = default;
};

// Throws DataError naming the first violated invariant.
void validate(const RawSession& raw);

// Bin edges are k/100 s; bin t covers [t/100, (t+1)/100).
std::size_t bin_count(double duration_s);
std::size_t bin_index(double time_s);

struct BinnedSession {
  std::string session_id;
  int date_index = 0;
  Matrix<std::int32_t> counts;  // T x C
  Matrix<double> velocity;      // T x 2, empty until derived
  int bin_width_ms = kBinWidthMs;
};

BinnedSession bin_spikes(const RawSession& raw);

enum class VelocitySource { Cursor, Finger };

// Linear interpolation of a 250 Hz trace onto a 1 kHz grid ((n-1)*4+1 samples).
std::vector<double> interpolate_to_1khz(std::span<const double> samples);
Matrix<double> derive_velocity(const RawSession& raw, VelocitySource source = VelocitySource::Cursor);

struct NormStats {
  std::vector<double> channel_mean;
  std::vector<double> channel_std;
  std::vector<double> vel_mean;
  std::vector<double> vel_std;
};

inline constexpr double kStdFloor = 1e-6;

// Population z-score statistics over rows [begin, end).
NormStats fit_normalization(const Matrix<double>& features, const Matrix<double>& velocity, std::size_t begin, std::size_t end);
Matrix<float> normalize_features(const Matrix<double>& features, const NormStats& stats);
Matrix<float> normalize_velocity(const Matrix<double>& velocity, const NormStats& stats);
double denormalize_velocity(double z, std::size_t axis, const NormStats& stats);

// Normalized Gaussian taps for offsets -radius..radius, radius = ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma_bins);
Matrix<double> gaussian_smooth(const Matrix<double>& series, double sigma_ms, int bin_width_ms = kBinWidthMs);

// A contiguous preprocessed stretch of one session.
struct Segment {
  std::string session_id;
  int date_index = 0;
  std::size_t first_bin = 0;  // absolute bin index of row 0
  Matrix<float> features;     // T x C
  Matrix<float> targets;      // T x 2 (normalized)
  std::size_t length() const { return features.rows; }
};

struct WindowTag {
  std::string session_id;
  int date_index = 0;
  std::size_t start_bin = 0;
};

struct Window {
  std::shared_ptr<const Segment> source;
  std::size_t offset = 0;  // row offset inside source
  WindowTag tag;
};

struct WindowSet {
  std::size_t S = 0;
  std::size_t stride = 0;
  std::vector<Window> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::span<const float> input(std::size_t i) const;
  std::span<const float> target(std::size_t i) const;
  std::size_t channels() const;
  void append(const WindowSet& other);
};

WindowSet make_windows(std::shared_ptr<const Segment> segment, std::size_t S, std::size_t stride);

// Train bins [0, train_end), test bins [train_end, total).
struct SplitPoint {
  std::size_t train_end = 0;
  std::size_t total = 0;
};
SplitPoint split_bins(std::size_t total_bins, double train_fraction = 0.8);
// Windows ending at or before the boundary go to train, windows starting at
// or after it go to test, straddling windows are dropped.
std::pair<WindowSet, WindowSet> split_train_test(const WindowSet& windows, std::size_t boundary_bin);

struct PreprocessConfig {
  double sigma_ms = 40.0;
  double train_fraction = 0.8;
  VelocitySource velocity_source = VelocitySource::Cursor;
  bool smooth_velocity = false;
  bool global_norm = false;  // prepare_sessions: one set of statistics pooled over all training portions
};

struct PreparedSession {
  std::string session_id;
  int date_index = 0;
  std::size_t total_bins = 0;
  SplitPoint split;
  NormStats norm;
  std::shared_ptr<const Segment> train;
  std::shared_ptr<const Segment> test;
};

// Bin, derive velocity, split chronologically, smooth each side separately and
// z-score both with statistics from the training side only.
PreparedSession prepare_session(const RawSession& raw, const PreprocessConfig& cfg = {});
// Per-session statistics, or pooled ones when cfg.global_norm is set.
std::vector<PreparedSession> prepare_sessions(const std::vector<RawSession>& raws, const PreprocessConfig& cfg = {});

// ---------------------------------------------------------------------------
// Synthetic cosine-tuned sessions

struct SynthConfig {
  std::size_t channels = 96;
  double duration_s = 300.0;
  std::vector<double> baseline_rate_hz;     // per channel
  std::vector<double> modulation_rate_hz;   // per channel
  std::vector<double> preferred_direction;  // per channel, radians
  bool poisson_noise = true;
  double reference_speed = 20.0;  // speed at which modulation reaches its nominal depth
  double rate_decay = 1.0;        // multiplicative per day, in (0, 1]
  std::uint64_t permutation_seed = 1;
  double permute_fraction = 0.2;  // share of channels re-shuffled each day after day 0
  double arena = 10.0;            // targets drawn from [-arena, arena]^2
  std::uint64_t seed = 0;

  // Draws the per-channel tuning arrays from `seed`.
  static SynthConfig standard(std::size_t channels, double duration_s, std::uint64_t seed);
  void validate() const;
};

RawSession generate_synthetic_session(const SynthConfig& cfg, int day);

// Which channel records neuron n on `day`.
std::vector<std::size_t> channel_mapping(const SynthConfig& cfg, int day);

// ---------------------------------------------------------------------------
// Session bundle directory: manifest.json, spikes.csv, kinematics.csv

inline constexpr const char* kSessionFormat = "ndbench-session-v1";

void save_session(const RawSession& raw, const std::filesystem::path& dir);
RawSession load_session(const std::filesystem::path& dir);

}  // namespace ndbench
