#include <algorithm>
#include <cmath>
#include <numbers>

#include "ndbench/datapipe.hpp"

namespace ndbench {

namespace {

double edge(std::size_t k) { return static_cast<double>(k) / 100.0; }

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<std::ptrdiff_t>(n)) m = period - 1 - m;
  return static_cast<std::size_t>(m);
}

Matrix<double> row_range(const Matrix<double>& m, std::size_t begin, std::size_t end) {
  Matrix<double> out(end - begin, m.cols);
  std::copy(m.data.begin() + static_cast<std::ptrdiff_t>(begin * m.cols), m.data.begin() + static_cast<std::ptrdiff_t>(end * m.cols),
            out.data.begin());
  return out;
}

}  // namespace

void validate(const RawSession& raw) {
  if (!(raw.duration_s > 0.0)) throw DataError(DataError::Kind::Precondition, "session '" + raw.session_id + "': duration must be positive");
  for (std::size_t c = 0; c < raw.spike_events.size(); ++c) {
    const auto& ev = raw.spike_events[c];
    for (std::size_t i = 0; i < ev.size(); ++i) {
      if (!(ev[i] >= 0.0 && ev[i] < raw.duration_s))
        throw DataError(DataError::Kind::SpikeOrder, "channel " + std::to_string(c) + ": event time " + std::to_string(ev[i]) +
                                                         " outside [0, duration)");
      if (i > 0 && !(ev[i] > ev[i - 1]))
        throw DataError(DataError::Kind::SpikeOrder, "channel " + std::to_string(c) + ": event times not strictly ascending at index " +
                                                         std::to_string(i));
    }
  }
  const auto& k = raw.kinematics;
  const auto expected = static_cast<std::size_t>(std::llround(raw.duration_s * kKinematicRateHz));
  if (k.size() != expected)
    throw DataError(DataError::Kind::SampleCount, "session '" + raw.session_id + "': " + std::to_string(k.size()) +
                                                      " kinematic samples, expected " + std::to_string(expected));
  for (const auto* col : {&k.finger_x, &k.finger_y, &k.cursor_x, &k.cursor_y, &k.target_x, &k.target_y})
    if (col->size() != k.size()) throw DataError(DataError::Kind::SampleCount, "kinematic columns have unequal lengths");
}

std::size_t bin_count(double duration_s) {
  auto t = static_cast<std::size_t>(std::max(0.0, std::floor(duration_s * 100.0)));
  while (edge(t + 1) <= duration_s) ++t;
  while (t > 0 && edge(t) > duration_s) --t;
  return t;
}

std::size_t bin_index(double time_s) {
  auto b = static_cast<std::size_t>(std::max(0.0, std::floor(time_s * 100.0)));
  while (edge(b + 1) <= time_s) ++b;
  while (b > 0 && edge(b) > time_s) --b;
  return b;
}

BinnedSession bin_spikes(const RawSession& raw) {
  BinnedSession out;
  out.session_id = raw.session_id;
  out.date_index = raw.date_index;
  const std::size_t T = bin_count(raw.duration_s);
  const std::size_t C = raw.num_channels();
  out.counts = Matrix<std::int32_t>(T, C, 0);
  for (std::size_t c = 0; c < C; ++c) {
    const auto& ev = raw.spike_events[c];
    for (std::size_t i = 0; i < ev.size(); ++i) {
      if (i > 0 && !(ev[i] > ev[i - 1]))
        throw DataError(DataError::Kind::SpikeOrder, "channel " + std::to_string(c) + ": event times not strictly ascending");
      if (ev[i] < 0.0) throw DataError(DataError::Kind::SpikeOrder, "channel " + std::to_string(c) + ": negative event time");
      const std::size_t b = bin_index(ev[i]);
      if (b < T) ++out.counts(b, c);
    }
  }
  return out;
}

std::vector<double> interpolate_to_1khz(std::span<const double> samples) {
  if (samples.size() < 2) throw DataError(DataError::Kind::Precondition, "velocity needs at least 2 kinematic samples");
  const std::size_t n = samples.size();
  std::vector<double> out((n - 1) * 4 + 1);
  for (std::size_t j = 0; j < out.size(); ++j) {
    const std::size_t i = j / 4;
    const double frac = static_cast<double>(j % 4) / 4.0;
    out[j] = i + 1 < n ? samples[i] + frac * (samples[i + 1] - samples[i]) : samples[i];
  }
  return out;
}

Matrix<double> derive_velocity(const RawSession& raw, VelocitySource source) {
  const auto& k = raw.kinematics;
  const auto& xs = source == VelocitySource::Cursor ? k.cursor_x : k.finger_x;
  const auto& ys = source == VelocitySource::Cursor ? k.cursor_y : k.finger_y;
  if (xs.size() < 2 || ys.size() < 2) throw DataError(DataError::Kind::Precondition, "velocity needs at least 2 kinematic samples");
  const std::size_t T = bin_count(raw.duration_s);
  Matrix<double> vel(T, 2, 0.0);
  for (std::size_t axis = 0; axis < 2; ++axis) {
    const auto fine = interpolate_to_1khz(axis == 0 ? xs : ys);
    const std::size_t n = fine.size();
    std::vector<double> v(n);
    v[0] = (fine[1] - fine[0]) * 1000.0;
    v[n - 1] = (fine[n - 1] - fine[n - 2]) * 1000.0;
    for (std::size_t j = 1; j + 1 < n; ++j) v[j] = (fine[j + 1] - fine[j - 1]) * 500.0;
    double last = v[n - 1];
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t lo = 10 * t;
      const std::size_t hi = std::min(lo + 10, n);
      if (lo >= hi) {
        vel(t, axis) = last;
        continue;
      }
      double s = 0.0;
      for (std::size_t j = lo; j < hi; ++j) s += v[j];
      vel(t, axis) = last = s / static_cast<double>(hi - lo);
    }
  }
  return vel;
}

NormStats fit_normalization(const Matrix<double>& features, const Matrix<double>& velocity, std::size_t begin, std::size_t end) {
  if (begin >= end || end > features.rows) throw DataError(DataError::Kind::Precondition, "fit_normalization: empty or invalid train range");
  if (velocity.rows != features.rows) throw DataError(DataError::Kind::Precondition, "fit_normalization: feature/velocity rows differ");
  const auto n = static_cast<double>(end - begin);
  auto stats_of = [&](const Matrix<double>& m, std::vector<double>& mu, std::vector<double>& sd) {
    mu.assign(m.cols, 0.0);
    sd.assign(m.cols, 0.0);
    for (std::size_t r = begin; r < end; ++r)
      for (std::size_t c = 0; c < m.cols; ++c) mu[c] += m(r, c);
    for (auto& v : mu) v /= n;
    for (std::size_t r = begin; r < end; ++r)
      for (std::size_t c = 0; c < m.cols; ++c) sd[c] += (m(r, c) - mu[c]) * (m(r, c) - mu[c]);
    for (auto& v : sd) v = std::max(kStdFloor, std::sqrt(v / n));
  };
  NormStats s;
  stats_of(features, s.channel_mean, s.channel_std);
  stats_of(velocity, s.vel_mean, s.vel_std);
  return s;
}

Matrix<float> normalize_features(const Matrix<double>& features, const NormStats& stats) {
  if (stats.channel_mean.size() != features.cols) throw DataError(DataError::Kind::Precondition, "normalize_features: channel count differs from stats");
  Matrix<float> out(features.rows, features.cols);
  for (std::size_t r = 0; r < features.rows; ++r)
    for (std::size_t c = 0; c < features.cols; ++c)
      out(r, c) = static_cast<float>((features(r, c) - stats.channel_mean[c]) / stats.channel_std[c]);
  return out;
}

Matrix<float> normalize_velocity(const Matrix<double>& velocity, const NormStats& stats) {
  Matrix<float> out(velocity.rows, velocity.cols);
  for (std::size_t r = 0; r < velocity.rows; ++r)
    for (std::size_t c = 0; c < velocity.cols; ++c)
      out(r, c) = static_cast<float>((velocity(r, c) - stats.vel_mean[c]) / stats.vel_std[c]);
  return out;
}

double denormalize_velocity(double z, std::size_t axis, const NormStats& stats) {
  return z * stats.vel_std[axis] + stats.vel_mean[axis];
}

std::vector<double> gaussian_kernel(double sigma_bins) {
  if (sigma_bins <= 0.0) return {1.0};
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma_bins));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  const double norm = 1.0 / (std::sqrt(2.0 * std::numbers::pi) * sigma_bins);
  double z = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double x = static_cast<double>(i);
    z += k[static_cast<std::size_t>(i + radius)] = norm * std::exp(-x * x / (2.0 * sigma_bins * sigma_bins));
  }
  for (auto& v : k) v /= z;
  return k;
}

Matrix<double> gaussian_smooth(const Matrix<double>& series, double sigma_ms, int bin_width_ms) {
  if (sigma_ms < 0.0) throw DataError(DataError::Kind::Precondition, "gaussian_smooth: sigma must be >= 0");
  if (sigma_ms == 0.0 || series.rows == 0) return series;
  const auto k = gaussian_kernel(sigma_ms / bin_width_ms);
  const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
  Matrix<double> out(series.rows, series.cols, 0.0);
  for (std::size_t t = 0; t < series.rows; ++t) {
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
      const std::size_t src = reflect_index(static_cast<std::ptrdiff_t>(t) + i, series.rows);
      const double w = k[static_cast<std::size_t>(i + radius)];
      for (std::size_t c = 0; c < series.cols; ++c) out(t, c) += w * series(src, c);
    }
  }
  return out;
}

std::span<const float> WindowSet::input(std::size_t i) const {
  const auto& w = samples[i];
  const auto& f = w.source->features;
  return {f.data.data() + w.offset * f.cols, S * f.cols};
}

std::span<const float> WindowSet::target(std::size_t i) const {
  const auto& w = samples[i];
  const auto& t = w.source->targets;
  return {t.data.data() + w.offset * t.cols, S * t.cols};
}

std::size_t WindowSet::channels() const { return samples.empty() ? 0 : samples.front().source->features.cols; }

void WindowSet::append(const WindowSet& other) {
  if (other.empty()) return;
  if (!empty() && other.S != S) throw DataError(DataError::Kind::Precondition, "cannot merge window sets with different S");
  if (empty()) {
    S = other.S;
    stride = other.stride;
  }
  samples.insert(samples.end(), other.samples.begin(), other.samples.end());
}

WindowSet make_windows(std::shared_ptr<const Segment> segment, std::size_t S, std::size_t stride) {
  const std::size_t T = segment->length();
  if (S == 0 || stride == 0) throw DataError(DataError::Kind::Precondition, "make_windows: S and stride must be >= 1");
  if (S > T)
    throw DataError(DataError::Kind::Precondition, "make_windows: window length S=" + std::to_string(S) + " exceeds series length T=" +
                                                       std::to_string(T));
  WindowSet ws;
  ws.S = S;
  ws.stride = stride;
  for (std::size_t start = 0; start + S <= T; start += stride)
    ws.samples.push_back({segment, start, {segment->session_id, segment->date_index, segment->first_bin + start}});
  return ws;
}

SplitPoint split_bins(std::size_t total_bins, double train_fraction) {
  const auto train_end = static_cast<std::size_t>(std::floor(static_cast<double>(total_bins) * train_fraction + 1e-9));
  return {std::min(train_end, total_bins), total_bins};
}

std::pair<WindowSet, WindowSet> split_train_test(const WindowSet& windows, std::size_t boundary_bin) {
  WindowSet train, test;
  train.S = test.S = windows.S;
  train.stride = test.stride = windows.stride;
  for (const auto& w : windows.samples) {
    if (w.tag.start_bin + windows.S <= boundary_bin)
      train.samples.push_back(w);
    else if (w.tag.start_bin >= boundary_bin)
      test.samples.push_back(w);
  }
  return {std::move(train), std::move(test)};
}

namespace {

struct SmoothedSession {
  std::size_t total_bins = 0;
  SplitPoint split;
  Matrix<double> train_feat, test_feat, train_vel, test_vel;
};

SmoothedSession smooth_session(const RawSession& raw, const PreprocessConfig& cfg) {
  auto binned = bin_spikes(raw);
  binned.velocity = derive_velocity(raw, cfg.velocity_source);
  const std::size_t T = binned.counts.rows;
  const std::size_t C = binned.counts.cols;
  SmoothedSession s;
  s.total_bins = T;
  s.split = split_bins(T, cfg.train_fraction);
  if (s.split.train_end == 0 || s.split.train_end >= T)
    throw DataError(DataError::Kind::Precondition, "session '" + raw.session_id + "' too short to split (" + std::to_string(T) + " bins)");

  Matrix<double> counts(T, C);
  for (std::size_t i = 0; i < counts.data.size(); ++i) counts.data[i] = binned.counts.data[i];

  const std::size_t b = s.split.train_end;
  s.train_feat = gaussian_smooth(row_range(counts, 0, b), cfg.sigma_ms);
  s.test_feat = gaussian_smooth(row_range(counts, b, T), cfg.sigma_ms);
  s.train_vel = row_range(binned.velocity, 0, b);
  s.test_vel = row_range(binned.velocity, b, T);
  if (cfg.smooth_velocity) {
    s.train_vel = gaussian_smooth(s.train_vel, cfg.sigma_ms);
    s.test_vel = gaussian_smooth(s.test_vel, cfg.sigma_ms);
  }
  return s;
}

PreparedSession finish_session(const RawSession& raw, const SmoothedSession& s, NormStats norm) {
  PreparedSession out;
  out.session_id = raw.session_id;
  out.date_index = raw.date_index;
  out.total_bins = s.total_bins;
  out.split = s.split;
  out.norm = std::move(norm);
  auto make_segment = [&](const Matrix<double>& f, const Matrix<double>& v, std::size_t first) {
    auto seg = std::make_shared<Segment>();
    seg->session_id = raw.session_id;
    seg->date_index = raw.date_index;
    seg->first_bin = first;
    seg->features = normalize_features(f, out.norm);
    seg->targets = normalize_velocity(v, out.norm);
    return std::shared_ptr<const Segment>(std::move(seg));
  };
  out.train = make_segment(s.train_feat, s.train_vel, 0);
  out.test = make_segment(s.test_feat, s.test_vel, s.split.train_end);
  return out;
}

Matrix<double> stack_rows(const std::vector<const Matrix<double>*>& parts) {
  std::size_t rows = 0;
  for (const auto* m : parts) rows += m->rows;
  Matrix<double> out(rows, parts.front()->cols);
  auto it = out.data.begin();
  for (const auto* m : parts) it = std::copy(m->data.begin(), m->data.end(), it);
  return out;
}

}  // namespace

PreparedSession prepare_session(const RawSession& raw, const PreprocessConfig& cfg) {
  const auto s = smooth_session(raw, cfg);
  return finish_session(raw, s, fit_normalization(s.train_feat, s.train_vel, 0, s.split.train_end));
}

std::vector<PreparedSession> prepare_sessions(const std::vector<RawSession>& raws, const PreprocessConfig& cfg) {
  std::vector<PreparedSession> out;
  if (!cfg.global_norm) {
    for (const auto& r : raws) out.push_back(prepare_session(r, cfg));
    return out;
  }
  if (raws.empty()) throw DataError(DataError::Kind::Precondition, "prepare_sessions: no sessions");
  std::vector<SmoothedSession> smoothed;
  std::vector<const Matrix<double>*> feats, vels;
  for (const auto& r : raws) {
    smoothed.push_back(smooth_session(r, cfg));
    if (smoothed.back().train_feat.cols != smoothed.front().train_feat.cols)
      throw DataError(DataError::Kind::ChannelMismatch, "session " + r.session_id + " has " + std::to_string(smoothed.back().train_feat.cols) +
                                                            " channels, expected " + std::to_string(smoothed.front().train_feat.cols));
  }
  for (const auto& s : smoothed) {
    feats.push_back(&s.train_feat);
    vels.push_back(&s.train_vel);
  }
  const auto f = stack_rows(feats), v = stack_rows(vels);
  const auto pooled = fit_normalization(f, v, 0, f.rows);
  for (std::size_t i = 0; i < raws.size(); ++i) out.push_back(finish_session(raws[i], smoothed[i], pooled));
  return out;
}

}  // namespace ndbench
