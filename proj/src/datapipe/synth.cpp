#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "ndbench/datapipe.hpp"

namespace ndbench {

namespace {

std::mt19937_64 make_rng(std::uint64_t a, std::uint64_t b, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32), static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

// One minimum-jerk reach followed by a dwell at the target.
struct Reach {
  double t0, move_s, dwell_s;
  double ax, ay, bx, by;
};

std::vector<Reach> plan_reaches(const SynthConfig& cfg, int day) {
  auto rng = make_rng(cfg.seed, static_cast<std::uint64_t>(day), 1);
  std::uniform_real_distribution<double> pos(-cfg.arena, cfg.arena);
  std::uniform_real_distribution<double> peak(15.0, 30.0);
  std::uniform_real_distribution<double> dwell(0.1, 0.4);
  std::vector<Reach> out;
  double t = 0.0, x = 0.0, y = 0.0;
  while (t < cfg.duration_s + 1.0) {
    double bx = pos(rng), by = pos(rng);
    const double dist = std::hypot(bx - x, by - y);
    const double move = std::max(0.05, 1.875 * dist / peak(rng));
    const Reach r{t, move, dwell(rng), x, y, bx, by};
    out.push_back(r);
    t += r.move_s + r.dwell_s;
    x = bx;
    y = by;
  }
  return out;
}

struct State {
  double x, y, vx, vy, tx, ty;
};

class Trajectory {
 public:
  explicit Trajectory(std::vector<Reach> reaches) : reaches_(std::move(reaches)) {}

  State at(double t) {
    while (idx_ + 1 < reaches_.size() && reaches_[idx_ + 1].t0 <= t) ++idx_;
    const auto& r = reaches_[idx_];
    const double s = std::clamp((t - r.t0) / r.move_s, 0.0, 1.0);
    const double shape = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    const double dshape = s >= 1.0 ? 0.0 : 30.0 * s * s * (1.0 - s) * (1.0 - s) / r.move_s;
    return {r.ax + (r.bx - r.ax) * shape, r.ay + (r.by - r.ay) * shape, (r.bx - r.ax) * dshape, (r.by - r.ay) * dshape, r.bx, r.by};
  }

 private:
  std::vector<Reach> reaches_;
  std::size_t idx_ = 0;
};

// Inversion sampling; fine for the small per-millisecond means used here.
int poisson_draw(double lambda, double u) {
  if (lambda <= 0.0) return 0;
  double p = std::exp(-lambda);
  double cdf = p;
  int k = 0;
  while (u > cdf && k < 1000) {
    ++k;
    p *= lambda / k;
    cdf += p;
  }
  return k;
}

}  // namespace

SynthConfig SynthConfig::standard(std::size_t channels, double duration_s, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.channels = channels;
  cfg.duration_s = duration_s;
  cfg.seed = seed;
  auto rng = make_rng(seed, 0, 0);
  std::uniform_real_distribution<double> base(8.0, 20.0);
  std::uniform_real_distribution<double> mod(5.0, 15.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  for (std::size_t c = 0; c < channels; ++c) {
    cfg.baseline_rate_hz.push_back(base(rng));
    cfg.modulation_rate_hz.push_back(mod(rng));
    cfg.preferred_direction.push_back(angle(rng));
  }
  return cfg;
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw DataError(DataError::Kind::Precondition, "synthetic config: " + m); };
  if (channels == 0) fail("channels must be >= 1");
  if (!(duration_s > 0.0)) fail("duration_s must be positive");
  if (baseline_rate_hz.size() != channels || modulation_rate_hz.size() != channels || preferred_direction.size() != channels)
    fail("per-channel arrays must have length " + std::to_string(channels));
  for (std::size_t c = 0; c < channels; ++c)
    if (baseline_rate_hz[c] < 0.0 || modulation_rate_hz[c] < 0.0) fail("rates must be >= 0 (channel " + std::to_string(c) + ")");
  if (!(rate_decay > 0.0 && rate_decay <= 1.0)) fail("rate_decay must be in (0, 1]");
  if (!(permute_fraction >= 0.0 && permute_fraction <= 1.0)) fail("permute_fraction must be in [0, 1]");
  if (!(reference_speed > 0.0)) fail("reference_speed must be positive");
  if (!(arena > 0.0)) fail("arena must be positive");
}

std::vector<std::size_t> channel_mapping(const SynthConfig& cfg, int day) {
  std::vector<std::size_t> map(cfg.channels);
  for (std::size_t i = 0; i < map.size(); ++i) map[i] = i;
  const auto k = static_cast<std::size_t>(std::llround(cfg.permute_fraction * static_cast<double>(cfg.channels)));
  if (k < 2) return map;
  for (int d = 1; d <= day; ++d) {
    auto rng = make_rng(cfg.permutation_seed, static_cast<std::uint64_t>(d), 2);
    std::vector<std::size_t> idx(cfg.channels);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(k);
    std::vector<std::size_t> moved(k);
    for (std::size_t i = 0; i < k; ++i) moved[i] = idx[(i + 1) % k];
    // neurons on channels idx[i] move to channel moved[i]
    std::vector<std::size_t> old = map;
    for (std::size_t n = 0; n < map.size(); ++n) {
      for (std::size_t i = 0; i < k; ++i)
        if (old[n] == idx[i]) {
          map[n] = moved[i];
          break;
        }
    }
  }
  return map;
}

RawSession generate_synthetic_session(const SynthConfig& cfg, int day) {
  cfg.validate();
  if (day < 0) throw DataError(DataError::Kind::Precondition, "synthetic day must be >= 0");
  RawSession raw;
  raw.session_id = "synth-s" + std::to_string(cfg.seed) + "-d" + std::to_string(day);
  raw.date_index = day;
  raw.duration_s = cfg.duration_s;

  Trajectory traj(plan_reaches(cfg, day));
  const auto n_kin = static_cast<std::size_t>(std::llround(cfg.duration_s * kKinematicRateHz));
  auto& k = raw.kinematics;
  for (std::size_t i = 0; i < n_kin; ++i) {
    const double t = static_cast<double>(i) / kKinematicRateHz;
    const auto s = traj.at(t);
    k.t_s.push_back(t);
    k.cursor_x.push_back(s.x);
    k.cursor_y.push_back(s.y);
    k.finger_x.push_back(s.x);
    k.finger_y.push_back(s.y);
    k.target_x.push_back(s.tx);
    k.target_y.push_back(s.ty);
  }

  const auto map = channel_mapping(cfg, day);
  const double gain = std::pow(cfg.rate_decay, day);
  const std::size_t C = cfg.channels;
  std::vector<double> ux(C), uy(C);
  for (std::size_t c = 0; c < C; ++c) {
    ux[c] = std::cos(cfg.preferred_direction[c]);
    uy[c] = std::sin(cfg.preferred_direction[c]);
  }
  raw.spike_events.assign(C, {});
  std::vector<double> accum(C, 0.0);
  auto rng = make_rng(cfg.seed, static_cast<std::uint64_t>(day), 3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Trajectory rate_traj(plan_reaches(cfg, day));
  const auto n_ms = static_cast<std::size_t>(std::floor(cfg.duration_s * 1000.0 + 1e-9));
  std::vector<double> times;
  for (std::size_t m = 0; m < n_ms; ++m) {
    const double t0 = static_cast<double>(m) / 1000.0;
    const auto s = rate_traj.at(t0 + 0.0005);
    for (std::size_t n = 0; n < C; ++n) {
      const double proj = (s.vx * ux[n] + s.vy * uy[n]) / cfg.reference_speed;
      const double rate = gain * std::max(0.0, cfg.baseline_rate_hz[n] + cfg.modulation_rate_hz[n] * proj);
      auto& ev = raw.spike_events[map[n]];
      if (cfg.poisson_noise) {
        const int count = poisson_draw(rate * 1e-3, unit(rng));
        times.clear();
        for (int j = 0; j < count; ++j) times.push_back(t0 + unit(rng) * 1e-3);
        std::sort(times.begin(), times.end());
        for (double t : times)
          if (t < cfg.duration_s && (ev.empty() || t > ev.back())) ev.push_back(t);
      } else {
        accum[n] += rate * 1e-3;
        if (accum[n] >= 1.0) {
          accum[n] -= 1.0;
          const double t = t0 + 0.0005;
          if (t < cfg.duration_s) ev.push_back(t);
        }
      }
    }
  }
  return raw;
}

}  // namespace ndbench
