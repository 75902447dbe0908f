#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "ndbench/datapipe.hpp"

using namespace ndbench;
namespace fs = std::filesystem;

namespace {

RawSession tiny_session(double duration, std::vector<std::vector<double>> events) {
  RawSession raw;
  raw.session_id = "tiny";
  raw.duration_s = duration;
  raw.spike_events = std::move(events);
  const auto n = static_cast<std::size_t>(std::llround(duration * 250));
  auto& k = raw.kinematics;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = i / 250.0;
    k.t_s.push_back(t);
    for (auto* c : {&k.finger_x, &k.finger_y, &k.cursor_x, &k.cursor_y, &k.target_x, &k.target_y}) c->push_back(0.0);
  }
  return raw;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ndbench_test_" + name);
  fs::remove_all(p);
  return p;
}

DataError::Kind load_error_kind(const fs::path& dir) {
  try {
    load_session(dir);
  } catch (const DataError& e) {
    return e.kind();
  }
  FAIL("load_session did not throw");
  return DataError::Kind::Io;
}

}  // namespace

TEST_CASE("binning counts events in half-open 10 ms bins") {
  auto raw = tiny_session(0.02, {{0.001, 0.004, 0.012}, {}, {0.010}});
  const auto b = bin_spikes(raw);
  REQUIRE(b.counts.rows == 2);
  CHECK(b.counts(0, 0) == 2);
  CHECK(b.counts(1, 0) == 1);
  CHECK(b.counts(0, 1) == 0);
  CHECK(b.counts(1, 1) == 0);
  CHECK(b.counts(0, 2) == 0);
  CHECK(b.counts(1, 2) == 1);
}

TEST_CASE("bin count is floor(duration * 100) for decimal durations") {
  CHECK(bin_count(0.02) == 2);
  CHECK(bin_count(0.29) == 29);
  CHECK(bin_count(0.295) == 29);
  CHECK(bin_count(300.0) == 30000);
  CHECK(bin_index(0.29) == 29);
  CHECK(bin_index(0.0099999) == 0);
}

TEST_CASE("binning conserves events and drops the trailing partial bin") {
  auto raw = tiny_session(0.035, {{0.0, 0.009, 0.011, 0.02, 0.0299, 0.031, 0.034}});
  const auto b = bin_spikes(raw);
  REQUIRE(b.counts.rows == 3);
  int total = 0;
  for (std::size_t t = 0; t < 3; ++t) total += b.counts(t, 0);
  CHECK(total == 5);
}

TEST_CASE("binning rejects unordered events naming the channel") {
  auto raw = tiny_session(0.02, {{0.001}, {0.005, 0.003}});
  try {
    bin_spikes(raw);
    FAIL("expected throw");
  } catch (const DataError& e) {
    CHECK(e.kind() == DataError::Kind::SpikeOrder);
    CHECK(std::string(e.what()).find("channel 1") != std::string::npos);
  }
}

TEST_CASE("linear interpolation to 1 kHz") {
  const std::vector<double> pos{0.0, 1.0};
  const auto fine = interpolate_to_1khz(pos);
  const std::vector<double> expected{0.0, 0.25, 0.5, 0.75, 1.0};
  REQUIRE(fine.size() == expected.size());
  for (std::size_t i = 0; i < fine.size(); ++i) CHECK(fine[i] == doctest::Approx(expected[i]).epsilon(1e-15));
  CHECK_THROWS_AS(interpolate_to_1khz(std::vector<double>{1.0}), DataError);
}

TEST_CASE("velocity of constant and ramp positions") {
  auto raw = tiny_session(1.0, {{}});
  auto v0 = derive_velocity(raw);
  REQUIRE(v0.rows == 100);
  for (double v : v0.data) CHECK(v == 0.0);

  for (std::size_t i = 0; i < raw.kinematics.size(); ++i) raw.kinematics.cursor_x[i] = raw.kinematics.t_s[i];
  auto v = derive_velocity(raw);
  // Central differences of an exact ramp are exact; the trailing bin extends
  // past the last sample and reuses the available ones.
  for (std::size_t t = 0; t < v.rows; ++t) {
    CHECK(v(t, 0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(v(t, 1) == 0.0);
  }

  raw.kinematics = Kinematics{{0.0}, {0.0}, {0.0}, {0.0}, {0.0}, {0.0}, {0.0}};
  CHECK_THROWS_AS(derive_velocity(raw), DataError);
}

TEST_CASE("z-score normalization examples") {
  Matrix<double> f(3, 2);
  f(0, 0) = f(1, 0) = f(2, 0) = 1.0;
  f(0, 1) = 0.0;
  f(1, 1) = 2.0;
  f(2, 1) = 7.0;
  Matrix<double> vel(3, 2, 0.0);
  auto s = fit_normalization(f, vel, 0, 2);
  CHECK(s.channel_mean[0] == 1.0);
  CHECK(s.channel_std[0] == kStdFloor);
  CHECK(s.channel_mean[1] == 1.0);
  CHECK(s.channel_std[1] == 1.0);
  const auto z = normalize_features(f, s);
  CHECK(z(0, 0) == 0.0f);
  CHECK(z(2, 0) == 0.0f);
  CHECK(z(0, 1) == -1.0f);
  CHECK(z(1, 1) == 1.0f);
  // stats from the train rows apply verbatim to later rows
  CHECK(z(2, 1) == 6.0f);
  CHECK_THROWS_AS(fit_normalization(f, vel, 2, 2), DataError);
  CHECK(denormalize_velocity(1.0, 0, NormStats{{}, {}, {3.0, 0.0}, {2.0, 1.0}}) == 5.0);
}

TEST_CASE("gaussian kernel is normalized and matches the direct formula") {
  for (double sigma : {0.5, 1.0, 2.5, 4.0, 7.3}) {
    const auto k = gaussian_kernel(sigma);
    CHECK(k.size() == 2 * static_cast<std::size_t>(std::ceil(3 * sigma)) + 1);
    double s = 0.0;
    for (double v : k) s += v;
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  // Unit impulse, sigma = 1 bin (10 ms at 10 ms bins)
  Matrix<double> x(21, 1, 0.0);
  x(10, 0) = 1.0;
  const auto y = gaussian_smooth(x, 10.0);
  double g[7], z = 0.0;
  for (int i = -3; i <= 3; ++i) z += g[i + 3] = std::exp(-0.5 * i * i) / std::sqrt(2 * std::numbers::pi);
  CHECK(g[3] == doctest::Approx(0.3989422804014327).epsilon(1e-15));
  for (int i = -10; i <= 10; ++i) {
    const double expect = std::abs(i) <= 3 ? g[i + 3] / z : 0.0;
    CHECK(y(static_cast<std::size_t>(10 + i), 0) == doctest::Approx(expect).epsilon(1e-14));
  }
  double total = 0.0;
  for (double v : y.data) total += v;
  CHECK(std::abs(total - 1.0) < 1e-9);
}

TEST_CASE("gaussian smoothing identities and edge handling") {
  Matrix<double> c(30, 2, 3.5);
  const auto sc = gaussian_smooth(c, 40.0);
  for (double v : sc.data) CHECK(v == doctest::Approx(3.5).epsilon(1e-12));

  Matrix<double> r(30, 1);
  for (std::size_t i = 0; i < 30; ++i) r(i, 0) = std::sin(0.7 * i) + 0.1 * i;
  CHECK(gaussian_smooth(r, 0.0) == r);

  // Shift-equivariant on the interior
  Matrix<double> shifted(30, 1, 0.0);
  for (std::size_t i = 1; i < 30; ++i) shifted(i, 0) = r(i - 1, 0);
  const auto a = gaussian_smooth(r, 20.0), b = gaussian_smooth(shifted, 20.0);
  for (std::size_t i = 7; i < 24; ++i) CHECK(b(i, 0) == doctest::Approx(a(i - 1, 0)).epsilon(1e-12));

  // Half-sample symmetric reflection at the left edge
  Matrix<double> e(10, 1, 0.0);
  e(0, 0) = 1.0;
  const auto k = gaussian_kernel(1.0);
  const auto se = gaussian_smooth(e, 10.0);
  CHECK(se(0, 0) == doctest::Approx(k[3] + k[2]).epsilon(1e-14));
  CHECK(se(1, 0) == doctest::Approx(k[2] + k[1]).epsilon(1e-14));
  CHECK_THROWS_AS(gaussian_smooth(e, -1.0), DataError);
}

TEST_CASE("window tiling and chronological split") {
  auto seg = std::make_shared<Segment>();
  seg->session_id = "s";
  seg->features = Matrix<float>(10, 3, 0.0f);
  seg->targets = Matrix<float>(10, 2, 0.0f);
  for (std::size_t i = 0; i < 10; ++i) seg->features(i, 0) = static_cast<float>(i);
  std::shared_ptr<const Segment> cs = seg;

  auto w4 = make_windows(cs, 4, 4);
  REQUIRE(w4.size() == 2);
  CHECK(w4.samples[0].tag.start_bin == 0);
  CHECK(w4.samples[1].tag.start_bin == 4);
  CHECK(w4.input(1)[0] == 4.0f);
  CHECK(w4.input(1).size() == 12);
  CHECK(w4.channels() == 3);

  auto w2 = make_windows(cs, 4, 2);
  REQUIRE(w2.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(w2.samples[i].tag.start_bin == 2 * i);

  try {
    seg->features = Matrix<float>(3, 3);
    make_windows(cs, 4, 1);
    FAIL("expected throw");
  } catch (const DataError& e) {
    const std::string m = e.what();
    CHECK(m.find("S=4") != std::string::npos);
    CHECK(m.find("T=3") != std::string::npos);
  }

  const auto sp = split_bins(100);
  CHECK(sp.train_end == 80);
  CHECK(sp.total == 100);

  auto big = std::make_shared<Segment>();
  big->features = Matrix<float>(100, 1);
  big->targets = Matrix<float>(100, 2);
  auto w10 = make_windows(big, 10, 10);
  auto [tr, te] = split_train_test(w10, 80);
  CHECK(tr.size() == 8);
  CHECK(te.size() == 2);

  auto w7 = make_windows(big, 10, 7);
  auto [tr7, te7] = split_train_test(w7, 80);
  for (const auto& w : tr7.samples) CHECK(w.tag.start_bin + 10 <= 80);
  for (const auto& w : te7.samples) CHECK(w.tag.start_bin >= 80);
  // the window starting at 77 straddles the boundary
  CHECK(tr7.size() + te7.size() + 1 == w7.size());
}

TEST_CASE("prepared session normalizes the training side") {
  auto cfg = SynthConfig::standard(16, 30.0, 11);
  auto raw = generate_synthetic_session(cfg, 0);
  auto p = prepare_session(raw);
  CHECK(p.total_bins == 3000);
  CHECK(p.split.train_end == 2400);
  REQUIRE(p.train->length() == 2400);
  REQUIRE(p.test->length() == 600);
  CHECK(p.test->first_bin == 2400);
  for (std::size_t c = 0; c < 16; ++c) {
    double m = 0.0, s = 0.0;
    for (std::size_t t = 0; t < 2400; ++t) m += p.train->features(t, c);
    m /= 2400;
    for (std::size_t t = 0; t < 2400; ++t) s += (p.train->features(t, c) - m) * (p.train->features(t, c) - m);
    s = std::sqrt(s / 2400);
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(s - 1.0) < 1e-4);
  }
}

TEST_CASE("pooled statistics across sessions") {
  auto cfg = SynthConfig::standard(8, 20.0, 12);
  cfg.rate_decay = 0.5;
  const std::vector<RawSession> raws{generate_synthetic_session(cfg, 0), generate_synthetic_session(cfg, 1)};
  const auto own = prepare_sessions(raws);
  CHECK(own[1].norm.channel_mean == prepare_session(raws[1]).norm.channel_mean);

  PreprocessConfig pc;
  pc.global_norm = true;
  const auto pooled = prepare_sessions(raws, pc);
  REQUIRE(pooled.size() == 2);
  CHECK(pooled[0].norm.channel_mean == pooled[1].norm.channel_mean);
  CHECK(pooled[0].norm.vel_std == pooled[1].norm.vel_std);
  // the halved day-1 rates pull its pooled features below zero
  for (std::size_t c = 0; c < 8; ++c) {
    double m0 = 0.0, m1 = 0.0, all = 0.0, sq = 0.0;
    const auto& a = pooled[0].train->features;
    const auto& b = pooled[1].train->features;
    for (std::size_t t = 0; t < a.rows; ++t) m0 += a(t, c);
    for (std::size_t t = 0; t < b.rows; ++t) m1 += b(t, c);
    all = (m0 + m1) / static_cast<double>(a.rows + b.rows);
    for (std::size_t t = 0; t < a.rows; ++t) sq += (a(t, c) - all) * (a(t, c) - all);
    for (std::size_t t = 0; t < b.rows; ++t) sq += (b(t, c) - all) * (b(t, c) - all);
    CHECK(std::abs(all) < 1e-5);
    CHECK(std::abs(std::sqrt(sq / static_cast<double>(a.rows + b.rows)) - 1.0) < 1e-4);
    CHECK(m1 / static_cast<double>(b.rows) < m0 / static_cast<double>(a.rows));
  }
  auto narrow = cfg;
  narrow.channels = 4;
  narrow.baseline_rate_hz.resize(4);
  narrow.modulation_rate_hz.resize(4);
  narrow.preferred_direction.resize(4);
  CHECK_THROWS_AS(prepare_sessions({raws[0], generate_synthetic_session(narrow, 0)}, pc), DataError);
}

TEST_CASE("synthetic baseline rate matches within 3 standard errors") {
  auto cfg = SynthConfig::standard(8, 200.0, 5);
  for (std::size_t c = 0; c < 8; ++c) {
    cfg.baseline_rate_hz[c] = 5.0 + 3.0 * c;
    cfg.modulation_rate_hz[c] = 0.0;
  }
  auto raw = generate_synthetic_session(cfg, 0);
  for (std::size_t c = 0; c < 8; ++c) {
    const double expected = cfg.baseline_rate_hz[c] * cfg.duration_s;
    const double n = static_cast<double>(raw.spike_events[c].size());
    CHECK(std::abs(n - expected) < 3.0 * std::sqrt(expected));
  }
}

TEST_CASE("synthetic rate decay halves the day-1 rate") {
  auto cfg = SynthConfig::standard(8, 200.0, 6);
  for (auto& m : cfg.modulation_rate_hz) m = 0.0;
  cfg.rate_decay = 0.5;
  auto count = [](const RawSession& r) {
    double n = 0;
    for (const auto& e : r.spike_events) n += static_cast<double>(e.size());
    return n;
  };
  const double n0 = count(generate_synthetic_session(cfg, 0));
  const double n1 = count(generate_synthetic_session(cfg, 1));
  CHECK(std::abs(n1 - 0.5 * n0) < 3.0 * std::sqrt(n1 + 0.25 * n0));
}

TEST_CASE("synthetic sessions are deterministic and valid") {
  auto cfg = SynthConfig::standard(12, 10.0, 3);
  const auto a = generate_synthetic_session(cfg, 2);
  const auto b = generate_synthetic_session(cfg, 2);
  CHECK(a == b);
  CHECK_NOTHROW(validate(a));
  CHECK(a.date_index == 2);
  CHECK(a.kinematics.size() == 2500);
  const auto c = generate_synthetic_session(cfg, 3);
  CHECK_FALSE(a == c);

  cfg.poisson_noise = false;
  CHECK_NOTHROW(validate(generate_synthetic_session(cfg, 0)));

  cfg.rate_decay = 0.0;
  CHECK_THROWS_AS(generate_synthetic_session(cfg, 0), DataError);
}

TEST_CASE("channel permutation is cumulative and partial") {
  auto cfg = SynthConfig::standard(50, 1.0, 0);
  const auto m0 = channel_mapping(cfg, 0);
  for (std::size_t i = 0; i < 50; ++i) CHECK(m0[i] == i);
  for (int day = 1; day <= 4; ++day) {
    const auto prev = channel_mapping(cfg, day - 1);
    const auto m = channel_mapping(cfg, day);
    std::vector<int> seen(50, 0);
    for (auto c : m) ++seen[c];
    for (int s : seen) CHECK(s == 1);
    int changed = 0;
    for (std::size_t i = 0; i < 50; ++i) changed += prev[i] != m[i];
    CHECK(changed == 10);
  }
}

TEST_CASE("session bundle round trip") {
  auto cfg = SynthConfig::standard(6, 4.0, 9);
  const auto raw = generate_synthetic_session(cfg, 1);
  const auto dir = temp_dir("roundtrip");
  save_session(raw, dir);
  CHECK(fs::exists(dir / "manifest.json"));
  const auto back = load_session(dir);
  CHECK(back == raw);
  fs::remove_all(dir);
}

TEST_CASE("session bundle errors have distinct kinds") {
  auto cfg = SynthConfig::standard(3, 1.0, 9);
  const auto raw = generate_synthetic_session(cfg, 0);
  auto fresh = [&](const std::string& name) {
    auto d = temp_dir(name);
    save_session(raw, d);
    return d;
  };
  auto overwrite = [](const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::trunc) << text; };

  auto d = fresh("missing");
  fs::remove(d / "kinematics.csv");
  CHECK(load_error_kind(d) == DataError::Kind::MissingFile);

  d = fresh("manifest");
  overwrite(d / "manifest.json", "{\"format\": \"ndbench-session-v1\", \"session_id\": 3");
  CHECK(load_error_kind(d) == DataError::Kind::Manifest);

  d = fresh("format");
  overwrite(d / "manifest.json",
            R"({"format":"other","session_id":"x","date_index":0,"num_channels":3,"duration_s":1.0,"kin_rate_hz":250})");
  CHECK(load_error_kind(d) == DataError::Kind::Manifest);

  d = fresh("channels");
  overwrite(d / "manifest.json",
            R"({"format":"ndbench-session-v1","session_id":"x","date_index":0,"num_channels":2,"duration_s":1.0,"kin_rate_hz":250})");
  CHECK(load_error_kind(d) == DataError::Kind::ChannelMismatch);

  d = fresh("order");
  overwrite(d / "spikes.csv", "channel,time_s\n0,0.5\n0,0.25\n");
  CHECK(load_error_kind(d) == DataError::Kind::SpikeOrder);

  d = fresh("samples");
  overwrite(d / "kinematics.csv", "t_s,finger_x,finger_y,cursor_x,cursor_y,target_x,target_y\n0,0,0,0,0,0,0\n");
  CHECK(load_error_kind(d) == DataError::Kind::SampleCount);

  d = fresh("parse");
  overwrite(d / "spikes.csv", "channel,time_s\n0,abc\n");
  CHECK(load_error_kind(d) == DataError::Kind::Parse);

  for (const char* n : {"missing", "manifest", "format", "channels", "order", "samples", "parse"}) fs::remove_all(temp_dir(n));
}

TEST_CASE("synthetic sessions are linearly decodable") {
  auto cfg = SynthConfig::standard(96, 300.0, 1);
  const auto p = prepare_session(generate_synthetic_session(cfg, 0));
  auto design = [](const Segment& s) {
    Eigen::MatrixXd X(s.length(), s.features.cols + 1);
    for (std::size_t t = 0; t < s.length(); ++t) {
      for (std::size_t c = 0; c < s.features.cols; ++c) X(t, c) = s.features(t, c);
      X(t, s.features.cols) = 1.0;
    }
    Eigen::MatrixXd Y(s.length(), 2);
    for (std::size_t t = 0; t < s.length(); ++t)
      for (std::size_t a = 0; a < 2; ++a) Y(t, a) = s.targets(t, a);
    return std::pair{X, Y};
  };
  auto [Xtr, Ytr] = design(*p.train);
  auto [Xte, Yte] = design(*p.test);
  const Eigen::MatrixXd A = Xtr.transpose() * Xtr + 1e-3 * Eigen::MatrixXd::Identity(Xtr.cols(), Xtr.cols());
  const Eigen::MatrixXd W = A.ldlt().solve(Xtr.transpose() * Ytr);
  const Eigen::MatrixXd P = Xte * W;
  double r2 = 0.0;
  for (int a = 0; a < 2; ++a) {
    const double mean = Yte.col(a).mean();
    const double ss_res = (Yte.col(a) - P.col(a)).squaredNorm();
    const double ss_tot = (Yte.col(a).array() - mean).square().sum();
    r2 += 0.5 * (1.0 - ss_res / ss_tot);
  }
  MESSAGE("linear decoder test R2 = " << r2);
  CHECK(r2 > 0.5);
}
