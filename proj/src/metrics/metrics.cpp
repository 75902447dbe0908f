#include "ndbench/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace ndbench {

double r_squared(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size())
    throw MetricsError("r_squared: length mismatch " + std::to_string(y.size()) + " vs " + std::to_string(y_hat.size()));
  if (y.size() < 2) throw MetricsError("r_squared: need at least 2 samples, got " + std::to_string(y.size()));
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double rss = 0.0, tss = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    rss += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
    tss += (y[i] - mean) * (y[i] - mean);
  }
  if (!(tss > 0.0)) throw MetricsError("r_squared: undefined for a constant target (TSS = 0)");
  return 1.0 - rss / tss;
}

void Predictions::append(const Predictions& other) {
  for (int a = 0; a < 2; ++a) {
    y[a].insert(y[a].end(), other.y[a].begin(), other.y[a].end());
    y_hat[a].insert(y_hat[a].end(), other.y_hat[a].begin(), other.y_hat[a].end());
  }
}

Predictions predict(const Model<float>& model, const NormStats& norm, const WindowSet& windows, std::size_t batch) {
  if (windows.empty()) throw MetricsError("evaluate: empty window set");
  const std::size_t S = windows.S, C = windows.channels();
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto &ta = windows.samples[a].tag, &tb = windows.samples[b].tag;
    return std::tie(ta.date_index, ta.session_id, ta.start_bin) < std::tie(tb.date_index, tb.session_id, tb.start_bin);
  });
  for (std::size_t i = 1; i < order.size(); ++i) {
    const auto &p = windows.samples[order[i - 1]].tag, &q = windows.samples[order[i]].tag;
    if (p.session_id == q.session_id && q.start_bin < p.start_bin + S)
      throw MetricsError("evaluate: windows at bins " + std::to_string(p.start_bin) + " and " + std::to_string(q.start_bin) +
                         " of " + p.session_id + " overlap (S=" + std::to_string(S) + ")");
  }

  Predictions out;
  for (auto& v : out.y) v.reserve(order.size() * S);
  for (auto& v : out.y_hat) v.reserve(order.size() * S);
  NoGradGuard ng;
  batch = std::max<std::size_t>(batch, 1);
  for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
    const std::size_t nb = std::min(batch, order.size() - b0);
    std::vector<float> x(nb * S * C);
    for (std::size_t j = 0; j < nb; ++j) {
      const auto in = windows.input(order[b0 + j]);
      std::copy(in.begin(), in.end(), x.begin() + static_cast<std::ptrdiff_t>(j * S * C));
    }
    const auto y = model.forward(Tensor<float>::from({nb, S, C}, std::move(x)));
    const auto yd = y.data();
    for (std::size_t j = 0; j < nb; ++j) {
      const auto tgt = windows.target(order[b0 + j]);
      for (std::size_t t = 0; t < S; ++t)
        for (std::size_t a = 0; a < 2; ++a) {
          out.y[a].push_back(denormalize_velocity(tgt[t * 2 + a], a, norm));
          out.y_hat[a].push_back(denormalize_velocity(yd[(j * S + t) * 2 + a], a, norm));
        }
    }
  }
  return out;
}

void score(const Predictions& p, MetricsRecord& rec, R2Mode mode) {
  rec.r2_x = r_squared(p.y[0], p.y_hat[0]);
  rec.r2_y = r_squared(p.y[1], p.y_hat[1]);
  if (mode == R2Mode::AxisMean) {
    rec.r2_avg = 0.5 * (rec.r2_x + rec.r2_y);
    return;
  }
  std::vector<double> y(p.y[0]), yh(p.y_hat[0]);
  y.insert(y.end(), p.y[1].begin(), p.y[1].end());
  yh.insert(yh.end(), p.y_hat[1].begin(), p.y_hat[1].end());
  rec.r2_avg = r_squared(y, yh);
}

MetricsRecord evaluate(const Model<float>& model, const NormStats& norm, const WindowSet& windows, R2Mode mode) {
  MetricsRecord rec;
  rec.model = kind_name(model.config().kind);
  rec.params = model.params().scalar_count();
  if (!windows.empty()) {
    rec.session = windows.samples.front().tag.session_id;
    rec.date_index = windows.samples.front().tag.date_index;
  }
  score(predict(model, norm, windows), rec, mode);
  return rec;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw MetricsError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

LatencyReport bench_latency(const Model<float>& model, std::size_t S, const LatencyOptions& opt) {
  const std::size_t C = model.config().input_channels;
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<float> nd;
  std::vector<float> v(S * C);
  for (auto& e : v) e = nd(rng);
  const auto x = Tensor<float>::from({1, S, C}, std::move(v));
  NoGradGuard ng;
  for (std::size_t i = 0; i < opt.warmup; ++i) (void)model.forward(x);

  LatencyReport r;
  r.S = S;
  r.window_ms = static_cast<double>(S * kBinWidthMs);
  r.samples = std::max<std::size_t>(opt.samples, 1);
  r.sample_s.reserve(r.samples);
  volatile float sink = 0.0f;
  for (std::size_t i = 0; i < r.samples; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto y = model.forward(x);
    const auto t1 = std::chrono::steady_clock::now();
    sink = sink + y.data()[0];
    r.sample_s.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  r.median_s = quantile(r.sample_s, 0.5);
  r.p95_s = quantile(r.sample_s, 0.95);
  return r;
}

ComplexityProbe complexity_probe(const Model<float>& model, const std::vector<std::size_t>& S_list, const LatencyOptions& opt) {
  if (S_list.empty()) throw MetricsError("complexity_probe: empty S list");
  ComplexityProbe p;
  for (auto S : S_list) p.reports.push_back(bench_latency(model, S, opt));
  p.ratio = p.reports.back().median_s / p.reports.front().median_s;
  return p;
}

RecoveryTime recovery_time(const std::vector<std::pair<double, double>>& curve, double threshold) {
  if (curve.empty()) throw MetricsError("recovery_time: empty curve");
  for (std::size_t i = 1; i < curve.size(); ++i)
    if (!(curve[i].first > curve[i - 1].first)) throw MetricsError("recovery_time: seconds must be strictly increasing");
  for (const auto& [s, r2] : curve)
    if (r2 >= threshold) return s;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// CSV

const std::vector<std::string> kMetricsColumns = {"experiment", "model",   "session",          "date_index",    "r2_x",
                                                  "r2_y",       "r2_avg",  "params",           "latency_median_s",
                                                  "latency_p95_s", "recovery_s", "zero_shot_r2", "seed"};

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool in_q = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_q) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        in_q = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      in_q = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_num(const std::string& s, const std::string& col) {
  if (s == "nan") return std::nan("");
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw MetricsError("metrics csv: bad number '" + s + "' in " + col);
  return v;
}

}  // namespace

std::string metrics_csv_row(const MetricsRecord& r) {
  std::vector<std::string> f;
  f.push_back(quote(r.experiment));
  f.push_back(quote(r.model));
  f.push_back(quote(r.session));
  f.push_back(std::to_string(r.date_index));
  if (r.converged) {
    f.push_back(num(r.r2_x));
    f.push_back(num(r.r2_y));
    f.push_back(num(r.r2_avg));
  } else {
    f.insert(f.end(), 3, "not_converged");
  }
  f.push_back(std::to_string(r.params));
  f.push_back(r.latency ? num(r.latency->median_s) : "");
  f.push_back(r.latency ? num(r.latency->p95_s) : "");
  f.push_back(!r.recovery ? "" : (*r.recovery ? num(**r.recovery) : "not_recovered"));
  f.push_back(r.zero_shot_r2 ? num(*r.zero_shot_r2) : "");
  f.push_back(std::to_string(r.seed));
  std::string line;
  for (std::size_t i = 0; i < f.size(); ++i) line += (i ? "," : "") + f[i];
  return line;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataError::Kind::Io, "cannot write " + path.string());
  for (std::size_t i = 0; i < kMetricsColumns.size(); ++i) out << (i ? "," : "") << kMetricsColumns[i];
  out << '\n';
  for (const auto& r : records) out << metrics_csv_row(r) << '\n';
  if (!out) throw DataError(DataError::Kind::Io, "write failed for " + path.string());
}

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::MissingFile, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || split_csv(line) != kMetricsColumns)
    throw DataError(DataError::Kind::Parse, path.string() + ": unexpected metrics header");
  std::vector<MetricsRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    if (f.size() != kMetricsColumns.size())
      throw DataError(DataError::Kind::Parse, path.string() + ":" + std::to_string(lineno) + ": expected " +
                                                  std::to_string(kMetricsColumns.size()) + " fields");
    try {
      MetricsRecord r;
      r.experiment = f[0];
      r.model = f[1];
      r.session = f[2];
      r.date_index = std::stoi(f[3]);
      if (f[4] == "not_converged") {
        r.converged = false;
        r.r2_x = r.r2_y = r.r2_avg = std::nan("");
      } else {
        r.r2_x = parse_num(f[4], "r2_x");
        r.r2_y = parse_num(f[5], "r2_y");
        r.r2_avg = parse_num(f[6], "r2_avg");
      }
      r.params = static_cast<std::size_t>(std::stoull(f[7]));
      if (!f[8].empty()) {
        LatencyReport l;
        l.median_s = parse_num(f[8], "latency_median_s");
        l.p95_s = f[9].empty() ? l.median_s : parse_num(f[9], "latency_p95_s");
        r.latency = l;
      }
      if (f[10] == "not_recovered")
        r.recovery.emplace(std::nullopt);
      else if (!f[10].empty())
        r.recovery.emplace(parse_num(f[10], "recovery_s"));
      if (!f[11].empty()) r.zero_shot_r2 = parse_num(f[11], "zero_shot_r2");
      r.seed = std::stoull(f[12]);
      out.push_back(std::move(r));
    } catch (const std::logic_error& e) {
      throw DataError(DataError::Kind::Parse, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ndbench
