#include "ndbench/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <thread>

#include "ndbench/optim.hpp"

namespace ndbench {

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Random: return "random";
    case Strategy::Sequential: return "sequential";
    case Strategy::RandomSession: return "random_session";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (auto s : {Strategy::Random, Strategy::Sequential, Strategy::RandomSession})
    if (strategy_name(s) == name) return s;
  throw ConfigError("unknown strategy '" + name + "' (expected random, sequential or random_session)");
}

namespace {

std::string r2_mode_name(R2Mode m) { return m == R2Mode::AxisMean ? "axis_mean" : "stacked"; }

R2Mode parse_r2_mode(const std::string& s) {
  if (s == "axis_mean") return R2Mode::AxisMean;
  if (s == "stacked") return R2Mode::Stacked;
  throw ConfigError("unknown r2_mode '" + s + "' (expected axis_mean or stacked)");
}

template <typename F>
auto config_field(const char* what, F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train config: batch_size must be >= 1");
  if (S == 0) throw ConfigError("train config: S must be >= 1");
  if (stride == 0) throw ConfigError("train config: stride must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be > 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},          {"learning_rate", learning_rate},
          {"batch_size", batch_size},  {"S", S},
          {"stride", stride},          {"strategy", strategy_name(strategy)},
          {"seed", seed},              {"max_retries", max_retries},
          {"r2_mode", r2_mode_name(r2_mode)}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  config_field("train config", [&] {
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.S = j.value("S", c.S);
    c.stride = j.value("stride", c.stride);
    c.strategy = parse_strategy(j.value("strategy", strategy_name(c.strategy)));
    c.seed = j.value("seed", c.seed);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.r2_mode = parse_r2_mode(j.value("r2_mode", r2_mode_name(c.r2_mode)));
    return 0;
  });
  c.validate();
  return c;
}

void FinetuneConfig::validate() const {
  if (!(increment_s > 0.0)) throw ConfigError("finetune config: increment_s must be > 0");
  if (batch_size == 0 || S == 0 || stride == 0) throw ConfigError("finetune config: batch_size, S and stride must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("finetune config: learning_rate must be > 0");
}

nlohmann::json FinetuneConfig::to_json() const {
  nlohmann::json j = {{"increment_s", increment_s}, {"epochs_per_increment", epochs_per_increment},
                      {"learning_rate", learning_rate}, {"batch_size", batch_size},
                      {"S", S}, {"stride", stride}, {"threshold", threshold}, {"seed", seed},
                      {"r2_mode", r2_mode_name(r2_mode)}};
  j["increments"] = increments == kAllIncrements ? nlohmann::json("all") : nlohmann::json(increments);
  return j;
}

FinetuneConfig FinetuneConfig::from_json(const nlohmann::json& j) {
  FinetuneConfig c;
  config_field("finetune config", [&] {
    c.increment_s = j.value("increment_s", c.increment_s);
    c.epochs_per_increment = j.value("epochs_per_increment", c.epochs_per_increment);
    if (j.contains("increments")) {
      const auto& v = j.at("increments");
      c.increments = v.is_string() && v.get<std::string>() == "all" ? kAllIncrements : v.get<std::size_t>();
    }
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.S = j.value("S", c.S);
    c.stride = j.value("stride", c.stride);
    c.threshold = j.value("threshold", c.threshold);
    c.seed = j.value("seed", c.seed);
    c.r2_mode = parse_r2_mode(j.value("r2_mode", r2_mode_name(c.r2_mode)));
    return 0;
  });
  c.validate();
  return c;
}

std::vector<BatchRef> schedule_batches(const std::vector<SessionBatches>& sessions, Strategy strategy, std::uint64_t seed) {
  if (sessions.empty()) throw std::invalid_argument("schedule_batches: no sessions");
  for (std::size_t s = 0; s < sessions.size(); ++s)
    if (sessions[s].batches == 0) throw std::invalid_argument("schedule_batches: session " + std::to_string(s) + " has no batches");
  std::mt19937_64 rng(seed);
  std::vector<BatchRef> out;
  if (strategy == Strategy::Random) {
    for (std::size_t s = 0; s < sessions.size(); ++s)
      for (std::size_t b = 0; b < sessions[s].batches; ++b) out.push_back({s, b});
    std::shuffle(out.begin(), out.end(), rng);
    return out;
  }
  std::vector<std::size_t> order(sessions.size());
  std::iota(order.begin(), order.end(), 0);
  if (strategy == Strategy::Sequential)
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sessions[a].date_index < sessions[b].date_index; });
  else
    std::shuffle(order.begin(), order.end(), rng);
  for (auto s : order)
    for (std::size_t b = 0; b < sessions[s].batches; ++b) out.push_back({s, b});
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

nlohmann::json norm_json(const SessionNorm& n) {
  return {{"session_id", n.session_id},
          {"date_index", n.date_index},
          {"channel_mean", n.stats.channel_mean},
          {"channel_std", n.stats.channel_std},
          {"vel_mean", n.stats.vel_mean},
          {"vel_std", n.stats.vel_std}};
}

SessionNorm norm_from(const nlohmann::json& j) {
  SessionNorm n;
  n.session_id = j.at("session_id").get<std::string>();
  n.date_index = j.at("date_index").get<int>();
  n.stats.channel_mean = j.at("channel_mean").get<std::vector<double>>();
  n.stats.channel_std = j.at("channel_std").get<std::vector<double>>();
  n.stats.vel_mean = j.at("vel_mean").get<std::vector<double>>();
  n.stats.vel_std = j.at("vel_std").get<std::vector<double>>();
  return n;
}

}  // namespace

Model<float> Checkpoint::instantiate() const {
  Model<float> m(config, provenance.seed);
  import_groups(m.params(), groups);
  return m;
}

void Checkpoint::capture(const Model<float>& model) {
  config = model.config();
  groups = export_groups(model.params());
}

const NormStats& Checkpoint::reference_norm() const {
  if (norms.empty()) throw CheckpointError("checkpoint has no normalization statistics");
  return norms.back().stats;
}

const NormStats* Checkpoint::norm_for(const std::string& session_id) const {
  for (const auto& n : norms)
    if (n.session_id == session_id) return &n.stats;
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Container c;
  c.meta = nlohmann::json::object();
  c.meta["model"] = ckpt.config.to_json();
  auto norms = nlohmann::json::array();
  for (const auto& n : ckpt.norms) norms.push_back(norm_json(n));
  c.meta["norms"] = norms;
  c.meta["provenance"] = {{"seed", ckpt.provenance.seed}, {"data_hash", ckpt.provenance.data_hash}, {"epoch", ckpt.provenance.epoch}};
  c.meta["train"] = ckpt.train;
  c.groups = ckpt.groups;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_container(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto c = read_container(path);
  Checkpoint k;
  try {
    k.config = ModelConfig::from_json(c.meta.at("model"));
    for (const auto& n : c.meta.at("norms")) k.norms.push_back(norm_from(n));
    const auto& p = c.meta.at("provenance");
    k.provenance = {p.at("seed").get<std::uint64_t>(), p.at("data_hash").get<std::string>(), p.at("epoch").get<std::size_t>()};
    k.train = c.meta.value("train", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed checkpoint metadata: " + e.what());
  }
  k.groups = c.groups;
  Model<float> probe(k.config, 0);
  import_groups(probe.params(), k.groups);  // validates names and shapes
  return k;
}

DivergenceError::DivergenceError(const std::string& model, std::size_t epoch, std::size_t step, double learning_rate)
    : std::runtime_error(model + " training diverged (non-finite loss) at epoch " + std::to_string(epoch) + ", step " +
                         std::to_string(step) + " with learning rate " + std::to_string(learning_rate)),
      epoch_(epoch),
      step_(step),
      learning_rate_(learning_rate) {}

namespace {

struct Fnv {
  std::uint64_t h = 1469598103934665603ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  }
  template <typename T>
  void values(const std::vector<T>& v) {
    bytes(v.data(), v.size() * sizeof(T));
  }
};

}  // namespace

std::string data_hash(const std::vector<PreparedSession>& sessions) {
  Fnv f;
  for (const auto& s : sessions) {
    f.bytes(s.session_id.data(), s.session_id.size());
    for (const auto* seg : {s.train.get(), s.test.get()}) {
      if (!seg) continue;
      f.values(seg->features.data);
      f.values(seg->targets.data);
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(f.h));
  return buf;
}

WindowSet test_windows(const PreparedSession& session, std::size_t S) { return make_windows(session.test, S, S); }

// ---------------------------------------------------------------------------
// Training

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(id)};
  return std::mt19937_64(seq);
}

// One Adam step on the listed windows; returns the batch loss, NaN when it is not finite.
double train_step(Model<float>& model, AdamState<float>& adam, const WindowSet& ws, const std::vector<std::size_t>& idx,
                  std::mt19937_64& dropout_rng) {
  const std::size_t S = ws.S, C = ws.channels(), B = idx.size();
  std::vector<float> x(B * S * C), y(B * S * 2);
  for (std::size_t j = 0; j < B; ++j) {
    const auto in = ws.input(idx[j]);
    const auto tg = ws.target(idx[j]);
    std::copy(in.begin(), in.end(), x.begin() + static_cast<std::ptrdiff_t>(j * S * C));
    std::copy(tg.begin(), tg.end(), y.begin() + static_cast<std::ptrdiff_t>(j * S * 2));
  }
  const auto xt = Tensor<float>::from({B, S, C}, std::move(x));
  const auto yt = Tensor<float>::from({B, S, 2}, std::move(y));
  Tensor<float> loss;
  try {
    loss = mean(square(sub(model.forward(xt, true, &dropout_rng), yt)));
  } catch (const NonFiniteError&) {
    return std::nan("");
  }
  const double l = loss.item();
  if (!std::isfinite(l)) return l;
  backward(loss);
  adam_step(model.params(), adam);
  return l;
}

std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& idx, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < idx.size(); i += batch)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i), idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), i + batch)));
  return out;
}

struct Evaluation {
  MetricsRecord pooled;
  std::vector<MetricsRecord> per_session;
};

Evaluation evaluate_sessions(const Model<float>& model, const std::vector<const PreparedSession*>& sessions,
                             const std::vector<NormStats>& norms, std::size_t S, R2Mode mode) {
  Evaluation ev;
  Predictions all;
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    const auto p = predict(model, norms[i], test_windows(*sessions[i], S));
    MetricsRecord r;
    r.model = kind_name(model.config().kind);
    r.session = sessions[i]->session_id;
    r.date_index = sessions[i]->date_index;
    r.params = model.params().scalar_count();
    score(p, r, mode);
    ev.per_session.push_back(r);
    all.append(p);
  }
  ev.pooled.model = kind_name(model.config().kind);
  ev.pooled.params = model.params().scalar_count();
  if (sessions.size() == 1) {
    ev.pooled.session = sessions[0]->session_id;
    ev.pooled.date_index = sessions[0]->date_index;
  } else {
    ev.pooled.session = "pooled";
    ev.pooled.date_index = sessions.back()->date_index;
  }
  score(all, ev.pooled, mode);
  return ev;
}

TrainResult train_once(const std::vector<const PreparedSession*>& sessions, const ModelConfig& mcfg, const TrainConfig& tc,
                       double lr, bool multi) {
  const std::size_t C = sessions.front()->train->features.cols;
  if (mcfg.input_channels != C)
    throw ConfigError("model expects " + std::to_string(mcfg.input_channels) + " channels but session " +
                      sessions.front()->session_id + " has " + std::to_string(C));
  Model<float> model(mcfg, tc.seed);
  auto adam = AdamState<float>::init(model.params(), AdamOptions{lr});
  auto order_rng = stream(tc.seed, 1);
  auto dropout_rng = stream(tc.seed, 2);

  std::vector<WindowSet> train_ws;
  std::vector<std::vector<std::vector<std::size_t>>> fixed_batches;
  for (const auto* s : sessions) {
    train_ws.push_back(make_windows(s->train, tc.S, tc.stride));
    std::vector<std::size_t> idx(train_ws.back().size());
    std::iota(idx.begin(), idx.end(), 0);
    fixed_batches.push_back(chunk(idx, tc.batch_size));
  }

  TrainResult res;
  res.learning_rate = lr;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    double total = 0.0;
    std::size_t n = 0;
    auto run = [&](const WindowSet& ws, const std::vector<std::size_t>& idx) {
      const double l = train_step(model, adam, ws, idx, dropout_rng);
      if (!std::isfinite(l)) throw DivergenceError(kind_name(mcfg.kind), epoch, step, lr);
      total += l;
      ++n;
      ++step;
    };
    if (!multi) {
      std::vector<std::size_t> idx(train_ws[0].size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), order_rng);
      for (const auto& b : chunk(idx, tc.batch_size)) run(train_ws[0], b);
    } else {
      std::vector<SessionBatches> sb;
      for (std::size_t s = 0; s < sessions.size(); ++s) sb.push_back({sessions[s]->date_index, fixed_batches[s].size()});
      for (const auto& ref : schedule_batches(sb, tc.strategy, order_rng())) run(train_ws[ref.session], fixed_batches[ref.session][ref.batch]);
    }
    res.loss_history.push_back(total / static_cast<double>(std::max<std::size_t>(n, 1)));
  }

  std::vector<NormStats> norms;
  for (const auto* s : sessions) norms.push_back(s->norm);
  auto ev = evaluate_sessions(model, sessions, norms, tc.S, tc.r2_mode);
  res.metrics = ev.pooled;
  res.per_session = ev.per_session;
  res.metrics.seed = tc.seed;
  for (auto& r : res.per_session) r.seed = tc.seed;

  res.checkpoint.capture(model);
  for (const auto* s : sessions) res.checkpoint.norms.push_back({s->session_id, s->date_index, s->norm});
  std::vector<PreparedSession> copies;
  for (const auto* s : sessions) copies.push_back(*s);
  res.checkpoint.provenance = {tc.seed, data_hash(copies), tc.epochs};
  res.checkpoint.train = tc.to_json();
  res.checkpoint.train["learning_rate"] = lr;
  return res;
}

TrainResult train_with_policy(std::vector<const PreparedSession*> sessions, const ModelConfig& mcfg, const TrainConfig& tc,
                              bool multi) {
  tc.validate();
  mcfg.validate();
  std::stable_sort(sessions.begin(), sessions.end(),
                   [](const PreparedSession* a, const PreparedSession* b) { return a->date_index < b->date_index; });
  const std::size_t attempts = mcfg.kind == ModelKind::Transformer ? tc.max_retries + 1 : 1;
  double lr = tc.learning_rate;
  for (std::size_t a = 0;; ++a) {
    try {
      auto r = train_once(sessions, mcfg, tc, lr, multi);
      r.retries = a;
      return r;
    } catch (const DivergenceError&) {
      if (a + 1 >= attempts) throw;
      lr *= 0.5;
    }
  }
}

}  // namespace

TrainResult train_single_session(const PreparedSession& session, const ModelConfig& model, const TrainConfig& train) {
  return train_with_policy({&session}, model, train, false);
}

TrainResult train_multi_session(const std::vector<PreparedSession>& sessions, const ModelConfig& model, const TrainConfig& train) {
  if (sessions.size() < 2) throw std::invalid_argument("train_multi_session: need at least 2 sessions, got " + std::to_string(sessions.size()));
  std::vector<const PreparedSession*> ptrs;
  for (const auto& s : sessions) ptrs.push_back(&s);
  return train_with_policy(ptrs, model, train, true);
}

// ---------------------------------------------------------------------------
// Fine-tuning

namespace {

std::shared_ptr<const Segment> retarget(const Segment& seg, const NormStats& own, const NormStats& ref, std::size_t rows) {
  auto out = std::make_shared<Segment>();
  out->session_id = seg.session_id;
  out->date_index = seg.date_index;
  out->first_bin = seg.first_bin;
  const std::size_t C = seg.features.cols;
  out->features = Matrix<float>(rows, C);
  std::copy(seg.features.data.begin(), seg.features.data.begin() + static_cast<std::ptrdiff_t>(rows * C), out->features.data.begin());
  out->targets = Matrix<float>(rows, 2);
  for (std::size_t t = 0; t < rows; ++t)
    for (std::size_t a = 0; a < 2; ++a) {
      const double v = denormalize_velocity(seg.targets(t, a), a, own);
      out->targets(t, a) = static_cast<float>((v - ref.vel_mean[a]) / ref.vel_std[a]);
    }
  return out;
}

}  // namespace

FinetuneResult finetune_new_session(const Checkpoint& base, const PreparedSession& session, const FinetuneConfig& cfg) {
  cfg.validate();
  const NormStats& ref = base.reference_norm();
  NormStats eval_norm = session.norm;
  eval_norm.vel_mean = ref.vel_mean;
  eval_norm.vel_std = ref.vel_std;

  const auto inc_bins = static_cast<std::size_t>(std::llround(cfg.increment_s * 1000.0 / kBinWidthMs));
  const std::size_t train_len = session.train->length();
  if (inc_bins > train_len)
    throw DataError(DataError::Kind::Precondition, "finetune: session " + session.session_id + " training split (" +
                                                       std::to_string(train_len) + " bins) is shorter than one increment (" +
                                                       std::to_string(inc_bins) + " bins)");
  if (inc_bins < cfg.S)
    throw ConfigError("finetune: increment of " + std::to_string(inc_bins) + " bins is shorter than S=" + std::to_string(cfg.S));

  Model<float> model = base.instantiate();
  const auto test = make_windows(retarget(*session.test, session.norm, ref, session.test->length()), cfg.S, cfg.S);

  FinetuneResult res;
  res.zero_shot = evaluate(model, eval_norm, test, cfg.r2_mode);
  res.zero_shot.experiment = "zero_shot";
  res.zero_shot.seed = cfg.seed;
  res.curve.emplace_back(0.0, res.zero_shot.r2_avg);

  const std::size_t K = std::min(cfg.increments, train_len / inc_bins);
  auto adam = AdamState<float>::init(model.params(), AdamOptions{cfg.learning_rate});
  auto order_rng = stream(cfg.seed, 3);
  auto dropout_rng = stream(cfg.seed, 4);
  MetricsRecord last = res.zero_shot;
  std::size_t step = 0;
  for (std::size_t k = 1; k <= K; ++k) {
    const auto ws = make_windows(retarget(*session.train, session.norm, ref, k * inc_bins), cfg.S, cfg.stride);
    for (std::size_t e = 0; e < cfg.epochs_per_increment; ++e) {
      std::vector<std::size_t> idx(ws.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), order_rng);
      for (const auto& b : chunk(idx, cfg.batch_size)) {
        if (!std::isfinite(train_step(model, adam, ws, b, dropout_rng)))
          throw DivergenceError(kind_name(base.config.kind), k, step, cfg.learning_rate);
        ++step;
      }
    }
    last = evaluate(model, eval_norm, test, cfg.r2_mode);
    res.curve.emplace_back(static_cast<double>(k * inc_bins) * kBinWidthMs / 1000.0, last.r2_avg);
  }

  res.recovery = recovery_time(res.curve, cfg.threshold);
  res.final = last;
  res.final.experiment = "finetune";
  res.final.seed = cfg.seed;
  res.final.zero_shot_r2 = res.zero_shot.r2_avg;
  res.final.recovery = res.recovery;

  res.checkpoint.capture(model);
  res.checkpoint.norms = {{session.session_id, session.date_index, eval_norm}};
  res.checkpoint.provenance = {cfg.seed, data_hash({session}), K * cfg.epochs_per_increment};
  res.checkpoint.train = cfg.to_json();
  res.checkpoint.train["base_data_hash"] = base.provenance.data_hash;
  return res;
}

// ---------------------------------------------------------------------------
// Scaling

std::vector<ScalingRow> scaling_sweep(const ModelConfig& base, const std::vector<std::size_t>& layer_counts,
                                      const std::vector<PreparedSession>& sessions, const TrainConfig& train,
                                      const std::vector<std::uint64_t>& seeds, std::size_t threads) {
  if (layer_counts.empty()) throw std::invalid_argument("scaling_sweep: no layer counts");
  for (std::size_t i = 1; i < layer_counts.size(); ++i)
    if (layer_counts[i] <= layer_counts[i - 1]) throw std::invalid_argument("scaling_sweep: layer counts must be ascending");
  if (seeds.empty()) throw std::invalid_argument("scaling_sweep: no seeds");

  struct Job {
    std::size_t row, seed_index;
    MetricsRecord rec;
    std::string failure;
  };
  std::vector<ScalingRow> rows(layer_counts.size());
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < layer_counts.size(); ++i) {
    auto cfg = base;
    cfg.layers = layer_counts[i];
    rows[i].layers = layer_counts[i];
    rows[i].params = param_count(cfg);
    for (std::size_t s = 0; s < seeds.size(); ++s) jobs.push_back(Job{i, s, {}, {}});
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      auto& job = jobs[j];
      auto cfg = base;
      cfg.layers = layer_counts[job.row];
      auto tc = train;
      tc.seed = seeds[job.seed_index];
      tc.strategy = Strategy::Random;
      try {
        job.rec = train_multi_session(sessions, cfg, tc).metrics;
      } catch (const DivergenceError& e) {
        job.failure = e.what();
      }
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, jobs.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (const auto& job : jobs) {
    auto& row = rows[job.row];
    if (!job.failure.empty()) {
      row.converged = false;
      if (row.failure.empty()) row.failure = job.failure;
    } else {
      row.r2.push_back(job.rec.r2_avg);
      row.records.push_back(job.rec);
    }
  }
  for (auto& row : rows) {
    if (row.r2.empty()) {
      row.mean = row.stderr_ = std::nan("");
      continue;
    }
    const double n = static_cast<double>(row.r2.size());
    row.mean = std::accumulate(row.r2.begin(), row.r2.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : row.r2) ss += (v - row.mean) * (v - row.mean);
    row.stderr_ = row.r2.size() > 1 ? std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
  }
  return rows;
}

}  // namespace ndbench
