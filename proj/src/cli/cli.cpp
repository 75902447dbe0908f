#include "ndbench/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ndbench/harness.hpp"

#ifndef NDBENCH_VERSION
#define NDBENCH_VERSION "0.1.0"
#endif

namespace ndbench {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Flat dotted-key configuration

enum class Ty { Str, UInt, Num, Bool, StrList, UIntList };

struct Key {
  std::string name;
  Ty ty;
  json def;  // null: unset, resolved later from context
};

using Schema = std::vector<Key>;

void flatten(const json& j, const std::string& prefix, json& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string k = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object())
      flatten(*it, k, out);
    else
      out[k] = *it;
  }
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');)
    if (!part.empty()) out.push_back(part);
  return out;
}

json coerce(const Key& k, const json& v) {
  auto bad = [&](const std::string& want) {
    return UsageError("config key '" + k.name + "' expects " + want + ", got " + v.dump());
  };
  auto as_uint = [&](const json& e) -> json {
    if (e.is_number_unsigned()) return e;
    if (e.is_number_integer() && e.get<long long>() >= 0) return json(e.get<std::uint64_t>());
    if (e.is_string()) {
      const auto& s = e.get_ref<const std::string&>();
      std::uint64_t n = 0;
      const auto r = std::from_chars(s.data(), s.data() + s.size(), n);
      if (r.ec == std::errc() && r.ptr == s.data() + s.size()) return json(n);
    }
    throw bad("a non-negative integer");
  };
  if (v.is_null()) return v;
  switch (k.ty) {
    case Ty::Str:
      if (!v.is_string()) throw bad("a string");
      return v;
    case Ty::UInt: return as_uint(v);
    case Ty::Num:
      if (v.is_number()) return v;
      if (v.is_string()) {
        try {
          std::size_t pos = 0;
          const double d = std::stod(v.get<std::string>(), &pos);
          if (pos == v.get<std::string>().size()) return json(d);
        } catch (const std::logic_error&) {
        }
      }
      throw bad("a number");
    case Ty::Bool:
      if (v.is_boolean()) return v;
      if (v == "true") return true;
      if (v == "false") return false;
      throw bad("true or false");
    case Ty::StrList: {
      json out = json::array();
      if (v.is_string()) {
        for (auto& s : split_commas(v.get<std::string>())) out.push_back(s);
        return out;
      }
      if (!v.is_array()) throw bad("a list of strings");
      for (const auto& e : v) {
        if (!e.is_string()) throw bad("a list of strings");
        out.push_back(e);
      }
      return out;
    }
    case Ty::UIntList: {
      json out = json::array();
      if (v.is_string()) {
        for (auto& s : split_commas(v.get<std::string>())) out.push_back(as_uint(json(s)));
        return out;
      }
      if (!v.is_array()) return json::array({as_uint(v)});
      for (const auto& e : v) out.push_back(as_uint(e));
      return out;
    }
  }
  return v;
}

class Config {
 public:
  Config(const Schema& schema, const std::vector<json>& layers) {
    for (const auto& k : schema) values_[k.name] = k.def;
    for (const auto& layer : layers) {
      json flat = json::object();
      flatten(layer, "", flat);
      for (auto it = flat.begin(); it != flat.end(); ++it) {
        const auto k = std::find_if(schema.begin(), schema.end(), [&](const Key& s) { return s.name == it.key(); });
        if (k == schema.end()) throw UsageError("unknown config key '" + it.key() + "'");
        values_[it.key()] = coerce(*k, *it);
      }
    }
  }
  bool has(const std::string& k) const { return !values_.at(k).is_null(); }
  const json& raw(const std::string& k) const { return values_.at(k); }
  std::string str(const std::string& k) const { return has(k) ? values_.at(k).get<std::string>() : ""; }
  std::size_t uint(const std::string& k) const { return values_.at(k).get<std::size_t>(); }
  std::size_t uint_or(const std::string& k, std::size_t d) const { return has(k) ? uint(k) : d; }
  double num(const std::string& k) const { return values_.at(k).get<double>(); }
  bool flag(const std::string& k) const { return values_.at(k).get<bool>(); }
  std::vector<std::string> strs(const std::string& k) const { return has(k) ? values_.at(k).get<std::vector<std::string>>() : std::vector<std::string>{}; }
  std::vector<std::uint64_t> uints(const std::string& k) const { return values_.at(k).get<std::vector<std::uint64_t>>(); }
  void set(const std::string& k, json v) { values_[k] = std::move(v); }
  const json& all() const { return values_; }

 private:
  json values_ = json::object();
};

const Schema& preprocess_keys() {
  static const Schema s = {{"preprocess.sigma_ms", Ty::Num, 40.0},
                           {"preprocess.train_fraction", Ty::Num, 0.8},
                           {"preprocess.velocity_source", Ty::Str, "cursor"},
                           {"preprocess.smooth_velocity", Ty::Bool, false},
                           {"preprocess.global_norm", Ty::Bool, false}};
  return s;
}

const Schema& model_keys() {
  static const Schema s = {{"model.layers", Ty::UInt, nullptr},       {"model.embed", Ty::UInt, nullptr},
                           {"model.heads", Ty::UInt, nullptr},        {"model.ffn_ratio", Ty::Num, nullptr},
                           {"model.d_state", Ty::UInt, nullptr},      {"model.conv_width", Ty::UInt, nullptr},
                           {"model.expand", Ty::UInt, nullptr},       {"model.dropout_rate", Ty::Num, nullptr},
                           {"model.max_timesteps", Ty::UInt, nullptr}, {"model.gru_input_projection", Ty::Bool, nullptr}};
  return s;
}

const Schema& train_keys() {
  static const Schema s = {{"train.epochs", Ty::UInt, nullptr},      {"train.learning_rate", Ty::Num, 1e-3},
                           {"train.batch_size", Ty::UInt, 16},        {"train.S", Ty::UInt, nullptr},
                           {"train.stride", Ty::UInt, nullptr},       {"train.strategy", Ty::Str, "random"},
                           {"train.max_retries", Ty::UInt, 3},        {"train.r2_mode", Ty::Str, "axis_mean"}};
  return s;
}

Schema join(std::initializer_list<const Schema*> parts) {
  Schema out;
  for (const auto* p : parts) out.insert(out.end(), p->begin(), p->end());
  return out;
}

PreprocessConfig preprocess_config(const Config& c) {
  PreprocessConfig p;
  p.sigma_ms = c.num("preprocess.sigma_ms");
  p.train_fraction = c.num("preprocess.train_fraction");
  const auto src = c.str("preprocess.velocity_source");
  if (src == "cursor")
    p.velocity_source = VelocitySource::Cursor;
  else if (src == "finger")
    p.velocity_source = VelocitySource::Finger;
  else
    throw UsageError("preprocess.velocity_source must be cursor or finger, got '" + src + "'");
  p.smooth_velocity = c.flag("preprocess.smooth_velocity");
  p.global_norm = c.flag("preprocess.global_norm");
  if (!(p.sigma_ms >= 0.0)) throw UsageError("preprocess.sigma_ms must be >= 0");
  if (!(p.train_fraction > 0.0 && p.train_fraction < 1.0)) throw UsageError("preprocess.train_fraction must be in (0, 1)");
  return p;
}

ModelConfig model_config(const Config& c, ModelKind kind, std::size_t channels) {
  auto m = ModelConfig::defaults(kind, channels);
  if (c.has("model.layers")) m.layers = c.uint("model.layers");
  if (c.has("model.embed")) m.embed = c.uint("model.embed");
  if (c.has("model.heads")) m.heads = c.uint("model.heads");
  if (c.has("model.ffn_ratio")) m.ffn_ratio = c.num("model.ffn_ratio");
  if (c.has("model.d_state")) m.d_state = c.uint("model.d_state");
  if (c.has("model.conv_width")) m.conv_width = c.uint("model.conv_width");
  if (c.has("model.expand")) m.expand = c.uint("model.expand");
  if (c.has("model.dropout_rate")) m.dropout_rate = c.num("model.dropout_rate");
  if (c.has("model.max_timesteps")) m.max_timesteps = c.uint("model.max_timesteps");
  if (c.has("model.gru_input_projection")) m.gru_input_projection = c.flag("model.gru_input_projection");
  m.validate();
  return m;
}

// Defaults: single-session 30 epochs at S=128, multi-session 50 epochs at S=1024.
TrainConfig train_config(const Config& c, bool multi) {
  TrainConfig t;
  t.epochs = c.uint_or("train.epochs", multi ? 50 : 30);
  t.learning_rate = c.num("train.learning_rate");
  t.batch_size = c.uint("train.batch_size");
  t.S = c.uint_or("train.S", multi ? 1024 : 128);
  t.stride = c.uint_or("train.stride", std::max<std::size_t>(t.S / 4, 1));
  t.strategy = parse_strategy(c.str("train.strategy"));
  t.max_retries = c.uint("train.max_retries");
  const auto mode = c.str("train.r2_mode");
  if (mode != "axis_mean" && mode != "stacked") throw UsageError("train.r2_mode must be axis_mean or stacked");
  t.r2_mode = mode == "stacked" ? R2Mode::Stacked : R2Mode::AxisMean;
  t.validate();
  return t;
}

std::vector<ModelKind> model_kinds(const Config& c) {
  std::vector<ModelKind> out;
  for (const auto& n : c.strs("models")) out.push_back(parse_kind(n));
  if (out.empty()) throw UsageError("no models selected");
  return out;
}

std::vector<std::uint64_t> seeds_of(const Config& c) {
  auto s = c.uints("seeds");
  if (s.empty()) throw UsageError("no seeds given");
  return s;
}

// ---------------------------------------------------------------------------
// Files, hashes, manifests

std::uint64_t fnv(std::uint64_t h, const std::string& bytes) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::MissingFile, "cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string file_hash(const fs::path& p) { return hex(fnv(1469598103934665603ULL, slurp(p))); }

std::string bundle_hash(const fs::path& dir) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const char* f : {"manifest.json", "spikes.csv", "kinematics.csv"}) h = fnv(h, slurp(dir / f));
  return hex(h);
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw DataError(DataError::Kind::Io, "cannot write " + p.string());
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Bundle {
  fs::path dir;
  RawSession raw;
  std::string hash;
};

bool is_bundle(const fs::path& dir) { return fs::exists(dir / "manifest.json") && fs::exists(dir / "spikes.csv"); }

// Each path is a session bundle or a directory whose subdirectories are bundles.
std::vector<Bundle> load_bundles(const std::vector<std::string>& paths) {
  if (paths.empty()) throw UsageError("no input data given (set 'data')");
  std::vector<fs::path> dirs;
  for (const auto& p : paths) {
    const fs::path dir(p);
    if (is_bundle(dir)) {
      dirs.push_back(dir);
      continue;
    }
    if (!fs::is_directory(dir)) throw DataError(DataError::Kind::MissingFile, "no session bundle at " + p);
    std::vector<fs::path> subs;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory() && is_bundle(e.path())) subs.push_back(e.path());
    if (subs.empty()) throw DataError(DataError::Kind::MissingFile, "no session bundles under " + p);
    std::sort(subs.begin(), subs.end());
    dirs.insert(dirs.end(), subs.begin(), subs.end());
  }
  std::vector<Bundle> out;
  for (const auto& d : dirs) out.push_back({d, load_session(d), bundle_hash(d)});
  std::stable_sort(out.begin(), out.end(), [](const Bundle& a, const Bundle& b) {
    return std::tie(a.raw.date_index, a.raw.session_id) < std::tie(b.raw.date_index, b.raw.session_id);
  });
  return out;
}

json inputs_json(const std::vector<Bundle>& bundles) {
  json a = json::array();
  for (const auto& b : bundles)
    a.push_back({{"path", b.dir.string()}, {"session_id", b.raw.session_id}, {"date_index", b.raw.date_index}, {"hash", b.hash}});
  return a;
}

std::size_t thread_count() {
  const char* env = std::getenv("NDBENCH_THREADS");
  if (!env || !*env) return 1;
  std::size_t n = 0;
  const std::string s(env);
  const auto r = std::from_chars(s.data(), s.data() + s.size(), n);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || n == 0)
    throw UsageError("NDBENCH_THREADS must be a positive integer, got '" + s + "'");
  return n;
}

void write_manifest(const fs::path& out, const std::string& command, const Config& cfg, const json& inputs, const json& outputs,
                    std::size_t threads, const json& extra = json::object()) {
  json m;
  m["format"] = "ndbench-run-v1";
  m["command"] = command;
  m["version"] = NDBENCH_VERSION;
  m["threads"] = threads;
  m["config"] = cfg.all();
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = *it;
  write_text(out / "manifest.json", m.dump(2) + "\n");
}

fs::path out_dir(const Config& c) {
  const auto o = c.str("out");
  if (o.empty()) throw UsageError("no output directory given (set 'out')");
  std::error_code ec;
  fs::create_directories(o, ec);
  if (ec || !fs::is_directory(o)) throw DataError(DataError::Kind::Io, "cannot create output directory " + o);
  return o;
}

// Runs jobs[i] for every i on up to `threads` workers; results keep index order.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Commands

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::size_t threads = 1;
};

int cmd_synth(const Config& c, Context& ctx) {
  const auto out = out_dir(c);
  const auto days = c.uint("days");
  if (days == 0) throw UsageError("days must be >= 1");
  auto sc = SynthConfig::standard(c.uint("channels"), c.num("duration_s"), c.uint("seed"));
  sc.rate_decay = c.num("rate_decay");
  sc.permute_fraction = c.num("permute_fraction");
  sc.permutation_seed = c.uint("permutation_seed");
  sc.poisson_noise = c.flag("poisson_noise");
  sc.reference_speed = c.num("reference_speed");
  sc.validate();
  json outputs = json::array();
  for (std::size_t d = 0; d < days; ++d) {
    char name[32];
    std::snprintf(name, sizeof name, "day_%02zu", d);
    const auto raw = generate_synthetic_session(sc, static_cast<int>(d));
    save_session(raw, out / name);
    outputs.push_back({{"path", (out / name).string()}, {"session_id", raw.session_id}, {"date_index", raw.date_index},
                       {"hash", bundle_hash(out / name)}});
  }
  write_manifest(out, "synth", c, json::array(), outputs, ctx.threads);
  ctx.out << "wrote " << days << " session bundles to " << out.string() << "\n";
  return kExitOk;
}

std::vector<PreparedSession> prepare_all(const std::vector<Bundle>& bundles, const PreprocessConfig& pc) {
  std::vector<RawSession> raws;
  for (const auto& b : bundles) raws.push_back(b.raw);
  auto out = prepare_sessions(raws, pc);
  const auto C = out.front().train->features.cols;
  for (const auto& s : out)
    if (s.train->features.cols != C)
      throw DataError(DataError::Kind::ChannelMismatch, "session " + s.session_id + " has " + std::to_string(s.train->features.cols) +
                                                            " channels, expected " + std::to_string(C));
  return out;
}

int cmd_preprocess(const Config& c, Context& ctx) {
  const auto out = out_dir(c);
  const auto pc = preprocess_config(c);
  const auto bundles = load_bundles(c.strs("data"));
  json outputs = json::array();
  for (const auto& ps : prepare_all(bundles, pc)) {
    const auto dir = out / ps.session_id;
    json meta = {{"session_id", ps.session_id},
                 {"date_index", ps.date_index},
                 {"total_bins", ps.total_bins},
                 {"train_end", ps.split.train_end},
                 {"channels", ps.train->features.cols},
                 {"norm", {{"channel_mean", ps.norm.channel_mean}, {"channel_std", ps.norm.channel_std},
                           {"vel_mean", ps.norm.vel_mean}, {"vel_std", ps.norm.vel_std}}},
                 {"data_hash", data_hash({ps})}};
    write_text(dir / "prepared.json", meta.dump(2) + "\n");
    std::ostringstream csv;
    const std::size_t C = ps.train->features.cols;
    csv << "bin,split";
    for (std::size_t ch = 0; ch < C; ++ch) csv << ",c" << ch;
    csv << ",vx,vy\n";
    for (const auto* seg : {ps.train.get(), ps.test.get()})
      for (std::size_t t = 0; t < seg->length(); ++t) {
        csv << seg->first_bin + t << ',' << (seg == ps.train.get() ? "train" : "test");
        for (std::size_t ch = 0; ch < C; ++ch) csv << ',' << fmt(seg->features(t, ch));
        csv << ',' << fmt(seg->targets(t, 0)) << ',' << fmt(seg->targets(t, 1)) << '\n';
      }
    write_text(dir / "bins.csv", csv.str());
    outputs.push_back({{"path", dir.string()}, {"session_id", ps.session_id}, {"data_hash", data_hash({ps})}});
  }
  write_manifest(out, "preprocess", c, inputs_json(bundles), outputs, ctx.threads);
  ctx.out << "preprocessed " << bundles.size() << " sessions into " << out.string() << "\n";
  return kExitOk;
}

std::string loss_rows(const MetricsRecord& r, const std::vector<double>& loss, double lr) {
  std::ostringstream s;
  for (std::size_t e = 0; e < loss.size(); ++e)
    s << r.experiment << ',' << r.model << ',' << r.session << ',' << r.seed << ',' << e << ',' << fmt(loss[e]) << ',' << fmt(lr) << '\n';
  return s.str();
}

int cmd_train(const Config& c, Context& ctx) {
  const auto out = out_dir(c);
  const auto exp = c.str("experiment");
  if (exp != "single" && exp != "multi") throw UsageError("experiment must be single or multi, got '" + exp + "'");
  const bool multi = exp == "multi";
  const auto tc0 = train_config(c, multi);
  const auto kinds = model_kinds(c);
  const auto seeds = seeds_of(c);
  const auto bundles = load_bundles(c.strs("data"));
  const auto sessions = prepare_all(bundles, preprocess_config(c));
  if (multi && sessions.size() < 2) throw UsageError("multi-session training needs at least 2 sessions");
  const std::size_t C = sessions.front().train->features.cols;
  const std::string tag = multi ? "multi_" + strategy_name(tc0.strategy) : "single";

  struct Run {
    ModelKind kind;
    std::size_t session;  // single only
    std::uint64_t seed;
    std::vector<MetricsRecord> rows;
    std::string loss;
    std::string checkpoint;
    std::string failure;
  };
  std::vector<Run> runs;
  for (auto k : kinds)
    for (std::size_t s = 0; s < (multi ? 1 : sessions.size()); ++s)
      for (auto seed : seeds) runs.push_back({k, s, seed, {}, {}, {}, {}});
  for (const auto& r : runs) (void)model_config(c, r.kind, C);  // validate before any training

  parallel_for(runs.size(), ctx.threads, [&](std::size_t i) {
    auto& run = runs[i];
    const auto mc = model_config(c, run.kind, C);
    auto tc = tc0;
    tc.seed = run.seed;
    const std::string where = multi ? "pooled" : sessions[run.session].session_id;
    const auto ckpt = out / "checkpoints" / (tag + "_" + kind_name(run.kind) + "_" + where + "_seed" + std::to_string(run.seed) + ".ckpt");
    try {
      const auto res = multi ? train_multi_session(sessions, mc, tc) : train_single_session(sessions[run.session], mc, tc);
      auto pooled = res.metrics;
      pooled.experiment = tag;
      run.rows.push_back(pooled);
      if (multi)
        for (auto r : res.per_session) {
          r.experiment = tag + "_per_session";
          run.rows.push_back(r);
        }
      run.loss = loss_rows(pooled, res.loss_history, res.learning_rate);
      save_checkpoint(ckpt, res.checkpoint);
      run.checkpoint = ckpt.string();
    } catch (const DivergenceError& e) {
      MetricsRecord r;
      r.experiment = tag;
      r.model = kind_name(run.kind);
      r.session = where;
      r.date_index = multi ? sessions.back().date_index : sessions[run.session].date_index;
      r.params = param_count(mc);
      r.seed = run.seed;
      r.converged = false;
      run.rows.push_back(r);
      run.failure = e.what();
    }
  });

  std::vector<MetricsRecord> rows;
  std::string loss = "experiment,model,session,seed,epoch,loss,learning_rate\n";
  json outputs = {{"metrics", (out / "metrics.csv").string()}, {"loss", (out / "loss.csv").string()}};
  json ckpts = json::array(), failures = json::array();
  for (const auto& r : runs) {
    rows.insert(rows.end(), r.rows.begin(), r.rows.end());
    loss += r.loss;
    if (!r.checkpoint.empty()) ckpts.push_back({{"path", r.checkpoint}, {"hash", file_hash(r.checkpoint)}});
    if (!r.failure.empty()) {
      failures.push_back(r.failure);
      ctx.err << "not converged: " << r.failure << "\n";
    }
  }
  write_metrics_csv(out / "metrics.csv", rows);
  write_text(out / "loss.csv", loss);
  outputs["checkpoints"] = ckpts;
  write_manifest(out, "train", c, inputs_json(bundles), outputs, ctx.threads, {{"failures", failures}});
  for (const auto& r : rows)
    if (r.experiment == tag)
      ctx.out << r.model << " " << r.session << " seed " << r.seed << ": r2_avg "
              << (r.converged ? fmt(r.r2_avg) : std::string("not converged")) << "\n";
  return failures.empty() ? kExitOk : kExitTrainingFailure;
}

int cmd_finetune(const Config& c, Context& ctx) {
  const auto base_path = c.str("base");
  if (base_path.empty()) throw UsageError("finetune needs a base checkpoint (set 'base')");
  if (!fs::exists(base_path)) throw DataError(DataError::Kind::MissingFile, "base checkpoint " + base_path + " does not exist");
  const auto out = out_dir(c);
  FinetuneConfig fc;
  fc.increment_s = c.num("finetune.increment_s");
  fc.epochs_per_increment = c.uint("finetune.epochs_per_increment");
  fc.increments = c.has("finetune.increments") ? c.uint("finetune.increments") : kAllIncrements;
  fc.learning_rate = c.num("finetune.learning_rate");
  fc.batch_size = c.uint("finetune.batch_size");
  fc.S = c.uint("finetune.S");
  fc.stride = c.uint("finetune.stride");
  fc.threshold = c.num("finetune.threshold");
  fc.seed = c.uint("finetune.seed");
  fc.validate();
  const auto base = load_checkpoint(base_path);
  const auto bundles = load_bundles(c.strs("data"));
  const auto sessions = prepare_all(bundles, preprocess_config(c));
  if (sessions.front().train->features.cols != base.config.input_channels)
    throw DataError(DataError::Kind::ChannelMismatch, "base checkpoint expects " + std::to_string(base.config.input_channels) +
                                                          " channels, data has " + std::to_string(sessions.front().train->features.cols));

  std::vector<MetricsRecord> rows;
  std::string curve = "model,session,seconds,r2_avg\n";
  json ckpts = json::array(), failures = json::array();
  for (const auto& s : sessions) {
    const auto model = kind_name(base.config.kind);
    try {
      const auto res = finetune_new_session(base, s, fc);
      rows.push_back(res.final);
      for (const auto& [sec, r2] : res.curve) curve += model + "," + s.session_id + "," + fmt(sec) + "," + fmt(r2) + "\n";
      const auto path = out / "checkpoints" / ("finetune_" + model + "_" + s.session_id + ".ckpt");
      save_checkpoint(path, res.checkpoint);
      ckpts.push_back({{"path", path.string()}, {"hash", file_hash(path)}});
      ctx.out << model << " " << s.session_id << ": zero-shot " << fmt(res.zero_shot.r2_avg) << ", fine-tuned " << fmt(res.final.r2_avg)
              << ", recovery " << (res.recovery ? fmt(*res.recovery) + " s" : std::string("not recovered")) << "\n";
    } catch (const DivergenceError& e) {
      MetricsRecord r;
      r.experiment = "finetune";
      r.model = model;
      r.session = s.session_id;
      r.date_index = s.date_index;
      r.params = param_count(base.config);
      r.seed = fc.seed;
      r.converged = false;
      rows.push_back(r);
      failures.push_back(e.what());
      ctx.err << "not converged: " << e.what() << "\n";
    }
  }
  write_metrics_csv(out / "metrics.csv", rows);
  write_text(out / "curve.csv", curve);
  json inputs = inputs_json(bundles);
  inputs.push_back({{"path", base_path}, {"hash", file_hash(base_path)}, {"role", "base"}});
  write_manifest(out, "finetune", c, inputs,
                 {{"metrics", (out / "metrics.csv").string()}, {"curve", (out / "curve.csv").string()}, {"checkpoints", ckpts}},
                 ctx.threads, {{"failures", failures}});
  return failures.empty() ? kExitOk : kExitTrainingFailure;
}

int cmd_bench(const Config& c, Context& ctx) {
  const auto paths = c.strs("checkpoints");
  if (paths.empty()) throw UsageError("bench needs at least one checkpoint (set 'checkpoints')");
  for (const auto& p : paths)
    if (!fs::exists(p)) throw DataError(DataError::Kind::MissingFile, "checkpoint " + p + " does not exist");
  const auto out = out_dir(c);
  std::vector<std::size_t> S_list;
  for (auto s : c.uints("S")) S_list.push_back(static_cast<std::size_t>(s));
  if (S_list.empty()) throw UsageError("S list is empty");
  LatencyOptions opt;
  opt.warmup = c.uint("warmup");
  opt.samples = c.uint("samples");
  opt.seed = c.uint("seed");
  if (opt.samples == 0) throw UsageError("samples must be >= 1");

  std::ostringstream csv;
  csv << "row,model,checkpoint,S,window_ms,samples,median_s,p95_s,threads,ratio\n";
  std::ostringstream ratios;
  json inputs = json::array();
  for (const auto& p : paths) {
    const auto ck = load_checkpoint(p);
    inputs.push_back({{"path", p}, {"hash", file_hash(p)}});
    for (auto S : S_list)
      if (ck.config.kind == ModelKind::Transformer && S > ck.config.max_timesteps)
        throw UsageError("S=" + std::to_string(S) + " exceeds the Transformer max_timesteps " + std::to_string(ck.config.max_timesteps) +
                         " of " + p);
    const auto model = ck.instantiate();
    const auto probe = complexity_probe(model, S_list, opt);
    const auto name = kind_name(ck.config.kind);
    for (const auto& r : probe.reports) {
      csv << "latency," << name << ',' << p << ',' << r.S << ',' << fmt(r.window_ms) << ',' << r.samples << ',' << fmt(r.median_s) << ','
          << fmt(r.p95_s) << ',' << r.threads << ",\n";
      ctx.out << name << " S=" << r.S << ": median " << fmt(r.median_s) << " s, p95 " << fmt(r.p95_s) << " s\n";
    }
    ratios << "ratio," << name << ',' << p << ',' << S_list.back() << ",,,,,1," << fmt(probe.ratio) << '\n';
    ctx.out << name << " latency(" << S_list.back() << ")/latency(" << S_list.front() << ") = " << fmt(probe.ratio) << "\n";
  }
  write_text(out / "latency.csv", csv.str() + ratios.str());
  write_manifest(out, "bench", c, inputs, {{"latency", (out / "latency.csv").string()}}, ctx.threads);
  return kExitOk;
}

int cmd_scale(const Config& c, Context& ctx) {
  const auto out = out_dir(c);
  const auto tc = train_config(c, true);
  const auto kinds = model_kinds(c);
  const auto seeds = seeds_of(c);
  std::vector<std::size_t> layers;
  for (auto l : c.uints("layer_counts")) layers.push_back(static_cast<std::size_t>(l));
  if (layers.empty()) throw UsageError("layer_counts is empty");
  for (std::size_t i = 1; i < layers.size(); ++i)
    if (layers[i] <= layers[i - 1]) throw UsageError("layer_counts must be strictly ascending");
  if (layers.front() == 0) throw UsageError("layer_counts must be >= 1");
  const auto bundles = load_bundles(c.strs("data"));
  const auto sessions = prepare_all(bundles, preprocess_config(c));
  if (sessions.size() < 2) throw UsageError("scale needs at least 2 sessions");
  const std::size_t C = sessions.front().train->features.cols;

  std::vector<MetricsRecord> rows;
  std::ostringstream csv;
  csv << "model,layers,params,r2_mean,r2_stderr,seeds,converged,failure\n";
  bool failed = false;
  for (auto k : kinds) {
    const auto base = model_config(c, k, C);
    const auto sweep = scaling_sweep(base, layers, sessions, tc, seeds, ctx.threads);
    for (const auto& row : sweep) {
      for (auto r : row.records) {
        r.experiment = "scale";
        rows.push_back(r);
      }
      if (!row.converged) {
        failed = true;
        MetricsRecord r;
        r.experiment = "scale";
        r.model = kind_name(k);
        r.session = "pooled";
        r.params = row.params;
        r.converged = false;
        rows.push_back(r);
        ctx.err << "not converged: " << row.failure << "\n";
      }
      std::string failure = row.failure;
      std::replace(failure.begin(), failure.end(), ',', ';');
      csv << kind_name(k) << ',' << row.layers << ',' << row.params << ',' << fmt(row.mean) << ',' << fmt(row.stderr_) << ','
          << row.r2.size() << ',' << (row.converged ? "true" : "false") << ',' << failure << '\n';
      ctx.out << kind_name(k) << " layers " << row.layers << " (" << row.params << " params): "
              << (row.converged ? "r2 " + fmt(row.mean) + " +- " + fmt(row.stderr_) : std::string("not converged")) << "\n";
    }
  }
  write_metrics_csv(out / "metrics.csv", rows);
  write_text(out / "scaling.csv", csv.str());
  write_manifest(out, "scale", c, inputs_json(bundles),
                 {{"metrics", (out / "metrics.csv").string()}, {"scaling", (out / "scaling.csv").string()}}, ctx.threads);
  return failed ? kExitTrainingFailure : kExitOk;
}

// ---------------------------------------------------------------------------
// report

struct Stat {
  std::vector<double> v;
  void add(double x) { v.push_back(x); }
  double mean() const { return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }
  double stderr_() const {
    if (v.size() < 2) return v.empty() ? std::nan("") : 0.0;
    const double m = mean();
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
  }
};

struct Cell {
  Stat r2, r2x, r2y, params, latency, recovery, zero_shot;
  std::size_t not_recovered = 0, not_converged = 0;
};

bool is_metrics_csv(const fs::path& p) {
  std::ifstream in(p);
  std::string header;
  std::getline(in, header);
  std::string want;
  for (std::size_t i = 0; i < kMetricsColumns.size(); ++i) want += (i ? "," : "") + kMetricsColumns[i];
  if (!header.empty() && header.back() == '\r') header.pop_back();
  return header == want;
}

int cmd_report(const Config& c, Context& ctx) {
  const auto inputs = c.strs("metrics");
  if (inputs.empty()) throw UsageError("report needs metrics files or directories (set 'metrics')");
  std::vector<fs::path> files;
  for (const auto& p : inputs) {
    if (fs::is_regular_file(p)) {
      files.emplace_back(p);
    } else if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file() && e.path().extension() == ".csv" && is_metrics_csv(e.path())) found.push_back(e.path());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      throw DataError(DataError::Kind::MissingFile, "no metrics at " + p);
    }
  }
  std::vector<MetricsRecord> rows;
  for (const auto& f : files) {
    auto r = read_metrics_csv(f);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (rows.empty()) throw DataError(DataError::Kind::Precondition, "no metrics rows found");
  const auto out = out_dir(c);

  std::vector<std::string> experiments, models;
  std::map<std::pair<std::string, std::string>, Cell> cells;
  std::map<std::tuple<std::string, std::size_t>, Stat> series;
  for (const auto& r : rows) {
    if (std::find(experiments.begin(), experiments.end(), r.experiment) == experiments.end()) experiments.push_back(r.experiment);
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
    auto& cell = cells[{r.experiment, r.model}];
    cell.params.add(static_cast<double>(r.params));
    if (!r.converged) {
      ++cell.not_converged;
      continue;
    }
    cell.r2.add(r.r2_avg);
    cell.r2x.add(r.r2_x);
    cell.r2y.add(r.r2_y);
    if (r.latency) cell.latency.add(r.latency->median_s);
    if (r.recovery) {
      if (*r.recovery)
        cell.recovery.add(**r.recovery);
      else
        ++cell.not_recovered;
    }
    if (r.zero_shot_r2) cell.zero_shot.add(*r.zero_shot_r2);
    if (r.experiment == "scale") series[{r.model, r.params}].add(r.r2_avg);
  }
  std::vector<std::string> model_order;
  for (auto k : kAllKinds)
    if (std::find(models.begin(), models.end(), kind_name(k)) != models.end()) model_order.push_back(kind_name(k));
  for (const auto& m : models)
    if (std::find(model_order.begin(), model_order.end(), m) == model_order.end()) model_order.push_back(m);

  std::ostringstream csv;
  csv << "experiment,model,n,r2_avg_mean,r2_avg_stderr,r2_x_mean,r2_y_mean,params,latency_median_s,recovery_s,not_recovered,"
         "zero_shot_r2,not_converged\n";
  auto pm = [](const Stat& s) { return s.v.empty() ? std::string("-") : fmt(s.mean()) + " +- " + fmt(s.stderr_()); };
  for (const auto& e : experiments) {
    ctx.out << "== " << e << " ==\n";
    std::vector<std::string> cols;
    for (const auto& m : model_order)
      if (cells.count({e, m})) cols.push_back(m);
    ctx.out << "indicator";
    for (const auto& m : cols) ctx.out << " | " << m;
    ctx.out << "\n";
    const std::vector<std::pair<std::string, std::function<std::string(const Cell&)>>> lines = {
        {"Average R2", [&](const Cell& x) { return pm(x.r2); }},
        {"Params", [&](const Cell& x) { return fmt(x.params.mean()); }},
        {"Inference time/s", [&](const Cell& x) { return pm(x.latency); }},
        {"Recovery time/s",
         [&](const Cell& x) {
           if (x.recovery.v.empty() && x.not_recovered) return std::string("not recovered");
           return pm(x.recovery);
         }},
        {"Zero shot", [&](const Cell& x) { return pm(x.zero_shot); }},
        {"Not converged", [&](const Cell& x) { return std::to_string(x.not_converged); }}};
    for (const auto& [label, f] : lines) {
      ctx.out << label;
      for (const auto& m : cols) ctx.out << " | " << f(cells.at({e, m}));
      ctx.out << "\n";
    }
    for (const auto& m : cols) {
      const auto& x = cells.at({e, m});
      csv << e << ',' << m << ',' << x.r2.v.size() << ',' << fmt(x.r2.mean()) << ',' << fmt(x.r2.stderr_()) << ',' << fmt(x.r2x.mean())
          << ',' << fmt(x.r2y.mean()) << ',' << fmt(x.params.mean()) << ',' << (x.latency.v.empty() ? "" : fmt(x.latency.mean())) << ','
          << (x.recovery.v.empty() ? "" : fmt(x.recovery.mean())) << ',' << x.not_recovered << ','
          << (x.zero_shot.v.empty() ? "" : fmt(x.zero_shot.mean())) << ',' << x.not_converged << '\n';
    }
  }
  std::ostringstream sc;
  sc << "model,params,r2_mean,r2_stderr,n\n";
  for (const auto& [key, s] : series)
    sc << std::get<0>(key) << ',' << std::get<1>(key) << ',' << fmt(s.mean()) << ',' << fmt(s.stderr_()) << ',' << s.v.size() << '\n';
  write_text(out / "summary.csv", csv.str());
  write_text(out / "scaling_series.csv", sc.str());
  json in = json::array();
  for (const auto& f : files) in.push_back({{"path", f.string()}, {"hash", file_hash(f)}});
  write_manifest(out, "report", c, in,
                 {{"summary", (out / "summary.csv").string()}, {"scaling_series", (out / "scaling_series.csv").string()}}, ctx.threads);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct Command {
  std::string name;
  std::string help;
  Schema schema;
  std::function<int(const Config&, Context&)> run;
};

std::vector<Command> commands() {
  const Schema common = {{"out", Ty::Str, nullptr}};
  const Schema data = {{"data", Ty::StrList, json::array()}};
  const Schema runs = {{"models", Ty::StrList, json::array({"GRU", "Transformer", "RWKV", "Mamba"})},
                       {"seeds", Ty::UIntList, json::array({0, 1, 2})}};
  const Schema synth = {{"days", Ty::UInt, 5},
                        {"channels", Ty::UInt, 96},
                        {"duration_s", Ty::Num, 300.0},
                        {"seed", Ty::UInt, 0},
                        {"rate_decay", Ty::Num, 0.7},
                        {"permute_fraction", Ty::Num, 0.2},
                        {"permutation_seed", Ty::UInt, 1},
                        {"poisson_noise", Ty::Bool, true},
                        {"reference_speed", Ty::Num, 20.0}};
  const Schema train = {{"experiment", Ty::Str, "single"}};
  const Schema finetune = {{"base", Ty::Str, nullptr},
                           {"finetune.increment_s", Ty::Num, 10.0},
                           {"finetune.epochs_per_increment", Ty::UInt, 5},
                           {"finetune.increments", Ty::UInt, nullptr},
                           {"finetune.learning_rate", Ty::Num, 1e-3},
                           {"finetune.batch_size", Ty::UInt, 16},
                           {"finetune.S", Ty::UInt, 128},
                           {"finetune.stride", Ty::UInt, 32},
                           {"finetune.threshold", Ty::Num, 0.7},
                           {"finetune.seed", Ty::UInt, 0}};
  const Schema bench = {{"checkpoints", Ty::StrList, json::array()},
                        {"S", Ty::UIntList, json::array({128, 1024})},
                        {"warmup", Ty::UInt, 10},
                        {"samples", Ty::UInt, 100},
                        {"seed", Ty::UInt, 0}};
  const Schema scale = {{"layer_counts", Ty::UIntList, json::array({1, 2, 4})}};
  const Schema report = {{"metrics", Ty::StrList, json::array()}};
  return {
      {"synth", "write synthetic daily session bundles", join({&common, &synth}), cmd_synth},
      {"preprocess", "bin, smooth, split and normalize session bundles", join({&common, &data, &preprocess_keys()}), cmd_preprocess},
      {"train", "single- or multi-session training", join({&common, &data, &runs, &train, &preprocess_keys(), &model_keys(), &train_keys()}),
       cmd_train},
      {"finetune", "fine-tune a checkpoint on new sessions in 10 s increments", join({&common, &data, &finetune, &preprocess_keys()}),
       cmd_finetune},
      {"bench", "inference latency per window length", join({&common, &bench}), cmd_bench},
      {"scale", "parameter scaling sweep over layer counts",
       join({&common, &data, &runs, &scale, &preprocess_keys(), &model_keys(), &train_keys()}), cmd_scale},
      {"report", "aggregate metrics CSVs into summary tables", join({&common, &report}), cmd_report},
  };
}

json read_config_file(const std::string& path) {
  json j;
  try {
    j = json::parse(slurp(path));
  } catch (const json::parse_error& e) {
    throw UsageError("config " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + path + " must hold a JSON object");
  // a run manifest replays its resolved config
  if (j.contains("format") && j["format"] == "ndbench-run-v1") return j.at("config");
  return j;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"ndbench: neural decoding benchmark suite"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(NDBENCH_VERSION));
  auto cmds = commands();

  struct Flags {
    std::string config;
    std::vector<std::string> sets, data, models, checkpoints, metrics;
    std::string out, base;
  };
  std::vector<Flags> flags(cmds.size());
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    auto* sub = app.add_subcommand(cmds[i].name, cmds[i].help);
    auto& f = flags[i];
    sub->add_option("-c,--config", f.config, "JSON config (flat dotted keys or nested objects, or a run manifest)");
    sub->add_option("-s,--set", f.sets, "override KEY=VALUE (VALUE parsed as JSON when possible)");
    sub->add_option("-o,--out", f.out, "output directory");
    auto has = [&](const std::string& k) {
      return std::any_of(cmds[i].schema.begin(), cmds[i].schema.end(), [&](const Key& key) { return key.name == k; });
    };
    if (has("data")) sub->add_option("-d,--data", f.data, "session bundle or directory of bundles (repeatable)");
    if (has("models")) sub->add_option("-m,--model", f.models, "model kind (repeatable)");
    if (has("base")) sub->add_option("-b,--base", f.base, "base checkpoint");
    if (has("checkpoints")) sub->add_option("--checkpoint", f.checkpoints, "checkpoint to benchmark (repeatable)");
    if (has("metrics")) sub->add_option("--metrics", f.metrics, "metrics CSV or directory (repeatable)");
    std::string keys;
    for (const auto& k : cmds[i].schema) keys += "\n  " + k.name + (k.def.is_null() ? "" : " = " + k.def.dump());
    sub->footer("Config keys:" + keys);
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (std::size_t i = 0; i < cmds.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    const auto& f = flags[i];
    try {
      Context ctx{out, err, thread_count()};
      std::vector<json> layers;
      if (!f.config.empty()) layers.push_back(read_config_file(f.config));
      json direct = json::object();
      if (!f.out.empty()) direct["out"] = f.out;
      if (!f.data.empty()) direct["data"] = f.data;
      if (!f.models.empty()) direct["models"] = f.models;
      if (!f.base.empty()) direct["base"] = f.base;
      if (!f.checkpoints.empty()) direct["checkpoints"] = f.checkpoints;
      if (!f.metrics.empty()) direct["metrics"] = f.metrics;
      layers.push_back(direct);
      json sets = json::object();
      for (const auto& s : f.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("--set expects KEY=VALUE, got '" + s + "'");
        const auto value = s.substr(eq + 1);
        json v = json::parse(value, nullptr, false);
        sets[s.substr(0, eq)] = v.is_discarded() ? json(value) : v;
      }
      layers.push_back(sets);
      const Config cfg(cmds[i].schema, layers);
      return cmds[i].run(cfg, ctx);
    } catch (const UsageError& e) {
      err << "ndbench " << cmds[i].name << ": " << e.what() << "\n";
    } catch (const DataError& e) {
      err << "ndbench " << cmds[i].name << ": data error: " << e.what() << "\n";
    } catch (const DivergenceError& e) {
      err << "ndbench " << cmds[i].name << ": " << e.what() << "\n";
      return kExitTrainingFailure;
    } catch (const fs::filesystem_error& e) {
      err << "ndbench " << cmds[i].name << ": " << e.what() << "\n";
    } catch (const std::invalid_argument& e) {
      err << "ndbench " << cmds[i].name << ": " << e.what() << "\n";
    } catch (const std::runtime_error& e) {
      // checkpoint, metrics and shape errors are input problems as well
      err << "ndbench " << cmds[i].name << ": " << e.what() << "\n";
    }
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace ndbench
