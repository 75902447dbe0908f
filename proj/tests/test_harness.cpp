#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include "ndbench/harness.hpp"

using namespace ndbench;

namespace {

PreparedSession synth_session(std::size_t C, double seconds, std::uint64_t seed, int day = 0) {
  auto cfg = SynthConfig::standard(C, seconds, seed);
  cfg.rate_decay = 0.9;
  return prepare_session(generate_synthetic_session(cfg, day));
}

ModelConfig small(ModelKind kind, std::size_t C, std::size_t E = 16) {
  auto c = ModelConfig::defaults(kind, C);
  c.embed = E;
  c.max_timesteps = 64;
  if (kind == ModelKind::RWKV) c.ffn_ratio = 2.0;
  return c;
}

TrainConfig quick(std::size_t epochs = 2) {
  TrainConfig t;
  t.epochs = epochs;
  t.S = 32;
  t.stride = 32;
  t.batch_size = 8;
  t.seed = 11;
  return t;
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("schedule_batches orderings") {
  const std::vector<SessionBatches> ab{{0, 3}, {1, 2}};
  const std::vector<BatchRef> seq{{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1}};
  CHECK(schedule_batches(ab, Strategy::Sequential, 5) == seq);
  // date order wins over list order
  const std::vector<SessionBatches> ba{{1, 3}, {0, 2}};
  CHECK(schedule_batches(ba, Strategy::Sequential, 5) == std::vector<BatchRef>{{1, 0}, {1, 1}, {0, 0}, {0, 1}, {0, 2}});

  bool saw_ba = false, saw_ab = false;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = schedule_batches(ab, Strategy::RandomSession, seed);
    if (r.front().session == 1) {
      saw_ba = true;
      CHECK(r == std::vector<BatchRef>{{1, 0}, {1, 1}, {0, 0}, {0, 1}, {0, 2}});
    } else {
      saw_ab = true;
      CHECK(r == seq);
    }
  }
  CHECK(saw_ab);
  CHECK(saw_ba);

  const std::vector<SessionBatches> many{{0, 7}, {1, 4}, {2, 9}};
  const auto r1 = schedule_batches(many, Strategy::Random, 42);
  CHECK(r1 == schedule_batches(many, Strategy::Random, 42));
  CHECK(r1 != schedule_batches(many, Strategy::Random, 43));
  auto sorted = r1;
  std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return std::tie(a.session, a.batch) < std::tie(b.session, b.batch); });
  CHECK(sorted == schedule_batches(many, Strategy::Sequential, 0));

  CHECK_THROWS_AS(schedule_batches({}, Strategy::Random, 0), std::invalid_argument);
  CHECK_THROWS_AS(schedule_batches({{0, 2}, {1, 0}}, Strategy::Random, 0), std::invalid_argument);
  CHECK(parse_strategy("random_session") == Strategy::RandomSession);
  CHECK_THROWS_AS(parse_strategy("shuffled"), ConfigError);
}

TEST_CASE("train config json") {
  TrainConfig t;
  t.epochs = 7;
  t.learning_rate = 3e-4;
  t.strategy = Strategy::Sequential;
  t.r2_mode = R2Mode::Stacked;
  CHECK(TrainConfig::from_json(t.to_json()) == t);
  CHECK_THROWS_AS(TrainConfig::from_json({{"batch_size", 0}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"epochs", "many"}}), ConfigError);
  FinetuneConfig f;
  f.increments = 3;
  CHECK(FinetuneConfig::from_json(f.to_json()).increments == 3);
  CHECK(FinetuneConfig::from_json(FinetuneConfig{}.to_json()).increments == kAllIncrements);
}

TEST_CASE("train and test windows are disjoint") {
  const auto s = synth_session(8, 30, 1);
  const auto train = make_windows(s.train, 32, 7);
  const auto test = test_windows(s, 32);
  REQUIRE_FALSE(train.empty());
  REQUIRE_FALSE(test.empty());
  for (const auto& w : train.samples) CHECK(w.tag.start_bin + 32 <= s.split.train_end);
  for (const auto& w : test.samples) CHECK(w.tag.start_bin >= s.split.train_end);
}

TEST_CASE("zero-epoch run gives an untrained baseline") {
  const auto s = synth_session(16, 60, 2);
  auto t = quick(0);
  const auto r = train_single_session(s, small(ModelKind::GRU, 16), t);
  CHECK(r.loss_history.empty());
  CHECK(r.metrics.r2_avg <= 0.05);
  CHECK(r.checkpoint.provenance.epoch == 0);
}

TEST_CASE("single-session training loss mostly decreases") {
  const auto s = synth_session(16, 60, 3);
  auto t = quick(8);
  const auto r = train_single_session(s, small(ModelKind::GRU, 16, 32), t);
  REQUIRE(r.loss_history.size() == 8);
  std::size_t down = 0;
  for (std::size_t e = 1; e < r.loss_history.size(); ++e) down += r.loss_history[e] <= r.loss_history[e - 1];
  MESSAGE("non-increasing epochs " << down << "/7, final R2 " << r.metrics.r2_avg);
  CHECK(static_cast<double>(down) >= 0.8 * 7);
  CHECK(r.metrics.r2_avg > 0.3);
  CHECK(r.metrics.r2_avg == doctest::Approx(0.5 * (r.metrics.r2_x + r.metrics.r2_y)));
  CHECK(r.per_session.size() == 1);
  CHECK(r.metrics.seed == 11);
}

TEST_CASE("checkpoints reproduce evaluation and training is deterministic") {
  const auto s = synth_session(12, 40, 4);
  for (auto kind : kAllKinds) {
    CAPTURE(kind_name(kind));
    auto cfg = small(kind, 12);
    const auto a = train_single_session(s, cfg, quick(1));
    const auto b = train_single_session(s, cfg, quick(1));
    const auto dir = std::filesystem::temp_directory_path() / "ndbench_harness_test";
    save_checkpoint(dir / "a.ckpt", a.checkpoint);
    save_checkpoint(dir / "b.ckpt", b.checkpoint);
    CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));
    CHECK(a.metrics.r2_x == b.metrics.r2_x);
    CHECK(a.loss_history == b.loss_history);

    const auto loaded = load_checkpoint(dir / "a.ckpt");
    CHECK(loaded.config == cfg);
    CHECK(loaded.provenance == a.checkpoint.provenance);
    CHECK(loaded.provenance.data_hash == data_hash({s}));
    const auto m = loaded.instantiate();
    const auto rec = evaluate(m, *loaded.norm_for(s.session_id), test_windows(s, 32));
    CHECK(rec.r2_x == a.metrics.r2_x);
    CHECK(rec.r2_y == a.metrics.r2_y);
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("divergence is reported with epoch and step") {
  const auto s = synth_session(8, 30, 5);
  auto t = quick(2);
  t.learning_rate = 1e30;
  try {
    train_single_session(s, small(ModelKind::GRU, 8), t);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.epoch() == 0);
    CHECK(e.learning_rate() == 1e30);
  }
  // the Transformer retries with halved learning rates before giving up
  auto tf = small(ModelKind::Transformer, 8);
  try {
    train_single_session(s, tf, t);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.learning_rate() == 1e30 / 8);
  }
}

TEST_CASE("multi-session training reports per-session and pooled scores") {
  std::vector<PreparedSession> days;
  auto cfg = SynthConfig::standard(10, 30, 6);
  cfg.rate_decay = 0.8;
  for (int d = 0; d < 3; ++d) days.push_back(prepare_session(generate_synthetic_session(cfg, d)));
  CHECK_THROWS_AS(train_multi_session({days[0]}, small(ModelKind::Mamba, 10), quick(1)), std::invalid_argument);
  auto t = quick(1);
  t.strategy = Strategy::Sequential;
  const auto r = train_multi_session(days, small(ModelKind::Mamba, 10), t);
  REQUIRE(r.per_session.size() == 3);
  CHECK(r.metrics.session == "pooled");
  CHECK(r.checkpoint.norms.size() == 3);
  CHECK(r.checkpoint.norms.back().date_index == 2);
  for (int d = 0; d < 3; ++d) CHECK(r.per_session[static_cast<std::size_t>(d)].date_index == d);
}

TEST_CASE("fine-tuning curve contract") {
  auto cfg = SynthConfig::standard(10, 40, 7);
  const auto d0 = prepare_session(generate_synthetic_session(cfg, 0));
  const auto d1 = prepare_session(generate_synthetic_session(cfg, 1));
  const auto base = train_single_session(d0, small(ModelKind::GRU, 10), quick(2)).checkpoint;

  FinetuneConfig f;
  f.S = 32;
  f.stride = 32;
  f.batch_size = 8;
  f.epochs_per_increment = 1;
  f.increments = 0;
  const auto zero = finetune_new_session(base, d1, f);
  REQUIRE(zero.curve.size() == 1);
  CHECK(zero.curve[0].first == 0.0);
  CHECK(zero.curve[0].second == zero.zero_shot.r2_avg);
  CHECK(*zero.final.zero_shot_r2 == zero.zero_shot.r2_avg);

  f.increments = kAllIncrements;
  const auto full = finetune_new_session(base, d1, f);
  // 32 s of training data in 10 s steps
  REQUIRE(full.curve.size() == 4);
  CHECK(full.curve[1].first == 10.0);
  CHECK(full.curve[3].first == 30.0);
  CHECK(full.zero_shot.r2_avg == zero.zero_shot.r2_avg);
  CHECK(full.final.recovery.has_value());
  CHECK(*full.final.recovery == recovery_time(full.curve, f.threshold));
  CHECK(full.final.r2_avg == full.curve.back().second);

  f.increment_s = 100;
  CHECK_THROWS_AS(finetune_new_session(base, d1, f), DataError);
}

TEST_CASE("scaling sweep rows") {
  std::vector<PreparedSession> days;
  auto cfg = SynthConfig::standard(8, 20, 8);
  for (int d = 0; d < 2; ++d) days.push_back(prepare_session(generate_synthetic_session(cfg, d)));
  auto base = small(ModelKind::RWKV, 8, 8);
  auto t = quick(1);
  const auto rows = scaling_sweep(base, {1, 2, 3}, days, t, {1, 2}, 2);
  REQUIRE(rows.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(rows[i].layers == i + 1);
    CHECK(rows[i].converged);
    CHECK(rows[i].r2.size() == 2);
    if (i) CHECK(rows[i].params > rows[i - 1].params);
  }
  CHECK(rows[0].stderr_ >= 0.0);
  // thread count does not change results
  const auto serial = scaling_sweep(base, {1, 2, 3}, days, t, {1, 2}, 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(serial[i].r2 == rows[i].r2);

  t.learning_rate = 1e30;
  const auto failed = scaling_sweep(base, {1, 2}, days, t, {1}, 1);
  REQUIRE(failed.size() == 2);
  CHECK_FALSE(failed[0].converged);
  CHECK(failed[0].failure.find("diverged") != std::string::npos);
  CHECK_THROWS_AS(scaling_sweep(base, {2, 1}, days, t, {1}), std::invalid_argument);
}
