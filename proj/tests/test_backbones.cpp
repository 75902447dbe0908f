#include <doctest.h>

#include <cmath>
#include <random>

#include "ndbench/backbones.hpp"
#include "ndbench/ops.hpp"
#include "ndbench/optim.hpp"

using namespace ndbench;
using TD = Tensor<double>;

namespace {

TD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, bool rg = false) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = d(rng);
  return TD::from(std::move(shape), std::move(v), rg);
}

void set_values(ModelParams<double>& p, const std::string& name, std::vector<double> v) {
  auto t = p.get(name);
  REQUIRE(t.size() == v.size());
  std::copy(v.begin(), v.end(), t.mutable_data().begin());
}

void zero_all(ModelParams<double>& p) {
  for (auto& g : p)
    for (auto& v : g.tensor.mutable_data()) v = 0.0;
}

// Central differences of sum(f(inputs) * probe) against the analytic input gradients.
void check_op_grad(const std::function<TD(std::vector<TD>&)>& f, std::vector<TD> inputs, double tol = 1e-6) {
  std::mt19937_64 rng(99);
  TD probe;
  {
    NoGradGuard ng;
    const auto y = f(inputs);
    probe = random_tensor(y.shape(), rng);
  }
  for (auto& x : inputs) x.set_requires_grad(true);
  backward(sum(mul(f(inputs), probe)));
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k];
    REQUIRE(x.has_grad());
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto w = x.mutable_data();
    NoGradGuard ng;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double o = w[i], h = 1e-6;
      w[i] = o + h;
      const double fp = sum(mul(f(inputs), probe)).item();
      w[i] = o - h;
      const double fm = sum(mul(f(inputs), probe)).item();
      w[i] = o;
      const double num = (fp - fm) / (2 * h);
      const double rel = std::abs(num - analytic[i]) / std::max(1e-4, std::abs(num) + std::abs(analytic[i]));
      INFO("input " << k << " index " << i << " analytic " << analytic[i] << " numeric " << num);
      CHECK(rel < tol);
    }
  }
}

// wkv_t by the printed sum, no stabilization.
std::vector<double> wkv_direct(const std::vector<double>& k, const std::vector<double>& v, double w, double u) {
  std::vector<double> out(k.size());
  for (std::size_t t = 0; t < k.size(); ++t) {
    double num = std::exp(u + k[t]) * v[t], den = std::exp(u + k[t]);
    for (std::size_t i = 0; i < t; ++i) {
      const double e = std::exp(-static_cast<double>(t - 1 - i) * w + k[i]);
      num += e * v[i];
      den += e;
    }
    out[t] = num / den;
  }
  return out;
}

// Two-loop scaled dot-product attention for one head.
std::vector<double> naive_attention(const std::vector<double>& q, const std::vector<double>& k, const std::vector<double>& v,
                                    std::size_t sq, std::size_t sk, std::size_t E, std::size_t heads, bool causal) {
  const std::size_t dh = E / heads;
  std::vector<double> out(sq * E, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < sq; ++i) {
      std::vector<double> logits(sk, -INFINITY);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < sk; ++j) {
        if (causal && j > i) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i * E + h * dh + c] * k[j * E + h * dh + c];
        logits[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, logits[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < sk; ++j) z += std::isfinite(logits[j]) ? std::exp(logits[j] - mx) : 0.0;
      for (std::size_t j = 0; j < sk; ++j) {
        if (!std::isfinite(logits[j])) continue;
        const double pj = std::exp(logits[j] - mx) / z;
        for (std::size_t c = 0; c < dh; ++c) out[i * E + h * dh + c] += pj * v[j * E + h * dh + c];
      }
    }
  return out;
}

ModelConfig small_config(ModelKind kind, std::size_t C = 4, std::size_t E = 8, std::size_t layers = 1) {
  auto c = ModelConfig::defaults(kind, C);
  c.embed = E;
  c.layers = layers;
  c.max_timesteps = 64;
  c.dropout_rate = 0.0;
  if (kind == ModelKind::RWKV) c.ffn_ratio = 2.0;
  return c;
}

}  // namespace

TEST_CASE("parameter counts") {
  CHECK(param_count(ModelConfig::defaults(ModelKind::GRU)) == 272386);
  const double rwkv = static_cast<double>(param_count(ModelConfig::defaults(ModelKind::RWKV)));
  const double mamba = static_cast<double>(param_count(ModelConfig::defaults(ModelKind::Mamba)));
  CHECK(std::abs(rwkv / 294000.0 - 1.0) < 0.10);
  CHECK(std::abs(mamba / 306000.0 - 1.0) < 0.10);
  MESSAGE("RWKV " << rwkv << ", Mamba " << mamba << ", Transformer "
                  << param_count(ModelConfig::defaults(ModelKind::Transformer)));

  auto big = ModelConfig::defaults(ModelKind::GRU);
  big.embed = 512;
  CHECK(param_count(big) > 2 * param_count(ModelConfig::defaults(ModelKind::GRU)));

  for (auto kind : kAllKinds) {
    auto c = ModelConfig::defaults(kind);
    Model<float> m(c, 1);
    CHECK(m.params().scalar_count() == param_count(c));
    c.layers += 1;
    c.input_channels = 17;
    c.max_timesteps = 50;
    Model<float> m2(c, 1);
    CHECK(m2.params().scalar_count() == param_count(c));
  }
  auto proj = ModelConfig::defaults(ModelKind::GRU);
  proj.gru_input_projection = true;
  proj.layers = 2;
  CHECK(Model<float>(proj, 0).params().scalar_count() == param_count(proj));
}

TEST_CASE("model config validation and json round trip") {
  auto c = ModelConfig::defaults(ModelKind::Transformer);
  c.embed = 10;
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  for (auto kind : kAllKinds) {
    auto d = ModelConfig::defaults(kind, 33);
    d.layers = 3;
    CHECK(ModelConfig::from_json(d.to_json()) == d);
  }
  CHECK(parse_kind("mamba") == ModelKind::Mamba);
  CHECK_THROWS_AS(parse_kind("lstm"), ConfigError);
}

TEST_CASE("input projection examples") {
  std::mt19937_64 rng(3);
  // identity-padded W copies channels into the first C dims
  TD W = TD::zeros({3, 5});
  for (std::size_t i = 0; i < 3; ++i) W.mutable_data()[i * 5 + i] = 1.0;
  const auto x = random_tensor({4, 3}, rng);
  const auto y = linear(x, W, TD::zeros({5}));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 5; ++j) CHECK(y.at({t, j}) == (j < 3 ? x.at({t, j}) : 0.0));
  const auto b = random_tensor({5}, rng);
  const auto y0 = linear(TD::zeros({4, 3}), random_tensor({3, 5}, rng), b);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 5; ++j) CHECK(y0.at({t, j}) == b.at({j}));
  const auto x2 = TD::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto w2 = TD::from({3, 2}, {1, -1, 0, 2, 0.5, 1});
  const auto y2 = linear(x2, w2, TD::from({2}, {0.25, -0.5}));
  CHECK(y2.at({0, 0}) == doctest::Approx(1 + 1.5 + 0.25));
  CHECK(y2.at({0, 1}) == doctest::Approx(-1 + 4 + 3 - 0.5));
  CHECK(y2.at({1, 0}) == doctest::Approx(4 + 3 + 0.25));
  CHECK(y2.at({1, 1}) == doctest::Approx(-4 + 10 + 6 - 0.5));
}

TEST_CASE("GRU hand-evaluated cases") {
  auto c = small_config(ModelKind::GRU, 3, 5);
  Model<double> m(c, 4);
  zero_all(m.params());
  set_values(m.params(), "head.b", {0.7, -0.2});
  std::mt19937_64 rng(1);
  const auto y = m.forward(random_tensor({6, 3}, rng));
  for (std::size_t t = 0; t < 6; ++t) {
    CHECK(y.at({t, 0}) == 0.7);
    CHECK(y.at({t, 1}) == -0.2);
  }

  auto s = small_config(ModelKind::GRU, 1, 1);
  Model<double> g(s, 0);
  zero_all(g.params());
  set_values(g.params(), "gru.0.W_h", {1.0});
  set_values(g.params(), "head.W", {1.0, 0.0});
  const auto h = g.forward(TD::from({1, 1}, {1.0}));
  CHECK(h.at({0, 0}) == doctest::Approx(0.5 * std::tanh(1.0)).epsilon(1e-15));
  CHECK(h.at({0, 0}) == doctest::Approx(0.3808).epsilon(1e-4));
}

TEST_CASE("attention examples and naive oracle") {
  std::mt19937_64 rng(8);
  // all logits equal -> column mean of V
  const auto v = random_tensor({1, 5, 4}, rng);
  const auto out = multihead_attention(TD::zeros({1, 5, 4}), random_tensor({1, 5, 4}, rng), v, 2, false);
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = 0.0;
    for (std::size_t t = 0; t < 5; ++t) mean += v.at({0, t, j}) / 5.0;
    for (std::size_t t = 0; t < 5; ++t) CHECK(out.at({0, t, j}) == doctest::Approx(mean).epsilon(1e-12));
  }
  // one logit +50 above the rest selects its V row
  TD q = TD::zeros({1, 1, 2}), k = TD::zeros({1, 4, 2});
  q.mutable_data()[0] = 1.0;
  k.mutable_data()[2 * 2] = 50.0 * std::sqrt(2.0);
  const auto v2 = random_tensor({1, 4, 2}, rng);
  const auto sat = multihead_attention(q, k, v2, 1, false);
  CHECK(std::abs(sat.at({0, 0, 0}) - v2.at({0, 2, 0})) < 1e-6);
  CHECK(std::abs(sat.at({0, 0, 1}) - v2.at({0, 2, 1})) < 1e-6);

  std::uniform_int_distribution<std::size_t> len(1, 12);
  for (int trial = 0; trial < 24; ++trial) {
    const std::size_t heads = 1 + trial % 3, E = heads * (1 + trial % 4), sq = len(rng);
    const bool causal = trial % 2 == 0;
    const std::size_t sk = causal ? sq : len(rng);
    const auto Q = random_tensor({2, sq, E}, rng, -2, 2), K = random_tensor({2, sk, E}, rng, -2, 2), V = random_tensor({2, sk, E}, rng);
    const auto got = multihead_attention(Q, K, V, heads, causal);
    for (std::size_t b = 0; b < 2; ++b) {
      auto part = [&](const TD& t, std::size_t s) {
        return std::vector<double>(t.data().begin() + static_cast<std::ptrdiff_t>(b * s * E),
                                   t.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * s * E));
      };
      const auto want = naive_attention(part(Q, sq), part(K, sk), part(V, sk), sq, sk, E, heads, causal);
      for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.data()[b * sq * E + i] - want[i]) < 1e-6);
    }
  }
}

TEST_CASE("wkv examples") {
  const auto one = wkv_scan(TD::from({1, 3}, {0.3, -2, 5}), TD::from({1, 3}, {1.5, 2, -3}), TD::full({3}, 0.5), TD::full({3}, 0.1));
  CHECK(one.at({0, 0}) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(one.at({0, 1}) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(one.at({0, 2}) == doctest::Approx(-3.0).epsilon(1e-15));
  const auto two = wkv_scan(TD::from({2, 1}, {0, 0}), TD::from({2, 1}, {1, 3}), TD::zeros({1}), TD::zeros({1}));
  CHECK(two.at({1, 0}) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("stabilized wkv matches the direct formula and ignores shifts of k") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> len(1, 32);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t S = len(rng), E = 3;
    const auto k = random_tensor({S, E}, rng, -4, 4);
    const auto v = random_tensor({S, E}, rng, -2, 2);
    const auto w = random_tensor({E}, rng, 0.0, 3.0);
    const auto u = random_tensor({E}, rng, -1, 1);
    const auto got = wkv_scan(k, v, w, u);
    const double c = std::uniform_real_distribution<double>(-30, 30)(rng);
    const auto shifted = wkv_scan(affine(k, 1.0, c), v, w, u);
    for (std::size_t e = 0; e < E; ++e) {
      std::vector<double> kc(S), vc(S);
      for (std::size_t t = 0; t < S; ++t) {
        kc[t] = k.at({t, e});
        vc[t] = v.at({t, e});
      }
      const auto want = wkv_direct(kc, vc, w.at({e}), u.at({e}));
      for (std::size_t t = 0; t < S; ++t) {
        CHECK(std::abs(got.at({t, e}) - want[t]) < 1e-5);
        CHECK(std::abs(shifted.at({t, e}) - got.at({t, e})) < 1e-5);
      }
    }
  }
  // large k would overflow a direct evaluation; the scan stays finite
  const auto big = wkv_scan(TD::from({3, 1}, {800, 900, 1000}), TD::from({3, 1}, {1, 2, 3}), TD::full({1}, 0.5), TD::zeros({1}));
  for (double x : big.data()) CHECK(std::isfinite(x));
}

TEST_CASE("ssm scan examples and sequential vs blocked") {
  const std::vector<double> a{0.5, 0.5, 0.5}, b{1, 0, 0}, c{1, 1, 1};
  const auto y = ssm_scan_sequential(a, b, c, 1);
  CHECK(y == std::vector<double>{1.0, 0.5, 0.25});
  CHECK(ssm_scan_blocked(a, b, c, 1, 2) == y);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ud(-1, 1), ad(0, 1);
  {
    std::vector<double> z(12, 0.0), bb(12), cc(12);
    for (auto& x : bb) x = ud(rng);
    for (auto& x : cc) x = ud(rng);
    const auto m = ssm_scan_sequential(z, bb, cc, 3);
    for (std::size_t t = 0; t < 4; ++t) {
      double want = 0;
      for (std::size_t j = 0; j < 3; ++j) want += cc[t * 3 + j] * bb[t * 3 + j];
      CHECK(m[t] == doctest::Approx(want).epsilon(1e-15));
    }
  }
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t S = 64, d = 1 + trial % 5;
    std::vector<double> aa(S * d), bb(S * d), cc(S * d);
    for (auto& x : aa) x = ad(rng);
    for (auto& x : bb) x = ud(rng);
    for (auto& x : cc) x = ud(rng);
    const auto seq = ssm_scan_sequential(aa, bb, cc, d);
    const auto blk = ssm_scan_blocked(aa, bb, cc, d, 1 + static_cast<std::size_t>(trial) % 9);
    for (std::size_t t = 0; t < S; ++t) CHECK(std::abs(seq[t] - blk[t]) < 1e-5);
  }
}

TEST_CASE("selective scan op agrees with the plain recurrence") {
  std::mt19937_64 rng(12);
  const std::size_t S = 10, D = 3, N = 4;
  const auto u = random_tensor({S, D}, rng), delta = random_tensor({S, D}, rng, 0.01, 0.5);
  const auto A = random_tensor({D, N}, rng, -2, -0.1), B = random_tensor({S, N}, rng), C = random_tensor({S, N}, rng);
  const auto y = selective_scan(u, delta, A, B, C);
  for (std::size_t d = 0; d < D; ++d) {
    std::vector<double> a(S * N), b(S * N), c(S * N);
    for (std::size_t t = 0; t < S; ++t)
      for (std::size_t n = 0; n < N; ++n) {
        a[t * N + n] = std::exp(delta.at({t, d}) * A.at({d, n}));
        b[t * N + n] = delta.at({t, d}) * B.at({t, n}) * u.at({t, d});
        c[t * N + n] = C.at({t, n});
      }
    const auto want = ssm_scan_sequential(a, b, c, N);
    for (std::size_t t = 0; t < S; ++t) CHECK(y.at({t, d}) == doctest::Approx(want[t]).epsilon(1e-12));
  }
}

TEST_CASE("fused op gradients match finite differences") {
  std::mt19937_64 rng(31);
  SUBCASE("wkv") {
    check_op_grad([](std::vector<TD>& in) { return wkv_scan(in[0], in[1], in[2], in[3]); },
                  {random_tensor({2, 7, 3}, rng, -3, 3), random_tensor({2, 7, 3}, rng), random_tensor({3}, rng, 0.05, 2),
                   random_tensor({3}, rng)});
  }
  SUBCASE("selective scan") {
    check_op_grad([](std::vector<TD>& in) { return selective_scan(in[0], in[1], in[2], in[3], in[4]); },
                  {random_tensor({2, 6, 3}, rng), random_tensor({2, 6, 3}, rng, 0.05, 0.8), random_tensor({3, 4}, rng, -2, -0.1),
                   random_tensor({2, 6, 4}, rng), random_tensor({2, 6, 4}, rng)});
  }
  SUBCASE("causal conv") {
    check_op_grad([](std::vector<TD>& in) { return causal_conv1d(in[0], in[1], in[2]); },
                  {random_tensor({2, 6, 3}, rng), random_tensor({3, 4}, rng), random_tensor({3}, rng)});
  }
  SUBCASE("attention") {
    check_op_grad([](std::vector<TD>& in) { return multihead_attention(in[0], in[1], in[2], 2, true); },
                  {random_tensor({2, 5, 4}, rng), random_tensor({2, 5, 4}, rng), random_tensor({2, 5, 4}, rng)});
  }
}

TEST_CASE("backbone gradients match finite differences") {
  for (auto kind : kAllKinds) {
    CAPTURE(kind_name(kind));
    auto cfg = small_config(kind);
    Model<double> model(cfg, 17);
    std::mt19937_64 rng(2);
    const auto x = random_tensor({2, 8, 4}, rng);
    const auto probe = random_tensor({2, 8, 2}, rng);
    const auto r = finite_diff_check([&] { return sum(mul(model.forward(x), probe)); }, model.params(), 1e-5, 1e-6);
    MESSAGE(kind_name(kind) << " max relative error " << r.max_relative_error << " in " << r.worst_group << "[" << r.worst_index
                            << "] analytic " << r.analytic << " numeric " << r.numeric);
    CHECK(r.max_relative_error < 1e-3);
  }
}

TEST_CASE("streaming equals batch forward") {
  for (auto kind : {ModelKind::GRU, ModelKind::RWKV, ModelKind::Mamba}) {
    CAPTURE(kind_name(kind));
    for (int trial = 0; trial < 20; ++trial) {
      auto cfg = small_config(kind, 5, 8 + 4 * (trial % 3), 1 + trial % 2);
      if (kind == ModelKind::GRU && trial % 4 == 3) cfg.gru_input_projection = true;
      Model<double> model(cfg, static_cast<std::uint64_t>(100 + trial));
      std::mt19937_64 rng(static_cast<std::uint64_t>(trial));
      const std::size_t S = 5 + static_cast<std::size_t>(trial) * 2;
      const auto x = random_tensor({S, 5}, rng, -2, 2);
      NoGradGuard ng;
      const auto y = model.forward(x);
      StreamingDecoder<double> dec(model);
      double worst = 0.0;
      for (std::size_t t = 0; t < S; ++t) {
        const auto o = dec.step(std::span<const double>(x.data().data() + t * 5, 5));
        worst = std::max({worst, std::abs(o[0] - y.at({t, 0})), std::abs(o[1] - y.at({t, 1}))});
      }
      CHECK(worst < 1e-5);
      dec.reset();
      const auto o = dec.step(std::span<const double>(x.data().data(), 5));
      CHECK(std::abs(o[0] - y.at({0, 0})) < 1e-5);
    }
  }
  Model<double> tf(small_config(ModelKind::Transformer), 1);
  CHECK_THROWS_AS(StreamingDecoder<double>{tf}, UnsupportedOperation);
}

TEST_CASE("default models stream equal to batch") {
  for (auto kind : {ModelKind::GRU, ModelKind::RWKV, ModelKind::Mamba}) {
    CAPTURE(kind_name(kind));
    Model<double> model(ModelConfig::defaults(kind), 5);
    std::mt19937_64 rng(4);
    const auto x = random_tensor({24, 96}, rng, -1, 3);
    NoGradGuard ng;
    const auto y = model.forward(x);
    StreamingDecoder<double> dec(model);
    for (std::size_t t = 0; t < 24; ++t) {
      const auto o = dec.step(std::span<const double>(x.data().data() + t * 96, 96));
      CHECK(std::abs(o[0] - y.at({t, 0})) < 1e-5);
      CHECK(std::abs(o[1] - y.at({t, 1})) < 1e-5);
    }
  }
}

TEST_CASE("recurrent backbones are causal") {
  for (auto kind : {ModelKind::GRU, ModelKind::RWKV, ModelKind::Mamba}) {
    CAPTURE(kind_name(kind));
    Model<double> model(small_config(kind, 4, 12, 2), 3);
    std::mt19937_64 rng(6);
    auto x = random_tensor({2, 16, 4}, rng);
    NoGradGuard ng;
    const auto before = model.forward(x);
    const std::size_t cut = 9;
    for (std::size_t c = 0; c < 4; ++c) x.mutable_data()[(16 + cut) * 4 + c] += 5.0;
    const auto after = model.forward(x);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < 16; ++t)
        for (std::size_t j = 0; j < 2; ++j) {
          const double d = std::abs(after.at({b, t, j}) - before.at({b, t, j}));
          if (b == 1 && t >= cut) continue;
          CHECK(d == 0.0);
        }
    CHECK(after.at({1, cut, 0}) != before.at({1, cut, 0}));
  }
}

TEST_CASE("shape contract and transformer behaviour") {
  std::mt19937_64 rng(9);
  NoGradGuard ng;
  for (auto kind : kAllKinds) {
    CAPTURE(kind_name(kind));
    Model<float> m(ModelConfig::defaults(kind), 1);
    for (std::size_t S : {8, 128, 1024}) {
      std::vector<float> v(S * 96);
      std::normal_distribution<float> nd;
      for (auto& e : v) e = nd(rng);
      const auto y = m.forward(Tensor<float>::from({1, S, 96}, v));
      CHECK(y.shape() == Shape{1, S, 2});
    }
  }
  auto cfg = small_config(ModelKind::Transformer);
  cfg.max_timesteps = 16;
  cfg.dropout_rate = 0.1;
  Model<double> tf(cfg, 2);
  const auto x = random_tensor({2, 16, 4}, rng);
  const auto a = tf.forward(x), b = tf.forward(x);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  std::mt19937_64 drop(1);
  const auto t = tf.forward(x, true, &drop);
  CHECK_FALSE(std::equal(a.data().begin(), a.data().end(), t.data().begin()));
  CHECK_THROWS_AS(tf.forward(random_tensor({1, 17, 4}, rng)), std::invalid_argument);
  CHECK_THROWS_AS(tf.forward(random_tensor({1, 8, 5}, rng)), ShapeError);
}

TEST_CASE("non-finite outputs name the first bad timestep") {
  Model<double> m(small_config(ModelKind::GRU), 1);
  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 10, 4}, rng);
  x.mutable_data()[(10 + 6) * 4 + 1] = NAN;
  try {
    m.forward(x);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.timestep() == 6);
  }
}
