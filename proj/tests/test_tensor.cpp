#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ndbench/checkpoint.hpp"
#include "ndbench/optim.hpp"
#include "ndbench/tensor.hpp"

using namespace ndbench;
using TD = Tensor<double>;

namespace {

TD random_tensor(Shape shape, std::mt19937_64& rng, bool rg = false) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = d(rng);
  return TD::from(std::move(shape), std::move(v), rg);
}

// Central-difference gradient of f with respect to the leaf x.
std::vector<double> numeric_grad(TD& x, const std::function<double()>& f, double h = 1e-5) {
  std::vector<double> g(x.size());
  auto w = x.mutable_data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double o = w[i];
    w[i] = o + h;
    const double fp = f();
    w[i] = o - h;
    const double fm = f();
    w[i] = o;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

void check_grad(const std::function<TD(const TD&)>& fn, TD x, double tol = 1e-7) {
  auto loss = sum(fn(x));
  backward(loss);
  auto num = numeric_grad(x, [&] {
    NoGradGuard g;
    return sum(fn(x)).item();
  });
  REQUIRE(x.has_grad());
  for (std::size_t i = 0; i < num.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(num[i]).epsilon(tol).scale(1.0));
}

}  // namespace

TEST_CASE("matmul with identity returns the input") {
  auto a = TD::from({2, 2}, {1, 2, 3, 4});
  auto id = TD::from({2, 2}, {1, 0, 0, 1});
  auto y = matmul(a, id);
  CHECK(y.shape() == Shape{2, 2});
  CHECK(y.at({0, 0}) == 1);
  CHECK(y.at({0, 1}) == 2);
  CHECK(y.at({1, 0}) == 3);
  CHECK(y.at({1, 1}) == 4);
}

TEST_CASE("simple activations at zero") {
  auto s = softmax(TD::from({2}, {0, 0}));
  CHECK(s.at({0}) == 0.5);
  CHECK(s.at({1}) == 0.5);
  CHECK(sigmoid(TD::scalar(0)).item() == 0.5);
  CHECK(ndbench::tanh(TD::scalar(0)).item() == 0.0);
}

TEST_CASE("shape mismatch names the primitive and both shapes") {
  auto a = TD::zeros({2, 3});
  auto b = TD::zeros({2, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(TD::zeros({2, 3}), TD::zeros({2})), ShapeError);
  CHECK_NOTHROW(add(TD::zeros({2, 3}), TD::zeros({3})));
}

TEST_CASE("backward on worked examples") {
  SUBCASE("sum of squares") {
    auto x = TD::from({2}, {1, 2}, true);
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
  }
  SUBCASE("sigmoid slope at zero") {
    auto x = TD::from({1}, {0}, true);
    backward(sum(sigmoid(x)));
    CHECK(x.grad()[0] == 0.25);
  }
  SUBCASE("sum(W u) against finite differences") {
    std::mt19937_64 rng(3);
    auto w = random_tensor({3, 2}, rng, true);
    auto u = TD::from({2, 1}, {1, 1});
    backward(sum(matmul(w, u)));
    auto num = numeric_grad(w, [&] {
      NoGradGuard g;
      return sum(matmul(w, u)).item();
    });
    for (std::size_t i = 0; i < num.size(); ++i) {
      CHECK(w.grad()[i] == doctest::Approx(1.0));
      CHECK(std::abs(w.grad()[i] - num[i]) < 1e-8);
    }
  }
}

TEST_CASE("backward preconditions") {
  auto x = TD::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(mul(x, x)), TapeError);
  Tape<double>::current().clear();
  auto loss = sum(mul(x, x));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), TapeError);
  auto leaf = TD::scalar(1.0);
  CHECK_THROWS_AS(backward(leaf), TapeError);
}

TEST_CASE("no-grad mode records nothing") {
  auto x = TD::from({2}, {1, 2}, true);
  Tape<double>::current().clear();
  {
    NoGradGuard g;
    auto y = sum(mul(x, x));
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(Tape<double>::current().size() == 0);
}

TEST_CASE("primitive gradients match central differences") {
  std::mt19937_64 rng(11);
  auto b3 = random_tensor({3}, rng);
  auto m34 = random_tensor({3, 4}, rng);
  auto g3 = random_tensor({3}, rng);
  auto bb = random_tensor({2, 4, 3}, rng);
  check_grad([&](const TD& x) { return mul(add(x, b3), sub(x, b3)); }, random_tensor({2, 3}, rng, true));
  check_grad([&](const TD& x) { return matmul(x, m34); }, random_tensor({2, 5, 3}, rng, true));
  check_grad([&](const TD& x) { return matmul(m34.detach(), x); }, random_tensor({4, 2}, rng, true));
  check_grad([&](const TD& x) { return batched_matmul(x, bb); }, random_tensor({2, 5, 4}, rng, true));
  auto bt = random_tensor({2, 6, 4}, rng);
  check_grad([&](const TD& x) { return batched_matmul(x, bt, true); }, random_tensor({2, 5, 4}, rng, true));
  check_grad([&](const TD& x) { return batched_matmul(bb.detach(), x, true); }, random_tensor({2, 6, 3}, rng, true));
  check_grad([&](const TD& x) { return mul(sigmoid(x), ndbench::tanh(x)); }, random_tensor({7}, rng, true));
  check_grad([&](const TD& x) { return add(ndbench::exp(x), softplus(x)); }, random_tensor({7}, rng, true));
  check_grad([&](const TD& x) { return add(silu(x), square(relu(x))); }, random_tensor({7}, rng, true));
  check_grad([&](const TD& x) { return mul(softmax(x), x); }, random_tensor({3, 5}, rng, true));
  check_grad([&](const TD& x) { return mul(softmax(x, true), x); }, random_tensor({2, 4, 4}, rng, true));
  check_grad([&](const TD& x) { return mul(layer_norm(x, g3, b3), x); }, random_tensor({4, 3}, rng, true));
  check_grad([&](const TD& x) { return square(concat<double>({slice(x, 1, 2, 4), slice(x, 1, 0, 2)}, 1)); }, random_tensor({2, 4, 3}, rng, true));
  check_grad([&](const TD& x) { return square(transpose(reshape(x, {3, 2, 2}))); }, random_tensor({12}, rng, true));
  check_grad([&](const TD& x) { return mul(time_shift(x), x); }, random_tensor({2, 4, 3}, rng, true));
  check_grad([&](const TD& x) { return affine(mean(square(x)), 3.0, 1.0); }, random_tensor({5}, rng, true));
  check_grad([&](const TD& x) { return maximum(x, affine(x, -1.0, 0.0)); }, TD::from({3}, {0.5, -1.5, 2.0}, true));
}

TEST_CASE("layer norm parameter gradients") {
  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 4}, rng);
  auto g = random_tensor({4}, rng, true);
  auto b = random_tensor({4}, rng, true);
  auto w = random_tensor({3, 4}, rng);
  backward(sum(mul(layer_norm(x, g, b), w)));
  auto ng = numeric_grad(g, [&] {
    NoGradGuard guard;
    return sum(mul(layer_norm(x, g, b), w)).item();
  });
  for (std::size_t i = 0; i < 4; ++i) CHECK(g.grad()[i] == doctest::Approx(ng[i]).epsilon(1e-7));
}

TEST_CASE("softmax rows sum to one and stay inside (0,1)") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 9}, rng);
    auto x32 = Tensor<float>::zeros({4, 9});
    for (std::size_t i = 0; i < x.size(); ++i) x32.mutable_data()[i] = static_cast<float>(x.data()[i] * 5);
    auto y = softmax(x32);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) {
        const float v = y.at({r, j});
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("dropout is the identity in evaluation mode") {
  std::mt19937_64 rng(1);
  auto x = random_tensor({50}, rng);
  auto y = dropout(x, 0.5, rng, false);
  for (std::size_t i = 0; i < 50; ++i) CHECK(y.data()[i] == x.data()[i]);
  auto z = dropout(x, 0.5, rng, true);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    if (z.data()[i] == 0.0)
      ++zeros;
    else
      CHECK(z.data()[i] == doctest::Approx(2 * x.data()[i]));
  }
  CHECK(zeros > 5);
  CHECK(zeros < 45);
}

TEST_CASE("adam step rules") {
  SUBCASE("first step moves by learning rate against the gradient sign") {
    ModelParams<double> p;
    auto w = p.add("w", {3});
    auto s = AdamState<double>::init(p, {.learning_rate = 0.01});
    backward(sum(mul(w, TD::from({3}, {4.0, -0.5, 100.0}))));
    adam_step(p, s);
    CHECK(w.data()[0] == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(w.data()[1] == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(w.data()[2] == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK_FALSE(w.has_grad());
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    ModelParams<double> p;
    auto w = p.add("w", {2});
    w.mutable_data()[0] = 0.3;
    auto s = AdamState<double>::init(p);
    backward(sum(mul(w, TD::zeros({2}))));
    adam_step(p, s);
    CHECK(w.data()[0] == 0.3);
    CHECK(w.data()[1] == 0.0);
    CHECK(s.step == 1);
  }
  SUBCASE("two steps on x^2 follow the hand-iterated recurrence") {
    ModelParams<double> p;
    auto x = p.add("x", {1});
    x.mutable_data()[0] = 1.0;
    auto s = AdamState<double>::init(p, {.learning_rate = 0.1});
    double prev = 1.0;
    const double expected[] = {0.9000000005, 0.8004122286917928};
    for (double e : expected) {
      backward(sum(square(x)));
      adam_step(p, s);
      CHECK(x.data()[0] < prev);
      CHECK(x.data()[0] == doctest::Approx(e).epsilon(1e-12));
      prev = x.data()[0];
    }
  }
  SUBCASE("missing gradient names the group") {
    ModelParams<double> p;
    p.add("used", {1});
    p.add("unused", {1});
    auto s = AdamState<double>::init(p);
    backward(sum(p.get("used")));
    try {
      adam_step(p, s);
      FAIL("expected MissingGradError");
    } catch (const MissingGradError& e) {
      CHECK(e.group() == "unused");
    }
  }
}

TEST_CASE("finite difference checker") {
  ModelParams<double> p;
  auto x = p.add("x", {3});
  x.mutable_data()[0] = 0.5;
  x.mutable_data()[1] = -1.0;
  x.mutable_data()[2] = 2.0;
  auto a = TD::from({3, 3}, {2, 0.5, 0, 0.5, 3, 1, 0, 1, 4});
  auto res = finite_diff_check([&] { return sum(mul(matmul(reshape(x, {1, 3}), a), reshape(x, {1, 3}))); }, p);
  CHECK(res.max_relative_error < 1e-9);
  CHECK_THROWS_AS(finite_diff_check([&] { return affine(sum(x), 1.0, std::nan("")); }, p), std::domain_error);
}

TEST_CASE("determinism of repeated training steps") {
  auto run = [] {
    std::mt19937_64 rng(42);
    ModelParams<float> p;
    auto w = p.add("w", {6, 4});
    xavier_uniform(w, 6, 4, rng);
    auto s = AdamState<float>::init(p);
    std::normal_distribution<float> d;
    std::vector<float> xs(8 * 6);
    for (auto& v : xs) v = d(rng);
    auto x = Tensor<float>::from({8, 6}, xs);
    for (int i = 0; i < 20; ++i) {
      backward(mean(square(ndbench::tanh(matmul(x, w)))));
      adam_step(p, s);
    }
    return std::vector<float>(w.data().begin(), w.data().end());
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint container round trip") {
  std::mt19937_64 rng(9);
  ModelParams<float> p;
  auto a = p.add("layer0.w", {3, 2});
  auto b = p.add("layer0.b", {2});
  uniform_fill(a, -1.0f, 1.0f, rng);
  uniform_fill(b, -1.0f, 1.0f, rng);
  Container c{{{"kind", "test"}}, export_groups(p)};
  const auto path = std::filesystem::temp_directory_path() / "ndbench_ckpt_test.bin";
  write_container(path, c);
  auto back = read_container(path);
  CHECK(back.meta["kind"] == "test");
  ModelParams<float> q;
  q.add("layer0.w", {3, 2});
  q.add("layer0.b", {2});
  import_groups(q, back.groups);
  for (std::size_t i = 0; i < 6; ++i) CHECK(q.get("layer0.w").data()[i] == a.data()[i]);
  ModelParams<float> wrong;
  wrong.add("layer0.w", {2, 3});
  wrong.add("layer0.b", {2});
  CHECK_THROWS_AS(import_groups(wrong, back.groups), CheckpointError);
  auto bytes = encode_container(c);
  bytes[0] = 'X';
  CHECK_THROWS_AS(decode_container(bytes), CheckpointError);
  std::filesystem::remove(path);
}
