#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "aver/init.hpp"
#include "aver/ops.hpp"
#include "aver/optimizer.hpp"
#include "aver/rng.hpp"
#include "aver/tape.hpp"
#include "aver/tensor.hpp"

using namespace aver;

namespace {

// One optimizer step against a loss with a constant gradient of `g`.
void step_const_grad(OptimizerT<double>& opt, Tensor64& p, double g) {
  p.set_grad(std::vector<double>(p.numel(), g));
  std::vector<Tensor64*> params{&p};
  opt.step(params);
}

}  // namespace

TEST_CASE("sgd with momentum follows the hand-computed recurrence") {
  // v_t = 0.9 v_{t-1} + g, p_t = p_{t-1} - 0.1 v_t with g = 1:
  // v: 1, 1.9, 2.71; p: 0.9, 0.71, 0.439
  OptimizerT<double> opt = OptimizerT<double>::sgd(0.1, 0.9);
  Tensor64 p = Tensor64::from_vector({1.0});
  step_const_grad(opt, p, 1.0);
  CHECK(p.data()[0] == doctest::Approx(0.9).epsilon(1e-12));
  step_const_grad(opt, p, 1.0);
  CHECK(p.data()[0] == doctest::Approx(0.71).epsilon(1e-12));
  step_const_grad(opt, p, 1.0);
  CHECK(p.data()[0] == doctest::Approx(0.439).epsilon(1e-12));
}

TEST_CASE("sgd without momentum is plain gradient descent") {
  OptimizerT<double> opt = OptimizerT<double>::sgd(0.5, 0.0);
  Tensor64 p = Tensor64::from_vector({2.0, -1.0});
  p.set_grad({1.0, -2.0});
  std::vector<Tensor64*> params{&p};
  opt.step(params);
  CHECK(p.data()[0] == doctest::Approx(1.5));
  CHECK(p.data()[1] == doctest::Approx(0.0));
}

TEST_CASE("adam first step moves by ~lr regardless of gradient scale") {
  // With bias correction, mhat = g and vhat = g^2 on step one, so the update
  // is lr * g / (|g| + eps') ~ lr * sign(g).
  for (double g : {1e-4, 1.0, 250.0}) {
    OptimizerT<double> opt = OptimizerT<double>::adam(0.01);
    Tensor64 p = Tensor64::from_vector({0.0});
    step_const_grad(opt, p, g);
    CHECK(p.data()[0] == doctest::Approx(-0.01).epsilon(1e-3));
  }
}

TEST_CASE("adam matches a hand-rolled reference over several steps") {
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  OptimizerT<double> opt = OptimizerT<double>::adam(lr, b1, b2, eps);
  Tensor64 p = Tensor64::from_vector({1.0});
  double ref = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    const double g = ref * 2.0;  // pretend loss = x^2
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    ref -= lr * mhat / (std::sqrt(vhat) + eps);

    step_const_grad(opt, p, p.data()[0] * 2.0);
    CHECK(p.data()[0] == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("momentum buffers are keyed by parameter position") {
  OptimizerT<double> opt = OptimizerT<double>::sgd(1.0, 0.5);
  Tensor64 a = Tensor64::from_vector({0.0});
  Tensor64 b = Tensor64::from_vector({0.0});
  a.set_grad({1.0});
  b.set_grad({0.0});
  std::vector<Tensor64*> params{&a, &b};
  opt.step(params);
  CHECK(a.data()[0] == doctest::Approx(-1.0));
  CHECK(b.data()[0] == doctest::Approx(0.0));
  // Momentum from a's first step must not leak into b.
  a.set_grad({0.0});
  b.set_grad({1.0});
  opt.step(params);
  CHECK(a.data()[0] == doctest::Approx(-1.5));  // coasting on momentum
  CHECK(b.data()[0] == doctest::Approx(-1.0));
}

TEST_CASE("optimizer rejects a changed parameter list") {
  OptimizerT<double> opt = OptimizerT<double>::sgd(0.1, 0.0);
  Tensor64 a = Tensor64::from_vector({0.0});
  Tensor64 b = Tensor64::from_vector({0.0, 1.0});
  a.set_grad({1.0});
  b.set_grad({1.0, 1.0});
  std::vector<Tensor64*> both{&a, &b};
  opt.step(both);
  std::vector<Tensor64*> fewer{&a};
  CHECK_THROWS_AS(opt.step(fewer), std::invalid_argument);
}

TEST_CASE("optimizer requires gradients to be present") {
  OptimizerT<double> opt = OptimizerT<double>::sgd(0.1, 0.0);
  Tensor64 a = Tensor64::from_vector({0.0});
  std::vector<Tensor64*> params{&a};
  CHECK_THROWS_AS(opt.step(params), std::invalid_argument);
}

TEST_CASE("a full tape-optimizer loop shrinks a quadratic loss") {
  // Minimize sum((x - c)^2) from a cold start; 200 sgd steps land close.
  Tensor target = Tensor::from_vector({0.3f, -0.7f, 1.2f});
  Tensor x = Tensor::zeros({3});
  Optimizer opt = Optimizer::sgd(0.1f, 0.0f);
  float last = 0.0f;
  for (int i = 0; i < 200; ++i) {
    Tape tape;
    Tensor h = tape.leaf(x);
    Tensor d = sub(tape, h, target);
    Tensor loss = sum_all(tape, mul(tape, d, d));
    tape.backward(loss);
    std::vector<Tensor*> params{&x};
    opt.step(params);
    last = loss.value();
  }
  CHECK(last < 1e-6f);
  for (int i = 0; i < 3; ++i) CHECK(x.data()[i] == doctest::Approx(target.data()[i]).epsilon(1e-3));
}

TEST_CASE("kaiming uniform respects its fan-in bound and fills the range") {
  Rng rng(42);
  const int fan_in = 75;
  Tensor w = kaiming_uniform<float>(rng, {100, 75}, fan_in);
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  float lo = 0.0f, hi = 0.0f;
  for (float v : w.data()) {
    CHECK(v <= bound);
    CHECK(v >= -bound);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  // With 7500 draws the extremes should reach past 95% of the bound.
  CHECK(hi > 0.95f * bound);
  CHECK(lo < -0.95f * bound);
}

TEST_CASE("xavier uniform respects its fan-sum bound") {
  Rng rng(43);
  const int fan_in = 30, fan_out = 50;
  Tensor64 w = xavier_uniform<double>(rng, {50, 30}, fan_in, fan_out);
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (double v : w.data()) {
    CHECK(v <= bound);
    CHECK(v >= -bound);
  }
  double mean = 0.0;
  for (double v : w.data()) mean += v;
  mean /= static_cast<double>(w.numel());
  CHECK(std::fabs(mean) < 0.05 * bound * 2.0);
}

TEST_CASE("init draws are deterministic in the seed") {
  Rng a(7), b(7), c(8);
  Tensor wa = kaiming_uniform<float>(a, {4, 4}, 4);
  Tensor wb = kaiming_uniform<float>(b, {4, 4}, 4);
  Tensor wc = kaiming_uniform<float>(c, {4, 4}, 4);
  CHECK(wa.data() == wb.data());
  CHECK(wa.data() != wc.data());
}

TEST_CASE("rng forks are order-independent pure functions of seed and tag") {
  Rng root(123);
  Rng f1 = root.fork(5);
  Rng f2 = root.fork(9);
  Rng root2(123);
  Rng g2 = root2.fork(9);
  Rng g1 = root2.fork(5);
  CHECK(f1.next_u64() == g1.next_u64());
  CHECK(f2.next_u64() == g2.next_u64());
}

TEST_CASE("rng uniform stays in [0,1) and shuffle permutes") {
  Rng rng(99);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<int> sorted = v;
  rng.shuffle(v);
  CHECK(v != sorted);  // 1/8! chance of false alarm, pinned by the seed
  std::vector<int> back = v;
  std::sort(back.begin(), back.end());
  CHECK(back == sorted);
}
