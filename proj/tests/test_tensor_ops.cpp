#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "aver/init.hpp"
#include "aver/ops.hpp"
#include "aver/rng.hpp"
#include "aver/tape.hpp"
#include "aver/tensor.hpp"
#include "support/grad_check.hpp"

using namespace aver;
using aver::testing::check_gradients;
using aver::testing::GradCheckReport;
using aver::testing::random_tensor;

namespace {

void expect_ok(const GradCheckReport& r) {
  INFO("checked ", r.checked, " elements, first failure: ", r.first_failure);
  CHECK(r.failures == 0);
  CHECK(r.checked > 0);
}

void for_seeds(int n, const std::function<void(Rng&)>& body) {
  for (int s = 0; s < n; ++s) {
    Rng rng(0x5eed0000u + static_cast<std::uint64_t>(s));
    body(rng);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise and reductions
// ---------------------------------------------------------------------------

TEST_CASE("elementwise ops match finite differences") {
  for_seeds(3, [](Rng& rng) {
    Tensor64 a = random_tensor(rng, {2, 3});
    Tensor64 b = random_tensor(rng, {2, 3});
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          return sum_all(t, mul(t, add(t, p[0], p[1]), sub(t, p[0], p[1])));
        },
        {a, b}));
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          return mean_all(t, mul(t, p[0], p[0]));
        },
        {a}));
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          return sum_all(t, scale(t, p[0], -1.7));
        },
        {a}));
  });
}

TEST_CASE("relu and tanh match finite differences away from the kink") {
  for_seeds(3, [](Rng& rng) {
    // Shift values away from zero so the central difference never straddles
    // the relu kink.
    std::vector<double> v(12);
    for (double& x : v) {
      const double r = rng.normal();
      x = r + (r >= 0.0 ? 0.05 : -0.05);
    }
    Tensor64 a({3, 4}, v);
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          return sum_all(t, relu(t, p[0]));
        },
        {a}));
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          return sum_all(t, mul(t, tanh_act(t, p[0]), p[0]));
        },
        {a}));
  });
}

TEST_CASE("tanh output stays inside the open interval (-1, 1)") {
  Tape tape;
  Tensor x = Tensor::from_vector({-1000.0f, -20.0f, 0.0f, 20.0f, 1000.0f});
  Tensor y = tanh_act(tape, x);
  for (float v : y.data()) {
    CHECK(v > -1.0f);
    CHECK(v < 1.0f);
  }
  CHECK(y.data()[2] == 0.0f);
}

TEST_CASE("relu zeroes negatives and keeps positives") {
  Tape tape;
  Tensor x = Tensor::from_vector({-2.0f, -0.5f, 0.0f, 0.5f, 2.0f});
  Tensor y = relu(tape, x);
  CHECK(y.data() == std::vector<float>{0.0f, 0.0f, 0.0f, 0.5f, 2.0f});
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

TEST_CASE("shape ops are gradient-exact") {
  for_seeds(2, [](Rng& rng) {
    Tensor64 a = random_tensor(rng, {2, 3, 4});
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          Tensor64 r = reshape(t, p[0], {6, 4});
          return sum_all(t, mul(t, r, r));
        },
        {a}));
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          Tensor64 tr = transpose_12(t, p[0]);
          return sum_all(t, mul(t, tr, tr));
        },
        {a}));
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          Tensor64 s = slice_rows(t, p[0], 1, 2);
          return sum_all(t, mul(t, s, s));
        },
        {a}));
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          Tensor64 last = take_last_step(t, p[0]);
          return sum_all(t, mul(t, last, last));
        },
        {a}));
  });
}

TEST_CASE("transpose_12 swaps the trailing two axes") {
  Tape tape;
  Tensor x({1, 2, 3}, {0, 1, 2, 3, 4, 5});
  Tensor y = transpose_12(tape, x);
  CHECK(y.shape() == std::vector<int>{1, 3, 2});
  CHECK(y.data() == std::vector<float>{0, 3, 1, 4, 2, 5});
}

TEST_CASE("concat joins along the requested axis and splits gradients back") {
  Tape tape;
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {9, 8});
  Tensor y = concat(tape, {a, b}, 1);
  CHECK(y.shape() == std::vector<int>{2, 3});
  CHECK(y.data() == std::vector<float>{1, 2, 9, 3, 4, 8});

  Tensor z = concat(tape, {a, a}, 0);
  CHECK(z.shape() == std::vector<int>{4, 2});
  CHECK(z.data() == std::vector<float>{1, 2, 3, 4, 1, 2, 3, 4});

  for_seeds(2, [](Rng& rng) {
    Tensor64 p = random_tensor(rng, {2, 2, 3});
    Tensor64 q = random_tensor(rng, {2, 1, 3});
    for (int axis : {1}) {
      expect_ok(check_gradients(
          [axis](Tape64& t, const std::vector<Tensor64>& ps) {
            Tensor64 c = concat(t, {ps[0], ps[1]}, axis);
            return sum_all(t, mul(t, c, c));
          },
          {p, q}));
    }
    Tensor64 r = random_tensor(rng, {1, 2, 3});
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& ps) {
          Tensor64 c = concat(t, {ps[0], ps[1]}, 0);
          return sum_all(t, mul(t, c, c));
        },
        {p, r}));
  });
}

TEST_CASE("concat rejects mismatched off-axis dims and bad axes") {
  Tape tape;
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({3, 1}, {1, 2, 3});
  CHECK_THROWS_AS(concat(tape, {a, b}, 1), std::invalid_argument);
  CHECK_THROWS_AS(concat(tape, {a, a}, 2), std::invalid_argument);
  CHECK_THROWS_AS(concat<float>(tape, {}, 0), std::invalid_argument);
}

TEST_CASE("select_column extracts one column with exact gradients") {
  Tape tape;
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor c = select_column(tape, x, 2);
  CHECK(c.shape() == std::vector<int>{2});
  CHECK(c.data() == std::vector<float>{3, 6});

  for_seeds(2, [](Rng& rng) {
    Tensor64 p = random_tensor(rng, {3, 4});
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& ps) {
          Tensor64 col = select_column(t, ps[0], 1);
          return sum_all(t, mul(t, col, col));
        },
        {p}));
  });
}

TEST_CASE("slice_rows validates its range") {
  Tape tape;
  Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(slice_rows(tape, x, 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(slice_rows(tape, x, -1, 2), std::invalid_argument);
  CHECK_THROWS_AS(slice_rows(tape, x, 0, 4), std::invalid_argument);
  Tensor s = slice_rows(tape, x, 1, 3);
  CHECK(s.shape() == std::vector<int>{2, 2});
  CHECK(s.data() == std::vector<float>{3, 4, 5, 6});
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

TEST_CASE("dense matches finite differences in x, w, and b") {
  for_seeds(3, [](Rng& rng) {
    Tensor64 x = random_tensor(rng, {3, 4});
    Tensor64 w = random_tensor(rng, {4, 5});
    Tensor64 b = random_tensor(rng, {5});
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          Tensor64 y = dense(t, p[0], p[1], p[2]);
          return sum_all(t, mul(t, y, y));
        },
        {x, w, b}));
  });
}

TEST_CASE("dense computes x.w + b") {
  Tape tape;
  Tensor x({2, 2}, {1, 2, 3, 4});
  Tensor w({2, 3}, {1, 0, 2, 0, 1, 1});
  Tensor b({3}, {10, 20, 30});
  Tensor y = dense(tape, x, w, b);
  CHECK(y.shape() == std::vector<int>{2, 3});
  CHECK(y.data() == std::vector<float>{11, 22, 34, 13, 24, 40});
}

TEST_CASE("dense rejects mismatched shapes") {
  Tape tape;
  Tensor x({2, 3}, std::vector<float>(6, 1.0f));
  Tensor w({4, 2}, std::vector<float>(8, 1.0f));
  Tensor b({2}, std::vector<float>(2, 0.0f));
  CHECK_THROWS_AS(dense(tape, x, w, b), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

TEST_CASE("conv2d output dims follow floor((n + 2p - k) / s) + 1") {
  Tape tape;
  for (int n : {5, 8, 11}) {
    for (int k : {1, 3, 5}) {
      for (int s : {1, 2, 3}) {
        for (int p : {0, 1, 2}) {
          if (k > n + 2 * p) continue;
          Tensor x = Tensor::zeros({1, 1, n, n});
          Tensor w = Tensor::zeros({2, 1, k, k});
          Tensor y = conv2d(tape, x, w, s, p);
          const int expect = (n + 2 * p - k) / s + 1;
          CHECK(y.shape() == std::vector<int>{1, 2, expect, expect});
        }
      }
    }
  }
}

TEST_CASE("conv2d is cross-correlation, not flipped convolution") {
  // Kernel [[0,1],[0,0]] at stride 1: output(i,j) = x(i, j+1).
  Tape tape;
  Tensor x({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor w({1, 1, 2, 2}, {0, 1, 0, 0});
  Tensor y = conv2d(tape, x, w, 1, 0);
  CHECK(y.shape() == std::vector<int>{1, 1, 1, 2});
  CHECK(y.data() == std::vector<float>{2, 3});
}

TEST_CASE("conv2d matches finite differences in x and kernel") {
  for_seeds(2, [](Rng& rng) {
    Tensor64 x = random_tensor(rng, {2, 2, 5, 5});
    Tensor64 w = random_tensor(rng, {3, 2, 3, 3});
    for (int stride : {1, 2}) {
      for (int pad : {0, 1}) {
        expect_ok(check_gradients(
            [stride, pad](Tape64& t, const std::vector<Tensor64>& p) {
              Tensor64 y = conv2d(t, p[0], p[1], stride, pad);
              return sum_all(t, mul(t, y, y));
            },
            {x, w}));
      }
    }
  });
}

TEST_CASE("conv1d matches finite differences and its output length formula") {
  for_seeds(2, [](Rng& rng) {
    Tensor64 x = random_tensor(rng, {2, 3, 9});
    Tensor64 w = random_tensor(rng, {4, 3, 3});
    for (int stride : {1, 2}) {
      for (int pad : {0, 1}) {
        Tape64 probe;
        Tensor64 y = conv1d(probe, x, w, stride, pad);
        CHECK(y.shape() == std::vector<int>{2, 4, (9 + 2 * pad - 3) / stride + 1});
        expect_ok(check_gradients(
            [stride, pad](Tape64& t, const std::vector<Tensor64>& p) {
              Tensor64 out = conv1d(t, p[0], p[1], stride, pad);
              return sum_all(t, mul(t, out, out));
            },
            {x, w}));
      }
    }
  });
}

TEST_CASE("add_channel_bias broadcasts over batch and spatial axes") {
  Tape tape;
  Tensor x({2, 2, 2}, {0, 0, 0, 0, 0, 0, 0, 0});
  Tensor b({2}, {1, 2});
  Tensor y = add_channel_bias(tape, x, b);
  CHECK(y.data() == std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2});

  for_seeds(2, [](Rng& rng) {
    Tensor64 p = random_tensor(rng, {2, 3, 2, 2});
    Tensor64 q = random_tensor(rng, {3});
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& ps) {
          Tensor64 y2 = add_channel_bias(t, ps[0], ps[1]);
          return sum_all(t, mul(t, y2, y2));
        },
        {p, q}));
  });
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

TEST_CASE("batch_norm train mode normalizes to zero mean and unit variance") {
  Rng rng(11);
  Tensor64 x = random_tensor(rng, {4, 3, 2, 2}, 2.0);
  Tensor64 gamma = Tensor64::full({3}, 1.0);
  Tensor64 beta = Tensor64::zeros({3});
  BatchNormStateT<double> state(3);
  Tape64 tape;
  Tensor64 y = batch_norm(tape, x, gamma, beta, state, Phase::kTrain);

  const std::size_t S = 4;  // spatial elements per sample
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int n = 0; n < 4; ++n) {
      for (std::size_t s = 0; s < S; ++s) mean += y.data()[(n * 3 + c) * S + s];
    }
    mean /= 16.0;
    for (int n = 0; n < 4; ++n) {
      for (std::size_t s = 0; s < S; ++s) {
        const double d = y.data()[(n * 3 + c) * S + s] - mean;
        var += d * d;
      }
    }
    var /= 16.0;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // off by eps in the denominator
  }
}

TEST_CASE("batch_norm updates running stats with momentum 0.9") {
  Tensor64 x({2, 1}, {1.0, 3.0});  // batch mean 2, population var 1
  Tensor64 gamma = Tensor64::full({1}, 1.0);
  Tensor64 beta = Tensor64::zeros({1});
  BatchNormStateT<double> state(1);
  Tape64 tape;
  (void)batch_norm(tape, x, gamma, beta, state, Phase::kTrain);
  CHECK(state.running_mean.data()[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.0));
  CHECK(state.running_var.data()[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0));

  Tape64 tape2;
  (void)batch_norm(tape2, x, gamma, beta, state, Phase::kTrain);
  CHECK(state.running_mean.data()[0] == doctest::Approx(0.9 * 0.2 + 0.1 * 2.0));
}

TEST_CASE("batch_norm eval mode uses running stats and leaves them unchanged") {
  Tensor64 x({2, 1}, {1.0, 3.0});
  Tensor64 gamma = Tensor64::full({1}, 2.0);
  Tensor64 beta = Tensor64::full({1}, 5.0);
  BatchNormStateT<double> state(1);
  state.running_mean = Tensor64::from_vector({1.0});
  state.running_var = Tensor64::from_vector({4.0});
  Tape64 tape;
  Tensor64 y = batch_norm(tape, x, gamma, beta, state, Phase::kEval);
  const double inv = 1.0 / std::sqrt(4.0 + 1e-5);
  CHECK(y.data()[0] == doctest::Approx(5.0 + 2.0 * (1.0 - 1.0) * inv));
  CHECK(y.data()[1] == doctest::Approx(5.0 + 2.0 * (3.0 - 1.0) * inv));
  CHECK(state.running_mean.data()[0] == 1.0);
  CHECK(state.running_var.data()[0] == 4.0);
}

TEST_CASE("batch_norm train mode rejects batches of one") {
  Tensor x({1, 2}, {1.0f, 2.0f});
  Tensor gamma = Tensor::full({2}, 1.0f);
  Tensor beta = Tensor::zeros({2});
  BatchNormState state(2);
  Tape tape;
  CHECK_THROWS_AS(batch_norm(tape, x, gamma, beta, state, Phase::kTrain),
                  std::invalid_argument);
  CHECK_NOTHROW(batch_norm(tape, x, gamma, beta, state, Phase::kEval));
}

TEST_CASE("batch_norm matches finite differences in train and eval mode") {
  for_seeds(2, [](Rng& rng) {
    Tensor64 x = random_tensor(rng, {3, 2, 2});
    Tensor64 gamma = random_tensor(rng, {2}, 0.5);
    Tensor64 beta = random_tensor(rng, {2}, 0.5);
    for (Phase phase : {Phase::kTrain, Phase::kEval}) {
      expect_ok(check_gradients(
          [phase](Tape64& t, const std::vector<Tensor64>& p) {
            BatchNormStateT<double> state(2);
            state.running_mean = Tensor64::from_vector({0.3, -0.2});
            state.running_var = Tensor64::from_vector({1.5, 0.8});
            Tensor64 y = batch_norm(t, p[0], p[1], p[2], state, phase);
            return sum_all(t, mul(t, y, y));
          },
          {x, gamma, beta}));
    }
  });
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

TEST_CASE("max_pool2d picks window maxima and ties go to the first index") {
  Tape tape;
  Tensor x({1, 1, 2, 4}, {5, 5, 1, 2, 3, 0, 2, 2});
  Tensor y = max_pool2d(tape, x, 2, 2);
  CHECK(y.shape() == std::vector<int>{1, 1, 1, 2});
  CHECK(y.data() == std::vector<float>{5, 2});

  // Gradient of a tie flows only to the first maximum.
  Tape64 t64;
  Tensor64 p({1, 1, 2, 2}, {7.0, 7.0, 1.0, 0.0});
  Tensor64 h = t64.leaf(p);
  Tensor64 pooled = max_pool2d(t64, h, 2, 2);
  t64.backward(sum_all(t64, pooled));
  CHECK(p.grad() == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("max_pool2d drops trailing windows that do not fit") {
  Tape tape;
  Tensor x = Tensor::zeros({1, 1, 5, 7});
  Tensor y = max_pool2d(tape, x, 2, 2);
  CHECK(y.shape() == std::vector<int>{1, 1, 2, 3});
}

TEST_CASE("max_pool2d matches finite differences on distinct values") {
  for_seeds(2, [](Rng& rng) {
    Tensor64 x = random_tensor(rng, {2, 2, 4, 4});
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          Tensor64 y = max_pool2d(t, p[0], 2, 2);
          return sum_all(t, mul(t, y, y));
        },
        {x}));
  });
}

TEST_CASE("global_avg_pool averages all trailing axes and spreads 1/S back") {
  Tape64 tape;
  Tensor64 x({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  Tensor64 h = tape.leaf(x);
  Tensor64 y = global_avg_pool(tape, h);
  CHECK(y.shape() == std::vector<int>{1, 2});
  CHECK(y.data()[0] == doctest::Approx(2.5));
  CHECK(y.data()[1] == doctest::Approx(25.0));
  tape.backward(sum_all(tape, y));
  for (double g : x.grad()) CHECK(g == doctest::Approx(0.25));
}

TEST_CASE("rank-3 inputs pool over their single trailing axis") {
  Tape tape;
  Tensor x({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = global_avg_pool(tape, x);
  CHECK(y.shape() == std::vector<int>{1, 2});
  CHECK(y.data()[0] == doctest::Approx(2.0f));
  CHECK(y.data()[1] == doctest::Approx(5.0f));
}

TEST_CASE("avg_over_last_axis keeps the third axis") {
  Tape tape;
  Tensor x({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = avg_over_last_axis(tape, x);
  CHECK(y.shape() == std::vector<int>{1, 1, 2});
  CHECK(y.data()[0] == doctest::Approx(2.0f));
  CHECK(y.data()[1] == doctest::Approx(5.0f));

  for_seeds(2, [](Rng& rng) {
    Tensor64 p = random_tensor(rng, {2, 2, 3, 4});
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& ps) {
          Tensor64 y2 = avg_over_last_axis(t, ps[0]);
          return sum_all(t, mul(t, y2, y2));
        },
        {p}));
  });
}

TEST_CASE("adaptive_avg_pool1d reproduces the floor/ceil bin edges") {
  // T=10 -> out=4: bins [0,3), [2,5), [5,8), [7,10)
  Tape tape;
  std::vector<float> v(10);
  for (int i = 0; i < 10; ++i) v[static_cast<std::size_t>(i)] = static_cast<float>(i);
  Tensor x({1, 1, 10}, v);
  Tensor y = adaptive_avg_pool1d(tape, x, 4);
  CHECK(y.shape() == std::vector<int>{1, 1, 4});
  CHECK(y.data()[0] == doctest::Approx((0 + 1 + 2) / 3.0f));
  CHECK(y.data()[1] == doctest::Approx((2 + 3 + 4) / 3.0f));
  CHECK(y.data()[2] == doctest::Approx((5 + 6 + 7) / 3.0f));
  CHECK(y.data()[3] == doctest::Approx((7 + 8 + 9) / 3.0f));

  // Equal split when T is a multiple of out.
  Tensor x2({1, 1, 6}, {0, 1, 2, 3, 4, 5});
  Tensor y2 = adaptive_avg_pool1d(tape, x2, 3);
  CHECK(y2.data() == std::vector<float>{0.5f, 2.5f, 4.5f});

  // Identity when T == out.
  Tensor y3 = adaptive_avg_pool1d(tape, x2, 6);
  CHECK(y3.data() == x2.data());

  CHECK_THROWS_AS(adaptive_avg_pool1d(tape, x2, 7), std::invalid_argument);
}

TEST_CASE("adaptive_avg_pool1d matches finite differences") {
  for_seeds(2, [](Rng& rng) {
    Tensor64 x = random_tensor(rng, {2, 3, 7});
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& p) {
          Tensor64 y = adaptive_avg_pool1d(t, p[0], 3);
          return sum_all(t, mul(t, y, y));
        },
        {x}));
  });
}

// ---------------------------------------------------------------------------
// l2 normalize
// ---------------------------------------------------------------------------

TEST_CASE("l2_normalize produces unit rows and rejects near-zero rows") {
  Tape tape;
  Tensor x({2, 3}, {3, 0, 4, 0, 5, 12});
  Tensor y = l2_normalize(tape, x);
  CHECK(y.data()[0] == doctest::Approx(0.6f));
  CHECK(y.data()[2] == doctest::Approx(0.8f));
  for (int b = 0; b < 2; ++b) {
    double n = 0;
    for (int d = 0; d < 3; ++d) n += y.data()[b * 3 + d] * y.data()[b * 3 + d];
    CHECK(std::sqrt(n) == doctest::Approx(1.0));
  }
  Tensor zero = Tensor::zeros({1, 3});
  CHECK_THROWS_AS(l2_normalize(tape, zero), std::invalid_argument);
}

TEST_CASE("l2_normalize matches finite differences") {
  // sum(y*y) is identically B for normalized rows, so weight the output by a
  // fixed random tensor to get a non-degenerate loss surface.
  for_seeds(3, [](Rng& rng) {
    Tensor64 x = random_tensor(rng, {3, 4});
    Tensor64 w = random_tensor(rng, {3, 4});
    expect_ok(check_gradients(
        [w](Tape64& t, const std::vector<Tensor64>& p) {
          Tensor64 y = l2_normalize(t, p[0]);
          return sum_all(t, mul(t, y, w));
        },
        {x}));
  });
}

TEST_CASE("l2_normalize gradient is orthogonal to the output direction") {
  // For unit output y, moving x along y leaves y unchanged, so grad.x = 0
  // when the upstream gradient is y itself.
  Tape64 tape;
  Tensor64 x({1, 3}, {1.0, 2.0, 2.0});
  Tensor64 h = tape.leaf(x);
  Tensor64 y = l2_normalize(tape, h);
  Tensor64 loss = sum_all(tape, mul(tape, y, y));  // == 1 identically
  tape.backward(loss);
  for (double g : x.grad()) CHECK(g == doctest::Approx(0.0).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

namespace {

LstmLayerParamsT<double> random_lstm(Rng& rng, int input, int hidden) {
  LstmLayerParamsT<double> p;
  p.w_ih = random_tensor(rng, {4 * hidden, input}, 0.4);
  p.w_hh = random_tensor(rng, {4 * hidden, hidden}, 0.4);
  p.b_ih = random_tensor(rng, {4 * hidden}, 0.2);
  p.b_hh = random_tensor(rng, {4 * hidden}, 0.2);
  return p;
}

}  // namespace

TEST_CASE("lstm_layer matches finite differences in every parameter and x") {
  for_seeds(2, [](Rng& rng) {
    const int B = 2, T = 3, I = 3, H = 4;
    Tensor64 x = random_tensor(rng, {B, T, I});
    LstmLayerParamsT<double> p = random_lstm(rng, I, H);
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& ps) {
          LstmLayerParamsT<double> lp{ps[1], ps[2], ps[3], ps[4]};
          Tensor64 h = lstm_layer(t, ps[0], lp);
          return sum_all(t, mul(t, h, h));
        },
        {x, p.w_ih, p.w_hh, p.b_ih, p.b_hh}));
  });
}

TEST_CASE("two stacked lstm layers backpropagate through both") {
  for_seeds(1, [](Rng& rng) {
    const int B = 2, T = 3, I = 2, H = 3;
    Tensor64 x = random_tensor(rng, {B, T, I});
    LstmLayerParamsT<double> p0 = random_lstm(rng, I, H);
    LstmLayerParamsT<double> p1 = random_lstm(rng, H, H);
    expect_ok(check_gradients(
        [](Tape64& t, const std::vector<Tensor64>& ps) {
          std::vector<LstmLayerParamsT<double>> layers{
              {ps[1], ps[2], ps[3], ps[4]},
              {ps[5], ps[6], ps[7], ps[8]},
          };
          LstmOutT<double> out = lstm_forward(t, ps[0], layers);
          return sum_all(t, mul(t, out.final, out.final));
        },
        {x, p0.w_ih, p0.w_hh, p0.b_ih, p0.b_hh, p1.w_ih, p1.w_hh, p1.b_ih, p1.b_hh}));
  });
}

TEST_CASE("lstm final state equals the last step of the sequence") {
  Rng rng(7);
  Tensor64 x = random_tensor(rng, {2, 4, 3});
  LstmLayerParamsT<double> p = random_lstm(rng, 3, 5);
  Tape64 tape;
  LstmOutT<double> out = lstm_forward(tape, x, {p});
  CHECK(out.sequence.shape() == std::vector<int>{2, 4, 5});
  CHECK(out.final.shape() == std::vector<int>{2, 5});
  for (int b = 0; b < 2; ++b) {
    for (int h = 0; h < 5; ++h) {
      CHECK(out.final.data()[b * 5 + h] == out.sequence.data()[(b * 4 + 3) * 5 + h]);
    }
  }
}

TEST_CASE("lstm with a forget-everything configuration ignores history") {
  // Large negative forget and input bias drive f ~ 0 and i ~ 0, so the
  // hidden state collapses toward o * tanh(0) = 0 regardless of inputs.
  Rng rng(3);
  Tensor64 x = random_tensor(rng, {1, 6, 2});
  LstmLayerParamsT<double> p = random_lstm(rng, 2, 3);
  std::vector<double> b(12, 0.0);
  for (int j = 0; j < 3; ++j) b[static_cast<std::size_t>(j)] = -40.0;        // input gate shut
  for (int j = 3; j < 6; ++j) b[static_cast<std::size_t>(j)] = -40.0;        // forget gate shut
  p.b_ih = Tensor64({12}, b);
  p.b_hh = Tensor64::zeros({12});
  Tape64 tape;
  LstmOutT<double> out = lstm_forward(tape, x, {p});
  for (double v : out.final.data()) CHECK(std::fabs(v) < 1e-12);
}
