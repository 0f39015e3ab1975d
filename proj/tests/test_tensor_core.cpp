#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cuecan/autodiff.hpp"
#include "cuecan/ops.hpp"
#include "cuecan/rng.hpp"
#include "cuecan/tensor.hpp"
#include "cuecan/testing/gradcheck.hpp"
#include "cuecan/testing/oracles.hpp"
#include "cuecan/testing/selftest.hpp"

using namespace cuecan;

namespace {

Tensor4 random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor4 t(s);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor4 run(const std::function<Var(Tape&)>& f) {
  Tape t;
  return f(t).value();
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor storage
// ---------------------------------------------------------------------------

TEST(Tensor, NhwcOffsets) {
  Tensor4 t({2, 3, 4, 5});
  EXPECT_EQ(t.offset(0, 0, 0, 1), 1u);
  EXPECT_EQ(t.offset(0, 0, 1, 0), 5u);
  EXPECT_EQ(t.offset(0, 1, 0, 0), 20u);
  EXPECT_EQ(t.offset(1, 0, 0, 0), 60u);
  EXPECT_THROW(Tensor4(Shape{1, 1, 1, 2}, std::vector<double>{1.0}), ShapeError);
}

TEST(Tensor, SaveLoadRoundTripF64IsExact) {
  Rng rng(3);
  const Tensor4 a = random_tensor(rng, {2, 3, 4, 5}, -1e6, 1e6);
  std::stringstream ss;
  write_tensor(ss, a, Dtype::F64);
  EXPECT_EQ(read_tensor(ss), a);
}

TEST(Tensor, SaveLoadRoundTripF32IsFloatRounded) {
  Rng rng(4);
  const Tensor4 a = random_tensor(rng, {1, 2, 3, 4});
  std::stringstream ss;
  write_tensor(ss, a, Dtype::F32);
  const Tensor4 b = read_tensor(ss);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(b[i], static_cast<double>(static_cast<float>(a[i])));
}

TEST(Tensor, CorruptStreamsAreDataErrors) {
  const Tensor4 a({1, 1, 2, 2}, 1.5);
  std::stringstream ss;
  write_tensor(ss, a);
  std::string bytes = ss.str();

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::stringstream s1(bad_magic);
  EXPECT_THROW(read_tensor(s1), DataError);

  std::stringstream s2(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_tensor(s2), DataError);
}

// ---------------------------------------------------------------------------
// Op examples
// ---------------------------------------------------------------------------

TEST(Conv2d, MaskedCenterRowCountsSixTaps) {
  const std::vector<double> mask{1, 1, 1, 0, 0, 0, 1, 1, 1};
  const Tensor4 y = run([&](Tape& t) {
    return conv2d(t.constant(Tensor4({1, 3, 3, 1}, 1.0)), t.constant(Tensor4({3, 3, 1, 1}, 1.0)), {},
                  ConvOptions{-1, -1, mask});
  });
  EXPECT_DOUBLE_EQ(y.at(0, 1, 1, 0), 6.0);
}

TEST(Conv2d, OneByOneIsAffine) {
  const Tensor4 y = run([](Tape& t) {
    return conv2d(t.constant(Tensor4({1, 1, 1, 1}, 3.0)), t.constant(Tensor4({1, 1, 1, 1}, -2.0)),
                  t.constant(Tensor4({1, 1, 1, 1}, 0.5)));
  });
  EXPECT_DOUBLE_EQ(y[0], 3.0 * -2.0 + 0.5);
}

TEST(Conv2d, MatchesLoopOracle) {
  Rng rng(11);
  const Tensor4 X = random_tensor(rng, {1, 5, 7, 3});
  const Tensor4 W = random_tensor(rng, {3, 3, 3, 2});
  const Tensor4 B = random_tensor(rng, {1, 1, 1, 2});
  const Tensor4 y = run([&](Tape& t) { return conv2d(t.constant(X), t.constant(W), t.constant(B)); });
  EXPECT_LE(oracle::max_abs_diff(y, oracle::conv2d(X, W, &B, 1, 1)), 1e-12);
}

TEST(Conv2d, MaskedOutputIgnoresStoredValuesAndGradientIsZero) {
  Rng rng(12);
  const std::vector<double> mask{0, 1, 0, 1, 0, 1, 0, 1, 0};
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor4 X = random_tensor(rng, {1, 4, 5, 2});
    Parameter w("w", random_tensor(rng, {3, 3, 2, 2}));
    Tensor4 w2 = w.value;
    for (std::size_t i = 0; i < w2.size(); ++i) {
      if (mask[i / 4] == 0.0) w2[i] = rng.uniform(-50.0, 50.0);
    }
    const Tensor4 y1 = run([&](Tape& t) { return conv2d(t.constant(X), t.constant(w.value), {}, {-1, -1, mask}); });
    const Tensor4 y2 = run([&](Tape& t) { return conv2d(t.constant(X), t.constant(w2), {}, {-1, -1, mask}); });
    EXPECT_EQ(y1, y2);

    w.value = w2;
    w.zero_grad();
    Tape t;
    t.backward(sum(conv2d(t.constant(X), t.param(w), {}, {-1, -1, mask})));
    for (std::size_t i = 0; i < w.grad.size(); ++i) {
      if (mask[i / 4] == 0.0) EXPECT_EQ(w.grad[i], 0.0);
    }
  }
}

TEST(AdaptiveAvgPool, QuadrantMeans) {
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i + 1);
  const Tensor4 y = run([&](Tape& t) { return adaptive_avg_pool(t.constant(Tensor4({1, 4, 4, 1}, v)), 2, 2); });
  EXPECT_EQ(y.data()[0], 3.5);
  EXPECT_EQ(y.data()[1], 5.5);
  EXPECT_EQ(y.data()[2], 11.5);
  EXPECT_EQ(y.data()[3], 13.5);
}

TEST(AdaptiveAvgPool, FullSizeIsIdentityAndConstantsStay) {
  Rng rng(5);
  const Tensor4 X = random_tensor(rng, {2, 5, 6, 3});
  EXPECT_EQ(run([&](Tape& t) { return adaptive_avg_pool(t.constant(X), 5, 6); }), X);
  for (std::size_t oh = 1; oh <= 8; ++oh) {
    for (std::size_t ow = 1; ow <= 8; ++ow) {
      const Tensor4 y = run([&](Tape& t) { return adaptive_avg_pool(t.constant(Tensor4({1, 8, 8, 1}, 7.0)), oh, ow); });
      for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 7.0);
    }
  }
  EXPECT_THROW(run([&](Tape& t) { return adaptive_avg_pool(t.constant(X), 6, 6); }), ShapeError);
}

// Property: cells tile the input, so area-weighted means sum to the input sum
// whenever the cells do not overlap (out divides in).
TEST(AdaptiveAvgPool, PartitionsTileTheInput) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t oh = 1 + rng.index(4), ow = 1 + rng.index(4);
    const std::size_t h = oh * (1 + rng.index(3)), w = ow * (1 + rng.index(3));
    const Tensor4 X = random_tensor(rng, {1, h, w, 1});
    const Tensor4 y = run([&](Tape& t) { return adaptive_avg_pool(t.constant(X), oh, ow); });
    double in = 0.0, out = 0.0;
    for (double v : X.data()) in += v;
    for (double v : y.data()) out += v * static_cast<double>((h / oh) * (w / ow));
    EXPECT_NEAR(in, out, 1e-10);
  }
}

TEST(BilinearUpsample, HalfPixelExample) {
  const Tensor4 y =
      run([](Tape& t) { return bilinear_upsample(t.constant(Tensor4({1, 2, 1, 1}, std::vector<double>{0.0, 1.0})), 4, 1); });
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0.0, 0.25, 0.75, 1.0}));
}

TEST(BilinearUpsample, IdentityConstantAndMonotone) {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = 1 + rng.index(5), w = 1 + rng.index(5);
    const std::size_t oh = h + rng.index(9), ow = w + rng.index(9);
    const Tensor4 X = random_tensor(rng, {1, h, w, 2});
    EXPECT_EQ(run([&](Tape& t) { return bilinear_upsample(t.constant(X), h, w); }), X);

    const double c = rng.uniform(-3.0, 3.0);
    const Tensor4 yc = run([&](Tape& t) { return bilinear_upsample(t.constant(Tensor4({1, h, w, 1}, c)), oh, ow); });
    for (double v : yc.data()) EXPECT_EQ(v, c);

    // Monotone 1-D rows stay monotone.
    std::vector<double> row(w);
    double acc = 0.0;
    for (double& v : row) v = acc += rng.uniform(0.0, 1.0);
    const Tensor4 ym = run([&](Tape& t) { return bilinear_upsample(t.constant(Tensor4({1, 1, w, 1}, row)), 1, ow); });
    for (std::size_t i = 1; i < ow; ++i) EXPECT_LE(ym[i - 1], ym[i]);
  }
}

TEST(Elementwise, Examples) {
  const Tensor4 x({1, 1, 3, 1}, std::vector<double>{-1.0, 0.0, 2.0});
  const Tensor4 r = run([&](Tape& t) { return relu(t.constant(x)); });
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0.0, 0.0, 2.0}));
  const Tensor4 d = run([&](Tape& t) { return sub(t.constant(x), t.constant(x)); });
  for (double v : d.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_THROW(run([&](Tape& t) { return add(t.constant(x), t.constant(Tensor4({1, 1, 2, 1}))); }), ShapeError);
}

TEST(ConcatChannels, SlicesRecoverInputs) {
  Rng rng(8);
  const Tensor4 F = random_tensor(rng, {2, 3, 3, 4});
  const Tensor4 y = run([&](Tape& t) {
    const Var f = t.constant(F);
    return concat_channels({f, f, f});
  });
  ASSERT_EQ(y.shape().c, 12u);
  const Tensor4 A = random_tensor(rng, {1, 2, 2, 3}), B = random_tensor(rng, {1, 2, 2, 2});
  const Tensor4 ab = run([&](Tape& t) { return concat_channels({t.constant(A), t.constant(B)}); });
  for (std::size_t y0 = 0; y0 < 2; ++y0) {
    for (std::size_t x0 = 0; x0 < 2; ++x0) {
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(ab.at(0, y0, x0, c), A.at(0, y0, x0, c));
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(ab.at(0, y0, x0, 3 + c), B.at(0, y0, x0, c));
      for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_EQ(y.at(1, y0, x0, c), F.at(1, y0, x0, c));
        EXPECT_EQ(y.at(1, y0, x0, 8 + c), F.at(1, y0, x0, c));
      }
    }
  }
  EXPECT_EQ(run([&](Tape& t) { return concat_channels({t.constant(A)}); }), A);
}

TEST(Linear, IdentityAndGlobalAverage) {
  Tensor4 eye({1, 1, 3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(0, 0, i, i) = 1.0;
  const Tensor4 x({1, 1, 1, 3}, std::vector<double>{0.5, -2.0, 4.0});
  EXPECT_EQ(run([&](Tape& t) { return linear(t.constant(x), t.constant(eye), t.constant(Tensor4({1, 1, 1, 3}))); }), x);
  const Tensor4 g = run([](Tape& t) { return global_avg_pool(t.constant(Tensor4({1, 4, 4, 2}, 1.25))); });
  EXPECT_EQ(g[0], 1.25);
  EXPECT_EQ(g[1], 1.25);
}

TEST(Linear, MatchesLoopOracle) {
  Rng rng(9);
  const Tensor4 x = random_tensor(rng, {3, 1, 1, 5}), w = random_tensor(rng, {1, 1, 5, 4}), b = random_tensor(rng, {1, 1, 1, 4});
  const Tensor4 y = run([&](Tape& t) { return linear(t.constant(x), t.constant(w), t.constant(b)); });
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < 5; ++i) acc += x[n * 5 + i] * w.at(0, 0, i, o);
      EXPECT_NEAR(y[n * 4 + o], acc, 1e-12);
    }
  }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

TEST(Backward, SumOfReluOnPositivesGivesOnes) {
  Rng rng(1);
  Tape t;
  const Var x = t.input(random_tensor(rng, {1, 3, 3, 2}, 0.1, 1.0));
  t.backward(sum(relu(x)));
  for (double g : t.grad(x).data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, IdentityPoolUpsampleCancels) {
  Rng rng(2);
  Tape t;
  const Var F = t.input(random_tensor(rng, {1, 4, 6, 2}));
  t.backward(sum(sub(F, bilinear_upsample(adaptive_avg_pool(F, 4, 6), 4, 6))));
  for (double g : t.grad(F).data()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, SecondCallThrows) {
  Tape t;
  const Var x = t.input(Tensor4({1, 1, 1, 1}, 2.0));
  const Var y = sum(x);
  t.backward(y);
  EXPECT_THROW(t.backward(y), InvariantError);
}

TEST(Backward, MaxPoolTiesRouteToFirstInScanOrder) {
  Tape t;
  const Var x = t.input(Tensor4({1, 2, 2, 1}, 1.0));
  t.backward(sum(max_pool2x2(x)));
  const Tensor4& g = t.grad(x);
  EXPECT_EQ(g[0], 1.0);
  EXPECT_EQ(g[1] + g[2] + g[3], 0.0);
}

TEST(Backward, CompositeMatchesFiniteDifferences) {
  Rng rng(21);
  Parameter w("w", random_tensor(rng, {3, 3, 2, 3}));
  Parameter b("b", random_tensor(rng, {1, 1, 1, 3}));
  const auto res = gradcheck::check(
      [&](Tape& t, const std::vector<Var>& in) {
        const Var c = conv2d(in[0], t.param(w), t.param(b));
        const Var u = bilinear_upsample(adaptive_avg_pool(c, 2, 3), 4, 6);
        return sum(mul(sigmoid(sub(c, u)), c));
      },
      {random_tensor(rng, {1, 4, 6, 2})}, {&w, &b});
  EXPECT_GT(res.checked, 0u);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

// Deterministic replay: identical inputs give bit-identical values and grads.
TEST(Backward, ReplayIsBitIdentical) {
  auto once = [] {
    Rng rng(99);
    Parameter w("w", random_tensor(rng, {3, 3, 3, 4}));
    Tape t;
    const Var x = t.input(random_tensor(rng, {2, 8, 8, 3}));
    const Var y = sum(relu(conv2d(x, t.param(w))));
    t.backward(y);
    return std::make_pair(y.value(), w.grad);
  };
  EXPECT_EQ(once(), once());
}

// Every differentiable op: >= 20 random trials under 1e-4 relative error.
TEST(GradientSuite, AllOpsPass) {
  const auto outcomes = selftest::run_gradient_suite(7, 20, 1e-4);
  ASSERT_FALSE(outcomes.empty());
  for (const auto& o : outcomes) {
    EXPECT_TRUE(o.passed) << o.name << ": " << o.detail << " worst " << o.worst;
    EXPECT_GE(o.trials, 20u) << o.name;
  }
}

TEST(OracleSuite, AllOpsMatchReferences) {
  for (const auto& o : selftest::run_oracle_suite(8, 100, 1e-12)) {
    EXPECT_TRUE(o.passed) << o.name << ": " << o.detail << " worst " << o.worst;
    EXPECT_GE(o.trials, 100u) << o.name;
  }
}
