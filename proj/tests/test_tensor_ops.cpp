#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ehdk/grad_check.hpp"
#include "ehdk/ops.hpp"
#include "oracles.hpp"

using namespace ehdk;

namespace {

Tensor random_tensor(int n, int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::random_uniform(n, c, h, w, rng);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

}  // namespace

TEST_CASE("conv2d box filter counts neighborhood size") {
  Tensor x = Tensor::full(1, 1, 3, 3, 1.0);
  ConvParams p = ConvParams::make(1, 1, 3, 1, 1, 1, false);
  for (std::int64_t i = 0; i < p.weight.numel(); ++i) p.weight.data()[i] = 1.0;
  Tensor y = conv2d(x, p);
  CHECK(y.at(0, 0, 1, 1) == doctest::Approx(9.0));
  CHECK(y.at(0, 0, 0, 0) == doctest::Approx(4.0));
  CHECK(y.at(0, 0, 0, 2) == doctest::Approx(4.0));
  CHECK(y.at(0, 0, 2, 2) == doctest::Approx(4.0));
  CHECK(y.at(0, 0, 0, 1) == doctest::Approx(6.0));
}

TEST_CASE("conv2d identity kernel is bit exact") {
  Tensor x = random_tensor(2, 3, 5, 7, 11);
  ConvParams p = ConvParams::identity(3, 1);
  Tensor y = conv2d(x, p);
  CHECK(bit_equal(x, y));
}

TEST_CASE("conv2d matches the naive loop oracle exactly") {
  struct Case {
    int n, ic, h, w, oc, k, stride, pad, groups;
  };
  for (const Case& c : {Case{2, 4, 8, 8, 6, 3, 1, 1, 1},
                        Case{1, 6, 9, 7, 6, 3, 2, 1, 2},
                        Case{1, 8, 6, 6, 8, 5, 1, 2, 8},
                        Case{3, 2, 5, 5, 4, 1, 1, 0, 1},
                        Case{1, 4, 10, 10, 4, 3, 2, 0, 1}}) {
    Rng rng(17 + c.k + c.groups);
    Tensor x = Tensor::random_uniform(c.n, c.ic, c.h, c.w, rng);
    ConvParams p = ConvParams::make(c.ic, c.oc, c.k, c.stride, c.pad, c.groups, true);
    init_conv(p, rng);
    for (std::int64_t i = 0; i < p.bias.numel(); ++i) {
      p.bias.data()[i] = rng.uniform(-0.5, 0.5);
    }
    Tensor got = conv2d(x, p);
    Tensor want = oracle::conv2d_naive(x, p);
    CHECK(bit_equal(got, want));
  }
}

TEST_CASE("depthwise conv equals independent per-channel filtering exactly") {
  Rng rng(5);
  Tensor x = Tensor::random_uniform(1, 6, 8, 8, rng);
  ConvParams p = ConvParams::make(6, 6, 3, 1, 1, 6, false);
  init_conv(p, rng);
  Tensor got = conv2d(x, p);
  Tensor want = oracle::conv2d_naive(x, p);
  CHECK(bit_equal(got, want));
}

TEST_CASE("conv2d errors") {
  Tensor x = random_tensor(1, 3, 4, 4, 2);
  ConvParams p = ConvParams::make(4, 4, 3, 1, 1, 1, true);
  CHECK_THROWS_AS(conv2d(x, p), ShapeError);
  CHECK_THROWS_AS(ConvParams::make(4, 4, 2, 1, 0, 1, true), ConfigError);
  CHECK_THROWS_AS(ConvParams::make(6, 4, 3, 1, 1, 4, true), ConfigError);
  ConvParams big = ConvParams::make(3, 3, 5, 1, 0, 1, true);
  CHECK_THROWS_AS(conv2d(x, big), ShapeError);  // 4x4 input, 5x5 kernel, no pad
}

TEST_CASE("conv2d input gradient vs central differences") {
  Rng rng(23);
  Tensor x = Tensor::random_uniform(2, 4, 8, 8, rng);
  ConvParams p = ConvParams::make(4, 6, 3, 1, 1, 1, true);
  init_conv(p, rng);
  double err = grad_check(
      [&](std::vector<Tensor>& in, Tape* tape) {
        return sum_all(conv2d(in[0], p, tape), tape);
      },
      {x}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("conv2d weight and bias gradients") {
  Rng rng(29);
  Tensor x = Tensor::random_uniform(1, 3, 6, 6, rng);
  ConvParams p = ConvParams::make(3, 4, 3, 2, 1, 1, true);
  init_conv(p, rng);
  double err = grad_check(
      [&](std::vector<Tensor>& in, Tape* tape) {
        ConvParams q = p;
        q.weight = in[0];
        q.bias = in[1];
        return sum_all(conv2d(x, q, tape), tape);
      },
      {p.weight, p.bias}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("pointwise examples") {
  Tensor z = Tensor::from_values(1, 3, 1, 1, {0.0, 0.0, 0.0});
  Tensor s = softmax_channels(z);
  for (int c = 0; c < 3; ++c) {
    CHECK(s.at(0, c, 0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  }

  Tensor x = random_tensor(1, 2, 3, 3, 31);
  Tensor zero = Tensor::zeros(1, 2, 3, 3);
  CHECK(bit_equal(add(x, zero), x));

  Tensor one = Tensor::full(1, 1, 1, 1, 1.0);
  double sig1 = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(silu(one).data()[0] == doctest::Approx(1.0 * sig1).epsilon(1e-12));
  CHECK(silu(one).data()[0] == doctest::Approx(0.731059).epsilon(1e-6));

  CHECK_THROWS_AS(add(x, Tensor::zeros(1, 2, 3, 4)), ShapeError);
}

TEST_CASE("softmax_channels slices sum to one") {
  Tensor x = random_tensor(2, 5, 3, 4, 37);
  Tensor s = softmax_channels(x);
  for (int n = 0; n < 2; ++n) {
    for (int y = 0; y < 3; ++y) {
      for (int xx = 0; xx < 4; ++xx) {
        double acc = 0.0;
        for (int c = 0; c < 5; ++c) acc += s.at(n, c, y, xx);
        CHECK(std::abs(acc - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("structural ops") {
  Tensor x = Tensor::from_values(1, 1, 2, 2, {1, 2, 3, 4});
  Tensor up = upsample_nearest(x, 2);
  CHECK(up.h() == 4);
  CHECK(up.w() == 4);
  for (int y = 0; y < 4; ++y) {
    for (int xx = 0; xx < 4; ++xx) {
      CHECK(up.at(0, 0, y, xx) == x.at(0, 0, y / 2, xx / 2));
    }
  }

  Tensor a = random_tensor(2, 2, 3, 3, 41), b = random_tensor(2, 3, 3, 3, 43);
  Tensor cat = concat_channels({a, b});
  CHECK(cat.c() == 5);
  CHECK(bit_equal(slice_channels(cat, 0, 2), a));
  CHECK(bit_equal(slice_channels(cat, 2, 5), b));

  CHECK(avgpool_region(x, 0, 0, 2, 2).data()[0] == doctest::Approx(2.5));
  CHECK_THROWS_AS(concat_channels({}), ArgumentError);
  CHECK_THROWS_AS(avgpool_region(x, 0, 0, 3, 2), BoundsError);
}

TEST_CASE("batchnorm2d eval identity and train statistics") {
  Rng rng(47);
  Tensor x = Tensor::random_uniform(2, 3, 4, 4, rng);
  BatchNormParams p = BatchNormParams::make(3, 1e-12);
  Tensor y = batchnorm2d(x, p, BnMode::kEval);
  CHECK(max_abs_diff(x, y) < 1e-9);  // gamma=1, beta=0, mean=0, var=1

  // constant channels normalize to beta
  BatchNormParams q = BatchNormParams::make(3);
  for (int c = 0; c < 3; ++c) q.beta.data()[c] = 0.25 * c;
  Tensor cst(2, 3, 4, 4);
  for (std::int64_t i = 0; i < cst.numel(); ++i) cst.data()[i] = 7.0;
  Tensor yc = batchnorm2d(cst, q, BnMode::kTrain);
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      CHECK(yc.at(n, c, 1, 1) == doctest::Approx(0.25 * c).epsilon(1e-9));
    }
  }

  // train-mode output is standardized per channel (variance shrinks by
  // var/(var+eps), so a tiny epsilon keeps the check sharp)
  BatchNormParams r = BatchNormParams::make(3, 1e-9);
  Tensor yt = batchnorm2d(x, r, BnMode::kTrain);
  std::int64_t m = 2 * 4 * 4;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int n = 0; n < 2; ++n) {
      for (int yy = 0; yy < 4; ++yy) {
        for (int xx = 0; xx < 4; ++xx) mean += yt.at(n, c, yy, xx);
      }
    }
    mean /= double(m);
    for (int n = 0; n < 2; ++n) {
      for (int yy = 0; yy < 4; ++yy) {
        for (int xx = 0; xx < 4; ++xx) {
          double d = yt.at(n, c, yy, xx) - mean;
          var += d * d;
        }
      }
    }
    var /= double(m);
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }

  Tensor tiny = Tensor::zeros(1, 3, 1, 1);
  BatchNormParams s = BatchNormParams::make(3);
  CHECK_THROWS_AS(batchnorm2d(tiny, s, BnMode::kTrain), StatsError);
}

TEST_CASE("grad_check examples") {
  Rng rng(53);
  Tensor any = Tensor::random_uniform(1, 2, 3, 3, rng);
  double lin = grad_check(
      [](std::vector<Tensor>& in, Tape* tape) { return sum_all(in[0], tape); },
      {any}, 1e-5);
  CHECK(lin < 1e-12);

  Tensor x12 = Tensor::from_values(1, 1, 1, 2, {1.0, 2.0});
  double sq = grad_check(
      [](std::vector<Tensor>& in, Tape* tape) {
        return sum_all(multiply(in[0], in[0], tape), tape);
      },
      {x12}, 1e-5);
  CHECK(sq < 1e-9);

  // analytic gradient of sum(x*x) at [1,2] is [2,4]
  Tape tape;
  Tensor x = Tensor::from_values(1, 1, 1, 2, {1.0, 2.0});
  x.ensure_grad();
  Tensor s = sum_all(multiply(x, x, &tape), &tape);
  tape.backward(s);
  CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));

  Tensor xc = Tensor::random_uniform(1, 2, 6, 6, rng);
  ConvParams p = ConvParams::make(2, 3, 3, 1, 1, 1, true);
  init_conv(p, rng);
  double chain = grad_check(
      [&](std::vector<Tensor>& in, Tape* tape) {
        return sum_all(silu(conv2d(in[0], p, tape), tape), tape);
      },
      {xc}, 1e-5);
  CHECK(chain < 1e-6);

  CHECK_THROWS_AS(grad_check(
                      [](std::vector<Tensor>& in, Tape* tape) {
                        return sum_all(in[0], tape);
                      },
                      {any}, 1e-2),
                  ArgumentError);
}

TEST_CASE("gradients of remaining ops stay under tolerance") {
  Rng rng(59);
  auto check = [&](const DiffFn& f, Tensor x, double tol) {
    CHECK(grad_check(f, {x}, 1e-5) < tol);
  };
  Tensor x = Tensor::random_uniform(2, 4, 4, 4, rng);
  check([](std::vector<Tensor>& in, Tape* t) { return sum_all(sigmoid(in[0], t), t); },
        x.clone(), 1e-6);
  check([](std::vector<Tensor>& in, Tape* t) { return sum_all(silu(in[0], t), t); },
        x.clone(), 1e-6);
  check(
      [](std::vector<Tensor>& in, Tape* t) {
        return sum_all(softmax_channels(in[0], t), t);
      },
      x.clone(), 1e-4);
  check(
      [](std::vector<Tensor>& in, Tape* t) {
        return sum_all(upsample_nearest(in[0], 3, t), t);
      },
      x.clone(), 1e-6);
  check(
      [](std::vector<Tensor>& in, Tape* t) {
        return sum_all(avgpool_region(in[0], 1, 0, 4, 3, t), t);
      },
      x.clone(), 1e-6);
  check(
      [](std::vector<Tensor>& in, Tape* t) {
        return sum_all(slice_channels(in[0], 1, 3, t), t);
      },
      x.clone(), 1e-6);

  // weighted heads make plain-sum slices informative
  Rng wr(61);
  Tensor wts = Tensor::random_uniform(2, 4, 4, 4, wr);
  check(
      [&](std::vector<Tensor>& in, Tape* t) {
        return sum_all(multiply(softmax_channels(in[0], t), wts, t), t);
      },
      x.clone(), 1e-4);

  Tensor a = Tensor::random_uniform(1, 2, 3, 3, rng);
  Tensor b = Tensor::random_uniform(1, 3, 3, 3, rng);
  double cat_err = grad_check(
      [&](std::vector<Tensor>& in, Tape* t) {
        Tensor cat = concat_channels({in[0], in[1]}, t);
        return sum_all(multiply(cat, cat, t), t);
      },
      {a, b}, 1e-5);
  CHECK(cat_err < 1e-6);

  BatchNormParams bn = BatchNormParams::make(4);
  double bn_err = grad_check(
      [&](std::vector<Tensor>& in, Tape* t) {
        Tensor y = batchnorm2d(in[0], bn, BnMode::kTrain, t);
        return sum_all(multiply(y, wts, t), t);
      },
      {x.clone()}, 1e-5);
  CHECK(bn_err < 1e-4);
}

TEST_CASE("attention matches hand-evaluated softmax") {
  // d_k = 1, two tokens; q=(1,0), k=(2,0), v=(10,20)
  Tensor q = Tensor::from_values(1, 1, 1, 2, {1.0, 0.0});
  Tensor k = Tensor::from_values(1, 1, 1, 2, {2.0, 0.0});
  Tensor v = Tensor::from_values(1, 1, 1, 2, {10.0, 20.0});
  Tensor w;
  Tensor o = attention(q, k, v, nullptr, &w);
  double sig = std::exp(2.0) / (std::exp(2.0) + 1.0);
  CHECK(o.at(0, 0, 0, 0) ==
        doctest::Approx(10.0 * sig + 20.0 * (1.0 - sig)).epsilon(1e-12));
  CHECK(o.at(0, 0, 0, 0) == doctest::Approx(11.1920).epsilon(1e-4));
  CHECK(o.at(0, 0, 0, 1) == doctest::Approx(15.0).epsilon(1e-12));
  // exported weights are row-stochastic
  for (int t = 0; t < 2; ++t) {
    double acc = 0.0;
    for (int u = 0; u < 2; ++u) {
      CHECK(w.at(0, 0, t, u) >= 0.0);
      acc += w.at(0, 0, t, u);
    }
    CHECK(std::abs(acc - 1.0) <= 1e-12);
  }
}

TEST_CASE("attention gradient") {
  Rng rng(67);
  Tensor q = Tensor::random_uniform(1, 3, 2, 2, rng);
  Tensor k = Tensor::random_uniform(1, 3, 2, 2, rng);
  Tensor v = Tensor::random_uniform(1, 3, 2, 2, rng);
  Tensor wts = Tensor::random_uniform(1, 3, 2, 2, rng);
  double err = grad_check(
      [&](std::vector<Tensor>& in, Tape* t) {
        Tensor o = attention(in[0], in[1], in[2], t);
        return sum_all(multiply(o, wts, t), t);
      },
      {q, k, v}, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("ops are pure: repeated application is bit identical") {
  Rng rng(71);
  Tensor x = Tensor::random_uniform(2, 3, 6, 6, rng);
  ConvParams p = ConvParams::make(3, 5, 3, 1, 1, 1, true);
  init_conv(p, rng);
  CHECK(bit_equal(conv2d(x, p), conv2d(x, p)));
  CHECK(bit_equal(softmax_channels(x), softmax_channels(x)));
}
