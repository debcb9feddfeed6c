#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "ms2d/autodiff.hpp"
#include "ms2d/rng.hpp"
#include "ms2d/ssm_core.hpp"

using namespace ms2d;
using ad::Var;

namespace {

Tensor randn(std::vector<std::int64_t> shape, Rng& rng, double sigma = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, sigma);
  return t;
}

using LossFn = std::function<Var(const std::vector<Var>&)>;

// Central finite differences against the analytic gradient of a scalar loss.
void check_grads(std::vector<Var> params, const LossFn& fn, double h = 1e-5, double tol = 2e-5) {
  Var loss = fn(params);
  REQUIRE(loss.val().size() == 1);
  for (auto& p : params) p.zero_grad();
  ad::backward(loss);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor v = params[i].val();
    for (std::int64_t j = 0; j < v.size(); ++j) {
      const double orig = v[j];
      v[j] = orig + h;
      params[i].set_value(v);
      const double lp = fn(params).val()[0];
      v[j] = orig - h;
      params[i].set_value(v);
      const double lm = fn(params).val()[0];
      v[j] = orig;
      params[i].set_value(v);
      const double fd = (lp - lm) / (2.0 * h);
      const double an = params[i].has_grad() ? params[i].grad()[j] : 0.0;
      const double scale = std::max({1.0, std::abs(fd), std::abs(an)});
      CHECK(std::abs(fd - an) <= tol * scale);
    }
  }
}

Var square_sum(const Var& y) { return ad::sum(ad::mul(y, y)); }

}  // namespace

TEST_CASE("elementwise op gradients") {
  Rng rng(1);
  const std::vector<std::int64_t> shape{3, 4};
  Var a = ad::leaf(randn(shape, rng));
  Var b = ad::leaf(randn(shape, rng));
  // keep divisors away from zero
  {
    Tensor bv = b.val();
    for (std::int64_t i = 0; i < bv.size(); ++i) bv[i] = bv[i] > 0 ? bv[i] + 0.5 : bv[i] - 0.5;
    b.set_value(bv);
  }

  check_grads({a, b}, [](const std::vector<Var>& p) { return square_sum(ad::add(p[0], p[1])); });
  check_grads({a, b}, [](const std::vector<Var>& p) { return square_sum(ad::sub(p[0], p[1])); });
  check_grads({a, b}, [](const std::vector<Var>& p) { return square_sum(ad::mul(p[0], p[1])); });
  check_grads({a, b}, [](const std::vector<Var>& p) { return square_sum(ad::div(p[0], p[1])); });
  check_grads({a}, [](const std::vector<Var>& p) { return square_sum(ad::scale(p[0], -1.7)); });
  check_grads({a}, [](const std::vector<Var>& p) { return square_sum(ad::add_scalar(p[0], 0.3)); });
  check_grads({a}, [](const std::vector<Var>& p) { return square_sum(ad::exp_(ad::scale(p[0], 0.5))); });
  check_grads({a}, [](const std::vector<Var>& p) { return square_sum(ad::softplus(p[0])); });
  check_grads({a}, [](const std::vector<Var>& p) { return square_sum(ad::sigmoid(p[0])); });
  check_grads({a}, [](const std::vector<Var>& p) { return square_sum(ad::silu(p[0])); });
  check_grads({a}, [](const std::vector<Var>& p) { return ad::mean(ad::mul(p[0], p[0])); });

  Rng rng2(2);
  Tensor m = randn(shape, rng2);
  check_grads({a}, [m](const std::vector<Var>& p) { return square_sum(ad::mul_const(p[0], m)); });

  // log on positive inputs
  Var pos = ad::leaf(Tensor({4}, {0.5, 1.5, 2.0, 0.1}));
  check_grads({pos}, [](const std::vector<Var>& p) { return square_sum(ad::log_(p[0])); });

  // clamp passes gradient only strictly inside the interval
  Var c = ad::leaf(Tensor({3}, {-2.0, 0.2, 2.0}));
  Var clamped = ad::clamp(c, -1.0, 1.0);
  CHECK(clamped.val()[0] == -1.0);
  CHECK(clamped.val()[2] == 1.0);
  ad::backward(ad::sum(clamped));
  CHECK(c.grad()[0] == 0.0);
  CHECK(c.grad()[1] == 1.0);
  CHECK(c.grad()[2] == 0.0);
}

TEST_CASE("structure op gradients") {
  Rng rng(3);
  Var x = ad::leaf(randn({4, 3}, rng));

  check_grads({x}, [](const std::vector<Var>& p) { return square_sum(ad::reshape(p[0], {3, 4})); });
  check_grads({x}, [](const std::vector<Var>& p) { return square_sum(ad::gather_rows(p[0], {2, 0, 3, 3, 1})); });
  check_grads({x}, [](const std::vector<Var>& p) {
    return square_sum(ad::gather_flat(p[0], {0, 5, 5, 7, 11, 2}, {2, 3}));
  });
}

TEST_CASE("linear layer values and gradients") {
  Rng rng(4);
  Var x = ad::leaf(randn({5, 3}, rng));
  Var w = ad::leaf(randn({2, 3}, rng));
  Var b = ad::leaf(randn({2}, rng));

  const Var y = ad::linear(x, w, b);
  REQUIRE(y.val().shape() == std::vector<std::int64_t>{5, 2});
  for (std::int64_t l = 0; l < 5; ++l)
    for (std::int64_t o = 0; o < 2; ++o) {
      double acc = b.val()[o];
      for (std::int64_t i = 0; i < 3; ++i) acc += x.val()(l, i) * w.val()(o, i);
      CHECK(y.val()(l, o) == doctest::Approx(acc).epsilon(1e-12));
    }

  check_grads({x, w, b}, [](const std::vector<Var>& p) { return square_sum(ad::linear(p[0], p[1], p[2])); });
  check_grads({x, w}, [](const std::vector<Var>& p) { return square_sum(ad::linear(p[0], p[1], Var())); });
}

TEST_CASE("layernorm normalizes rows and backpropagates") {
  Rng rng(5);
  Var x = ad::leaf(randn({6, 5}, rng, 2.0));
  Var g = ad::leaf(Tensor::full({5}, 1.3));
  Var b = ad::leaf(randn({5}, rng, 0.1));

  const Var y = ad::layernorm(x, g, b);
  for (std::int64_t l = 0; l < 6; ++l) {
    double mean = 0.0, var = 0.0;
    for (std::int64_t c = 0; c < 5; ++c) mean += (y.val()(l, c) - b.val()[c]) / 1.3;
    mean /= 5.0;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
    for (std::int64_t c = 0; c < 5; ++c) {
      const double z = (y.val()(l, c) - b.val()[c]) / 1.3;
      var += z * z;
    }
    CHECK(var / 5.0 == doctest::Approx(1.0).epsilon(1e-4));  // eps shrinks it slightly
  }
  check_grads({x, g, b}, [](const std::vector<Var>& p) { return square_sum(ad::layernorm(p[0], p[1], p[2])); });
}

TEST_CASE("col_scale gradients") {
  Rng rng(6);
  Var x = ad::leaf(randn({4, 3}, rng));
  Var d = ad::leaf(randn({3}, rng));
  check_grads({x, d}, [](const std::vector<Var>& p) { return square_sum(ad::col_scale(p[0], p[1])); });
}

TEST_CASE("conv op values and gradients") {
  Rng rng(7);
  Var x = ad::leaf(randn({5, 4, 2}, rng));
  Var k = ad::leaf(randn({2, 3, 3}, rng));
  Var kb = ad::leaf(randn({2}, rng));
  check_grads({x, k, kb}, [](const std::vector<Var>& p) {
    return square_sum(ad::depthwise_conv3x3(p[0], p[1], p[2]));
  });

  // 2x2 stride-2 downsample halves the grid
  Var w = ad::leaf(randn({3, 2, 2, 2}, rng));
  Var b = ad::leaf(randn({3}, rng));
  Var x6 = ad::leaf(randn({6, 4, 2}, rng));
  const Var down = ad::conv2d(x6, w, b, 2, 0, 0, 0, 0);
  CHECK(down.val().shape() == std::vector<std::int64_t>{3, 2, 3});
  check_grads({x6, w, b}, [](const std::vector<Var>& p) {
    return square_sum(ad::conv2d(p[0], p[1], p[2], 2, 0, 0, 0, 0));
  });

  // 2x2 same-pad conv preserves the grid
  Var w2 = ad::leaf(randn({2, 2, 2, 2}, rng));
  Var b2 = ad::leaf(randn({2}, rng));
  const Var same = ad::conv2d(x, w2, b2, 1, 0, 0, 1, 1);
  CHECK(same.val().shape() == std::vector<std::int64_t>{5, 4, 2});
  check_grads({x, w2, b2}, [](const std::vector<Var>& p) {
    return square_sum(ad::conv2d(p[0], p[1], p[2], 1, 0, 0, 1, 1));
  });
}

TEST_CASE("bilinear resize is corner-aligned") {
  // 1x2 row [0,1] -> 1x4 gives [0, 1/3, 2/3, 1]
  Var x = ad::leaf(Tensor({1, 2, 1}, {0.0, 1.0}));
  const Var up = ad::bilinear_resize(x, 1, 4);
  CHECK(up.val()[0] == doctest::Approx(0.0));
  CHECK(up.val()[1] == doctest::Approx(1.0 / 3.0));
  CHECK(up.val()[2] == doctest::Approx(2.0 / 3.0));
  CHECK(up.val()[3] == doctest::Approx(1.0));

  Rng rng(8);
  Var y = ad::leaf(randn({3, 4, 2}, rng));
  const Var same = ad::bilinear_resize(y, 3, 4);
  for (std::int64_t i = 0; i < same.val().size(); ++i) CHECK(same.val()[i] == y.val()[i]);

  check_grads({y}, [](const std::vector<Var>& p) { return square_sum(ad::bilinear_resize(p[0], 6, 8)); });
  check_grads({y}, [](const std::vector<Var>& p) { return square_sum(ad::bilinear_resize(p[0], 2, 3)); });
}

TEST_CASE("selective_scan value matches the plain op and backpropagates") {
  Rng rng(9);
  const std::int64_t L = 12, C = 3, N = 2;
  SsmStreamParams p = SsmStreamParams::init(C, N, 123);
  Tensor x = randn({L, C}, rng);

  // graph route: projections + scan + D skip
  Var vx = ad::leaf(x);
  Var w_delta = ad::leaf(p.w_delta), b_delta = ad::leaf(p.b_delta);
  Var w_b = ad::leaf(p.w_b), w_c = ad::leaf(p.w_c);
  Var a_log = ad::leaf(p.a_log), d_skip = ad::leaf(p.d_skip);
  auto stream = [&](const std::vector<Var>& v) {
    Var delta = ad::softplus(ad::linear(v[0], v[1], v[2]));
    Var bs = ad::linear(v[0], v[3], Var());
    Var cs = ad::linear(v[0], v[4], Var());
    Var a = ad::scale(ad::exp_(v[5]), -1.0);
    Var y = ad::selective_scan(v[0], delta, a, bs, cs);
    return ad::add(y, ad::col_scale(v[0], v[6]));
  };
  const Var y = stream({vx, w_delta, b_delta, w_b, w_c, a_log, d_skip});
  const Tensor y_plain = ssm_scan_sequential(x, p);
  for (std::int64_t i = 0; i < y_plain.size(); ++i) {
    CHECK(y.val()[i] == doctest::Approx(y_plain[i]).epsilon(1e-12));
  }

  check_grads({vx, w_delta, b_delta, w_b, w_c, a_log, d_skip},
              [&](const std::vector<Var>& v) { return square_sum(stream(v)); });
}

TEST_CASE("softmax and cross entropy") {
  Rng rng(10);
  Var x = ad::leaf(randn({6, 4}, rng));
  const Var sm = ad::softmax_rows(x);
  for (std::int64_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::int64_t k = 0; k < 4; ++k) s += sm.val()(r, k);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  check_grads({x}, [](const std::vector<Var>& p) { return square_sum(ad::softmax_rows(p[0])); });

  const std::vector<int> targets{0, 3, 1, 2, 2, 0};
  check_grads({x}, [&](const std::vector<Var>& p) { return ad::cross_entropy_mean(p[0], targets); });

  // uniform logits on K classes cost ln K
  Var u = ad::leaf(Tensor({2, 4}));
  const Var ce = ad::cross_entropy_mean(u, {1, 2});
  CHECK(ce.val()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("shared leaves accumulate and zero_grad resets") {
  Var x = ad::leaf(Tensor({3}, {1.0, 2.0, 3.0}));
  ad::backward(ad::add(ad::sum(x), ad::sum(x)));
  for (std::int64_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0);
  // second backward without zeroing accumulates further
  ad::backward(ad::sum(x));
  for (std::int64_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 3.0);
  x.zero_grad();
  for (std::int64_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 0.0);
}

TEST_CASE("NoGradGuard suppresses graph construction") {
  Var x = ad::leaf(Tensor({2}, {1.0, 2.0}));
  {
    ad::NoGradGuard ng;
    const Var y = ad::mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.val()[0] == 1.0);
    CHECK(y.val()[1] == 4.0);
  }
  const Var y = ad::mul(x, x);
  CHECK(y.requires_grad());
}
