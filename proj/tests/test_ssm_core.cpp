#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>

#include "ms2d/rng.hpp"
#include "ms2d/ssm_core.hpp"

using namespace ms2d;

namespace {

Tensor random_sequence(std::int64_t L, std::int64_t C, Rng& rng) {
  Tensor x({L, C});
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  return x;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("zoh_discretize closed-form values") {
  {
    auto [a_bar, b_bar] = zoh_discretize(-1.0, 1.0, std::log(2.0));
    CHECK(a_bar == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(b_bar == doctest::Approx(0.5).epsilon(1e-12));
  }
  {
    auto [a_bar, b_bar] = zoh_discretize(0.0, 2.0, 0.1);
    CHECK(a_bar == 1.0);
    CHECK(b_bar == 0.2);
  }
  {
    auto [a_bar, b_bar] = zoh_discretize(-2.0, 1.0, 0.5);
    CHECK(a_bar == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
    CHECK(b_bar == doctest::Approx((1.0 - std::exp(-1.0)) * 0.5).epsilon(1e-10));
    CHECK(b_bar == doctest::Approx(0.31606).epsilon(1e-4));
  }
  CHECK_THROWS_AS(zoh_discretize(-1.0, 1.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(zoh_discretize(-1.0, 1.0, -0.5), std::invalid_argument);
}

TEST_CASE("zoh_discretize is continuous at a = 0") {
  for (double a : {1e-9, -1e-9}) {
    auto [a_bar, b_bar] = zoh_discretize(a, 3.0, 1.0);
    CHECK(std::abs(b_bar - 3.0) < 1e-12);
    CHECK(a_bar == doctest::Approx(1.0).epsilon(1e-9));
  }
  // just above the threshold the expm1 form stays continuous
  auto [a_bar, b_bar] = zoh_discretize(2e-8, 3.0, 1.0);
  CHECK(std::abs(b_bar - 3.0) < 1e-6);
  (void)a_bar;
}

TEST_CASE("selective_params zero-input and positivity") {
  const std::int64_t C = 3, N = 2;
  SsmStreamParams p = SsmStreamParams::init(C, N, 42);
  Tensor x({2, C});
  const SelectiveParams sp = selective_params(x, p);
  for (std::int64_t i = 0; i < sp.delta.size(); ++i) {
    CHECK(sp.delta[i] == doctest::Approx(std::log(2.0)).epsilon(1e-12));  // softplus(0)
  }
  for (std::int64_t i = 0; i < sp.b.size(); ++i) CHECK(sp.b[i] == 0.0);

  // strongly negative bias keeps delta positive
  SsmStreamParams q = p;
  q.w_delta = Tensor({C, C});
  q.b_delta = Tensor::full({C}, -40.0);
  const SelectiveParams sq = selective_params(x, q);
  for (std::int64_t i = 0; i < sq.delta.size(); ++i) {
    CHECK(sq.delta[i] > 0.0);
    CHECK(sq.delta[i] < 1e-15);
  }
}

TEST_CASE("selective_params stays finite and positive on random draws") {
  Rng rng(7);
  const std::int64_t C = 4, N = 3;
  SsmStreamParams p = SsmStreamParams::init(C, N, 9);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor x({1, C});
    for (std::int64_t i = 0; i < C; ++i) x[i] = rng.normal(0.0, 3.0);
    const SelectiveParams sp = selective_params(x, p);
    for (std::int64_t i = 0; i < sp.delta.size(); ++i) {
      CHECK(std::isfinite(sp.delta[i]));
      CHECK(sp.delta[i] > 0.0);
    }
    for (std::int64_t i = 0; i < sp.b.size(); ++i) {
      CHECK(std::isfinite(sp.b[i]));
      CHECK(std::isfinite(sp.c[i]));
    }
  }
}

TEST_CASE("scan kernel reproduces the scalar hand recurrence") {
  // abar = 0.5, drive = 0.5 each step, C-projection 1, no D path:
  // y = 0.5, 0.75, 0.875
  const std::int64_t L = 3, C = 1, N = 1;
  Tensor u = Tensor::full({L, C}, 1.0);
  Tensor delta = Tensor::full({L, C}, 1.0);
  Tensor a = Tensor::full({C, N}, std::log(0.5));
  Tensor bs = Tensor::full({L, N}, 0.5);
  Tensor cs = Tensor::full({L, N}, 1.0);
  Tensor y({L, C});
  detail::selective_scan_kernel(L, C, N, u.data(), delta.data(), a.data(), bs.data(), cs.data(), y.data(), nullptr);
  CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(y[2] == doctest::Approx(0.875).epsilon(1e-12));
}

TEST_CASE("zero input gives zero output") {
  SsmStreamParams p = SsmStreamParams::init(4, 3, 5);
  Tensor x({9, 4});
  const Tensor y = ssm_scan_sequential(x, p);
  for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("single token unrolls to one step") {
  const std::int64_t C = 3, N = 2;
  SsmStreamParams p = SsmStreamParams::init(C, N, 21);
  Rng rng(3);
  Tensor x({1, C});
  for (std::int64_t i = 0; i < C; ++i) x[i] = rng.normal();
  const SelectiveParams sp = selective_params(x, p);
  const Tensor y = ssm_scan_sequential(x, p);
  for (std::int64_t c = 0; c < C; ++c) {
    double expect = p.d_skip[c] * x(0, c);
    for (std::int64_t n = 0; n < N; ++n) {
      const double h1 = sp.delta(0, c) * sp.b(0, n) * x(0, c);  // h0 = 0
      expect += sp.c(0, n) * h1;
    }
    CHECK(y(0, c) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("pair operator is associative") {
  Rng rng(13);
  auto compose = [](std::pair<double, double> p, std::pair<double, double> q) {
    return std::pair<double, double>{p.first * q.first, q.first * p.second + q.second};
  };
  for (int trial = 0; trial < 200; ++trial) {
    const std::pair<double, double> p{rng.uniform(0.0, 1.0), rng.normal()};
    const std::pair<double, double> q{rng.uniform(0.0, 1.0), rng.normal()};
    const std::pair<double, double> r{rng.uniform(0.0, 1.0), rng.normal()};
    const auto left = compose(compose(p, q), r);
    const auto right = compose(p, compose(q, r));
    CHECK(std::abs(left.first - right.first) < 1e-12);
    CHECK(std::abs(left.second - right.second) < 1e-12);
  }
}

TEST_CASE("parallel scan matches sequential") {
  Rng rng(101);
  {
    SsmStreamParams p = SsmStreamParams::init(4, 8, 55);
    const Tensor x = random_sequence(1024, 4, rng);
    CHECK(max_abs_diff(ssm_scan_parallel(x, p), ssm_scan_sequential(x, p)) < 1e-10);
  }
  {
    SsmStreamParams p = SsmStreamParams::init(2, 2, 56);
    const Tensor x = random_sequence(1, 2, rng);
    CHECK(max_abs_diff(ssm_scan_parallel(x, p), ssm_scan_sequential(x, p)) == 0.0);
  }
  for (int trial = 0; trial < 10; ++trial) {
    const std::int64_t L = 1 + rng.uniform_int(0, 2047);
    const std::int64_t C = 1 + rng.uniform_int(0, 7);
    const std::int64_t N = 1 + rng.uniform_int(0, 15);
    SsmStreamParams p = SsmStreamParams::init(C, N, 100 + static_cast<std::uint64_t>(trial));
    const Tensor x = random_sequence(L, C, rng);
    CHECK(max_abs_diff(ssm_scan_parallel(x, p), ssm_scan_sequential(x, p)) < 1e-10);
  }
}

TEST_CASE("stability: a_bar in (0,1) and bounded state") {
  Rng rng(77);
  SsmStreamParams p = SsmStreamParams::init(3, 4, 88);
  const std::int64_t L = 256;
  const Tensor x = random_sequence(L, 3, rng);
  const SelectiveParams sp = selective_params(x, p);
  const DiscreteSteps ds = discretize_steps(x, sp, p);
  double max_abar = 0.0, max_drive = 0.0;
  for (const double a : ds.a_bar) {
    CHECK(a > 0.0);
    CHECK(a < 1.0);
    max_abar = std::max(max_abar, a);
  }
  for (const double b : ds.b_bar_x) max_drive = std::max(max_drive, std::abs(b));

  Tensor a({3, 4});
  for (std::int64_t i = 0; i < a.size(); ++i) a[i] = -std::exp(p.a_log[i]);
  Tensor y({L, 3});
  std::vector<double> h_all(static_cast<std::size_t>(L * 3 * 4));
  detail::selective_scan_kernel(L, 3, 4, x.data(), sp.delta.data(), a.data(), sp.b.data(), sp.c.data(), y.data(),
                                h_all.data());
  const double bound = max_drive / (1.0 - max_abar);
  for (const double h : h_all) CHECK(std::abs(h) <= bound + 1e-12);
}

TEST_CASE("mamba_stream_forward contracts") {
  SsmStreamParams p = SsmStreamParams::init(4, 3, 31);
  p.b_delta = Tensor({4});

  Tensor zero({5, 4});
  const Tensor y0 = mamba_stream_forward(zero, p);
  for (std::int64_t i = 0; i < y0.size(); ++i) CHECK(y0[i] == 0.0);

  Rng rng(6);
  for (std::int64_t L : {std::int64_t(1), std::int64_t(7), std::int64_t(1024)}) {
    const Tensor x = random_sequence(L, 4, rng);
    const Tensor y = mamba_stream_forward(x, p);
    CHECK(y.shape() == std::vector<std::int64_t>{L, 4});
  }

  // linearity in the C projection when D = 0
  SsmStreamParams q = p;
  q.d_skip = Tensor({4});
  const Tensor x = random_sequence(16, 4, rng);
  const Tensor y1 = mamba_stream_forward(x, q);
  for (std::int64_t i = 0; i < q.w_c.size(); ++i) q.w_c[i] *= 2.0;
  const Tensor y2 = mamba_stream_forward(x, q);
  for (std::int64_t i = 0; i < y1.size(); ++i) CHECK(y2[i] == doctest::Approx(2.0 * y1[i]).epsilon(1e-10));
}

TEST_CASE("sequential scan scales linearly in L") {
  SsmStreamParams p = SsmStreamParams::init(8, 8, 40);
  Rng rng(12);
  const Tensor x1 = random_sequence(4096, 8, rng);
  const Tensor x2 = random_sequence(8192, 8, rng);
  auto time_of = [&](const Tensor& x) {
    double best = 1e100;
    for (int rep = 0; rep < 7; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor y = ssm_scan_sequential(x, p);
      const auto t1 = std::chrono::steady_clock::now();
      best = std::min(best, std::chrono::duration<double>(t1 - t0).count() + 1e-9 * y[0] * 0.0);
    }
    return best;
  };
  const double t1 = time_of(x1);
  const double t2 = time_of(x2);
  // doubling L should at most double the runtime, within scheduling noise
  CHECK(t2 / (2.0 * t1) <= 1.3);
}
