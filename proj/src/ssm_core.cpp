#include "ms2d/ssm_core.hpp"

#include <cmath>
#include <stdexcept>

#include "ms2d/rng.hpp"

namespace ms2d {

namespace detail {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

void selective_scan_kernel(std::int64_t L, std::int64_t C, std::int64_t N, const double* u, const double* delta,
                           const double* a, const double* bs, const double* cs, double* y, double* h_all) {
  std::vector<double> h(static_cast<std::size_t>(C * N), 0.0);
  for (std::int64_t k = 0; k < L; ++k) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double dk = delta[k * C + c];
      const double xk = u[k * C + c];
      double acc = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const double abar = std::exp(dk * a[c * N + n]);
        double& hn = h[static_cast<std::size_t>(c * N + n)];
        hn = abar * hn + dk * bs[k * N + n] * xk;
        if (h_all) h_all[(k * C + c) * N + n] = hn;
        acc += cs[k * N + n] * hn;
      }
      y[k * C + c] = acc;
    }
  }
}

}  // namespace detail

void SsmStreamParams::validate() const {
  const std::int64_t C = channels();
  const std::int64_t N = state_dim;
  if (N < 1) throw std::invalid_argument("SsmStreamParams: state_dim must be >= 1");
  auto want = [&](const Tensor& t, std::vector<std::int64_t> shape, const char* name) {
    if (t.shape() != shape) {
      throw std::invalid_argument(std::string("SsmStreamParams: bad shape for ") + name + ": " + t.shape_str());
    }
  };
  want(a_log, {C, N}, "a_log");
  want(d_skip, {C}, "d_skip");
  want(w_delta, {C, C}, "w_delta");
  want(b_delta, {C}, "b_delta");
  want(w_b, {N, C}, "w_b");
  want(w_c, {N, C}, "w_c");
}

SsmStreamParams SsmStreamParams::init(std::int64_t channels, std::int64_t state_dim, std::uint64_t seed) {
  Rng rng(seed);
  SsmStreamParams p;
  p.state_dim = state_dim;
  p.a_log = Tensor({channels, state_dim});
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t n = 0; n < state_dim; ++n) p.a_log(c, n) = std::log(static_cast<double>(n + 1));
  p.d_skip = Tensor::full({channels}, 1.0);
  p.w_delta = Tensor({channels, channels});
  for (std::int64_t i = 0; i < p.w_delta.size(); ++i) p.w_delta[i] = rng.trunc_normal(0.02);
  p.b_delta = Tensor({channels});
  p.w_b = Tensor({state_dim, channels});
  for (std::int64_t i = 0; i < p.w_b.size(); ++i) p.w_b[i] = rng.trunc_normal(0.02);
  p.w_c = Tensor({state_dim, channels});
  for (std::int64_t i = 0; i < p.w_c.size(); ++i) p.w_c[i] = rng.trunc_normal(0.02);
  return p;
}

std::pair<double, double> zoh_discretize(double a, double b, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("zoh_discretize: delta must be positive");
  const double ad = a * delta;
  const double a_bar = std::exp(ad);
  const double b_bar = std::abs(ad) < 1e-8 ? b * delta : std::expm1(ad) / ad * b * delta;
  return {a_bar, b_bar};
}

namespace {

void check_token_sequence(const Tensor& x, const SsmStreamParams& p) {
  p.validate();
  if (x.rank() != 2 || x.dim(1) != p.channels()) {
    throw std::invalid_argument("token sequence shape " + x.shape_str() + " does not match " +
                                std::to_string(p.channels()) + " channels");
  }
  if (x.dim(0) < 1) throw std::invalid_argument("token sequence must have L >= 1");
}

}  // namespace

SelectiveParams selective_params(const Tensor& x, const SsmStreamParams& p) {
  check_token_sequence(x, p);
  const std::int64_t L = x.dim(0), C = p.channels(), N = p.state_dim;
  SelectiveParams sp;
  sp.delta = Tensor({L, C});
  sp.b = Tensor({L, N});
  sp.c = Tensor({L, N});
  for (std::int64_t k = 0; k < L; ++k) {
    for (std::int64_t i = 0; i < C; ++i) {
      double acc = p.b_delta[i];
      for (std::int64_t j = 0; j < C; ++j) acc += p.w_delta(i, j) * x(k, j);
      sp.delta(k, i) = detail::softplus(acc);
    }
    for (std::int64_t n = 0; n < N; ++n) {
      double ab = 0.0, ac = 0.0;
      for (std::int64_t j = 0; j < C; ++j) {
        ab += p.w_b(n, j) * x(k, j);
        ac += p.w_c(n, j) * x(k, j);
      }
      sp.b(k, n) = ab;
      sp.c(k, n) = ac;
    }
  }
  return sp;
}

DiscreteSteps discretize_steps(const Tensor& x, const SelectiveParams& sp, const SsmStreamParams& p) {
  const std::int64_t L = x.dim(0), C = p.channels(), N = p.state_dim;
  DiscreteSteps ds;
  ds.length = L;
  ds.channels = C;
  ds.state_dim = N;
  ds.a_bar.resize(static_cast<std::size_t>(L * C * N));
  ds.b_bar_x.resize(static_cast<std::size_t>(L * C * N));
  for (std::int64_t k = 0; k < L; ++k)
    for (std::int64_t c = 0; c < C; ++c) {
      const double dk = sp.delta(k, c);
      const double xk = x(k, c);
      for (std::int64_t n = 0; n < N; ++n) {
        const double a = -std::exp(p.a_log(c, n));
        ds.a_bar[static_cast<std::size_t>((k * C + c) * N + n)] = std::exp(dk * a);
        ds.b_bar_x[static_cast<std::size_t>((k * C + c) * N + n)] = dk * sp.b(k, n) * xk;
      }
    }
  return ds;
}

Tensor ssm_scan_sequential(const Tensor& x, const SsmStreamParams& p) {
  check_token_sequence(x, p);
  const std::int64_t L = x.dim(0), C = p.channels(), N = p.state_dim;
  const SelectiveParams sp = selective_params(x, p);

  Tensor a = Tensor({C, N});
  for (std::int64_t i = 0; i < a.size(); ++i) a[i] = -std::exp(p.a_log[i]);

  Tensor y({L, C});
  detail::selective_scan_kernel(L, C, N, x.data(), sp.delta.data(), a.data(), sp.b.data(), sp.c.data(), y.data(),
                                nullptr);
  for (std::int64_t k = 0; k < L; ++k)
    for (std::int64_t c = 0; c < C; ++c) y(k, c) += p.d_skip[c] * x(k, c);
  return y;
}

Tensor ssm_scan_parallel(const Tensor& x, const SsmStreamParams& p) {
  check_token_sequence(x, p);
  const std::int64_t L = x.dim(0), C = p.channels(), N = p.state_dim;
  const SelectiveParams sp = selective_params(x, p);
  const DiscreteSteps ds = discretize_steps(x, sp, p);

  Tensor y({L, C});
  std::vector<double> a(static_cast<std::size_t>(L)), b(static_cast<std::size_t>(L));
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t k = 0; k < L; ++k) {
        a[static_cast<std::size_t>(k)] = ds.a_bar[static_cast<std::size_t>((k * C + c) * N + n)];
        b[static_cast<std::size_t>(k)] = ds.b_bar_x[static_cast<std::size_t>((k * C + c) * N + n)];
      }
      // Inclusive Hillis-Steele scan; b[k] becomes h_k.
      for (std::int64_t offset = 1; offset < L; offset *= 2) {
        for (std::int64_t t = L - 1; t >= offset; --t) {
          b[static_cast<std::size_t>(t)] += a[static_cast<std::size_t>(t)] * b[static_cast<std::size_t>(t - offset)];
          a[static_cast<std::size_t>(t)] *= a[static_cast<std::size_t>(t - offset)];
        }
      }
      for (std::int64_t k = 0; k < L; ++k) y(k, c) += sp.c(k, n) * b[static_cast<std::size_t>(k)];
    }
    for (std::int64_t k = 0; k < L; ++k) y(k, c) += p.d_skip[c] * x(k, c);
  }
  return y;
}

Tensor mamba_stream_forward(const Tensor& x, const SsmStreamParams& p) { return ssm_scan_sequential(x, p); }

}  // namespace ms2d
