#pragma once

#include <array>
#include <cstdint>

#include "ms2d/autodiff.hpp"
#include "ms2d/scan_catalog.hpp"
#include "ms2d/ssm_core.hpp"
#include "ms2d/tensor.hpp"

namespace ms2d {

// One selective-SSM stream as graph leaves (same layout as SsmStreamParams).
struct StreamVars {
  std::int64_t state_dim = 1;
  ad::Var a_log, d_skip, w_delta, b_delta, w_b, w_c;
};

// Four parallel streams over a shared feature map. Always four, regardless of
// how many distinct scan ids the experiment assigns.
struct Ms2dParams {
  std::array<StreamVars, kNumStreams> streams;
  std::array<ScanId, kNumStreams> stream_scans{ScanId::S1, ScanId::S1, ScanId::S1, ScanId::S1};
  ad::Var mix_w, mix_b;            // 1x1 channel mix [C,C],[C]
  ad::Var norm_gamma, norm_beta;   // pre-norm applied to each serialized stream
};

// Residual unit: out = v + pointwise(ms2d(silu(dwconv(layernorm(v))))).
struct VssBlockParams {
  ad::Var ln_gamma, ln_beta;
  ad::Var dw_kernel, dw_bias;  // depthwise 3x3 [C,3,3],[C]
  Ms2dParams ms2d;
  ad::Var pw_w, pw_b;          // pointwise projection [C,C],[C]
};

// Graph builders (v is [H,W,C]); used by the model forward and by training.
ad::Var mamba_stream(const ad::Var& x, const StreamVars& s);
ad::Var ms2d_forward(const ad::Var& v, const Ms2dParams& p);
ad::Var vss_block_forward(const ad::Var& v, const VssBlockParams& p);

// Value-only wrappers.
Tensor ms2d_forward(const Tensor& v, const Ms2dParams& p);
Tensor vss_block_forward(const Tensor& v, const VssBlockParams& p);

// Analytic scalar-op count of one MS2D invocation; has no scan-id term, so it
// is identical for every experiment at fixed (shape, C, N).
// Convention: each scalar +,-,*,/ and each elementary function eval counts 1
// (softplus = 2, sigmoid = 3, silu = 4); an n-term accumulation is n muls +
// n adds with the accumulator init (zero or bias) free; permutations and
// reshapes are data movement and cost nothing.
std::int64_t ms2d_flops(GridShape shape, std::int64_t channels, std::int64_t state_dim);

// Parameter builders (leaves with deterministic seeded init).
StreamVars make_stream_vars(std::int64_t channels, std::int64_t state_dim, std::uint64_t seed);
Ms2dParams make_ms2d_params(std::int64_t channels, std::int64_t state_dim, const std::array<ScanId, 4>& scans,
                            std::uint64_t seed);
VssBlockParams make_vss_block(std::int64_t channels, std::int64_t state_dim, const std::array<ScanId, 4>& scans,
                              std::uint64_t seed);

// All leaves of a block, in registration order (for tests and counting).
std::vector<ad::Var> collect_params(const Ms2dParams& p);
std::vector<ad::Var> collect_params(const VssBlockParams& p);

}  // namespace ms2d
