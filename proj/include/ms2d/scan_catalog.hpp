#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ms2d/tensor.hpp"

namespace ms2d {

// Patch grid of H rows x W cols; linear patch index is row-major (r*W + c).
struct GridShape {
  std::int64_t rows = 1;
  std::int64_t cols = 1;

  std::int64_t length() const { return rows * cols; }
  bool operator==(const GridShape&) const = default;
};

// The twelve primitive scan paths:
//   S1/S3   row raster left->right / its full reversal
//   S2/S4   column raster top->bottom / its full reversal
//   S5/S6   anti-diagonal sweep (r+c ascending, r ascending within) / reversal
//   S7/S8   main-diagonal sweep (r-c+W-1 ascending, r ascending within) / reversal
//   S9/S10  horizontal serpentine starting top-left / reversal
//   S11/S12 vertical serpentine starting top-left / reversal
enum class ScanId : int { S1 = 1, S2, S3, S4, S5, S6, S7, S8, S9, S10, S11, S12 };

inline constexpr int kNumScans = 12;
inline constexpr int kNumStreams = 4;
inline constexpr int kNumExperiments = 21;

std::string to_string(ScanId d);
ScanId scan_id_from_string(const std::string& s);
std::array<ScanId, kNumScans> all_scan_ids();

// A bijection over the patch grid. order[t] = linear index of the t-th visited
// patch; inverse[order[t]] = t.
struct ScanPermutation {
  GridShape shape;
  std::vector<std::int64_t> order;
  std::vector<std::int64_t> inverse;
};

// One row of the experiment matrix: four stream scan assignments built from
// k in {1,2,4} unique scan ids, each duplicated 4/k times.
struct ExperimentConfig {
  int id = 1;
  std::array<ScanId, kNumStreams> streams{};
  int k = 1;
};

// Visitation order for scan d on the given grid. Total and deterministic.
ScanPermutation path_order(ScanId d, GridShape shape);

// Permutation with order and inverse swapped; an involution.
ScanPermutation inverse_order(const ScanPermutation& p);

// Rearranges an H x W x C feature map into sequence form: token t carries the
// channels of patch order[t]. Throws on spatial shape mismatch.
Tensor serialize(const Tensor& v, const ScanPermutation& p);

// Exact inverse of serialize. Throws on length mismatch.
Tensor deserialize(const Tensor& s, const ScanPermutation& p);

// Stream assignment for experiment id 1..21. Throws on out-of-range id.
ExperimentConfig experiment_streams(int id);

// CSV catalogue dump: one row per scan, "scan_id,t0,t1,...".
std::string scan_dump_csv(GridShape shape);

}  // namespace ms2d
