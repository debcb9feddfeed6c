#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ms2d/tensor.hpp"

namespace ms2d {

// A multi-modality volume: slices [D,C,H,W], nonnegative intensities.
struct Volume {
  std::string case_id;
  Tensor slices;
};

// Synthetic anisotropic-lesion dataset spec. `theta` is the principal-axis
// angle of both the background texture and the lesion ellipses; `contrast` is
// a guaranteed lower bound on the lesion/background mean intensity gap.
struct PhantomSpec {
  int n_cases = 48;
  std::int64_t grid = 32;
  int min_lesions = 1;
  int max_lesions = 3;
  double eccentricity = 0.6;       // in [0,1)
  double theta = 0.6;              // radians in [0,pi)
  double texture_strength = 0.2;
  double noise_sigma = 0.05;
  double contrast = 0.3;
  std::uint64_t seed = 7;

  void validate() const;
};

struct PhantomCase {
  std::string case_id;
  Tensor image;  // [1,S,S], values in [0,1]
  Tensor mask;   // [S,S], 0/1
};

struct SplitAssignment {
  std::vector<std::string> train, val, test;
};

// Min-max normalization over the nonzero voxels of the whole volume; zero
// voxels stay zero. Degenerate (constant nonzero) volumes map to all zeros;
// all-zero volumes are an error.
Volume minmax_normalize(const Volume& v);

// Corner-aligned separable bilinear resize of a [C,H,W] slice to [C,out,out].
Tensor resize_bilinear(const Tensor& slice, std::int64_t out);

// Nearest-neighbor resize of an [H,W] mask, re-binarized at 0.5.
Tensor resize_nearest_mask(const Tensor& mask, std::int64_t out);

// Seeded shuffle then 70/15/15 by case count; val/test floored, remainder to
// train. Requires at least 3 cases.
SplitAssignment subject_split(std::vector<std::string> case_ids, std::uint64_t seed);

// Case i depends only on (spec.seed, i): regenerating one case in isolation
// reproduces it exactly.
PhantomCase generate_phantom_case(const PhantomSpec& spec, int index);
std::vector<PhantomCase> generate_phantom(const PhantomSpec& spec);

// ---- binary tensor file format ----
// magic "MSTN" | version u8=1 | count u32 LE | per entry:
//   name len u16 LE | name bytes | rank u8 | dims u32 LE | dtype u8 (1 = f32 LE) | payload row-major
struct NamedTensor {
  std::string name;
  Tensor value;
};

enum class TensorIoErrorKind { BadMagic, BadVersion, BadDtype, Truncated, Overflow };

class TensorIoError : public std::runtime_error {
 public:
  TensorIoError(TensorIoErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  TensorIoErrorKind kind() const { return kind_; }

 private:
  TensorIoErrorKind kind_;
};

void write_tensors(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(const std::string& path);

// ---- dataset directory layout ----
// cases/<id>/image.mstn, cases/<id>/mask.mstn, split.csv
void write_dataset(const std::string& dir, const std::vector<PhantomCase>& cases, const SplitAssignment& split);

struct LoadedDataset {
  std::vector<PhantomCase> cases;  // ordered as listed in split.csv
  SplitAssignment split;
};
LoadedDataset load_dataset(const std::string& dir);

}  // namespace ms2d
