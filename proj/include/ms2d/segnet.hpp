#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ms2d/ms2d_block.hpp"
#include "ms2d/tensor.hpp"

namespace ms2d {

// Encoder/bottleneck/decoder built from VSS blocks. The stage count is the
// length of encoder_depths; spatial grids are img/patch, img/(2*patch), ...
struct ModelConfig {
  std::int64_t img_size = 128;
  std::int64_t in_channels = 1;
  std::int64_t patch_size = 4;
  std::vector<int> encoder_depths = {2, 2, 2, 2};
  int bottleneck_depth = 2;
  std::vector<int> decoder_depths = {2, 2, 2, 1};
  std::vector<std::int64_t> stage_channels = {96, 192, 384, 768};
  std::int64_t state_dim = 8;
  std::int64_t out_classes = 1;
  int experiment_id = 1;

  int num_stages() const { return static_cast<int>(encoder_depths.size()); }
  std::int64_t grid_at(int stage) const { return img_size / patch_size >> stage; }
  void validate() const;  // throws std::invalid_argument

  // Small desk-scale configuration used throughout tests and the CLI default.
  static ModelConfig desk(int experiment_id = 1);
};

struct ModelParams {
  ModelConfig cfg;
  ad::Var patch_w, patch_b;  // [C, p*p*Cin], [C]
  ad::Var pos_bias;          // [L1, C]
  std::vector<std::vector<VssBlockParams>> encoder;
  std::vector<std::pair<ad::Var, ad::Var>> downs;  // 2x2 stride-2 conv per stage gap
  std::vector<VssBlockParams> bottleneck;
  std::vector<std::vector<VssBlockParams>> decoder;  // [0] at the deepest grid
  std::vector<std::pair<ad::Var, ad::Var>> ups;      // 2x2 conv after bilinear x2
  ad::Var head_w, head_b;  // [K,C],[K]

  std::vector<std::string> param_names;  // registration order
  std::vector<ad::Var> params;
};

// Deterministic for a given seed; stream assignment for every MS2D block comes
// from experiment_streams(cfg.experiment_id).
ModelParams build_model(const ModelConfig& cfg, std::uint64_t seed);

// Logits graph for one image given channels-first [Cin,S,S]; output [S,S,K].
ad::Var forward_graph(const ModelParams& m, const Tensor& image_chw);

// Batch forward: images [B,Cin,S,S] -> logits [B,K,S,S]. No activation applied.
Tensor forward(const ModelParams& m, const Tensor& batch);

std::int64_t count_params(const ModelParams& m);

// Analytic per-forward scalar-op count (batch of one); independent of
// experiment_id. Same counting convention as ms2d_flops.
std::int64_t count_flops(const ModelConfig& cfg);

// Checkpoint: config echo plus named parameter tensors in the project tensor
// file format (f32 payloads).
void save_checkpoint(const ModelParams& m, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace ms2d
