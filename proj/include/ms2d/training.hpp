#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ms2d/autodiff.hpp"
#include "ms2d/segnet.hpp"
#include "ms2d/tensor.hpp"

namespace ms2d {

enum class LossKind { BceDice, CeMdice };

struct TrainConfig {
  double lr0 = 1e-3;
  double lr_min = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-2;
  int batch_size = 8;
  int epochs = 30;
  LossKind loss_kind = LossKind::BceDice;
  std::uint64_t seed = 0;
  bool per_slice_metrics = false;  // default: global aggregation over all pixels

  void validate() const;
};

struct MetricsRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_dice = 0.0;
  double val_miou = 0.0;
};

// One training sample: image [Cin,S,S]; mask [S,S] holding 0/1 for binary
// tasks or class indices for multi-class.
struct Sample {
  Tensor image;
  Tensor mask;
};
using Dataset = std::vector<Sample>;

// ---- losses (plain) ----
// 1 - (2*sum(p*t)+s)/(sum(p)+sum(t)+s) over the flattened foreground.
double dice_loss(const Tensor& probs, const Tensor& target, double smooth = 1e-5);
// Mean binary cross-entropy (probs clamped to [1e-7,1-1e-7] for the logs) plus dice_loss.
double bce_dice_loss(const Tensor& probs, const Tensor& target);
// 0.4 * softmax cross-entropy + 0.6 * (1 - mean foreground-class Dice).
// logits [B,K,S,S], target_classes [B,S,S] in 0..K-1.
double ce_mdice_loss(const Tensor& logits, const Tensor& target_classes);

// ---- metrics on binary masks (threshold applied by caller) ----
double dice_metric(const Tensor& pred_mask, const Tensor& target_mask);
double miou_metric(const Tensor& pred_mask, const Tensor& target_mask);

// lr_min + 0.5*(lr0-lr_min)*(1+cos(pi*t/T))
double cosine_lr(std::int64_t t, std::int64_t total, const TrainConfig& cfg);

// ---- optimizer ----
struct AdamWState {
  std::vector<Tensor> m, v;
  std::int64_t step = 0;
};
// Decoupled update: p <- p - lr*(m_hat/(sqrt(v_hat)+1e-8) + weight_decay*p).
void adamw_step(std::vector<ad::Var>& params, const std::vector<Tensor>& grads, AdamWState& state, double lr,
                const TrainConfig& cfg);

// ---- graph losses (used in training; agree with the plain versions) ----
ad::Var bce_dice_graph(const ad::Var& logits_hwk, const Tensor& mask, double smooth = 1e-5);
ad::Var ce_mdice_graph(const ad::Var& logits_hwk, const Tensor& classes, double smooth = 1e-5);

// Gradients of the mean batch loss w.r.t. every model parameter. Throws on a
// non-finite loss.
struct BackwardResult {
  double loss = 0.0;
  std::vector<Tensor> grads;  // aligned with m.params
};
BackwardResult backward(const ModelParams& m, const std::vector<Sample>& batch, LossKind kind);

// ---- evaluation ----
struct EvalResult {
  double loss = 0.0;
  double dice = 0.0;
  double miou = 0.0;
};
EvalResult evaluate(const ModelParams& m, const Dataset& data, LossKind kind, bool per_slice = false);

// ---- training loop ----
struct TrainResult {
  std::vector<MetricsRecord> curve;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  std::vector<Tensor> best_values;  // parameter snapshot at the val-loss argmin
};
// Deterministic given cfg.seed; model parameters are left at the final epoch,
// best_values holds the checkpoint to persist.
TrainResult train(ModelParams& m, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg);

void restore_values(ModelParams& m, const std::vector<Tensor>& values);

void write_curve_csv(const std::string& path, const std::vector<MetricsRecord>& curve);

}  // namespace ms2d
