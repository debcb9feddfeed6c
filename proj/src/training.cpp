#include "ms2d/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "ms2d/rng.hpp"

namespace ms2d {

void TrainConfig::validate() const {
  if (!(lr_min < lr0)) throw std::invalid_argument("TrainConfig: lr_min must be < lr0");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
}

double dice_loss(const Tensor& probs, const Tensor& target, double smooth) {
  check_same_shape(probs, target, "dice_loss");
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::int64_t i = 0; i < probs.size(); ++i) {
    inter += probs[i] * target[i];
    sp += probs[i];
    st += target[i];
  }
  return 1.0 - (2.0 * inter + smooth) / (sp + st + smooth);
}

double bce_dice_loss(const Tensor& probs, const Tensor& target) {
  check_same_shape(probs, target, "bce_dice_loss");
  double bce = 0.0;
  for (std::int64_t i = 0; i < probs.size(); ++i) {
    const double p = std::min(1.0 - 1e-7, std::max(1e-7, probs[i]));
    bce -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
  }
  bce /= static_cast<double>(probs.size());
  return bce + dice_loss(probs, target, 1e-5);
}

double ce_mdice_loss(const Tensor& logits, const Tensor& target_classes) {
  if (logits.rank() != 4) throw std::invalid_argument("ce_mdice_loss: logits must be [B,K,S,S]");
  const std::int64_t B = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  if (target_classes.shape() != std::vector<std::int64_t>{B, H, W}) {
    throw std::invalid_argument("ce_mdice_loss: target shape mismatch");
  }
  const double smooth = 1e-5;
  double ce = 0.0;
  std::vector<double> inter(static_cast<std::size_t>(K), 0.0), sp(static_cast<std::size_t>(K), 0.0),
      st(static_cast<std::size_t>(K), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t r = 0; r < H; ++r)
      for (std::int64_t w = 0; w < W; ++w) {
        const int t = static_cast<int>(target_classes[(b * H + r) * W + w]);
        if (t < 0 || t >= K) throw std::invalid_argument("ce_mdice_loss: class index out of range");
        double m = logits[((b * K) * H + r) * W + w];
        for (std::int64_t k = 1; k < K; ++k) m = std::max(m, logits[((b * K + k) * H + r) * W + w]);
        double z = 0.0;
        for (std::int64_t k = 0; k < K; ++k) z += std::exp(logits[((b * K + k) * H + r) * W + w] - m);
        const double lse = m + std::log(z);
        ce += lse - logits[((b * K + t) * H + r) * W + w];
        for (std::int64_t k = 0; k < K; ++k) {
          const double p = std::exp(logits[((b * K + k) * H + r) * W + w] - m) / z;
          sp[static_cast<std::size_t>(k)] += p;
          if (k == t) inter[static_cast<std::size_t>(k)] += p;
        }
        st[static_cast<std::size_t>(t)] += 1.0;
      }
  ce /= static_cast<double>(B * H * W);
  double mdice = 0.0;
  for (std::int64_t k = 1; k < K; ++k) {
    mdice += (2.0 * inter[static_cast<std::size_t>(k)] + smooth) /
             (sp[static_cast<std::size_t>(k)] + st[static_cast<std::size_t>(k)] + smooth);
  }
  mdice /= static_cast<double>(K - 1);
  return 0.4 * ce + 0.6 * (1.0 - mdice);
}

namespace {

struct BinaryCounts {
  double inter = 0.0, pred = 0.0, truth = 0.0, uni = 0.0;

  void add(const Tensor& p, const Tensor& t) {
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const bool pp = p[i] > 0.5, tt = t[i] > 0.5;
      inter += pp && tt;
      pred += pp;
      truth += tt;
      uni += pp || tt;
    }
  }

  double dice() const { return pred + truth == 0.0 ? 1.0 : 2.0 * inter / (pred + truth); }
  double iou() const { return uni == 0.0 ? 1.0 : inter / uni; }
};

}  // namespace

double dice_metric(const Tensor& pred_mask, const Tensor& target_mask) {
  check_same_shape(pred_mask, target_mask, "dice_metric");
  BinaryCounts c;
  c.add(pred_mask, target_mask);
  return c.dice();
}

double miou_metric(const Tensor& pred_mask, const Tensor& target_mask) {
  check_same_shape(pred_mask, target_mask, "miou_metric");
  BinaryCounts c;
  c.add(pred_mask, target_mask);
  return c.iou();
}

double cosine_lr(std::int64_t t, std::int64_t total, const TrainConfig& cfg) {
  if (total < 1 || t < 0 || t > total) throw std::invalid_argument("cosine_lr: need 0 <= t <= T, T >= 1");
  return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + std::cos(M_PI * static_cast<double>(t) / static_cast<double>(total)));
}

void adamw_step(std::vector<ad::Var>& params, const std::vector<Tensor>& grads, AdamWState& state, double lr,
                const TrainConfig& cfg) {
  if (params.size() != grads.size()) throw std::invalid_argument("adamw_step: params/grads size mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.val().shape());
      state.v.emplace_back(p.val().shape());
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].val();
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    check_same_shape(p, g, "adamw_step");
    for (std::int64_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= lr * (m_hat / (std::sqrt(v_hat) + 1e-8) + cfg.weight_decay * p[j]);
    }
    params[i].set_value(p);
  }
}

ad::Var bce_dice_graph(const ad::Var& logits_hwk, const Tensor& mask, double smooth) {
  const Tensor& lv = logits_hwk.val();
  if (lv.rank() != 3 || lv.dim(2) != 1) throw std::invalid_argument("bce_dice_graph: logits must be [S,S,1]");
  const std::int64_t P = lv.dim(0) * lv.dim(1);
  if (mask.size() != P) throw std::invalid_argument("bce_dice_graph: mask size mismatch");
  Tensor t = mask.reshaped({P});
  Tensor t_neg({P});
  double sum_t = 0.0;
  for (std::int64_t i = 0; i < P; ++i) {
    t_neg[i] = 1.0 - t[i];
    sum_t += t[i];
  }
  ad::Var p = ad::sigmoid(ad::reshape(logits_hwk, {P}));
  ad::Var pc = ad::clamp(p, 1e-7, 1.0 - 1e-7);
  ad::Var one_minus = ad::add_scalar(ad::scale(pc, -1.0), 1.0);
  ad::Var bce_terms = ad::add(ad::mul_const(ad::log_(pc), t), ad::mul_const(ad::log_(one_minus), t_neg));
  ad::Var bce = ad::scale(ad::sum(bce_terms), -1.0 / static_cast<double>(P));
  ad::Var inter = ad::sum(ad::mul_const(p, t));
  ad::Var num = ad::add_scalar(ad::scale(inter, 2.0), smooth);
  ad::Var den = ad::add_scalar(ad::sum(p), sum_t + smooth);
  ad::Var dice = ad::div(num, den);
  return ad::add(bce, ad::add_scalar(ad::scale(dice, -1.0), 1.0));
}

ad::Var ce_mdice_graph(const ad::Var& logits_hwk, const Tensor& classes, double smooth) {
  const Tensor& lv = logits_hwk.val();
  if (lv.rank() != 3) throw std::invalid_argument("ce_mdice_graph: logits must be [S,S,K]");
  const std::int64_t P = lv.dim(0) * lv.dim(1), K = lv.dim(2);
  if (classes.size() != P) throw std::invalid_argument("ce_mdice_graph: class map size mismatch");
  std::vector<int> targets(static_cast<std::size_t>(P));
  for (std::int64_t i = 0; i < P; ++i) {
    const int t = static_cast<int>(classes[i]);
    if (t < 0 || t >= K) throw std::invalid_argument("ce_mdice_graph: class index out of range");
    targets[static_cast<std::size_t>(i)] = t;
  }
  ad::Var lg = ad::reshape(logits_hwk, {P, K});
  ad::Var ce = ad::cross_entropy_mean(lg, targets);
  ad::Var probs = ad::softmax_rows(lg);
  ad::Var mdice;
  for (std::int64_t k = 1; k < K; ++k) {
    Tensor col({P, K}), hit({P, K});
    double sum_t = 0.0;
    for (std::int64_t i = 0; i < P; ++i) {
      col(i, k) = 1.0;
      if (targets[static_cast<std::size_t>(i)] == k) {
        hit(i, k) = 1.0;
        sum_t += 1.0;
      }
    }
    ad::Var inter = ad::sum(ad::mul_const(probs, hit));
    ad::Var num = ad::add_scalar(ad::scale(inter, 2.0), smooth);
    ad::Var den = ad::add_scalar(ad::sum(ad::mul_const(probs, col)), sum_t + smooth);
    ad::Var dice_k = ad::div(num, den);
    mdice = mdice.defined() ? ad::add(mdice, dice_k) : dice_k;
  }
  mdice = ad::scale(mdice, 1.0 / static_cast<double>(K - 1));
  return ad::add(ad::scale(ce, 0.4), ad::scale(ad::add_scalar(ad::scale(mdice, -1.0), 1.0), 0.6));
}

namespace {

ad::Var sample_loss_graph(const ModelParams& m, const Sample& s, LossKind kind) {
  ad::Var logits = forward_graph(m, s.image);
  return kind == LossKind::BceDice ? bce_dice_graph(logits, s.mask) : ce_mdice_graph(logits, s.mask);
}

}  // namespace

BackwardResult backward(const ModelParams& m, const std::vector<Sample>& batch, LossKind kind) {
  if (batch.empty()) throw std::invalid_argument("backward: empty batch");
  ad::Var total;
  for (const auto& s : batch) {
    ad::Var l = sample_loss_graph(m, s, kind);
    total = total.defined() ? ad::add(total, l) : l;
  }
  total = ad::scale(total, 1.0 / static_cast<double>(batch.size()));
  const double loss = total.val()[0];
  if (!std::isfinite(loss)) {
    throw std::runtime_error("backward: non-finite loss (" + std::to_string(loss) + "); step aborted");
  }
  for (const auto& p : m.params) p.zero_grad();
  ad::backward(total);
  BackwardResult r;
  r.loss = loss;
  r.grads.reserve(m.params.size());
  for (const auto& p : m.params) {
    r.grads.push_back(p.has_grad() ? p.grad() : Tensor(p.val().shape()));
  }
  return r;
}

EvalResult evaluate(const ModelParams& m, const Dataset& data, LossKind kind, bool per_slice) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  ad::NoGradGuard ng;
  const std::int64_t K = m.cfg.out_classes;
  double loss_sum = 0.0;
  BinaryCounts bin;
  std::vector<BinaryCounts> per_class(static_cast<std::size_t>(K));
  double slice_dice = 0.0, slice_iou = 0.0;

  for (const auto& s : data) {
    const Tensor logits = forward_graph(m, s.image).val();  // [S,S,K]
    const std::int64_t H = logits.dim(0), W = logits.dim(1);
    if (kind == LossKind::BceDice) {
      Tensor probs({H, W});
      for (std::int64_t r = 0; r < H; ++r)
        for (std::int64_t w = 0; w < W; ++w) probs(r, w) = 1.0 / (1.0 + std::exp(-logits(r, w, 0)));
      loss_sum += bce_dice_loss(probs, s.mask);
      Tensor pred({H, W});
      for (std::int64_t i = 0; i < pred.size(); ++i) pred[i] = probs[i] > 0.5 ? 1.0 : 0.0;
      if (per_slice) {
        slice_dice += dice_metric(pred, s.mask);
        slice_iou += miou_metric(pred, s.mask);
      } else {
        bin.add(pred, s.mask);
      }
    } else {
      Tensor l4({1, K, H, W});
      for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t r = 0; r < H; ++r)
          for (std::int64_t w = 0; w < W; ++w) l4[((k)*H + r) * W + w] = logits(r, w, k);
      Tensor t3 = s.mask.reshaped({1, H, W});
      loss_sum += ce_mdice_loss(l4, t3);
      for (std::int64_t r = 0; r < H; ++r)
        for (std::int64_t w = 0; w < W; ++w) {
          std::int64_t best = 0;
          for (std::int64_t k = 1; k < K; ++k)
            if (logits(r, w, k) > logits(r, w, best)) best = k;
          const int t = static_cast<int>(s.mask(r, w));
          for (std::int64_t k = 1; k < K; ++k) {
            auto& c = per_class[static_cast<std::size_t>(k)];
            const bool pp = best == k, tt = t == k;
            c.inter += pp && tt;
            c.pred += pp;
            c.truth += tt;
            c.uni += pp || tt;
          }
        }
    }
  }

  EvalResult r;
  r.loss = loss_sum / static_cast<double>(data.size());
  if (kind == LossKind::BceDice) {
    if (per_slice) {
      r.dice = slice_dice / static_cast<double>(data.size());
      r.miou = slice_iou / static_cast<double>(data.size());
    } else {
      r.dice = bin.dice();
      r.miou = bin.iou();
    }
  } else {
    double d = 0.0, u = 0.0;
    for (std::int64_t k = 1; k < K; ++k) {
      d += per_class[static_cast<std::size_t>(k)].dice();
      u += per_class[static_cast<std::size_t>(k)].iou();
    }
    r.dice = d / static_cast<double>(K - 1);
    r.miou = u / static_cast<double>(K - 1);
  }
  return r;
}

TrainResult train(ModelParams& m, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw std::invalid_argument("train: need nonempty train and val sets");
  std::vector<ad::Var> params = m.params;
  AdamWState opt;
  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> idx(train_set.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg);
    Rng shuffle_rng(derive_seed(cfg.seed, 1000003ull + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(idx);

    double loss_sum = 0.0;
    int n_batches = 0;
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<Sample> batch;
      for (std::size_t i = start; i < std::min(idx.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++i) {
        batch.push_back(train_set[idx[i]]);
      }
      BackwardResult bw = backward(m, batch, cfg.loss_kind);
      adamw_step(params, bw.grads, opt, lr, cfg);
      loss_sum += bw.loss;
      ++n_batches;
    }

    const EvalResult ev = evaluate(m, val_set, cfg.loss_kind, cfg.per_slice_metrics);
    MetricsRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / std::max(1, n_batches);
    rec.val_loss = ev.loss;
    rec.val_dice = ev.dice;
    rec.val_miou = ev.miou;
    result.curve.push_back(rec);

    if (ev.loss < result.best_val_loss) {
      result.best_val_loss = ev.loss;
      result.best_epoch = rec.epoch;
      result.best_values.clear();
      for (const auto& p : m.params) result.best_values.push_back(p.val());
    }
  }
  return result;
}

void restore_values(ModelParams& m, const std::vector<Tensor>& values) {
  if (values.size() != m.params.size()) throw std::invalid_argument("restore_values: size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) m.params[i].set_value(values[i]);
}

void write_curve_csv(const std::string& path, const std::vector<MetricsRecord>& curve) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_curve_csv: cannot open " + path);
  f << "epoch,train_loss,val_loss,val_dice,val_miou\n";
  for (const auto& r : curve) {
    f << r.epoch << "," << r.train_loss << "," << r.val_loss << "," << r.val_dice << "," << r.val_miou << "\n";
  }
}

}  // namespace ms2d
