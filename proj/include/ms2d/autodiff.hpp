#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "ms2d/tensor.hpp"

namespace ms2d::ad {

// Reverse-mode tape node. Graphs are DAGs of shared nodes; backward() walks a
// topological order and accumulates grads into every node with requires_grad.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

  Tensor& ensure_grad() {
    if (!has_grad) {
      grad = Tensor(value.shape());
      has_grad = true;
    }
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& val() const { return node_->value; }
  Tensor& grad() const;
  bool has_grad() const { return node_ && node_->has_grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() const;
  // In-place value update for optimizer steps; shape must match.
  void set_value(const Tensor& v) const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var leaf(Tensor v, bool requires_grad = true);
Var constant(Tensor v);

// Scalar-root reverse pass. Seeds grad 1 and propagates; leaf grads accumulate
// across calls until zeroed.
void backward(const Var& root);

// Disables graph construction within scope (values still computed).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var mul_const(const Var& a, const Tensor& m);  // constant factor, no grad to m
Var exp_(const Var& a);
Var log_(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// ---- reductions / structure ----
Var sum(const Var& a);   // -> [1]
Var mean(const Var& a);  // -> [1]
Var reshape(const Var& a, std::vector<std::int64_t> shape);
Var gather_rows(const Var& x, std::vector<std::int64_t> rows);                   // [L,C] -> [|rows|,C]
Var gather_flat(const Var& x, std::vector<std::int64_t> idx, std::vector<std::int64_t> out_shape);

// ---- dense layers ----
// y = x w^T + b; x [L,Ci], w [Co,Ci], b [Co] (b may be undefined Var for none).
Var linear(const Var& x, const Var& w, const Var& b);
// Per-row normalization over the last dim: y = gamma * (x-mu)/sqrt(var+eps) + beta.
Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
// y[l,c] = x[l,c] * d[c]
Var col_scale(const Var& x, const Var& d);

// ---- convolution / resampling on H x W x C maps ----
Var depthwise_conv3x3(const Var& x, const Var& k, const Var& b);  // k [C,3,3], zero pad 1
// w [Co,Ci,kh,kw]; asymmetric zero padding (top,left,bottom,right).
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad_top, int pad_left, int pad_bottom,
           int pad_right);
Var bilinear_resize(const Var& x, std::int64_t out_h, std::int64_t out_w);  // corner-aligned

// ---- sequence kernels ----
// u,delta [L,C]; a [C,N] (negative diagonal); bs,cs [L,N].
// y[k,c] = sum_n cs[k,n] h_k(c,n), h_k = exp(delta*a) h_{k-1} + delta*bs*u.
Var selective_scan(const Var& u, const Var& delta, const Var& a, const Var& bs, const Var& cs);

// ---- classification heads ----
Var softmax_rows(const Var& x);  // [P,K]
// Mean negative log-likelihood of integer targets under softmax(logits).
Var cross_entropy_mean(const Var& logits, std::vector<int> targets);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

}  // namespace ms2d::ad
