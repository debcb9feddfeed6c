#include "ms2d/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "ms2d/ssm_core.hpp"

namespace ms2d::ad {

namespace {

thread_local int g_no_grad_depth = 0;

bool grad_enabled() { return g_no_grad_depth == 0; }

std::shared_ptr<Node> make_node(Tensor value, std::vector<std::shared_ptr<Node>> parents,
                                std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || (p && p->requires_grad);
  if (grad_enabled() && rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

void accum(const std::shared_ptr<Node>& p, const Tensor& g) {
  if (!p->requires_grad) return;
  Tensor& dst = p->ensure_grad();
  for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

// Gradient sink with custom element writes.
Tensor& grad_of(const std::shared_ptr<Node>& p) { return p->ensure_grad(); }

}  // namespace

Tensor& Var::grad() const {
  if (!node_ || !node_->has_grad) throw std::logic_error("Var::grad: no gradient present");
  return node_->grad;
}

void Var::zero_grad() const {
  if (node_ && node_->has_grad) node_->grad.fill(0.0);
}

void Var::set_value(const Tensor& v) const {
  if (!node_) throw std::logic_error("Var::set_value on undefined Var");
  check_same_shape(node_->value, v, "Var::set_value");
  node_->value = v;
}

Var leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return Var(n);
}

Var constant(Tensor v) { return leaf(std::move(v), false); }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

void backward(const Var& root) {
  if (!root.defined() || root.val().size() != 1) {
    throw std::invalid_argument("backward: root must be a defined scalar");
  }
  // Iterative post-order topological sort.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->requires_grad && n->backprop && n->has_grad) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "add");
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += b.val()[i];
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    accum(pa, self.grad);
    accum(pb, self.grad);
  }));
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "sub");
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= b.val()[i];
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    accum(pa, self.grad);
    if (pb->requires_grad) {
      Tensor& g = grad_of(pb);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  }));
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "mul");
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= b.val()[i];
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      Tensor& g = grad_of(pb);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  }));
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "div");
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] /= b.val()[i];
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb->value[i];
    }
    if (pb->requires_grad) {
      Tensor& g = grad_of(pb);
      for (std::int64_t i = 0; i < g.size(); ++i)
        g[i] -= self.grad[i] * pa->value[i] / (pb->value[i] * pb->value[i]);
    }
  }));
}

Var scale(const Var& a, double s) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa, s](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    }
  }));
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += s;
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa](Node& self) { accum(pa, self.grad); }));
}

Var mul_const(const Var& a, const Tensor& m) {
  check_same_shape(a.val(), m, "mul_const");
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa, m](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * m[i];
    }
  }));
}

Var exp_(const Var& a) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
    }
  }));
}

Var log_(const Var& a) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pa->value[i];
    }
  }));
}

Var softplus(const Var& a) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ms2d::detail::softplus(out[i]);
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-pa->value[i]));
        g[i] += self.grad[i] * s;
      }
    }
  }));
}

Var sigmoid(const Var& a) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i] * (1.0 - self.value[i]);
    }
  }));
}

Var silu(const Var& a) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-out[i]));
    out[i] = out[i] * s;
  }
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) {
        const double x = pa->value[i];
        const double s = 1.0 / (1.0 + std::exp(-x));
        g[i] += self.grad[i] * s * (1.0 + x * (1.0 - s));
      }
    }
  }));
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, out[i]));
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa, lo, hi](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) {
        const double x = pa->value[i];
        if (x > lo && x < hi) g[i] += self.grad[i];
      }
    }
  }));
}

// ---------------------------------------------------------------------------
// reductions / structure
// ---------------------------------------------------------------------------

Var sum(const Var& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.val().size(); ++i) s += a.val()[i];
  auto pa = a.node();
  return Var(make_node(Tensor::scalar(s), {pa}, [pa](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
    }
  }));
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.val().size());
  double s = 0.0;
  for (std::int64_t i = 0; i < a.val().size(); ++i) s += a.val()[i];
  auto pa = a.node();
  return Var(make_node(Tensor::scalar(s / n), {pa}, [pa, n](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] / n;
    }
  }));
}

Var reshape(const Var& a, std::vector<std::int64_t> shape) {
  Tensor out = a.val().reshaped(std::move(shape));
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  }));
}

Var gather_rows(const Var& x, std::vector<std::int64_t> rows) {
  if (x.val().rank() != 2) throw std::invalid_argument("gather_rows: expects rank-2 input");
  const std::int64_t C = x.val().dim(1);
  Tensor out({static_cast<std::int64_t>(rows.size()), C});
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::int64_t c = 0; c < C; ++c) out[static_cast<std::int64_t>(t) * C + c] = x.val()(rows[t], c);
  auto pa = x.node();
  return Var(make_node(std::move(out), {pa}, [pa, rows = std::move(rows), C](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::size_t t = 0; t < rows.size(); ++t)
        for (std::int64_t c = 0; c < C; ++c) g[rows[t] * C + c] += self.grad[static_cast<std::int64_t>(t) * C + c];
    }
  }));
}

Var gather_flat(const Var& x, std::vector<std::int64_t> idx, std::vector<std::int64_t> out_shape) {
  Tensor out(std::move(out_shape));
  if (out.size() != static_cast<std::int64_t>(idx.size())) {
    throw std::invalid_argument("gather_flat: index count does not match output shape");
  }
  for (std::size_t e = 0; e < idx.size(); ++e) out[static_cast<std::int64_t>(e)] = x.val()[idx[e]];
  auto pa = x.node();
  return Var(make_node(std::move(out), {pa}, [pa, idx = std::move(idx)](Node& self) {
    if (pa->requires_grad) {
      Tensor& g = grad_of(pa);
      for (std::size_t e = 0; e < idx.size(); ++e) g[idx[e]] += self.grad[static_cast<std::int64_t>(e)];
    }
  }));
}

// ---------------------------------------------------------------------------
// dense layers
// ---------------------------------------------------------------------------

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) {
    throw std::invalid_argument("linear: x " + xv.shape_str() + " incompatible with w " + wv.shape_str());
  }
  const std::int64_t L = xv.dim(0), Ci = xv.dim(1), Co = wv.dim(0);
  const bool has_bias = b.defined();
  if (has_bias && (b.val().rank() != 1 || b.val().dim(0) != Co)) {
    throw std::invalid_argument("linear: bias shape mismatch");
  }
  Tensor out({L, Co});
  for (std::int64_t l = 0; l < L; ++l)
    for (std::int64_t o = 0; o < Co; ++o) {
      double acc = has_bias ? b.val()[o] : 0.0;
      for (std::int64_t i = 0; i < Ci; ++i) acc += xv(l, i) * wv(o, i);
      out(l, o) = acc;
    }
  auto px = x.node(), pw = w.node(), pb = has_bias ? b.node() : nullptr;
  std::vector<std::shared_ptr<Node>> parents = {px, pw};
  if (pb) parents.push_back(pb);
  return Var(make_node(std::move(out), std::move(parents), [px, pw, pb, L, Ci, Co](Node& self) {
    if (px->requires_grad) {
      Tensor& gx = grad_of(px);
      for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t i = 0; i < Ci; ++i) {
          double acc = 0.0;
          for (std::int64_t o = 0; o < Co; ++o) acc += self.grad(l, o) * pw->value(o, i);
          gx(l, i) += acc;
        }
    }
    if (pw->requires_grad) {
      Tensor& gw = grad_of(pw);
      for (std::int64_t o = 0; o < Co; ++o)
        for (std::int64_t i = 0; i < Ci; ++i) {
          double acc = 0.0;
          for (std::int64_t l = 0; l < L; ++l) acc += self.grad(l, o) * px->value(l, i);
          gw(o, i) += acc;
        }
    }
    if (pb && pb->requires_grad) {
      Tensor& gb = grad_of(pb);
      for (std::int64_t o = 0; o < Co; ++o) {
        double acc = 0.0;
        for (std::int64_t l = 0; l < L; ++l) acc += self.grad(l, o);
        gb[o] += acc;
      }
    }
  }));
}

Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw std::invalid_argument("layernorm: expects rank-2 [L,C]");
  const std::int64_t L = xv.dim(0), C = xv.dim(1);
  if (gamma.val().dim(0) != C || beta.val().dim(0) != C) throw std::invalid_argument("layernorm: param shape mismatch");
  Tensor out({L, C});
  Tensor xhat({L, C});
  Tensor inv_std({L});
  for (std::int64_t l = 0; l < L; ++l) {
    double mu = 0.0;
    for (std::int64_t c = 0; c < C; ++c) mu += xv(l, c);
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
      const double d = xv(l, c) - mu;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[l] = is;
    for (std::int64_t c = 0; c < C; ++c) {
      xhat(l, c) = (xv(l, c) - mu) * is;
      out(l, c) = gamma.val()[c] * xhat(l, c) + beta.val()[c];
    }
  }
  auto px = x.node(), pg = gamma.node(), pbt = beta.node();
  return Var(make_node(std::move(out), {px, pg, pbt},
                       [px, pg, pbt, xhat = std::move(xhat), inv_std = std::move(inv_std), L, C](Node& self) {
    if (pg->requires_grad) {
      Tensor& gg = grad_of(pg);
      for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::int64_t l = 0; l < L; ++l) acc += self.grad(l, c) * xhat(l, c);
        gg[c] += acc;
      }
    }
    if (pbt->requires_grad) {
      Tensor& gb = grad_of(pbt);
      for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::int64_t l = 0; l < L; ++l) acc += self.grad(l, c);
        gb[c] += acc;
      }
    }
    if (px->requires_grad) {
      Tensor& gx = grad_of(px);
      for (std::int64_t l = 0; l < L; ++l) {
        // dxhat = g * gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
        double m1 = 0.0, m2 = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
          const double dxh = self.grad(l, c) * pg->value[c];
          m1 += dxh;
          m2 += dxh * xhat(l, c);
        }
        m1 /= static_cast<double>(C);
        m2 /= static_cast<double>(C);
        for (std::int64_t c = 0; c < C; ++c) {
          const double dxh = self.grad(l, c) * pg->value[c];
          gx(l, c) += (dxh - m1 - xhat(l, c) * m2) * inv_std[l];
        }
      }
    }
  }));
}

Var col_scale(const Var& x, const Var& d) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2 || d.val().rank() != 1 || d.val().dim(0) != xv.dim(1)) {
    throw std::invalid_argument("col_scale: shape mismatch");
  }
  const std::int64_t L = xv.dim(0), C = xv.dim(1);
  Tensor out({L, C});
  for (std::int64_t l = 0; l < L; ++l)
    for (std::int64_t c = 0; c < C; ++c) out(l, c) = xv(l, c) * d.val()[c];
  auto px = x.node(), pd = d.node();
  return Var(make_node(std::move(out), {px, pd}, [px, pd, L, C](Node& self) {
    if (px->requires_grad) {
      Tensor& gx = grad_of(px);
      for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t c = 0; c < C; ++c) gx(l, c) += self.grad(l, c) * pd->value[c];
    }
    if (pd->requires_grad) {
      Tensor& gd = grad_of(pd);
      for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::int64_t l = 0; l < L; ++l) acc += self.grad(l, c) * px->value(l, c);
        gd[c] += acc;
      }
    }
  }));
}

// ---------------------------------------------------------------------------
// convolution / resampling
// ---------------------------------------------------------------------------

Var depthwise_conv3x3(const Var& x, const Var& k, const Var& b) {
  const Tensor& xv = x.val();
  if (xv.rank() != 3) throw std::invalid_argument("depthwise_conv3x3: expects [H,W,C]");
  const std::int64_t H = xv.dim(0), W = xv.dim(1), C = xv.dim(2);
  if (k.val().shape() != std::vector<std::int64_t>{C, 3, 3} || b.val().dim(0) != C) {
    throw std::invalid_argument("depthwise_conv3x3: kernel/bias shape mismatch");
  }
  Tensor out({H, W, C});
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t w = 0; w < W; ++w)
      for (std::int64_t c = 0; c < C; ++c) {
        double acc = b.val()[c];
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const std::int64_t hh = h + dy, ww = w + dx;
            if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
            acc += xv(hh, ww, c) * k.val()(c, dy + 1, dx + 1);
          }
        out(h, w, c) = acc;
      }
  auto px = x.node(), pk = k.node(), pb = b.node();
  return Var(make_node(std::move(out), {px, pk, pb}, [px, pk, pb, H, W, C](Node& self) {
    if (px->requires_grad) {
      Tensor& gx = grad_of(px);
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w)
          for (std::int64_t c = 0; c < C; ++c) {
            const double g = self.grad(h, w, c);
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const std::int64_t hh = h + dy, ww = w + dx;
                if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
                gx(hh, ww, c) += g * pk->value(c, dy + 1, dx + 1);
              }
          }
    }
    if (pk->requires_grad) {
      Tensor& gk = grad_of(pk);
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w)
          for (std::int64_t c = 0; c < C; ++c) {
            const double g = self.grad(h, w, c);
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const std::int64_t hh = h + dy, ww = w + dx;
                if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
                gk(c, dy + 1, dx + 1) += g * px->value(hh, ww, c);
              }
          }
    }
    if (pb->requires_grad) {
      Tensor& gb = grad_of(pb);
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w)
          for (std::int64_t c = 0; c < C; ++c) gb[c] += self.grad(h, w, c);
    }
  }));
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad_top, int pad_left, int pad_bottom,
           int pad_right) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.dim(2)) {
    throw std::invalid_argument("conv2d: x " + xv.shape_str() + " incompatible with w " + wv.shape_str());
  }
  const std::int64_t H = xv.dim(0), W = xv.dim(1), Ci = xv.dim(2);
  const std::int64_t Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (b.val().dim(0) != Co) throw std::invalid_argument("conv2d: bias shape mismatch");
  const std::int64_t Ho = (H + pad_top + pad_bottom - kh) / stride + 1;
  const std::int64_t Wo = (W + pad_left + pad_right - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: output would be empty");
  Tensor out({Ho, Wo, Co});
  for (std::int64_t ho = 0; ho < Ho; ++ho)
    for (std::int64_t wo = 0; wo < Wo; ++wo)
      for (std::int64_t o = 0; o < Co; ++o) {
        double acc = b.val()[o];
        for (std::int64_t dy = 0; dy < kh; ++dy)
          for (std::int64_t dx = 0; dx < kw; ++dx) {
            const std::int64_t hh = ho * stride + dy - pad_top;
            const std::int64_t ww = wo * stride + dx - pad_left;
            if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
            for (std::int64_t i = 0; i < Ci; ++i) acc += xv(hh, ww, i) * wv[((o * Ci + i) * kh + dy) * kw + dx];
          }
        out(ho, wo, o) = acc;
      }
  auto px = x.node(), pw = w.node(), pb = b.node();
  return Var(make_node(std::move(out), {px, pw, pb},
                       [px, pw, pb, H, W, Ci, Co, kh, kw, Ho, Wo, stride, pad_top, pad_left](Node& self) {
    for (std::int64_t ho = 0; ho < Ho; ++ho)
      for (std::int64_t wo = 0; wo < Wo; ++wo)
        for (std::int64_t o = 0; o < Co; ++o) {
          const double g = self.grad(ho, wo, o);
          if (pb->requires_grad) grad_of(pb)[o] += g;
          for (std::int64_t dy = 0; dy < kh; ++dy)
            for (std::int64_t dx = 0; dx < kw; ++dx) {
              const std::int64_t hh = ho * stride + dy - pad_top;
              const std::int64_t ww = wo * stride + dx - pad_left;
              if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
              for (std::int64_t i = 0; i < Ci; ++i) {
                const std::int64_t wi = ((o * Ci + i) * kh + dy) * kw + dx;
                if (px->requires_grad) grad_of(px)(hh, ww, i) += g * pw->value[wi];
                if (pw->requires_grad) grad_of(pw)[wi] += g * px->value(hh, ww, i);
              }
            }
        }
  }));
}

namespace {

inline void bilinear_corners(std::int64_t t, double s, std::int64_t n, std::int64_t& i0, std::int64_t& i1, double& f) {
  const double src = static_cast<double>(t) * s;
  i0 = static_cast<std::int64_t>(std::floor(src));
  if (i0 > n - 1) i0 = n - 1;
  i1 = std::min<std::int64_t>(i0 + 1, n - 1);
  f = src - static_cast<double>(i0);
}

}  // namespace

Var bilinear_resize(const Var& x, std::int64_t out_h, std::int64_t out_w) {
  const Tensor& xv = x.val();
  if (xv.rank() != 3) throw std::invalid_argument("bilinear_resize: expects [H,W,C]");
  const std::int64_t H = xv.dim(0), W = xv.dim(1), C = xv.dim(2);
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_resize: bad output size");
  const double sh = out_h > 1 ? static_cast<double>(H - 1) / static_cast<double>(out_h - 1) : 0.0;
  const double sw = out_w > 1 ? static_cast<double>(W - 1) / static_cast<double>(out_w - 1) : 0.0;
  Tensor out({out_h, out_w, C});
  const auto& corners = bilinear_corners;
  for (std::int64_t ho = 0; ho < out_h; ++ho) {
    std::int64_t y0, y1;
    double fy;
    corners(ho, sh, H, y0, y1, fy);
    for (std::int64_t wo = 0; wo < out_w; ++wo) {
      std::int64_t x0, x1;
      double fx;
      corners(wo, sw, W, x0, x1, fx);
      for (std::int64_t c = 0; c < C; ++c) {
        const double top = (1.0 - fx) * xv(y0, x0, c) + fx * xv(y0, x1, c);
        const double bot = (1.0 - fx) * xv(y1, x0, c) + fx * xv(y1, x1, c);
        out(ho, wo, c) = (1.0 - fy) * top + fy * bot;
      }
    }
  }
  auto px = x.node();
  return Var(make_node(std::move(out), {px}, [px, H, W, C, out_h, out_w, sh, sw](Node& self) {
    if (!px->requires_grad) return;
    Tensor& gx = grad_of(px);
    for (std::int64_t ho = 0; ho < out_h; ++ho) {
      std::int64_t y0, y1;
      double fy;
      bilinear_corners(ho, sh, H, y0, y1, fy);
      for (std::int64_t wo = 0; wo < out_w; ++wo) {
        std::int64_t x0, x1;
        double fx;
        bilinear_corners(wo, sw, W, x0, x1, fx);
        for (std::int64_t c = 0; c < C; ++c) {
          const double g = self.grad(ho, wo, c);
          gx(y0, x0, c) += g * (1.0 - fy) * (1.0 - fx);
          gx(y0, x1, c) += g * (1.0 - fy) * fx;
          gx(y1, x0, c) += g * fy * (1.0 - fx);
          gx(y1, x1, c) += g * fy * fx;
        }
      }
    }
  }));
}

// ---------------------------------------------------------------------------
// selective scan (BPTT)
// ---------------------------------------------------------------------------

Var selective_scan(const Var& u, const Var& delta, const Var& a, const Var& bs, const Var& cs) {
  const Tensor& uv = u.val();
  if (uv.rank() != 2) throw std::invalid_argument("selective_scan: u must be [L,C]");
  const std::int64_t L = uv.dim(0), C = uv.dim(1);
  check_same_shape(uv, delta.val(), "selective_scan(delta)");
  if (a.val().rank() != 2 || a.val().dim(0) != C) throw std::invalid_argument("selective_scan: a must be [C,N]");
  const std::int64_t N = a.val().dim(1);
  if (bs.val().shape() != std::vector<std::int64_t>{L, N} || cs.val().shape() != std::vector<std::int64_t>{L, N}) {
    throw std::invalid_argument("selective_scan: bs/cs must be [L,N]");
  }

  Tensor y({L, C});
  std::vector<double> h_all(static_cast<std::size_t>(L * C * N));
  ms2d::detail::selective_scan_kernel(L, C, N, uv.data(), delta.val().data(), a.val().data(), bs.val().data(),
                                      cs.val().data(), y.data(), h_all.data());

  auto pu = u.node(), pd = delta.node(), pa = a.node(), pbs = bs.node(), pcs = cs.node();
  return Var(make_node(std::move(y), {pu, pd, pa, pbs, pcs},
                       [pu, pd, pa, pbs, pcs, h_all = std::move(h_all), L, C, N](Node& self) {
    const Tensor& uv = pu->value;
    const Tensor& dv = pd->value;
    const Tensor& av = pa->value;
    const Tensor& bv = pbs->value;
    const Tensor& cv = pcs->value;
    Tensor gu({L, C}), gd({L, C}), ga({C, N}), gb({L, N}), gc({L, N});
    std::vector<double> carry(static_cast<std::size_t>(C * N), 0.0);
    for (std::int64_t k = L - 1; k >= 0; --k) {
      for (std::int64_t c = 0; c < C; ++c) {
        const double gy = self.grad(k, c);
        const double dk = dv(k, c);
        const double xk = uv(k, c);
        double gdelta_acc = 0.0, gu_acc = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const std::size_t at = static_cast<std::size_t>((k * C + c) * N + n);
          const double h_k = h_all[at];
          const double h_prev = k > 0 ? h_all[at - static_cast<std::size_t>(C * N)] : 0.0;
          const double abar = std::exp(dk * av(c, n));
          gc(k, n) += gy * h_k;
          const double G = gy * cv(k, n) + carry[static_cast<std::size_t>(c * N + n)];
          // h_k = abar*h_prev + dk*b*x
          const double gabar = G * h_prev;
          gdelta_acc += gabar * abar * av(c, n) + G * bv(k, n) * xk;
          ga(c, n) += gabar * abar * dk;
          gb(k, n) += G * dk * xk;
          gu_acc += G * dk * bv(k, n);
          carry[static_cast<std::size_t>(c * N + n)] = G * abar;
        }
        gd(k, c) = gdelta_acc;
        gu(k, c) = gu_acc;
      }
    }
    accum(pu, gu);
    accum(pd, gd);
    accum(pa, ga);
    accum(pbs, gb);
    accum(pcs, gc);
  }));
}

// ---------------------------------------------------------------------------
// classification heads
// ---------------------------------------------------------------------------

Var softmax_rows(const Var& x) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw std::invalid_argument("softmax_rows: expects [P,K]");
  const std::int64_t P = xv.dim(0), K = xv.dim(1);
  Tensor out({P, K});
  for (std::int64_t p = 0; p < P; ++p) {
    double m = xv(p, 0);
    for (std::int64_t k = 1; k < K; ++k) m = std::max(m, xv(p, k));
    double z = 0.0;
    for (std::int64_t k = 0; k < K; ++k) z += std::exp(xv(p, k) - m);
    for (std::int64_t k = 0; k < K; ++k) out(p, k) = std::exp(xv(p, k) - m) / z;
  }
  auto px = x.node();
  return Var(make_node(std::move(out), {px}, [px, P, K](Node& self) {
    if (!px->requires_grad) return;
    Tensor& gx = grad_of(px);
    for (std::int64_t p = 0; p < P; ++p) {
      double dot = 0.0;
      for (std::int64_t k = 0; k < K; ++k) dot += self.grad(p, k) * self.value(p, k);
      for (std::int64_t k = 0; k < K; ++k) gx(p, k) += self.value(p, k) * (self.grad(p, k) - dot);
    }
  }));
}

Var cross_entropy_mean(const Var& logits, std::vector<int> targets) {
  const Tensor& xv = logits.val();
  if (xv.rank() != 2) throw std::invalid_argument("cross_entropy_mean: expects [P,K]");
  const std::int64_t P = xv.dim(0), K = xv.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != P) {
    throw std::invalid_argument("cross_entropy_mean: target count mismatch");
  }
  for (int t : targets)
    if (t < 0 || t >= K) throw std::invalid_argument("cross_entropy_mean: class index out of range");
  Tensor probs({P, K});
  double loss = 0.0;
  for (std::int64_t p = 0; p < P; ++p) {
    double m = xv(p, 0);
    for (std::int64_t k = 1; k < K; ++k) m = std::max(m, xv(p, k));
    double z = 0.0;
    for (std::int64_t k = 0; k < K; ++k) z += std::exp(xv(p, k) - m);
    const double lse = m + std::log(z);
    loss += lse - xv(p, targets[static_cast<std::size_t>(p)]);
    for (std::int64_t k = 0; k < K; ++k) probs(p, k) = std::exp(xv(p, k) - m) / z;
  }
  loss /= static_cast<double>(P);
  auto px = logits.node();
  return Var(make_node(Tensor::scalar(loss), {px},
                       [px, probs = std::move(probs), targets = std::move(targets), P, K](Node& self) {
    if (!px->requires_grad) return;
    Tensor& gx = grad_of(px);
    const double g = self.grad[0] / static_cast<double>(P);
    for (std::int64_t p = 0; p < P; ++p)
      for (std::int64_t k = 0; k < K; ++k) {
        const double onehot = k == targets[static_cast<std::size_t>(p)] ? 1.0 : 0.0;
        gx(p, k) += g * (probs(p, k) - onehot);
      }
  }));
}

}  // namespace ms2d::ad
