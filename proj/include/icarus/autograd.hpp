// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "icarus/errors.hpp"
#include "icarus/tensor.hpp"

namespace icarus {

// Handle to a value recorded on a Tape.
struct Var {
  size_t id = 0;
};

// Reverse-mode tape over 2-D tensors. A node requires a gradient iff it is a
// trainable leaf or depends on one; gradient buffers are only ever allocated
// for such nodes, so frozen leaves never own a gradient.
template <typename T>
class Tape {
 public:
  Var leaf(BasicTensor<T> value, bool trainable, std::string name = {}) {
    nodes_.push_back(Node{std::move(value), std::nullopt, trainable, true, std::move(name), {}});
    return {nodes_.size() - 1};
  }

  Var constant(BasicTensor<T> value) { return leaf(std::move(value), false); }

  const BasicTensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool is_leaf(Var v) const { return nodes_.at(v.id).leaf; }
  const std::string& name(Var v) const { return nodes_.at(v.id).name; }
  size_t size() const { return nodes_.size(); }

  // nullptr when the node never received a gradient buffer.
  const BasicTensor<T>* grad(Var v) const {
    const auto& g = nodes_.at(v.id).grad;
    return g ? &*g : nullptr;
  }

  // Leaves that own a gradient buffer after backward().
  std::vector<Var> leaves_with_grad() const {
    std::vector<Var> out;
    for (size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].leaf && nodes_[i].grad) out.push_back({i});
    }
    return out;
  }

  void backward(Var loss) {
    Node& root = nodes_.at(loss.id);
    if (root.value.numel() != 1) {
      throw DimensionError("backward needs a scalar loss, got " +
                           shape_str(root.value.shape()));
    }
    if (!root.requires_grad) return;
    root.grad = BasicTensor<T>(root.value.shape(), T(1));
    for (size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad && n.backward) n.backward(*n.grad);
    }
  }

  // ---- differentiable ops ----

  Var matmul(Var a, Var b) {
    auto out = icarus::matmul(value(a), value(b));
    return record(std::move(out), {a, b}, [this, a, b](const BasicTensor<T>& g) {
      if (requires_grad(a)) accumulate(a, matmul_nt(g, value(b)));
      if (requires_grad(b)) accumulate(b, matmul_tn(value(a), g));
    });
  }

  Var add(Var a, Var b) {
    BasicTensor<T> out = value(a);
    if (out.shape() != value(b).shape()) {
      throw DimensionError("add " + shape_str(out.shape()) + " + " +
                           shape_str(value(b).shape()));
    }
    add_inplace(out, value(b));
    return record(std::move(out), {a, b}, [this, a, b](const BasicTensor<T>& g) {
      if (requires_grad(a)) accumulate(a, g);
      if (requires_grad(b)) accumulate(b, g);
    });
  }

  Var scale(Var a, T s) {
    BasicTensor<T> out = value(a);
    for (T& v : out.data()) v *= s;
    return record(std::move(out), {a}, [this, a, s](const BasicTensor<T>& g) {
      BasicTensor<T> d = g;
      for (T& v : d.data()) v *= s;
      accumulate(a, d);
    });
  }

  Var mul(Var a, Var b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.shape() != bv.shape()) {
      throw DimensionError("mul " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
    }
    BasicTensor<T> out(av.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    return record(std::move(out), {a, b}, [this, a, b](const BasicTensor<T>& g) {
      const auto& av = value(a);
      const auto& bv = value(b);
      if (requires_grad(a)) {
        BasicTensor<T> d(g.shape());
        for (size_t i = 0; i < d.numel(); ++i) d[i] = g[i] * bv[i];
        accumulate(a, d);
      }
      if (requires_grad(b)) {
        BasicTensor<T> d(g.shape());
        for (size_t i = 0; i < d.numel(); ++i) d[i] = g[i] * av[i];
        accumulate(b, d);
      }
    });
  }

  Var silu(Var a) {
    auto out = icarus::silu(value(a));
    return record(std::move(out), {a}, [this, a](const BasicTensor<T>& g) {
      const auto& x = value(a);
      BasicTensor<T> d(x.shape());
      for (size_t i = 0; i < d.numel(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-x[i]));
        d[i] = g[i] * s * (T(1) + x[i] * (T(1) - s));
      }
      accumulate(a, d);
    });
  }

  Var rms_norm(Var x, Var gain, T eps) {
    auto out = icarus::rms_norm(value(x), value(gain), eps);
    return record(std::move(out), {x, gain}, [this, x, gain, eps](const BasicTensor<T>& g) {
      const auto& xv = value(x);
      const auto& gv = value(gain);
      const size_t n = xv.cols();
      BasicTensor<T> dx(xv.shape());
      BasicTensor<T> dg(gv.shape());
      for (size_t r = 0; r < xv.rows(); ++r) {
        auto xr = xv.row(r);
        auto gr = g.row(r);
        T ss = 0;
        for (T v : xr) ss += v * v;
        const T inv = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
        T dot = 0;
        for (size_t i = 0; i < n; ++i) dot += gr[i] * gv[i] * xr[i];
        const T k = inv * inv * inv * dot / static_cast<T>(n);
        for (size_t i = 0; i < n; ++i) {
          dx(r, i) = inv * gv[i] * gr[i] - k * xr[i];
          dg[i] += gr[i] * xr[i] * inv;
        }
      }
      if (requires_grad(x)) accumulate(x, dx);
      if (requires_grad(gain)) accumulate(gain, dg);
    });
  }

  // Row r is rotated as position start_pos + r.
  Var rope(Var x, size_t head_dim, size_t start_pos, double theta) {
    BasicTensor<T> out = value(x);
    for (size_t r = 0; r < out.rows(); ++r) rope_inplace<T>(out.row(r), head_dim, start_pos + r, theta);
    return record(std::move(out), {x}, [this, x, head_dim, start_pos, theta](const BasicTensor<T>& g) {
      BasicTensor<T> d = g;
      for (size_t r = 0; r < d.rows(); ++r) {
        rope_inplace<T>(d.row(r), head_dim, start_pos + r, theta, /*inverse=*/true);
      }
      accumulate(x, d);
    });
  }

  // Causal grouped-query attention over one sequence.
  // q: [S, H*dk], k, v: [S, Hkv*dk] -> [S, H*dk]
  Var causal_gqa(Var q, Var k, Var v, size_t n_heads, size_t n_kv_heads, size_t head_dim) {
    const auto& qv = value(q);
    const auto& kv = value(k);
    const auto& vv = value(v);
    const size_t s = qv.rows();
    if (qv.cols() != n_heads * head_dim || kv.cols() != n_kv_heads * head_dim ||
        vv.cols() != n_kv_heads * head_dim || kv.rows() != s || vv.rows() != s) {
      throw DimensionError("causal_gqa shapes q" + shape_str(qv.shape()) + " k" +
                           shape_str(kv.shape()) + " v" + shape_str(vv.shape()));
    }
    const size_t group = n_heads / n_kv_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    // probs[(i*H + h)*S + j]
    auto probs = std::make_shared<std::vector<T>>(s * n_heads * s, T(0));
    BasicTensor<T> out({s, n_heads * head_dim});
    for (size_t i = 0; i < s; ++i) {
      for (size_t h = 0; h < n_heads; ++h) {
        const size_t kvh = h / group;
        const T* qi = &qv(i, h * head_dim);
        T* p = probs->data() + (i * n_heads + h) * s;
        for (size_t j = 0; j <= i; ++j) {
          const T* kj = &kv(j, kvh * head_dim);
          T dot = 0;
          for (size_t d = 0; d < head_dim; ++d) dot += qi[d] * kj[d];
          p[j] = dot * scale;
        }
        softmax_inplace(std::span<T>(p, i + 1));
        T* o = &out(i, h * head_dim);
        for (size_t j = 0; j <= i; ++j) {
          const T* vj = &vv(j, kvh * head_dim);
          for (size_t d = 0; d < head_dim; ++d) o[d] += p[j] * vj[d];
        }
      }
    }
    return record(std::move(out), {q, k, v},
                  [this, q, k, v, probs, s, n_heads, group, head_dim, scale](const BasicTensor<T>& g) {
      const auto& qv = value(q);
      const auto& kv = value(k);
      const auto& vv = value(v);
      BasicTensor<T> dq(qv.shape()), dk(kv.shape()), dv(vv.shape());
      std::vector<T> dp(s);
      for (size_t i = 0; i < s; ++i) {
        for (size_t h = 0; h < n_heads; ++h) {
          const size_t kvh = h / group;
          const T* p = probs->data() + (i * n_heads + h) * s;
          const T* go = &g(i, h * head_dim);
          T weighted = 0;
          for (size_t j = 0; j <= i; ++j) {
            const T* vj = &vv(j, kvh * head_dim);
            T* dvj = &dv(j, kvh * head_dim);
            T acc = 0;
            for (size_t d = 0; d < head_dim; ++d) {
              acc += go[d] * vj[d];
              dvj[d] += p[j] * go[d];
            }
            dp[j] = acc;
            weighted += p[j] * acc;
          }
          const T* qi = &qv(i, h * head_dim);
          T* dqi = &dq(i, h * head_dim);
          for (size_t j = 0; j <= i; ++j) {
            const T ds = p[j] * (dp[j] - weighted) * scale;
            const T* kj = &kv(j, kvh * head_dim);
            T* dkj = &dk(j, kvh * head_dim);
            for (size_t d = 0; d < head_dim; ++d) {
              dqi[d] += ds * kj[d];
              dkj[d] += ds * qi[d];
            }
          }
        }
      }
      if (requires_grad(q)) accumulate(q, dq);
      if (requires_grad(k)) accumulate(k, dk);
      if (requires_grad(v)) accumulate(v, dv);
    });
  }

  Var embedding(Var table, std::span<const int32_t> ids) {
    const auto& tv = value(table);
    const size_t d = tv.cols();
    BasicTensor<T> out({ids.size(), d});
    for (size_t r = 0; r < ids.size(); ++r) {
      const auto id = static_cast<size_t>(ids[r]);
      if (id >= tv.rows()) throw IndexError("token id " + std::to_string(ids[r]) + " outside embedding table");
      std::copy_n(tv.row(id).begin(), d, out.row(r).begin());
    }
    std::vector<int32_t> idv(ids.begin(), ids.end());
    return record(std::move(out), {table}, [this, table, idv](const BasicTensor<T>& g) {
      BasicTensor<T> d(value(table).shape());
      for (size_t r = 0; r < idv.size(); ++r) {
        auto dst = d.row(static_cast<size_t>(idv[r]));
        auto src = g.row(r);
        for (size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
      }
      accumulate(table, d);
    });
  }

  // Mean over rows of -log softmax(logits[r])[targets[r]]; returns a [1] node.
  Var cross_entropy_mean(Var logits, std::span<const int32_t> targets) {
    const auto& lv = value(logits);
    if (targets.size() != lv.rows()) {
      throw DimensionError("cross_entropy_mean: " + std::to_string(targets.size()) +
                           " targets for " + std::to_string(lv.rows()) + " rows");
    }
    T total = 0;
    for (size_t r = 0; r < lv.rows(); ++r) {
      total += icarus::cross_entropy<T>(lv.row(r), static_cast<size_t>(targets[r]));
    }
    const T inv_n = T(1) / static_cast<T>(lv.rows());
    BasicTensor<T> out({1}, std::vector<T>{total * inv_n});
    std::vector<int32_t> tv(targets.begin(), targets.end());
    return record(std::move(out), {logits}, [this, logits, tv, inv_n](const BasicTensor<T>& g) {
      BasicTensor<T> d = softmax_lastdim(value(logits));
      for (size_t r = 0; r < d.rows(); ++r) {
        d(r, static_cast<size_t>(tv[r])) -= T(1);
        for (T& x : d.row(r)) x *= g[0] * inv_n;
      }
      accumulate(logits, d);
    });
  }

  Var sum_scalars(std::span<const Var> parts) {
    T total = 0;
    std::vector<Var> ps(parts.begin(), parts.end());
    for (Var p : ps) total += value(p)[0];
    return record(BasicTensor<T>({1}, std::vector<T>{total}), ps, [this, ps](const BasicTensor<T>& g) {
      for (Var p : ps) {
        if (requires_grad(p)) accumulate(p, g);
      }
    });
  }

 private:
  struct Node {
    BasicTensor<T> value;
    std::optional<BasicTensor<T>> grad;
    bool requires_grad = false;
    bool leaf = false;
    std::string name;
    std::function<void(const BasicTensor<T>&)> backward;
  };

  Var record(BasicTensor<T> value, std::initializer_list<Var> inputs,
             std::function<void(const BasicTensor<T>&)> bw) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(bw));
  }

  Var record(BasicTensor<T> value, const std::vector<Var>& inputs,
             std::function<void(const BasicTensor<T>&)> bw) {
    bool rg = false;
    for (Var in : inputs) rg = rg || requires_grad(in);
    nodes_.push_back(Node{std::move(value), std::nullopt, rg, false, {}, rg ? std::move(bw) : nullptr});
    return {nodes_.size() - 1};
  }

  void accumulate(Var v, const BasicTensor<T>& g) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    if (!n.grad) {
      n.grad = g.shape() == n.value.shape() ? g : g.reshaped(n.value.shape());
      return;
    }
    add_inplace(*n.grad, g);
  }

  std::vector<Node> nodes_;
};

}  // namespace icarus
