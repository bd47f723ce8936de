// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Adapter training in two modes.
//
// icarus: the input runs through two branches. The encoder branch is the
// frozen base model and only supplies keys and values; the decoder branch
// carries the adapters, attends to the encoder's keys and values and
// produces the logits. Nothing on the encoder branch is trainable, so no
// gradient can reach the cache producer.
//
// conventional: one branch, adapters on q, k, v, o and the FFN. The keys and
// values then depend on the adapters, which is what makes such a model's
// cache private to it.

#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "icarus/autograd.hpp"
#include "icarus/errors.hpp"
#include "icarus/model.hpp"

namespace icarus {

enum class TrainMode { icarus, conventional };

inline const char* train_mode_name(TrainMode m) { return m == TrainMode::icarus ? "icarus" : "conventional"; }

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "icarus") return TrainMode::icarus;
  if (s == "conventional") return TrainMode::conventional;
  throw UsageError("unknown training mode '" + s + "' (expected icarus or conventional)");
}

struct TrainConfig {
  double learning_rate = 1e-2;
  size_t steps = 500;
  size_t batch_size = 4;
  size_t seq_len = 32;
  uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_fraction = 0.03;
  TrainMode mode = TrainMode::icarus;
  size_t rank = 8;
  double alpha = 16.0;
  size_t eval_samples = 16;

  void validate() const {
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
    if (batch_size == 0 || seq_len < 2) throw ConfigError("batch size >= 1 and sequence length >= 2 required");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
    if (!(weight_decay >= 0) || !(adam_eps > 0)) throw ConfigError("weight decay >= 0 and eps > 0 required");
    if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ConfigError("warmup fraction must lie in [0, 1)");
    if (rank == 0 || !(alpha > 0)) throw ConfigError("adapter rank and alpha must be positive");
  }
};

// Linear warmup over the first warmup_fraction of steps, then cosine decay
// to zero at the last step.
inline double lr_at(const TrainConfig& c, size_t step) {
  if (c.steps == 0) return c.learning_rate;
  const size_t warm = std::max<size_t>(1, static_cast<size_t>(std::lround(c.warmup_fraction * c.steps)));
  if (step < warm) return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
  if (c.steps <= warm) return c.learning_rate;
  const double t = static_cast<double>(step - warm) / static_cast<double>(c.steps - warm);
  return c.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// Synthetic sequences.
//   copy:   s, s', t, t', ... where s is drawn from a small plain alphabet
//           and s' is its marked copy (s + vocab/2).
//   modadd: a, b, c, ... where c is the marked (a + b) mod alphabet.
class ToyCorpus {
 public:
  ToyCorpus(std::string rule, size_t vocab_size, size_t samples, uint64_t seed, size_t seq_len)
      : rule_(std::move(rule)), vocab_(vocab_size), samples_(samples), seed_(seed), seq_len_(seq_len) {
    bool known = false;
    for (const auto& r : rules()) known = known || r == rule_;
    if (!known) {
      std::string valid;
      for (const auto& r : rules()) valid += (valid.empty() ? "" : ", ") + r;
      throw ConfigError("unknown corpus rule '" + rule_ + "' (valid rules: " + valid + ")");
    }
    if (vocab_ < 4) throw ConfigError("corpus vocabulary must have at least 4 tokens");
    if (samples_ == 0 || seq_len_ < 2) throw ConfigError("corpus needs samples >= 1 and seq_len >= 2");
  }

  static const std::vector<std::string>& rules() {
    static const std::vector<std::string> r{"copy", "modadd"};
    return r;
  }

  const std::string& rule() const { return rule_; }
  size_t vocab_size() const { return vocab_; }
  size_t size() const { return samples_; }
  size_t seq_len() const { return seq_len_; }
  size_t alphabet() const { return std::min<size_t>(16, vocab_ / 2); }
  TokenId marked(TokenId s) const { return s + static_cast<TokenId>(vocab_ / 2); }

  // Sample i depends only on (rule, seed, i).
  std::vector<TokenId> sample(size_t i) const {
    if (i >= samples_) throw IndexError("corpus sample " + std::to_string(i) + " of " + std::to_string(samples_));
    std::mt19937_64 rng(seed_ * 0x100000001b3ULL + i);
    std::uniform_int_distribution<TokenId> sym(0, static_cast<TokenId>(alphabet()) - 1);
    std::vector<TokenId> out;
    out.reserve(seq_len_);
    while (out.size() < seq_len_) {
      if (rule_ == "copy") {
        const TokenId s = sym(rng);
        out.push_back(s);
        out.push_back(marked(s));
      } else {
        const TokenId a = sym(rng), b = sym(rng);
        out.push_back(a);
        out.push_back(b);
        out.push_back(marked((a + b) % static_cast<TokenId>(alphabet())));
      }
    }
    out.resize(seq_len_);
    return out;
  }

 private:
  std::string rule_;
  size_t vocab_;
  size_t samples_;
  uint64_t seed_;
  size_t seq_len_;
};

using Batch = std::vector<std::vector<TokenId>>;

template <typename T>
struct LossAndGrads {
  double loss = 0;
  std::map<std::string, BasicTensor<T>> adapter_grads;  // every adapter tensor
  std::map<std::string, BasicTensor<T>> base_grads;     // every base tensor; zeros unless routed
};

namespace train_detail {

template <typename T>
struct Bound {
  std::map<std::string, Var> base;
  std::map<std::string, Var> adapter;
  Var at(const std::map<std::string, Var>& m, const std::string& k) const { return m.at(k); }
};

template <typename T>
Var lin(Tape<T>& tape, Var x, Var w, const Var* a, const Var* b, T scaling) {
  Var y = tape.matmul(x, w);
  if (!a) return y;
  return tape.add(y, tape.scale(tape.matmul(tape.matmul(x, *a), *b), scaling));
}

// Teacher-forced mean cross entropy of one sequence.
template <typename T>
Var sequence_loss(Tape<T>& tape, const ModelConfig& c, const Bound<T>& bd, TrainMode mode, T scaling,
                  const std::vector<TokenId>& seq) {
  std::vector<int32_t> in(seq.begin(), seq.end() - 1), tgt(seq.begin() + 1, seq.end());
  const T eps = static_cast<T>(c.rms_eps);
  auto B = [&](const std::string& n) { return bd.base.at(n); };
  auto A = [&](const std::string& n) -> const Var* {
    auto it = bd.adapter.find(n);
    return it == bd.adapter.end() ? nullptr : &it->second;
  };
  auto adapted = [&](Var x, size_t l, const char* w, const char* t) {
    const std::string p = "layers." + std::to_string(l) + ".";
    return lin<T>(tape, x, B(p + w), A(p + t + ".a"), A(p + t + ".b"), scaling);
  };
  auto plain = [&](Var x, size_t l, const char* w) {
    return tape.matmul(x, B("layers." + std::to_string(l) + "." + w));
  };

  Var x0 = tape.embedding(B("embedding"), in);

  // Encoder branch (icarus only): base weights, constants throughout.
  std::vector<std::pair<Var, Var>> enc_kv;
  if (mode == TrainMode::icarus) {
    Var h = x0;
    for (size_t l = 0; l < c.num_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Var xn = tape.rms_norm(h, B(p + "attn_norm"), eps);
      Var k = tape.rope(plain(xn, l, "wk"), c.head_dim, 0, c.rope_theta);
      Var v = plain(xn, l, "wv");
      enc_kv.emplace_back(k, v);
      if (l + 1 == c.num_layers) break;  // later layers of the encoder are unused
      Var q = tape.rope(plain(xn, l, "wq"), c.head_dim, 0, c.rope_theta);
      Var att = tape.causal_gqa(q, k, v, c.num_heads, c.num_kv_heads, c.head_dim);
      h = tape.add(h, plain(att, l, "wo"));
      Var xn2 = tape.rms_norm(h, B(p + "ffn_norm"), eps);
      Var g = tape.mul(tape.silu(plain(xn2, l, "w_gate")), plain(xn2, l, "w_up"));
      h = tape.add(h, plain(g, l, "w_down"));
    }
  }

  Var h = x0;
  for (size_t l = 0; l < c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Var xn = tape.rms_norm(h, B(p + "attn_norm"), eps);
    Var q = tape.rope(adapted(xn, l, "wq", "q"), c.head_dim, 0, c.rope_theta);
    Var k, v;
    if (mode == TrainMode::icarus) {
      k = enc_kv[l].first;
      v = enc_kv[l].second;
    } else {
      k = tape.rope(adapted(xn, l, "wk", "k"), c.head_dim, 0, c.rope_theta);
      v = adapted(xn, l, "wv", "v");
    }
    Var att = tape.causal_gqa(q, k, v, c.num_heads, c.num_kv_heads, c.head_dim);
    h = tape.add(h, adapted(att, l, "wo", "o"));
    Var xn2 = tape.rms_norm(h, B(p + "ffn_norm"), eps);
    Var g = tape.mul(tape.silu(adapted(xn2, l, "w_gate", "gate")), adapted(xn2, l, "w_up", "up"));
    h = tape.add(h, adapted(g, l, "w_down", "down"));
  }
  Var logits = tape.matmul(tape.rms_norm(h, B("final_norm"), eps), B("lm_head"));
  return tape.cross_entropy_mean(logits, tgt);
}

template <typename T, typename Adapters>
Var batch_loss(Tape<T>& tape, const BaseWeightsT<T>& base, const Adapters& adapters, TrainMode mode,
               T scaling, const Batch& batch, Bound<T>& bd) {
  if (batch.empty()) throw ConfigError("empty training batch");
  base.for_each([&](const std::string& n, const BasicTensor<T>& t) { bd.base[n] = tape.leaf(t, false, n); });
  adapters.for_each([&](const std::string& n, const BasicTensor<T>& t) { bd.adapter[n] = tape.leaf(t, true, n); });
  std::vector<Var> parts;
  for (const auto& seq : batch) {
    if (seq.size() < 2) throw ConfigError("training sequences need at least two tokens");
    parts.push_back(sequence_loss<T>(tape, base.config(), bd, mode, scaling, seq));
  }
  return tape.scale(tape.sum_scalars(parts), T(1) / static_cast<T>(batch.size()));
}

template <typename T, typename Adapters>
LossAndGrads<T> loss_and_grads(const BaseWeightsT<T>& base, const Adapters& adapters, TrainMode mode, T scaling,
                               const Batch& batch) {
  Tape<T> tape;
  Bound<T> bd;
  Var loss = batch_loss<T>(tape, base, adapters, mode, scaling, batch, bd);
  tape.backward(loss);
  LossAndGrads<T> out;
  out.loss = static_cast<double>(tape.value(loss)[0]);
  for (const auto& [n, v] : bd.base) {
    const BasicTensor<T>* g = tape.grad(v);
    if (g) {
      for (T x : g->data()) {
        if (x != T(0)) throw ContractViolation("nonzero gradient reached base tensor " + n);
      }
    }
    out.base_grads.emplace(n, g ? *g : BasicTensor<T>(tape.value(v).shape()));
  }
  for (const auto& [n, v] : bd.adapter) {
    const BasicTensor<T>* g = tape.grad(v);
    out.adapter_grads.emplace(n, g ? *g : BasicTensor<T>(tape.value(v).shape()));
  }
  return out;
}

template <typename T, typename Adapters>
double loss_only(const BaseWeightsT<T>& base, const Adapters& adapters, TrainMode mode, T scaling,
                 const Batch& batch) {
  Tape<T> tape;
  Bound<T> bd;
  return static_cast<double>(tape.value(batch_loss<T>(tape, base, adapters, mode, scaling, batch, bd))[0]);
}

}  // namespace train_detail

// Loss and gradients of the icarus objective. Throws ContractViolation if
// any base tensor receives a nonzero gradient.
template <typename T>
LossAndGrads<T> icarus_loss_and_grads(const BaseWeightsT<T>& base, const AdapterSetT<T>& adapter,
                                      const Batch& batch) {
  adapter.check_against(base.config());
  return train_detail::loss_and_grads<T>(base, adapter, TrainMode::icarus, adapter.scaling(), batch);
}

template <typename T>
double icarus_loss(const BaseWeightsT<T>& base, const AdapterSetT<T>& adapter, const Batch& batch) {
  return train_detail::loss_only<T>(base, adapter, TrainMode::icarus, adapter.scaling(), batch);
}

template <typename T>
LossAndGrads<T> conventional_loss_and_grads(const BaseWeightsT<T>& base, const ConventionalAdapterSetT<T>& adapter,
                                            const Batch& batch) {
  adapter.decoder.check_against(base.config());
  return train_detail::loss_and_grads<T>(base, adapter, TrainMode::conventional, adapter.scaling(), batch);
}

template <typename T>
double conventional_loss(const BaseWeightsT<T>& base, const ConventionalAdapterSetT<T>& adapter,
                         const Batch& batch) {
  return train_detail::loss_only<T>(base, adapter, TrainMode::conventional, adapter.scaling(), batch);
}

// Decoupled weight decay Adam over named tensors.
template <typename T>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& c) : c_(c) {}

  template <typename Adapters>
  void step(Adapters& params, const std::map<std::string, BasicTensor<T>>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(c_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(c_.beta2, static_cast<double>(t_));
    params.for_each_mutable([&](const std::string& name, BasicTensor<T>& p) {
      const BasicTensor<T>& g = grads.at(name);
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(p.numel(), 0.0);
        st.v.assign(p.numel(), 0.0);
      }
      for (size_t i = 0; i < p.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        st.m[i] = c_.beta1 * st.m[i] + (1 - c_.beta1) * gi;
        st.v[i] = c_.beta2 * st.v[i] + (1 - c_.beta2) * gi * gi;
        const double mh = st.m[i] / bc1, vh = st.v[i] / bc2;
        double x = static_cast<double>(p[i]);
        x -= lr * c_.weight_decay * x;
        x -= lr * mh / (std::sqrt(vh) + c_.adam_eps);
        p[i] = static_cast<T>(x);
      }
    });
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  TrainConfig c_;
  size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

struct StepResult {
  double loss = 0;
  double grad_norm = 0;
  double base_grad_max_abs = 0;
};

namespace train_detail {

template <typename T>
StepResult finish_step(const LossAndGrads<T>& lg) {
  StepResult r;
  r.loss = lg.loss;
  double ss = 0;
  for (const auto& [n, g] : lg.adapter_grads) {
    for (T x : g.data()) ss += static_cast<double>(x) * static_cast<double>(x);
  }
  r.grad_norm = std::sqrt(ss);
  for (const auto& [n, g] : lg.base_grads) {
    for (T x : g.data()) r.base_grad_max_abs = std::max(r.base_grad_max_abs, std::abs(static_cast<double>(x)));
  }
  return r;
}

template <typename T>
void check_frozen(const BaseWeightsT<T>& base) {
  if (!base.freeze_intact()) throw ContractViolation("base weights changed during training");
}

}  // namespace train_detail

template <typename T>
StepResult icarus_train_step(const BaseWeightsT<T>& base, AdapterSetT<T>& adapter, const Batch& batch,
                             AdamW<T>& opt, double lr) {
  auto lg = icarus_loss_and_grads(base, adapter, batch);
  opt.step(adapter, lg.adapter_grads, lr);
  train_detail::check_frozen(base);
  return train_detail::finish_step(lg);
}

template <typename T>
StepResult conventional_train_step(const BaseWeightsT<T>& base, ConventionalAdapterSetT<T>& adapter,
                                   const Batch& batch, AdamW<T>& opt, double lr) {
  auto lg = conventional_loss_and_grads(base, adapter, batch);
  opt.step(adapter, lg.adapter_grads, lr);
  train_detail::check_frozen(base);
  return train_detail::finish_step(lg);
}

class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::vector<double> trace)
      : NumericError(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

template <typename T>
struct TrainResult {
  TrainMode mode = TrainMode::icarus;
  std::vector<double> losses;  // one per step, on that step's batch
  double initial_eval_loss = 0;
  double final_eval_loss = 0;
  AdapterSetT<T> adapter;                    // icarus mode
  ConventionalAdapterSetT<T> conventional;  // conventional mode
};

// Batches are drawn from the corpus by a generator seeded from the config;
// the evaluation set is the last eval_samples corpus entries, never drawn
// for training.
template <typename T>
TrainResult<T> train_loop(const TrainConfig& config, const ToyCorpus& corpus, const BaseWeightsT<T>& base) {
  config.validate();
  if (corpus.vocab_size() != base.config().vocab_size) {
    throw ConfigError("corpus vocabulary " + std::to_string(corpus.vocab_size()) + " != model vocabulary " +
                      std::to_string(base.config().vocab_size));
  }
  if (corpus.size() <= config.eval_samples) throw ConfigError("corpus too small for the evaluation split");
  const size_t train_n = corpus.size() - config.eval_samples;
  Batch eval;
  for (size_t i = train_n; i < corpus.size(); ++i) eval.push_back(corpus.sample(i));

  TrainResult<T> r;
  r.mode = config.mode;
  const bool icarus = config.mode == TrainMode::icarus;
  // Both modes share the decoder-path initialization for a given seed.
  if (icarus) {
    r.adapter = AdapterSetT<T>::init(base.config(), config.rank, config.alpha, config.seed, corpus.rule());
  } else {
    r.conventional =
        ConventionalAdapterSetT<T>::init(base.config(), config.rank, config.alpha, config.seed, corpus.rule());
  }
  auto eval_loss = [&] {
    return icarus ? icarus_loss(base, r.adapter, eval) : conventional_loss(base, r.conventional, eval);
  };
  r.initial_eval_loss = eval_loss();

  AdamW<T> opt(config);
  std::mt19937_64 rng(config.seed ^ 0x5851f42d4c957f2dULL);
  std::uniform_int_distribution<size_t> pick(0, train_n - 1);
  for (size_t step = 0; step < config.steps; ++step) {
    Batch batch;
    for (size_t b = 0; b < config.batch_size; ++b) batch.push_back(corpus.sample(pick(rng)));
    const double lr = lr_at(config, step);
    StepResult s = icarus ? icarus_train_step(base, r.adapter, batch, opt, lr)
                          : conventional_train_step(base, r.conventional, batch, opt, lr);
    r.losses.push_back(s.loss);
    if (!std::isfinite(s.loss)) {
      throw DivergenceError("training diverged at step " + std::to_string(step), r.losses);
    }
  }
  r.final_eval_loss = eval_loss();
  return r;
}

}  // namespace icarus
