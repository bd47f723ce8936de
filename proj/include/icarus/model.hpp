// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Decoder-only transformer parameters. The frozen base weights are the
// single KV producer shared by every task; each task's adapter set only
// touches the query/output projections and the FFN, so its cache is the
// base model's cache by construction.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "icarus/errors.hpp"
#include "icarus/hash.hpp"
#include "icarus/tensor.hpp"

namespace icarus {

using TokenId = int32_t;

struct ModelConfig {
  size_t num_layers = 4;
  size_t hidden = 64;
  size_t num_heads = 4;
  size_t num_kv_heads = 2;
  size_t head_dim = 16;
  size_t ffn_dim = 256;
  size_t vocab_size = 256;
  double rope_theta = 10000.0;
  double rms_eps = 1e-6;
  int precision_bits = 32;
  size_t max_context = 4096;

  // 2-layer configuration used for gradient checks.
  static ModelConfig toy() {
    ModelConfig c;
    c.num_layers = 2;
    c.hidden = 16;
    c.num_heads = 4;
    c.num_kv_heads = 2;
    c.head_dim = 4;
    c.ffn_dim = 32;
    c.vocab_size = 24;
    c.precision_bits = 64;
    return c;
  }

  size_t q_dim() const { return num_heads * head_dim; }
  size_t kv_dim() const { return num_kv_heads * head_dim; }
  size_t group_size() const { return num_heads / num_kv_heads; }

  // K and V for one token across all layers.
  size_t kv_bytes_per_token(size_t scalar_bytes = sizeof(float)) const {
    return 2 * num_layers * kv_dim() * scalar_bytes;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (num_layers == 0 || hidden == 0 || num_heads == 0 || num_kv_heads == 0 ||
        head_dim == 0 || ffn_dim == 0 || vocab_size == 0) {
      fail("all dimensions must be positive");
    }
    if (num_heads % num_kv_heads != 0) {
      fail("query heads (" + std::to_string(num_heads) + ") not divisible by kv heads (" +
           std::to_string(num_kv_heads) + ")");
    }
    if (hidden != num_heads * head_dim) {
      fail("hidden (" + std::to_string(hidden) + ") != heads * head_dim (" +
           std::to_string(num_heads * head_dim) + ")");
    }
    if (head_dim % 2 != 0) fail("head_dim must be even for rotary embeddings");
    if (precision_bits != 32 && precision_bits != 64) fail("precision must be 32 or 64");
    if (!(rms_eps > 0) || !(rope_theta > 1)) fail("rms_eps > 0 and rope_theta > 1 required");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerWeightsT {
  BasicTensor<T> wq;         // [hidden, q_dim]
  BasicTensor<T> wk;         // [hidden, kv_dim]
  BasicTensor<T> wv;         // [hidden, kv_dim]
  BasicTensor<T> wo;         // [q_dim, hidden]
  BasicTensor<T> w_gate;     // [hidden, ffn]
  BasicTensor<T> w_up;       // [hidden, ffn]
  BasicTensor<T> w_down;     // [ffn, hidden]
  BasicTensor<T> attn_norm;  // [hidden]
  BasicTensor<T> ffn_norm;   // [hidden]
};

template <typename T>
class BaseWeightsT {
 public:
  using Layer = LayerWeightsT<T>;

  // Normal(0, 1/fan_in) for projections, Normal(0, 1) embeddings, unit gains.
  static BaseWeightsT init(const ModelConfig& config, uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    auto normal = [&](Shape shape, double stddev) {
      std::normal_distribution<double> dist(0.0, stddev);
      BasicTensor<T> t(std::move(shape));
      for (T& v : t.data()) v = static_cast<T>(dist(rng));
      return t;
    };
    auto proj = [&](size_t in, size_t out) {
      return normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
    };
    const auto& c = config;
    BaseWeightsT w;
    w.config_ = c;
    w.embedding_ = normal({c.vocab_size, c.hidden}, 1.0);
    for (size_t l = 0; l < c.num_layers; ++l) {
      Layer layer;
      layer.wq = proj(c.hidden, c.q_dim());
      layer.wk = proj(c.hidden, c.kv_dim());
      layer.wv = proj(c.hidden, c.kv_dim());
      layer.wo = proj(c.q_dim(), c.hidden);
      layer.w_gate = proj(c.hidden, c.ffn_dim);
      layer.w_up = proj(c.hidden, c.ffn_dim);
      layer.w_down = proj(c.ffn_dim, c.hidden);
      layer.attn_norm = BasicTensor<T>({c.hidden}, T(1));
      layer.ffn_norm = BasicTensor<T>({c.hidden}, T(1));
      w.layers_.push_back(std::move(layer));
    }
    w.final_norm_ = BasicTensor<T>({c.hidden}, T(1));
    w.lm_head_ = proj(c.hidden, c.vocab_size);
    w.freeze_hash_ = w.compute_hash();
    return w;
  }

  // Rebuilds weights from named tensors (checkpoint loading). Shapes are
  // checked against the config.
  static BaseWeightsT from_named(const ModelConfig& config,
                                 const std::function<BasicTensor<T>(const std::string&, Shape)>& get) {
    config.validate();
    BaseWeightsT w;
    w.config_ = config;
    w.visit_mutable([&](const std::string& name, BasicTensor<T>& t, Shape shape) {
      t = get(name, shape);
      if (t.shape() != shape) {
        throw ConfigError("tensor " + name + " has shape " + shape_str(t.shape()) +
                          ", config expects " + shape_str(shape));
      }
    });
    w.freeze_hash_ = w.compute_hash();
    return w;
  }

  const ModelConfig& config() const { return config_; }
  const BasicTensor<T>& embedding() const { return embedding_; }
  const Layer& layer(size_t i) const { return layers_.at(i); }
  const BasicTensor<T>& final_norm() const { return final_norm_; }
  const BasicTensor<T>& lm_head() const { return lm_head_; }

  // Hash recorded at construction; the freeze witness.
  uint64_t freeze_hash() const { return freeze_hash_; }
  bool freeze_intact() const { return compute_hash() == freeze_hash_; }

  uint64_t compute_hash() const {
    Fnv1a h;
    for_each([&](const std::string& name, const BasicTensor<T>& t) {
      h.str(name);
      for (size_t d : t.shape()) h.value(static_cast<uint64_t>(d));
      h.span<T>(t.data());
    });
    return h.digest();
  }

  // Visits every tensor in a fixed order with a stable name.
  void for_each(const std::function<void(const std::string&, const BasicTensor<T>&)>& fn) const {
    const_cast<BaseWeightsT*>(this)->visit_mutable(
        [&](const std::string& name, BasicTensor<T>& t, const Shape&) { fn(name, t); });
  }

  // Bytes of the matrices read by one full forward pass over one token.
  size_t linear_bytes() const {
    size_t n = lm_head_.numel();
    for (const auto& l : layers_) {
      n += l.wq.numel() + l.wk.numel() + l.wv.numel() + l.wo.numel() + l.w_gate.numel() +
           l.w_up.numel() + l.w_down.numel();
    }
    return n * sizeof(T);
  }

  template <typename U>
  BaseWeightsT<U> cast() const {
    return BaseWeightsT<U>::from_named(config_, [&](const std::string& name, const Shape&) {
      BasicTensor<U> out;
      for_each([&](const std::string& n, const BasicTensor<T>& t) {
        if (n == name) out = t.template cast<U>();
      });
      return out;
    });
  }

 private:
  template <typename>
  friend class BaseWeightsT;

  void visit_mutable(const std::function<void(const std::string&, BasicTensor<T>&, Shape)>& fn) {
    const auto& c = config_;
    fn("embedding", embedding_, {c.vocab_size, c.hidden});
    layers_.resize(c.num_layers);
    for (size_t l = 0; l < c.num_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& L = layers_[l];
      fn(p + "wq", L.wq, {c.hidden, c.q_dim()});
      fn(p + "wk", L.wk, {c.hidden, c.kv_dim()});
      fn(p + "wv", L.wv, {c.hidden, c.kv_dim()});
      fn(p + "wo", L.wo, {c.q_dim(), c.hidden});
      fn(p + "w_gate", L.w_gate, {c.hidden, c.ffn_dim});
      fn(p + "w_up", L.w_up, {c.hidden, c.ffn_dim});
      fn(p + "w_down", L.w_down, {c.ffn_dim, c.hidden});
      fn(p + "attn_norm", L.attn_norm, {c.hidden});
      fn(p + "ffn_norm", L.ffn_norm, {c.hidden});
    }
    fn("final_norm", final_norm_, {c.hidden});
    fn("lm_head", lm_head_, {c.hidden, c.vocab_size});
  }

  ModelConfig config_;
  BasicTensor<T> embedding_;
  std::vector<Layer> layers_;
  BasicTensor<T> final_norm_;
  BasicTensor<T> lm_head_;
  uint64_t freeze_hash_ = 0;
};

using BaseWeights = BaseWeightsT<float>;

// Low-rank update scaling * (x * a) * b. Stored input-major: a is [in, r],
// b is [r, out], i.e. the transposes of the usual A (r x in) and B (out x r).
template <typename T>
struct LowRankT {
  BasicTensor<T> a;
  BasicTensor<T> b;

  size_t in() const { return a.dim(0); }
  size_t rank() const { return a.dim(1); }
  size_t out() const { return b.dim(1); }
};

// Targets on the decoder path. There is deliberately no slot for the key or
// value projections.
enum class AdapterTarget { q, o, gate, up, down };

inline const char* target_name(AdapterTarget t) {
  switch (t) {
    case AdapterTarget::q: return "q";
    case AdapterTarget::o: return "o";
    case AdapterTarget::gate: return "gate";
    case AdapterTarget::up: return "up";
    case AdapterTarget::down: return "down";
  }
  return "?";
}

template <typename T>
struct LayerAdapterT {
  LowRankT<T> q, o, gate, up, down;

  LowRankT<T>& at(AdapterTarget t) {
    switch (t) {
      case AdapterTarget::q: return q;
      case AdapterTarget::o: return o;
      case AdapterTarget::gate: return gate;
      case AdapterTarget::up: return up;
      case AdapterTarget::down: return down;
    }
    return q;
  }
  const LowRankT<T>& at(AdapterTarget t) const {
    return const_cast<LayerAdapterT*>(this)->at(t);
  }
};

inline constexpr AdapterTarget kAdapterTargets[] = {
    AdapterTarget::q, AdapterTarget::o, AdapterTarget::gate, AdapterTarget::up,
    AdapterTarget::down};

namespace detail {

template <typename T>
LowRankT<T> make_low_rank(size_t in, size_t out, size_t rank, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
  LowRankT<T> lr{BasicTensor<T>({in, rank}), BasicTensor<T>({rank, out})};
  for (T& v : lr.a.data()) v = static_cast<T>(dist(rng));
  return lr;
}

inline void check_low_rank_shape(const std::string& what, size_t a_in, size_t a_r,
                                 size_t b_r, size_t b_out, size_t in, size_t out) {
  if (a_in != in || b_out != out || a_r != b_r) {
    throw ConfigError("adapter " + what + " shape [" + std::to_string(a_in) + "x" +
                      std::to_string(a_r) + "]x[" + std::to_string(b_r) + "x" +
                      std::to_string(b_out) + "] does not fit base weight [" +
                      std::to_string(in) + "x" + std::to_string(out) + "]");
  }
}

}  // namespace detail

template <typename T>
class AdapterSetT {
 public:
  using Layer = LayerAdapterT<T>;

  AdapterSetT() = default;

  // A ~ Normal(0, 1/in), B = 0: the adapted decoder starts as the base.
  static AdapterSetT init(const ModelConfig& config, size_t rank, double alpha,
                          uint64_t seed, std::string task) {
    config.validate();
    if (rank == 0) throw ConfigError("adapter rank must be positive");
    std::mt19937_64 rng(seed);
    AdapterSetT s;
    s.task_ = std::move(task);
    s.rank_ = rank;
    s.alpha_ = alpha;
    const auto& c = config;
    for (size_t l = 0; l < c.num_layers; ++l) {
      Layer layer;
      layer.q = detail::make_low_rank<T>(c.hidden, c.q_dim(), rank, rng);
      layer.o = detail::make_low_rank<T>(c.q_dim(), c.hidden, rank, rng);
      layer.gate = detail::make_low_rank<T>(c.hidden, c.ffn_dim, rank, rng);
      layer.up = detail::make_low_rank<T>(c.hidden, c.ffn_dim, rank, rng);
      layer.down = detail::make_low_rank<T>(c.ffn_dim, c.hidden, rank, rng);
      s.layers_.push_back(std::move(layer));
    }
    return s;
  }

  const std::string& task() const { return task_; }
  size_t rank() const { return rank_; }
  double alpha() const { return alpha_; }
  T scaling() const { return static_cast<T>(alpha_ / static_cast<double>(rank_)); }
  size_t num_layers() const { return layers_.size(); }
  const Layer& layer(size_t i) const { return layers_.at(i); }
  Layer& layer(size_t i) { return layers_.at(i); }

  // Fills every B with Normal(0, stddev); used to get non-trivial adapters
  // without training.
  void randomize_b(uint64_t seed, double stddev) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& l : layers_) {
      for (auto t : kAdapterTargets) {
        for (T& v : l.at(t).b.data()) v = static_cast<T>(dist(rng));
      }
    }
  }

  void check_against(const ModelConfig& c) const {
    if (layers_.size() != c.num_layers) {
      throw ConfigError("adapter has " + std::to_string(layers_.size()) +
                        " layers, model has " + std::to_string(c.num_layers));
    }
    auto check = [](const std::string& what, const LowRankT<T>& lr, size_t in, size_t out) {
      detail::check_low_rank_shape(what, lr.a.dim(0), lr.a.dim(1), lr.b.dim(0), lr.b.dim(1), in, out);
    };
    for (size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      check(p + "q", L.q, c.hidden, c.q_dim());
      check(p + "o", L.o, c.q_dim(), c.hidden);
      check(p + "gate", L.gate, c.hidden, c.ffn_dim);
      check(p + "up", L.up, c.hidden, c.ffn_dim);
      check(p + "down", L.down, c.ffn_dim, c.hidden);
    }
  }

  void for_each(const std::function<void(const std::string&, const BasicTensor<T>&)>& fn) const {
    const_cast<AdapterSetT*>(this)->for_each_mutable(
        [&](const std::string& n, BasicTensor<T>& t) { fn(n, t); });
  }

  void for_each_mutable(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
    for (size_t l = 0; l < layers_.size(); ++l) {
      for (auto t : kAdapterTargets) {
        const std::string p = "layers." + std::to_string(l) + "." + target_name(t);
        fn(p + ".a", layers_[l].at(t).a);
        fn(p + ".b", layers_[l].at(t).b);
      }
    }
  }

  uint64_t content_hash() const {
    Fnv1a h;
    h.str(task_).value(static_cast<uint64_t>(rank_)).value(alpha_);
    for_each([&](const std::string& n, const BasicTensor<T>& t) {
      h.str(n);
      h.span<T>(t.data());
    });
    return h.digest();
  }

  size_t bytes() const {
    size_t n = 0;
    for_each([&](const std::string&, const BasicTensor<T>& t) { n += t.numel(); });
    return n * sizeof(T);
  }

  template <typename U>
  AdapterSetT<U> cast() const {
    AdapterSetT<U> out;
    out.task_ = task_;
    out.rank_ = rank_;
    out.alpha_ = alpha_;
    for (const auto& l : layers_) {
      LayerAdapterT<U> lu;
      for (auto t : kAdapterTargets) {
        lu.at(t).a = l.at(t).a.template cast<U>();
        lu.at(t).b = l.at(t).b.template cast<U>();
      }
      out.layers_.push_back(std::move(lu));
    }
    return out;
  }

  // Assembles a set from explicit per-layer pairs (checkpoint loading).
  static AdapterSetT from_layers(std::string task, size_t rank, double alpha,
                                 std::vector<Layer> layers) {
    AdapterSetT s;
    s.task_ = std::move(task);
    s.rank_ = rank;
    s.alpha_ = alpha;
    s.layers_ = std::move(layers);
    return s;
  }

 private:
  template <typename>
  friend class AdapterSetT;

  std::string task_;
  size_t rank_ = 0;
  double alpha_ = 0;
  std::vector<Layer> layers_;
};

using AdapterSet = AdapterSetT<float>;

template <typename T>
struct KvLowRankT {
  LowRankT<T> k, v;
};

// Conventional fine-tuning: the decoder-path targets plus key/value
// projections. A model carrying one of these owns a cache no other model
// can reuse.
template <typename T>
struct ConventionalAdapterSetT {
  AdapterSetT<T> decoder;
  std::vector<KvLowRankT<T>> kv;

  static ConventionalAdapterSetT init(const ModelConfig& c, size_t rank, double alpha,
                                      uint64_t seed, std::string task) {
    ConventionalAdapterSetT s;
    s.decoder = AdapterSetT<T>::init(c, rank, alpha, seed, std::move(task));
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    for (size_t l = 0; l < c.num_layers; ++l) {
      s.kv.push_back({detail::make_low_rank<T>(c.hidden, c.kv_dim(), rank, rng),
                      detail::make_low_rank<T>(c.hidden, c.kv_dim(), rank, rng)});
    }
    return s;
  }

  T scaling() const { return decoder.scaling(); }

  void randomize_b(uint64_t seed, double stddev) {
    decoder.randomize_b(seed, stddev);
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& l : kv) {
      for (T& v : l.k.b.data()) v = static_cast<T>(dist(rng));
      for (T& v : l.v.b.data()) v = static_cast<T>(dist(rng));
    }
  }

  void for_each_mutable(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
    decoder.for_each_mutable(fn);
    for (size_t l = 0; l < kv.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      fn(p + "k.a", kv[l].k.a);
      fn(p + "k.b", kv[l].k.b);
      fn(p + "v.a", kv[l].v.a);
      fn(p + "v.b", kv[l].v.b);
    }
  }

  void for_each(const std::function<void(const std::string&, const BasicTensor<T>&)>& fn) const {
    const_cast<ConventionalAdapterSetT*>(this)->for_each_mutable(
        [&](const std::string& n, BasicTensor<T>& t) { fn(n, t); });
  }

  template <typename U>
  ConventionalAdapterSetT<U> cast() const {
    ConventionalAdapterSetT<U> out;
    out.decoder = decoder.template cast<U>();
    for (const auto& l : kv) {
      out.kv.push_back({{l.k.a.template cast<U>(), l.k.b.template cast<U>()},
                        {l.v.a.template cast<U>(), l.v.b.template cast<U>()}});
    }
    return out;
  }
};

using ConventionalAdapterSet = ConventionalAdapterSetT<float>;

}  // namespace icarus
