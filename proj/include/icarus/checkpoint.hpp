// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Weight and adapter checkpoints: a line-oriented text header followed by a
// little-endian binary payload.
//
//   icarus-checkpoint 1
//   kind adapter
//   dtype f32
//   config num_layers 4
//   ...
//   meta rank 8
//   tensor layers.0.q.a 2 64 8 0 2048
//   end 81920
//   <payload bytes>
//
// Tensor lines are: name, rank, dims..., payload offset, byte count.

#pragma once

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "icarus/errors.hpp"
#include "icarus/model.hpp"

namespace icarus {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

inline constexpr const char* kCheckpointMagic = "icarus-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace ckpt {

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

inline std::string exact(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("checkpoint: bad number '" + s + "'");
  return v;
}

inline size_t parse_size(const std::string& s) {
  size_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("checkpoint: bad count '" + s + "'");
  return v;
}

struct Entry {
  Shape shape;
  size_t offset = 0;
  size_t nbytes = 0;
};

struct Parsed {
  std::string kind;
  std::string dtype;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> meta;
  std::map<std::string, Entry> tensors;
  std::vector<char> payload;
};

inline std::vector<std::pair<std::string, std::string>> config_fields(const ModelConfig& c) {
  return {{"num_layers", std::to_string(c.num_layers)},
          {"hidden", std::to_string(c.hidden)},
          {"num_heads", std::to_string(c.num_heads)},
          {"num_kv_heads", std::to_string(c.num_kv_heads)},
          {"head_dim", std::to_string(c.head_dim)},
          {"ffn_dim", std::to_string(c.ffn_dim)},
          {"vocab_size", std::to_string(c.vocab_size)},
          {"rope_theta", exact(c.rope_theta)},
          {"rms_eps", exact(c.rms_eps)},
          {"precision_bits", std::to_string(c.precision_bits)},
          {"max_context", std::to_string(c.max_context)}};
}

inline ModelConfig config_from(const std::map<std::string, std::string>& kv) {
  auto get = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw ConfigError(std::string("checkpoint: missing config key ") + k);
    return it->second;
  };
  ModelConfig c;
  c.num_layers = parse_size(get("num_layers"));
  c.hidden = parse_size(get("hidden"));
  c.num_heads = parse_size(get("num_heads"));
  c.num_kv_heads = parse_size(get("num_kv_heads"));
  c.head_dim = parse_size(get("head_dim"));
  c.ffn_dim = parse_size(get("ffn_dim"));
  c.vocab_size = parse_size(get("vocab_size"));
  c.rope_theta = parse_double(get("rope_theta"));
  c.rms_eps = parse_double(get("rms_eps"));
  c.precision_bits = static_cast<int>(parse_size(get("precision_bits")));
  c.max_context = parse_size(get("max_context"));
  c.validate();
  return c;
}

template <typename T>
class Writer {
 public:
  explicit Writer(std::string kind) : kind_(std::move(kind)) {}

  void config(const ModelConfig& c) { config_ = config_fields(c); }
  void meta(const std::string& k, const std::string& v) {
    if (v.empty() || v.find_first_of(" \t\r\n") != std::string::npos) {
      throw ConfigError("checkpoint: meta value for " + k + " must be a non-empty single word");
    }
    meta_.emplace_back(k, v);
  }
  void tensor(const std::string& name, const BasicTensor<T>& t) {
    std::ostringstream line;
    line << "tensor " << name << ' ' << t.rank();
    for (size_t d : t.shape()) line << ' ' << d;
    const size_t nbytes = t.numel() * sizeof(T);
    line << ' ' << payload_.size() << ' ' << nbytes;
    lines_.push_back(line.str());
    const char* p = reinterpret_cast<const char*>(t.data().data());
    payload_.insert(payload_.end(), p, p + nbytes);
  }

  void write(std::ostream& os) const {
    os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    os << "kind " << kind_ << '\n' << "dtype " << dtype_name<T>() << '\n';
    for (const auto& [k, v] : config_) os << "config " << k << ' ' << v << '\n';
    for (const auto& [k, v] : meta_) os << "meta " << k << ' ' << v << '\n';
    for (const auto& l : lines_) os << l << '\n';
    os << "end " << payload_.size() << '\n';
    os.write(payload_.data(), static_cast<std::streamsize>(payload_.size()));
    if (!os) throw ConfigError("checkpoint: write failed");
  }

 private:
  std::string kind_;
  std::vector<std::pair<std::string, std::string>> config_;
  std::vector<std::pair<std::string, std::string>> meta_;
  std::vector<std::string> lines_;
  std::vector<char> payload_;
};

inline Parsed parse(std::istream& is) {
  Parsed p;
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("checkpoint: empty stream");
  {
    std::istringstream ls(line);
    std::string magic;
    int version = 0;
    ls >> magic >> version;
    if (magic != kCheckpointMagic) throw ConfigError("checkpoint: bad magic");
    if (version != kCheckpointVersion) {
      throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
    }
  }
  size_t payload_bytes = 0;
  bool ended = false;
  while (!ended && std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "kind") {
      ls >> p.kind;
    } else if (tag == "dtype") {
      ls >> p.dtype;
    } else if (tag == "config" || tag == "meta") {
      std::string k, v;
      ls >> k >> v;
      (tag == "config" ? p.config : p.meta)[k] = v;
    } else if (tag == "tensor") {
      std::string name, tok;
      ls >> name >> tok;
      Entry e;
      const size_t rank = parse_size(tok);
      for (size_t i = 0; i < rank; ++i) {
        ls >> tok;
        e.shape.push_back(parse_size(tok));
      }
      ls >> tok;
      e.offset = parse_size(tok);
      ls >> tok;
      e.nbytes = parse_size(tok);
      if (!ls) throw ConfigError("checkpoint: malformed tensor line '" + line + "'");
      p.tensors[name] = e;
    } else if (tag == "end") {
      std::string tok;
      ls >> tok;
      payload_bytes = parse_size(tok);
      ended = true;
    } else {
      throw ConfigError("checkpoint: unknown header line '" + line + "'");
    }
  }
  if (!ended) throw ConfigError("checkpoint: header not terminated");
  p.payload.resize(payload_bytes);
  is.read(p.payload.data(), static_cast<std::streamsize>(payload_bytes));
  if (static_cast<size_t>(is.gcount()) != payload_bytes) throw ConfigError("checkpoint: truncated payload");
  for (const auto& [name, e] : p.tensors) {
    if (e.offset + e.nbytes > payload_bytes) throw ConfigError("checkpoint: tensor " + name + " out of range");
  }
  return p;
}

template <typename T>
BasicTensor<T> take(const Parsed& p, const std::string& name, const Shape& expect) {
  auto it = p.tensors.find(name);
  if (it == p.tensors.end()) throw ConfigError("checkpoint: missing tensor " + name);
  const Entry& e = it->second;
  if (e.shape != expect) {
    throw ConfigError("checkpoint: tensor " + name + " has shape " + shape_str(e.shape) + ", expected " +
                      shape_str(expect));
  }
  if (e.nbytes != shape_numel(expect) * sizeof(T)) throw ConfigError("checkpoint: byte count mismatch for " + name);
  BasicTensor<T> t(expect);
  std::memcpy(t.data().data(), p.payload.data() + e.offset, e.nbytes);
  return t;
}

template <typename T>
void expect_kind(const Parsed& p, const std::string& kind) {
  if (p.kind != kind) throw ConfigError("checkpoint: expected kind " + kind + ", found " + p.kind);
  if (p.dtype != dtype_name<T>()) throw ConfigError("checkpoint: expected dtype " + std::string(dtype_name<T>()) +
                                                    ", found " + p.dtype);
}

inline const std::string& meta(const Parsed& p, const std::string& k) {
  auto it = p.meta.find(k);
  if (it == p.meta.end()) throw ConfigError("checkpoint: missing meta " + k);
  return it->second;
}

template <typename T, typename Set>
void fill_by_name(const Parsed& p, Set& set) {
  set.for_each_mutable([&](const std::string& name, BasicTensor<T>& t) { t = take<T>(p, name, t.shape()); });
}

}  // namespace ckpt

template <typename T>
void save_base(std::ostream& os, const BaseWeightsT<T>& w) {
  ckpt::Writer<T> out("base");
  out.config(w.config());
  w.for_each([&](const std::string& n, const BasicTensor<T>& t) { out.tensor(n, t); });
  out.write(os);
}

template <typename T>
BaseWeightsT<T> load_base(std::istream& is) {
  auto p = ckpt::parse(is);
  ckpt::expect_kind<T>(p, "base");
  ModelConfig c = ckpt::config_from(p.config);
  return BaseWeightsT<T>::from_named(c, [&](const std::string& n, Shape s) { return ckpt::take<T>(p, n, s); });
}

template <typename T>
void save_adapter(std::ostream& os, const AdapterSetT<T>& a, const ModelConfig& c) {
  ckpt::Writer<T> out("adapter");
  out.config(c);
  out.meta("task", a.task());
  out.meta("rank", std::to_string(a.rank()));
  out.meta("alpha", ckpt::exact(a.alpha()));
  a.for_each([&](const std::string& n, const BasicTensor<T>& t) { out.tensor(n, t); });
  out.write(os);
}

template <typename T>
AdapterSetT<T> load_adapter(std::istream& is) {
  auto p = ckpt::parse(is);
  ckpt::expect_kind<T>(p, "adapter");
  ModelConfig c = ckpt::config_from(p.config);
  auto a = AdapterSetT<T>::init(c, ckpt::parse_size(ckpt::meta(p, "rank")),
                                ckpt::parse_double(ckpt::meta(p, "alpha")), 0, ckpt::meta(p, "task"));
  ckpt::fill_by_name<T>(p, a);
  return a;
}

template <typename T>
void save_conventional(std::ostream& os, const ConventionalAdapterSetT<T>& a, const ModelConfig& c) {
  ckpt::Writer<T> out("conventional");
  out.config(c);
  out.meta("task", a.decoder.task());
  out.meta("rank", std::to_string(a.decoder.rank()));
  out.meta("alpha", ckpt::exact(a.decoder.alpha()));
  a.for_each([&](const std::string& n, const BasicTensor<T>& t) { out.tensor(n, t); });
  out.write(os);
}

template <typename T>
ConventionalAdapterSetT<T> load_conventional(std::istream& is) {
  auto p = ckpt::parse(is);
  ckpt::expect_kind<T>(p, "conventional");
  ModelConfig c = ckpt::config_from(p.config);
  auto a = ConventionalAdapterSetT<T>::init(c, ckpt::parse_size(ckpt::meta(p, "rank")),
                                            ckpt::parse_double(ckpt::meta(p, "alpha")), 0,
                                            ckpt::meta(p, "task"));
  ckpt::fill_by_name<T>(p, a);
  return a;
}

// File helpers. Streams are opened in binary mode.
template <typename Fn>
void write_file(const std::string& path, Fn&& fn) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  fn(os);
}

template <typename Fn>
auto read_file(const std::string& path, Fn&& fn) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path);
  return fn(is);
}

}  // namespace icarus
