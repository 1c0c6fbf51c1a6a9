// Parameter storage, initialization and the transformer blocks shared by the
// encoder-decoder and autoregressive models.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ptp/common.hpp"
#include "ptp/tensor.hpp"

namespace ptp {

enum class Init { kWeight, kZero, kOne };

inline constexpr double kInitStd = 0.02;

/// Ordered, named parameter table. Insertion order is the canonical order for
/// checkpoints and optimizer state.
template <typename T>
class ParamStore {
 public:
  Tensor<T> create(const std::string& name, int rows, int cols, Init init, Rng& rng) {
    if (index_.count(name)) throw Error("duplicate parameter " + name);
    std::vector<T> v(static_cast<std::size_t>(rows) * cols);
    switch (init) {
      case Init::kWeight:
        for (auto& x : v) x = static_cast<T>(rng.truncated_normal(kInitStd));
        break;
      case Init::kZero:
        break;
      case Init::kOne:
        std::fill(v.begin(), v.end(), T(1));
        break;
    }
    auto t = Tensor<T>::from(rows, cols, std::move(v), true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
    return t;
  }

  /// Registers an existing tensor (shared, not copied), e.g. to optimize a
  /// subset of another store's parameters.
  void adopt(const std::string& name, const Tensor<T>& t) {
    if (index_.count(name)) throw Error("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  Tensor<T> get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }
  void zero_grad() {
    for (auto& [_, t] : entries_) {
      auto tt = t;
      tt.zero_grad();
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct Linear {
  Tensor<T> w;
  Tensor<T> b;  // may be undefined
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }
};

template <typename T>
Linear<T> make_linear(ParamStore<T>& ps, const std::string& name, int in, int out, bool bias, Rng& rng) {
  Linear<T> l;
  l.w = ps.create(name + ".w", in, out, Init::kWeight, rng);
  if (bias) l.b = ps.create(name + ".b", 1, out, Init::kZero, rng);
  return l;
}

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
};

template <typename T>
LayerNorm<T> make_layer_norm(ParamStore<T>& ps, const std::string& name, int dim, Rng& rng) {
  return {ps.create(name + ".g", 1, dim, Init::kOne, rng), ps.create(name + ".b", 1, dim, Init::kZero, rng)};
}

template <typename T>
struct RmsNorm {
  Tensor<T> gain;
  Tensor<T> operator()(const Tensor<T>& x) const { return rms_norm(x, gain); }
};

template <typename T>
RmsNorm<T> make_rms_norm(ParamStore<T>& ps, const std::string& name, int dim, Rng& rng) {
  return {ps.create(name + ".g", 1, dim, Init::kOne, rng)};
}

struct BlockDims {
  int hidden = 0;
  int intermediate = 0;
  int heads = 1;
  int layers = 0;

  void validate(const std::string& what) const {
    if (hidden <= 0 || intermediate <= 0 || heads <= 0 || layers < 0) {
      throw Error(what + ": dimensions must be positive");
    }
    if (hidden % heads != 0) {
      throw Error(what + ": hidden " + std::to_string(hidden) + " not divisible by heads " +
                  std::to_string(heads));
    }
  }
  bool operator==(const BlockDims&) const = default;
};

/// Multi-head attention projections. Keys/values may come from a different
/// stream (cross-attention) of width kv_dim.
template <typename T>
struct MultiHeadAttention {
  Linear<T> q, k, v, o;
  int heads = 1;

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& kv, AttentionOptions opt) const {
    opt.heads = heads;
    return o(attention(q(x), k(kv), v(kv), opt));
  }
};

template <typename T>
MultiHeadAttention<T> make_attention(ParamStore<T>& ps, const std::string& name, int dim, int kv_dim, int heads,
                                     bool bias, Rng& rng) {
  MultiHeadAttention<T> a;
  a.q = make_linear(ps, name + ".q", dim, dim, bias, rng);
  a.k = make_linear(ps, name + ".k", kv_dim, dim, bias, rng);
  a.v = make_linear(ps, name + ".v", kv_dim, dim, bias, rng);
  a.o = make_linear(ps, name + ".o", dim, dim, bias, rng);
  a.heads = heads;
  return a;
}

/// Pre-LN ViT block: self-attention then GELU MLP.
template <typename T>
struct EncoderBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Linear<T> fc1, fc2;

  Tensor<T> operator()(const Tensor<T>& x, const AttentionOptions& opt = {}) const {
    const auto n1 = ln1(x);
    auto h = add(x, attn(n1, n1, opt));
    return add(h, fc2(gelu(fc1(ln2(h)))));
  }
};

template <typename T>
EncoderBlock<T> make_encoder_block(ParamStore<T>& ps, const std::string& name, const BlockDims& d, Rng& rng) {
  EncoderBlock<T> b;
  b.ln1 = make_layer_norm(ps, name + ".ln1", d.hidden, rng);
  b.attn = make_attention(ps, name + ".attn", d.hidden, d.hidden, d.heads, true, rng);
  b.ln2 = make_layer_norm(ps, name + ".ln2", d.hidden, rng);
  b.fc1 = make_linear(ps, name + ".fc1", d.hidden, d.intermediate, true, rng);
  b.fc2 = make_linear(ps, name + ".fc2", d.intermediate, d.hidden, true, rng);
  return b;
}

/// Gated feed-forward: down(silu(gate(x)) * up(x)).
template <typename T>
struct GatedMlp {
  Linear<T> gate, up, down;
  Tensor<T> operator()(const Tensor<T>& x) const { return down(swiglu(gate(x), up(x))); }
};

template <typename T>
GatedMlp<T> make_gated_mlp(ParamStore<T>& ps, const std::string& name, int dim, int inter, Rng& rng) {
  return {make_linear(ps, name + ".gate", dim, inter, false, rng), make_linear(ps, name + ".up", dim, inter, false, rng),
          make_linear(ps, name + ".down", inter, dim, false, rng)};
}

/// Pre-LN text decoder block: causal self-attention, cross-attention onto
/// encoder states, gated MLP.
template <typename T>
struct CrossDecoderBlock {
  LayerNorm<T> ln1, ln2, ln3;
  MultiHeadAttention<T> self_attn, cross_attn;
  GatedMlp<T> mlp;

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& memory) const {
    AttentionOptions causal;
    causal.causal = true;
    const auto n1 = ln1(x);
    auto h = add(x, self_attn(n1, n1, causal));
    h = add(h, cross_attn(ln2(h), memory, {}));
    return add(h, mlp(ln3(h)));
  }
};

template <typename T>
CrossDecoderBlock<T> make_cross_decoder_block(ParamStore<T>& ps, const std::string& name, const BlockDims& d,
                                              int memory_dim, Rng& rng) {
  CrossDecoderBlock<T> b;
  b.ln1 = make_layer_norm(ps, name + ".ln1", d.hidden, rng);
  b.self_attn = make_attention(ps, name + ".self", d.hidden, d.hidden, d.heads, true, rng);
  b.ln2 = make_layer_norm(ps, name + ".ln2", d.hidden, rng);
  b.cross_attn = make_attention(ps, name + ".cross", d.hidden, memory_dim, d.heads, true, rng);
  b.ln3 = make_layer_norm(ps, name + ".ln3", d.hidden, rng);
  b.mlp = make_gated_mlp(ps, name + ".mlp", d.hidden, d.intermediate, rng);
  return b;
}

/// LLaMA-style block: RMS norm, causal attention with rotary positions on
/// queries and keys, gated MLP; no biases.
template <typename T>
struct RotaryBlock {
  RmsNorm<T> norm1, norm2;
  Linear<T> q, k, v, o;
  GatedMlp<T> mlp;
  int heads = 1;
  double rotary_base = 10000.0;

  Tensor<T> operator()(const Tensor<T>& x) const {
    AttentionOptions opt;
    opt.heads = heads;
    opt.causal = true;
    const auto n = norm1(x);
    const auto qq = rotary(q(n), heads, rotary_base);
    const auto kk = rotary(k(n), heads, rotary_base);
    auto h = add(x, o(attention(qq, kk, v(n), opt)));
    return add(h, mlp(norm2(h)));
  }
};

template <typename T>
RotaryBlock<T> make_rotary_block(ParamStore<T>& ps, const std::string& name, const BlockDims& d, double base,
                                 Rng& rng) {
  RotaryBlock<T> b;
  b.norm1 = make_rms_norm(ps, name + ".norm1", d.hidden, rng);
  b.q = make_linear(ps, name + ".q", d.hidden, d.hidden, false, rng);
  b.k = make_linear(ps, name + ".k", d.hidden, d.hidden, false, rng);
  b.v = make_linear(ps, name + ".v", d.hidden, d.hidden, false, rng);
  b.o = make_linear(ps, name + ".o", d.hidden, d.hidden, false, rng);
  b.norm2 = make_rms_norm(ps, name + ".norm2", d.hidden, rng);
  b.mlp = make_gated_mlp(ps, name + ".mlp", d.hidden, d.intermediate, rng);
  b.heads = d.heads;
  b.rotary_base = base;
  return b;
}

// ---------------------------------------------------------------------------
// Fixed 2-D sine/cosine positions

/// [n_rows*n_cols x dim] table, row-major over the grid. The first half of
/// each vector encodes the row, the second half the column; each half is
/// [sin(p*w_0..), cos(p*w_0..)] with w_i = 10000^(-i/(dim/4)).
template <typename T>
std::vector<T> positions_2d(int n_rows, int n_cols, int dim) {
  if (dim <= 0 || dim % 4 != 0) throw Error("positions_2d: dim must be a positive multiple of 4");
  const int quarter = dim / 4;
  std::vector<T> out(static_cast<std::size_t>(n_rows) * n_cols * dim);
  for (int r = 0; r < n_rows; ++r) {
    for (int c = 0; c < n_cols; ++c) {
      T* v = out.data() + (static_cast<std::size_t>(r) * n_cols + c) * dim;
      for (int i = 0; i < quarter; ++i) {
        const double omega = std::pow(10000.0, -static_cast<double>(i) / quarter);
        v[i] = static_cast<T>(std::sin(r * omega));
        v[quarter + i] = static_cast<T>(std::cos(r * omega));
        v[2 * quarter + i] = static_cast<T>(std::sin(c * omega));
        v[3 * quarter + i] = static_cast<T>(std::cos(c * omega));
      }
    }
  }
  return out;
}

}  // namespace ptp
