// Decoder-only model over interleaved screenshot patches and text tokens.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ptp/checkpoint.hpp"
#include "ptp/nn.hpp"
#include "ptp/patchwork.hpp"
#include "ptp/screenrender.hpp"
#include "ptp/tensor.hpp"
#include "ptp/textcodec.hpp"

namespace ptp {

enum class ElementKind { kPatch, kToken };

struct MixedElement {
  ElementKind kind = ElementKind::kToken;
  std::vector<float> patch;  // p_h*p_w*c values in [0, 1] when kind == kPatch
  TokenId token = 0;

  static MixedElement of_token(TokenId id) { return {ElementKind::kToken, {}, id}; }
  static MixedElement of_patch(std::vector<float> px) { return {ElementKind::kPatch, std::move(px), 0}; }
  bool is_patch() const { return kind == ElementKind::kPatch; }
  bool operator==(const MixedElement&) const = default;
};

struct MixedSequence {
  std::vector<MixedElement> elements;
  int m_s = 0;  // tokens of the text behind the screenshot
  int row_width = 0;
  int n_patches = 0;

  int size() const { return static_cast<int>(elements.size()); }
  int text_begin() const {
    for (int i = 0; i < size(); ++i) {
      const auto& e = elements[static_cast<std::size_t>(i)];
      if (!e.is_patch() && e.token == special_id(Special::kImgEnd)) return i + 1;
    }
    return 0;
  }
};

/// Single-line screenshot for the autoregressive model: no prefix, no EOS
/// patch, cropped to the patches that contain ink (at least one).
inline Screenshot render_ar_screenshot(std::string_view text, const GlyphAtlas& atlas, RenderConfig cfg) {
  cfg.prefix.clear();
  cfg.eos_black_patch = false;
  Screenshot s = render_line(text, atlas, cfg);
  const int keep = std::max(1, ink_patch_extent(s));
  Screenshot out;
  out.height = s.height;
  out.width = keep * s.patch_width;
  out.patch_width = s.patch_width;
  out.source_text = s.source_text;
  out.truncated = s.truncated;
  out.pixels.resize(static_cast<std::size_t>(out.height) * out.width);
  for (int y = 0; y < s.height; ++y) {
    std::copy_n(s.pixels.begin() + static_cast<std::ptrdiff_t>(y) * s.width, out.width,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(y) * out.width);
  }
  return out;
}

/// [<img>] patches with <img_nl> after each full row [</img>] then tokens.
inline MixedSequence build_mixed_input(const Screenshot& s, const TokenSequence& following_tokens, const Vocab& vocab,
                                       int row_width, int channels = 1) {
  const int n = s.num_patches();
  if (row_width <= 0 || n % row_width != 0) {
    throw Error("build_mixed_input: " + std::to_string(n) + " patches not divisible by row width " +
                std::to_string(row_width));
  }
  for (const TokenId t : following_tokens) {
    if (!vocab.valid(t)) throw Error("build_mixed_input: token id " + std::to_string(t) + " outside vocabulary");
  }
  const PatchGrid grid = split_patches(s, s.height, s.patch_width, channels);
  MixedSequence seq;
  seq.row_width = row_width;
  seq.n_patches = n;
  seq.m_s = static_cast<int>(encode(s.source_text, vocab).size());
  seq.elements.reserve(static_cast<std::size_t>(n + n / row_width + 2) + following_tokens.size());
  seq.elements.push_back(MixedElement::of_token(special_id(Special::kImgBegin)));
  for (int i = 0; i < n; ++i) {
    const auto p = grid.patch(i);
    seq.elements.push_back(MixedElement::of_patch({p.begin(), p.end()}));
    if ((i + 1) % row_width == 0) seq.elements.push_back(MixedElement::of_token(special_id(Special::kImgNewline)));
  }
  seq.elements.push_back(MixedElement::of_token(special_id(Special::kImgEnd)));
  for (const TokenId t : following_tokens) seq.elements.push_back(MixedElement::of_token(t));
  return seq;
}

/// Token-only sequence (text-only pre-training and the no-context condition).
inline MixedSequence token_sequence(const TokenSequence& tokens) {
  MixedSequence seq;
  for (const TokenId t : tokens) seq.elements.push_back(MixedElement::of_token(t));
  return seq;
}

/// One line per element: "P", "T <id>" or "S <special>".
inline std::string dump_sequence(const MixedSequence& seq) {
  std::string out;
  for (const auto& e : seq.elements) {
    if (e.is_patch()) {
      out += "P\n";
    } else if (e.token >= kNumBytes && e.token < kFirstMergeId) {
      out += "S " + std::string(kSpecialStrings[static_cast<std::size_t>(e.token - kNumBytes)]) + "\n";
    } else {
      out += "T " + std::to_string(e.token) + "\n";
    }
  }
  return out;
}

/// exp of the mean cross-entropy of `targets` under row-major `logits`
/// ([targets.size() x vocab]).
inline double perplexity_from_logits(const std::vector<double>& logits, int vocab, const std::vector<int>& targets) {
  if (targets.empty()) throw Error("perplexity: no targets");
  if (logits.size() != targets.size() * static_cast<std::size_t>(vocab)) throw Error("perplexity: logits shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto lp = log_softmax_row<double>(std::span<const double>(logits.data() + i * vocab, static_cast<std::size_t>(vocab)));
    total -= lp.at(static_cast<std::size_t>(targets[i]));
  }
  return std::exp(total / static_cast<double>(targets.size()));
}

struct ARConfig {
  BlockDims dims{64, 160, 4, 4};
  int patch_h = 16;
  int patch_w = 16;
  int channels = 1;
  int vocab_size = 512;
  int max_seq = 160;
  double rotary_base = 10000.0;
  double loss_weight_text = 1.0;

  int patch_dim() const { return patch_h * patch_w * channels; }

  void validate() const {
    dims.validate("ar");
    if ((dims.hidden / dims.heads) % 2 != 0) throw Error("ar: head dimension must be even for rotary positions");
    if (patch_h <= 0 || patch_w <= 0 || channels <= 0 || vocab_size <= 0 || max_seq <= 1) {
      throw Error("ARConfig: sizes must be positive");
    }
  }

  ConfigSnapshot snapshot() const {
    return {{"model.kind", "ar"},
            {"ar.hidden", std::to_string(dims.hidden)},
            {"ar.intermediate", std::to_string(dims.intermediate)},
            {"ar.heads", std::to_string(dims.heads)},
            {"ar.layers", std::to_string(dims.layers)},
            {"patch.h", std::to_string(patch_h)},
            {"patch.w", std::to_string(patch_w)},
            {"patch.c", std::to_string(channels)},
            {"vocab_size", std::to_string(vocab_size)},
            {"max_seq", std::to_string(max_seq)},
            {"rotary_base", format_real(rotary_base)},
            {"loss_weight_text", format_real(loss_weight_text)}};
  }

  static ARConfig from_snapshot(const ConfigSnapshot& s) {
    if (snapshot_get(s, "model.kind") != "ar") throw Error("snapshot is not an ar model");
    const auto i = [&s](const std::string& k) { return std::stoi(snapshot_get(s, k)); };
    ARConfig c;
    c.dims = {i("ar.hidden"), i("ar.intermediate"), i("ar.heads"), i("ar.layers")};
    c.patch_h = i("patch.h");
    c.patch_w = i("patch.w");
    c.channels = i("patch.c");
    c.vocab_size = i("vocab_size");
    c.max_seq = i("max_seq");
    c.rotary_base = std::stod(snapshot_get(s, "rotary_base"));
    c.loss_weight_text = std::stod(snapshot_get(s, "loss_weight_text"));
    return c;
  }
  bool operator==(const ARConfig&) const = default;
};

inline ARConfig ar_preset(const std::string& name) {
  ARConfig c;
  if (name == "ar-tiny") return c;
  if (name == "ar-small") {
    c.dims = {256, 704, 8, 8};
    c.max_seq = 512;
    return c;
  }
  if (name == "ar-380m" || name == "ar-1.3b") {
    c.dims = name == "ar-380m" ? BlockDims{1024, 2816, 16, 24} : BlockDims{2048, 5504, 16, 24};
    c.vocab_size = 32000;
    c.max_seq = 1 + 512 + 1 + 1 + 256;
    c.channels = 3;
    return c;
  }
  throw Error("unknown ar preset '" + name + "' (expected ar-tiny, ar-small, ar-380m, ar-1.3b)");
}

/// Head outputs grouped by the kind of each position's successor.
template <typename T>
struct ARPredictions {
  std::vector<int> token_positions;  // i such that element i+1 is a token
  std::vector<int> patch_positions;  // i such that element i+1 is a patch
  Tensor<T> token_logits;            // [token_positions, vocab]; undefined if none
  Tensor<T> patch_predictions;       // [patch_positions, patch_dim]; undefined if none
};

template <typename T>
struct ARLoss {
  ARPredictions<T> predictions;
  Tensor<T> mse_patch;
  Tensor<T> ce_text;
  Tensor<T> total;
};

template <typename T>
class ARModel {
 public:
  ARModel(const ARConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int h = cfg_.dims.hidden;
    token_embed_ = ps_.create("ar.token_embed", cfg_.vocab_size, h, Init::kWeight, rng);
    patch_proj_ = make_linear(ps_, "ar.patch_proj", cfg_.patch_dim(), h, true, rng);
    for (int l = 0; l < cfg_.dims.layers; ++l) {
      blocks_.push_back(make_rotary_block(ps_, "ar.layers." + std::to_string(l), cfg_.dims, cfg_.rotary_base, rng));
    }
    norm_ = make_rms_norm(ps_, "ar.norm", h, rng);
    lm_head_ = make_linear(ps_, "ar.lm_head", h, cfg_.vocab_size, false, rng);
    pixel_head_ = make_linear(ps_, "ar.pixel_head", h, cfg_.patch_dim(), true, rng);
  }

  const ARConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  /// Redraws the patch projection and pixel head, leaving every text-path
  /// parameter untouched (continue-training from a text-only model).
  void reinitialize_patch_path(std::uint64_t seed) {
    Rng rng(seed);
    for (const auto& [name, t] : ps_.entries()) {
      if (name.rfind("ar.patch_proj", 0) != 0 && name.rfind("ar.pixel_head", 0) != 0) continue;
      auto tt = t;
      const bool bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
      for (auto& v : tt.values()) v = bias ? T(0) : static_cast<T>(rng.truncated_normal(kInitStd));
    }
  }

  /// Final hidden states [len, hidden] after the causal stack.
  Tensor<T> hidden_states(const MixedSequence& seq) const {
    const int len = seq.size();
    if (len == 0) throw Error("ar_forward: empty sequence");
    if (len > cfg_.max_seq) {
      throw Error("ar_forward: sequence length " + std::to_string(len) + " exceeds max_seq " +
                  std::to_string(cfg_.max_seq));
    }
    std::vector<int> token_ids;
    std::vector<T> patch_values;
    std::vector<int> order(static_cast<std::size_t>(len));
    int n_patch = 0;
    for (int i = 0; i < len; ++i) {
      const auto& e = seq.elements[static_cast<std::size_t>(i)];
      if (e.is_patch()) {
        if (static_cast<int>(e.patch.size()) != cfg_.patch_dim()) throw Error("ar_forward: patch size mismatch");
        patch_values.insert(patch_values.end(), e.patch.begin(), e.patch.end());
        order[static_cast<std::size_t>(i)] = -1 - n_patch++;
      } else {
        if (e.token < 0 || e.token >= cfg_.vocab_size) throw Error("ar_forward: token id outside model vocabulary");
        order[static_cast<std::size_t>(i)] = static_cast<int>(token_ids.size());
        token_ids.push_back(e.token);
      }
    }
    std::vector<Tensor<T>> parts;
    const int n_tok = static_cast<int>(token_ids.size());
    if (n_tok > 0) parts.push_back(embedding(token_embed_, token_ids));
    if (n_patch > 0) parts.push_back(patch_proj_(Tensor<T>::from(n_patch, cfg_.patch_dim(), std::move(patch_values))));
    for (auto& o : order) o = o >= 0 ? o : n_tok + (-1 - o);
    auto x = select_rows(parts.size() == 1 ? parts[0] : concat_rows(parts), order);
    for (const auto& b : blocks_) x = b(x);
    return norm_(x);
  }

  /// Dual-head predictions; the head applied at i is chosen by element i+1.
  ARPredictions<T> forward(const MixedSequence& seq) const {
    const auto h = hidden_states(seq);
    ARPredictions<T> p;
    for (int i = 0; i + 1 < seq.size(); ++i) {
      (seq.elements[static_cast<std::size_t>(i) + 1].is_patch() ? p.patch_positions : p.token_positions).push_back(i);
    }
    if (!p.token_positions.empty()) p.token_logits = lm_head_(select_rows(h, p.token_positions));
    if (!p.patch_positions.empty()) p.patch_predictions = pixel_head_(select_rows(h, p.patch_positions));
    return p;
  }

  /// Next-token logits after the last element [1, vocab].
  Tensor<T> next_token_logits(const MixedSequence& seq) const {
    const auto h = hidden_states(seq);
    return lm_head_(select_rows(h, {seq.size() - 1}));
  }

  /// MSE at positions followed by a patch (standardized targets), CE at
  /// positions followed by a token. `no_patch_pred` drops the MSE term.
  ARLoss<T> loss(const MixedSequence& seq, bool no_patch_pred = false) const {
    ARLoss<T> out;
    out.predictions = forward(seq);
    out.mse_patch = no_patch_pred ? Tensor<T>::scalar(T(0)) : patch_mse(seq, out.predictions);
    if (!out.predictions.token_positions.empty()) {
      std::vector<int> targets;
      for (const int i : out.predictions.token_positions) targets.push_back(seq.elements[static_cast<std::size_t>(i) + 1].token);
      out.ce_text = cross_entropy(out.predictions.token_logits, targets);
    } else {
      out.ce_text = Tensor<T>::scalar(T(0));
    }
    out.total = add(out.mse_patch, scale(out.ce_text, static_cast<T>(cfg_.loss_weight_text)));
    return out;
  }

  /// Mean squared error of next-patch predictions against standardized
  /// successor patches; zero when the sequence has no patch successors.
  static Tensor<T> patch_mse(const MixedSequence& seq, const ARPredictions<T>& p) {
    if (p.patch_positions.empty()) return Tensor<T>::scalar(T(0));
    std::vector<T> targets;
    for (const int i : p.patch_positions) {
      const auto& px = seq.elements[static_cast<std::size_t>(i) + 1].patch;
      const auto z = standardize_patch(std::span<const float>(px));
      targets.insert(targets.end(), z.begin(), z.end());
    }
    return mse(p.patch_predictions, targets);
  }

  /// exp(mean CE) over `eval_tokens` appended to `context`; the context only
  /// conditions. An empty context is replaced by a single BOS token.
  double perplexity(const MixedSequence& context, const TokenSequence& eval_tokens) const {
    if (eval_tokens.empty()) throw Error("perplexity: no evaluation tokens");
    MixedSequence seq = context;
    if (seq.elements.empty()) seq.elements.push_back(MixedElement::of_token(special_id(Special::kBos)));
    const int first = seq.size() - 1;
    for (const TokenId t : eval_tokens) seq.elements.push_back(MixedElement::of_token(t));
    const auto h = hidden_states(seq);
    std::vector<int> rows;
    for (int i = 0; i < static_cast<int>(eval_tokens.size()); ++i) rows.push_back(first + i);
    const auto logits = lm_head_(select_rows(h, rows));
    std::vector<double> flat(logits.data().begin(), logits.data().end());
    return perplexity_from_logits(flat, cfg_.vocab_size, std::vector<int>(eval_tokens.begin(), eval_tokens.end()));
  }

  /// Samples up to `max_new` tokens after `context`; temperature 0 is greedy.
  /// Stops early at EOS (not emitted).
  TokenSequence generate(const MixedSequence& context, int max_new, double temperature, Rng& rng) const {
    if (temperature < 0) throw Error("generate: temperature must be >= 0");
    MixedSequence seq = context;
    if (seq.elements.empty()) seq.elements.push_back(MixedElement::of_token(special_id(Special::kBos)));
    TokenSequence out;
    while (static_cast<int>(out.size()) < max_new && seq.size() < cfg_.max_seq) {
      const auto logits = next_token_logits(seq);
      const auto row = logits.row(0);
      int next = 0;
      if (temperature == 0) {
        next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      } else {
        std::vector<double> scaled(row.begin(), row.end());
        for (auto& v : scaled) v /= temperature;
        const auto lp = log_softmax_row<double>(scaled);
        double u = rng.uniform(), acc = 0.0;
        next = static_cast<int>(lp.size()) - 1;
        for (std::size_t j = 0; j < lp.size(); ++j) {
          acc += std::exp(lp[j]);
          if (u < acc) {
            next = static_cast<int>(j);
            break;
          }
        }
      }
      if (next == special_id(Special::kEos)) break;
      out.push_back(next);
      seq.elements.push_back(MixedElement::of_token(next));
    }
    return out;
  }

  Checkpoint to_checkpoint(std::int64_t step) const {
    Checkpoint ck;
    ck.magic = "PTPA";
    ck.config = cfg_.snapshot();
    ck.config.emplace_back("train.step", std::to_string(step));
    ck.tensors = export_params(ps_);
    return ck;
  }

  static ARModel from_checkpoint(const Checkpoint& ck) {
    ARModel m(ARConfig::from_snapshot(ck.config), 0);
    import_params(m.ps_, ck.tensors, true);
    return m;
  }

 private:
  ARConfig cfg_;
  ParamStore<T> ps_;
  Tensor<T> token_embed_;
  Linear<T> patch_proj_;
  std::vector<RotaryBlock<T>> blocks_;
  RmsNorm<T> norm_;
  Linear<T> lm_head_;
  Linear<T> pixel_head_;
};

}  // namespace ptp
