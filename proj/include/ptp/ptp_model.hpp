// Patch-and-text prediction model: ViT image encoder, MAE-style image decoder
// and a cross-attending autoregressive text decoder.
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "ptp/checkpoint.hpp"
#include "ptp/nn.hpp"
#include "ptp/patchwork.hpp"
#include "ptp/tensor.hpp"
#include "ptp/textcodec.hpp"

namespace ptp {

struct PTPConfig {
  BlockDims encoder{768, 3072, 12, 12};
  BlockDims image_decoder{512, 2048, 16, 8};
  BlockDims text_decoder{768, 3072, 12, 12};
  int patch_h = 16;
  int patch_w = 16;
  int channels = 3;
  int vocab_size = 50265;
  int max_patches = 512;
  int max_text_len = 256;
  bool use_embedding_layernorm = false;
  double loss_weight_text = 1.0;

  int patch_dim() const { return patch_h * patch_w * channels; }

  void validate() const {
    encoder.validate("encoder");
    image_decoder.validate("image_decoder");
    text_decoder.validate("text_decoder");
    if (encoder.hidden % 4 != 0 || image_decoder.hidden % 4 != 0) {
      throw Error("encoder and image decoder widths must be multiples of 4 (2-D sin/cos positions)");
    }
    if (patch_h <= 0 || patch_w <= 0 || channels <= 0 || vocab_size <= 0 || max_patches <= 0 || max_text_len <= 0) {
      throw Error("PTPConfig: sizes must be positive");
    }
  }

  ConfigSnapshot snapshot() const {
    ConfigSnapshot s;
    const auto dims = [&s](const std::string& p, const BlockDims& d) {
      s.emplace_back(p + ".hidden", std::to_string(d.hidden));
      s.emplace_back(p + ".intermediate", std::to_string(d.intermediate));
      s.emplace_back(p + ".heads", std::to_string(d.heads));
      s.emplace_back(p + ".layers", std::to_string(d.layers));
    };
    s.emplace_back("model.kind", "ptp");
    dims("encoder", encoder);
    dims("image_decoder", image_decoder);
    dims("text_decoder", text_decoder);
    s.emplace_back("patch.h", std::to_string(patch_h));
    s.emplace_back("patch.w", std::to_string(patch_w));
    s.emplace_back("patch.c", std::to_string(channels));
    s.emplace_back("vocab_size", std::to_string(vocab_size));
    s.emplace_back("max_patches", std::to_string(max_patches));
    s.emplace_back("max_text_len", std::to_string(max_text_len));
    s.emplace_back("embedding_layernorm", use_embedding_layernorm ? "1" : "0");
    s.emplace_back("loss_weight_text", format_real(loss_weight_text));
    return s;
  }

  static PTPConfig from_snapshot(const ConfigSnapshot& s) {
    if (snapshot_get(s, "model.kind") != "ptp") throw Error("snapshot is not a ptp model");
    const auto i = [&s](const std::string& k) { return std::stoi(snapshot_get(s, k)); };
    const auto dims = [&i](const std::string& p) {
      return BlockDims{i(p + ".hidden"), i(p + ".intermediate"), i(p + ".heads"), i(p + ".layers")};
    };
    PTPConfig c;
    c.encoder = dims("encoder");
    c.image_decoder = dims("image_decoder");
    c.text_decoder = dims("text_decoder");
    c.patch_h = i("patch.h");
    c.patch_w = i("patch.w");
    c.channels = i("patch.c");
    c.vocab_size = i("vocab_size");
    c.max_patches = i("max_patches");
    c.max_text_len = i("max_text_len");
    c.use_embedding_layernorm = i("embedding_layernorm") != 0;
    c.loss_weight_text = std::stod(snapshot_get(s, "loss_weight_text"));
    return c;
  }
  bool operator==(const PTPConfig&) const = default;
};

/// Named presets. "ptp-base" is the published base architecture; the others
/// are desk-scale analogs.
inline PTPConfig ptp_preset(const std::string& name) {
  PTPConfig c;
  if (name == "ptp-base") return c;
  if (name == "ptp-tiny") {
    c.encoder = c.image_decoder = c.text_decoder = BlockDims{32, 64, 2, 2};
    c.vocab_size = 300;
    c.max_patches = 16;
    c.max_text_len = 32;
    c.channels = 1;
    return c;
  }
  if (name == "ptp-desk") {
    c.encoder = BlockDims{64, 128, 4, 2};
    c.image_decoder = BlockDims{128, 256, 4, 2};
    c.text_decoder = BlockDims{64, 128, 4, 2};
    c.vocab_size = 512;
    c.max_patches = 48;
    c.max_text_len = 48;
    c.channels = 1;
    return c;
  }
  throw Error("unknown ptp preset '" + name + "' (expected ptp-base, ptp-desk, ptp-tiny)");
}

template <typename T>
struct EncoderOutput {
  Tensor<T> states;       // [1 + kept, hidden]; row 0 is CLS
  std::vector<int> kept;  // patch index of each non-CLS row
};

template <typename T>
struct PTPOutput {
  Tensor<T> patch_predictions;  // [masked, patch_dim] in standardized space; undefined if nothing masked
  Tensor<T> text_logits;        // [target_len, vocab]
  Tensor<T> mse_patch;
  Tensor<T> ce_text;
  Tensor<T> total;
};

template <typename T>
class PTPModel {
 public:
  PTPModel(const PTPConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int pd = cfg_.patch_dim();
    const int eh = cfg_.encoder.hidden, dh = cfg_.image_decoder.hidden, th = cfg_.text_decoder.hidden;
    patch_embed_ = make_linear(ps_, "enc.patch_embed", pd, eh, true, rng);
    if (cfg_.use_embedding_layernorm) embed_norm_ = make_layer_norm(ps_, "enc.embed_norm", eh, rng);
    cls_ = ps_.create("enc.cls", 1, eh, Init::kWeight, rng);
    for (int l = 0; l < cfg_.encoder.layers; ++l) {
      encoder_.push_back(make_encoder_block(ps_, "enc.layers." + std::to_string(l), cfg_.encoder, rng));
    }
    encoder_norm_ = make_layer_norm(ps_, "enc.norm", eh, rng);

    image_proj_ = make_linear(ps_, "imgdec.proj", eh, dh, true, rng);
    mask_embed_ = ps_.create("imgdec.mask_embed", 1, dh, Init::kWeight, rng);
    for (int l = 0; l < cfg_.image_decoder.layers; ++l) {
      image_decoder_.push_back(make_encoder_block(ps_, "imgdec.layers." + std::to_string(l), cfg_.image_decoder, rng));
    }
    image_norm_ = make_layer_norm(ps_, "imgdec.norm", dh, rng);
    pixel_head_ = make_linear(ps_, "imgdec.head", dh, pd, true, rng);

    token_embed_ = ps_.create("txtdec.token_embed", cfg_.vocab_size, th, Init::kWeight, rng);
    text_pos_ = ps_.create("txtdec.pos_embed", cfg_.max_text_len, th, Init::kWeight, rng);
    for (int l = 0; l < cfg_.text_decoder.layers; ++l) {
      text_decoder_.push_back(
          make_cross_decoder_block(ps_, "txtdec.layers." + std::to_string(l), cfg_.text_decoder, eh, rng));
    }
    text_norm_ = make_layer_norm(ps_, "txtdec.norm", th, rng);
    lm_head_ = make_linear(ps_, "txtdec.lm_head", th, cfg_.vocab_size, false, rng);

    enc_pos_ = positions_2d<T>(1, cfg_.max_patches, eh);
    dec_pos_ = positions_2d<T>(1, cfg_.max_patches, dh);
  }

  const PTPConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  /// Linear patch embedding (plus the optional embedding layer norm).
  Tensor<T> patch_embed(const Tensor<T>& patches) const {
    if (patches.cols() != cfg_.patch_dim()) {
      throw Error("patch_embed: patch width " + std::to_string(patches.cols()) + ", expected " +
                  std::to_string(cfg_.patch_dim()));
    }
    auto e = patch_embed_(patches);
    return cfg_.use_embedding_layernorm ? embed_norm_(e) : e;
  }

  /// CLS + embeddings of attended, unmasked patches through the encoder.
  EncoderOutput<T> encode(const PatchGrid& grid, const AttentionMask& attn, const PatchMaskPlan& plan) const {
    check_grid(grid);
    EncoderOutput<T> out;
    for (int i = 0; i < grid.n; ++i) {
      if (attn.attend[static_cast<std::size_t>(i)] && !plan.is_masked(i)) out.kept.push_back(i);
    }
    if (out.kept.empty()) throw Error("encode: every attended patch is masked");
    const int pd = cfg_.patch_dim(), eh = cfg_.encoder.hidden;
    std::vector<T> px;
    std::vector<T> pos;
    px.reserve(out.kept.size() * static_cast<std::size_t>(pd));
    for (const int i : out.kept) {
      const auto p = grid.patch(i);
      px.insert(px.end(), p.begin(), p.end());
      pos.insert(pos.end(), enc_pos_.begin() + static_cast<std::ptrdiff_t>(i) * eh,
                 enc_pos_.begin() + static_cast<std::ptrdiff_t>(i + 1) * eh);
    }
    const int k = static_cast<int>(out.kept.size());
    auto emb = add(patch_embed(Tensor<T>::from(k, pd, std::move(px))), Tensor<T>::from(k, eh, std::move(pos)));
    auto x = concat_rows<T>({cls_, emb});
    for (const auto& b : encoder_) x = b(x);
    out.states = encoder_norm_(x);
    return out;
  }

  /// Pixel predictions for every attended position [attended, patch_dim].
  /// Masked positions are filled with the shared mask embedding.
  Tensor<T> decode_image_all(const EncoderOutput<T>& enc, int attended) const {
    const int dh = cfg_.image_decoder.hidden;
    const int k = static_cast<int>(enc.kept.size());
    auto combined = concat_rows<T>({image_proj_(enc.states), mask_embed_});  // rows: CLS, kept..., mask
    std::vector<int> order(static_cast<std::size_t>(attended) + 1, k + 1);
    order[0] = 0;
    for (int r = 0; r < k; ++r) {
      if (enc.kept[static_cast<std::size_t>(r)] >= attended) throw Error("decode_image: kept patch beyond attended range");
      order[static_cast<std::size_t>(enc.kept[static_cast<std::size_t>(r)]) + 1] = r + 1;
    }
    std::vector<T> pos(static_cast<std::size_t>(attended + 1) * dh, T(0));
    std::copy(dec_pos_.begin(), dec_pos_.begin() + static_cast<std::ptrdiff_t>(attended) * dh, pos.begin() + dh);
    auto x = add(select_rows(combined, order), Tensor<T>::from(attended + 1, dh, std::move(pos)));
    for (const auto& b : image_decoder_) x = b(x);
    x = image_norm_(x);
    std::vector<int> patch_rows(static_cast<std::size_t>(attended));
    for (int i = 0; i < attended; ++i) patch_rows[static_cast<std::size_t>(i)] = i + 1;
    return pixel_head_(select_rows(x, patch_rows));
  }

  /// Predictions gathered at the masked indices, in plan order.
  Tensor<T> decode_image(const EncoderOutput<T>& enc, const PatchMaskPlan& plan, int attended) const {
    if (plan.masked.empty()) throw Error("decode_image: empty mask plan");
    return select_rows(decode_image_all(enc, attended), plan.masked);
  }

  /// Teacher-forced logits for `target`: inputs are [BOS] + target[:-1].
  Tensor<T> decode_text(const Tensor<T>& memory, const TokenSequence& target) const {
    const int n = static_cast<int>(target.size());
    if (n == 0) throw Error("decode_text: empty target");
    if (n > cfg_.max_text_len) {
      throw Error("decode_text: target length " + std::to_string(n) + " exceeds max_text_len " +
                  std::to_string(cfg_.max_text_len));
    }
    std::vector<int> inputs{special_id(Special::kBos)};
    inputs.insert(inputs.end(), target.begin(), target.end() - 1);
    return text_logits(memory, inputs);
  }

  /// Logits at every position of an explicit decoder input sequence.
  Tensor<T> text_logits(const Tensor<T>& memory, const std::vector<int>& inputs) const {
    const int n = static_cast<int>(inputs.size());
    if (n > cfg_.max_text_len) throw Error("decoder input exceeds max_text_len");
    std::vector<int> positions(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;
    auto x = add(embedding(token_embed_, inputs), select_rows(text_pos_, positions));
    for (const auto& b : text_decoder_) x = b(x, memory);
    return lm_head_(text_norm_(x));
  }

  /// Greedy decoding until EOS or max_len tokens.
  TokenSequence generate(const Tensor<T>& memory, int max_len) const {
    std::vector<int> inputs{special_id(Special::kBos)};
    TokenSequence out;
    while (static_cast<int>(out.size()) < max_len && static_cast<int>(inputs.size()) <= cfg_.max_text_len) {
      const auto logits = text_logits(memory, inputs);
      const auto last = logits.row(logits.rows() - 1);
      const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
      if (next == special_id(Special::kEos)) break;
      out.push_back(next);
      inputs.push_back(next);
    }
    return out;
  }

  /// Text decoder target: the original tokens followed by EOS.
  static TokenSequence text_target(const TokenSequence& original) {
    TokenSequence t = original;
    t.push_back(special_id(Special::kEos));
    return t;
  }

  /// Patch reconstruction + text recovery losses for one example.
  PTPOutput<T> loss(const PTPExample& ex) const {
    PTPOutput<T> out;
    const auto enc = encode(ex.grid, ex.attention, ex.patch_plan);
    if (!ex.patch_plan.masked.empty()) {
      const auto all = decode_image_all(enc, ex.attention.attended_count());
      out.patch_predictions = select_rows(all, ex.patch_plan.masked);
      out.mse_patch = masked_patch_mse(all, ex.patch_plan, ex.patch_targets);
    } else {
      out.mse_patch = Tensor<T>::scalar(T(0));
    }
    const auto target = text_target(ex.original_tokens);
    out.text_logits = decode_text(enc.states, target);
    out.ce_text = cross_entropy(out.text_logits, std::vector<int>(target.begin(), target.end()));
    out.total = add(out.mse_patch, scale(out.ce_text, static_cast<T>(cfg_.loss_weight_text)));
    return out;
  }

  /// Mean squared error over masked patches only; rows of `all_predictions`
  /// at unmasked positions never enter the result.
  static Tensor<T> masked_patch_mse(const Tensor<T>& all_predictions, const PatchMaskPlan& plan,
                                    const std::vector<std::vector<float>>& targets) {
    std::vector<T> flat;
    for (const auto& t : targets) flat.insert(flat.end(), t.begin(), t.end());
    return mse(select_rows(all_predictions, plan.masked), flat);
  }

  Checkpoint to_checkpoint(std::int64_t step) const {
    Checkpoint ck;
    ck.magic = "PTPC";
    ck.config = cfg_.snapshot();
    ck.config.emplace_back("train.step", std::to_string(step));
    ck.tensors = export_params(ps_);
    return ck;
  }

  static PTPModel from_checkpoint(const Checkpoint& ck) {
    PTPModel m(PTPConfig::from_snapshot(ck.config), 0);
    import_params(m.ps_, ck.tensors, true);
    return m;
  }

 private:
  void check_grid(const PatchGrid& grid) const {
    if (grid.p_h != cfg_.patch_h || grid.p_w != cfg_.patch_w || grid.c != cfg_.channels) {
      throw Error("patch grid geometry does not match model config");
    }
    if (grid.n > cfg_.max_patches) {
      throw Error("patch grid has " + std::to_string(grid.n) + " patches; model max is " +
                  std::to_string(cfg_.max_patches));
    }
  }

  PTPConfig cfg_;
  ParamStore<T> ps_;
  Linear<T> patch_embed_;
  LayerNorm<T> embed_norm_;
  Tensor<T> cls_;
  std::vector<EncoderBlock<T>> encoder_;
  LayerNorm<T> encoder_norm_;
  Linear<T> image_proj_;
  Tensor<T> mask_embed_;
  std::vector<EncoderBlock<T>> image_decoder_;
  LayerNorm<T> image_norm_;
  Linear<T> pixel_head_;
  Tensor<T> token_embed_;
  Tensor<T> text_pos_;
  std::vector<CrossDecoderBlock<T>> text_decoder_;
  LayerNorm<T> text_norm_;
  Linear<T> lm_head_;
  std::vector<T> enc_pos_;
  std::vector<T> dec_pos_;
};

}  // namespace ptp
