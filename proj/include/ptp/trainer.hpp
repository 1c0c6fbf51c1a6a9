// Optimizer, schedules, stability instrumentation, config files and the
// pre-training loop for both model families.
#pragma once

#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "ptp/arscreen.hpp"
#include "ptp/checkpoint.hpp"
#include "ptp/nn.hpp"
#include "ptp/patchwork.hpp"
#include "ptp/ptp_model.hpp"
#include "ptp/screenrender.hpp"
#include "ptp/textcodec.hpp"

namespace ptp {

// ---------------------------------------------------------------------------
// AdamW

struct OptimState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One decoupled-decay Adam update over every parameter of `ps`, using the
/// gradients currently accumulated on them.
template <typename T>
void adamw_step(ParamStore<T>& ps, OptimState& st, double lr) {
  const auto& entries = ps.entries();
  if (st.m.empty()) {
    for (const auto& [_, t] : entries) {
      st.m.emplace_back(t.size(), 0.0);
      st.v.emplace_back(t.size(), 0.0);
    }
  }
  if (st.m.size() != entries.size()) throw Error("adamw_step: optimizer state does not match parameters");
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto t = entries[p].second;
    if (st.m[p].size() != t.size()) throw Error("adamw_step: moment shape mismatch for " + entries[p].first);
    for (const T g : t.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw Error("adamw_step: non-finite gradient in " + entries[p].first);
    }
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto t = entries[p].second;
    auto& w = t.values();
    const auto g = t.grad();
    auto& m = st.m[p];
    auto& v = st.v[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      double x = static_cast<double>(w[i]);
      x -= lr * st.weight_decay * x;
      const double gi = static_cast<double>(g[i]);
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      x -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + st.eps);
      w[i] = static_cast<T>(x);
    }
  }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& ps, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, t] : ps.entries()) {
    auto tt = t;
    for (const T g : tt.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-12));
    for (const auto& [_, t] : ps.entries()) {
      auto tt = t;
      for (T& g : tt.grad()) g *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

enum class DecayShape { kCosine, kLinear };

struct Schedule {
  double peak_lr = 1.5e-4;
  double min_lr = 1e-5;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
  DecayShape shape = DecayShape::kCosine;
};

inline double lr_at(const Schedule& s, std::int64_t step) {
  if (step < 0 || step > s.total_steps) {
    throw Error("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  }
  if (step < s.warmup_steps) return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (s.total_steps <= s.warmup_steps) return s.peak_lr;
  const double t = static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  if (s.shape == DecayShape::kLinear) return s.peak_lr * (1.0 - t);
  return s.min_lr + (s.peak_lr - s.min_lr) * (1.0 + std::cos(3.14159265358979323846 * t)) / 2.0;
}

// ---------------------------------------------------------------------------
// Stability monitor

struct StabilityFlags {
  bool spike = false;
  bool plateau = false;
};

class StabilityMonitor {
 public:
  StabilityMonitor(int window = 50, double spike_k = 3.0, int plateau_window = 200, double plateau_tau = 1e-5)
      : window_(window), k_(spike_k), plateau_window_(plateau_window), tau_(plateau_tau) {}

  /// Records a loss and reports the flags for it. The spike test compares
  /// the new loss with the W losses before it.
  StabilityFlags observe(double loss) {
    StabilityFlags f;
    if (static_cast<int>(recent_.size()) == window_) {
      double mean = 0.0;
      for (const double x : recent_) mean += x;
      mean /= window_;
      double var = 0.0;
      for (const double x : recent_) var += (x - mean) * (x - mean);
      f.spike = loss > mean + k_ * std::sqrt(var / window_);
      recent_.pop_front();
    }
    recent_.push_back(loss);
    history_.push_back(loss);
    if (static_cast<int>(history_.size()) > plateau_window_) history_.pop_front();
    f.plateau = detect_plateau();
    return f;
  }

  /// Least-squares slope of the last P losses is >= -tau. False until P
  /// losses have been seen.
  bool detect_plateau() const {
    const int n = static_cast<int>(history_.size());
    if (n < plateau_window_ || n < 2) return false;
    const double xm = (n - 1) / 2.0;
    double ym = 0.0;
    for (const double y : history_) ym += y;
    ym /= n;
    double sxy = 0.0, sxx = 0.0;
    for (int i = 0; i < n; ++i) {
      sxy += (i - xm) * (history_[static_cast<std::size_t>(i)] - ym);
      sxx += (i - xm) * (i - xm);
    }
    return sxy / sxx >= -tau_;
  }

 private:
  int window_;
  double k_;
  int plateau_window_;
  double tau_;
  std::deque<double> recent_;
  std::deque<double> history_;
};

// ---------------------------------------------------------------------------
// Config files: UTF-8 "key = value" lines, '#' comments.

inline std::vector<std::pair<std::string, std::string>> parse_kv_config(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  int line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(line_no) + ": expected 'key = value'");
    auto key = trim(std::string_view(line).substr(0, eq));
    auto value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw Error("config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

/// Everything a pre-training run needs besides the corpus. Defaults are
/// desk-scale; full-scale values are in comments.
struct TrainConfig {
  std::string model = "ptp";        // ptp | ar
  std::string preset = "ptp-desk";  // ptp-base / ar-380m at full scale
  int steps = 2000;                 // full scale: ~1M
  int batch = 16;                   // full scale: 256
  double peak_lr = 1e-3;            // full scale: 1.5e-4
  double min_lr = 1e-5;
  double warmup_frac = 0.05;        // full scale: 50K warmup steps
  std::string decay = "cosine";
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // 0 disables clipping
  std::uint64_t seed = 42;
  int ckpt_every = 0;
  int abort_after = 5;  // consecutive non-finite losses
  int monitor_window = 50;
  double spike_k = 3.0;
  int plateau_window = 200;
  double plateau_tau = 1e-5;
  // data
  int vocab_size = 0;  // 0: preset's vocabulary size
  int max_patches = 0;  // 0: preset's max_patches
  std::string prefix = "Beginning of the sequence:";
  bool eos_black_patch = true;
  double patch_rate = 0.10;
  bool span_masking = true;
  double text_rate = 0.25;
  bool embedding_layernorm = false;
  double loss_weight_text = 1.0;
  // autoregressive only
  bool no_patch_pred = false;
  bool text_only = false;
  int ar_max_patches = 64;

  using Field = std::variant<int*, double*, bool*, std::string*, std::uint64_t*>;

  std::vector<std::pair<std::string, Field>> fields() {
    return {{"model", &model},
            {"preset", &preset},
            {"steps", &steps},
            {"batch", &batch},
            {"peak_lr", &peak_lr},
            {"min_lr", &min_lr},
            {"warmup_frac", &warmup_frac},
            {"decay", &decay},
            {"beta1", &beta1},
            {"beta2", &beta2},
            {"adam_eps", &adam_eps},
            {"weight_decay", &weight_decay},
            {"clip_norm", &clip_norm},
            {"seed", &seed},
            {"ckpt_every", &ckpt_every},
            {"abort_after", &abort_after},
            {"monitor_window", &monitor_window},
            {"spike_k", &spike_k},
            {"plateau_window", &plateau_window},
            {"plateau_tau", &plateau_tau},
            {"vocab_size", &vocab_size},
            {"max_patches", &max_patches},
            {"prefix", &prefix},
            {"eos_black_patch", &eos_black_patch},
            {"patch_rate", &patch_rate},
            {"span_masking", &span_masking},
            {"text_rate", &text_rate},
            {"embedding_layernorm", &embedding_layernorm},
            {"loss_weight_text", &loss_weight_text},
            {"no_patch_pred", &no_patch_pred},
            {"text_only", &text_only},
            {"ar_max_patches", &ar_max_patches}};
  }

  void set(const std::string& key, const std::string& value) {
    for (auto& [name, field] : fields()) {
      if (name != key) continue;
      try {
        std::visit(
            [&value](auto* p) {
              using P = std::remove_pointer_t<decltype(p)>;
              if constexpr (std::is_same_v<P, std::string>) {
                *p = value;
              } else if constexpr (std::is_same_v<P, bool>) {
                if (value == "true" || value == "1") *p = true;
                else if (value == "false" || value == "0") *p = false;
                else throw Error("expected true/false");
              } else {
                std::size_t used = 0;
                if constexpr (std::is_same_v<P, int>) *p = std::stoi(value, &used);
                else if constexpr (std::is_same_v<P, double>) *p = std::stod(value, &used);
                else *p = std::stoull(value, &used);
                if (used != value.size()) throw Error("trailing characters");
              }
            },
            field);
      } catch (const std::exception& e) {
        throw Error("config key '" + key + "': bad value '" + value + "' (" + e.what() + ")");
      }
      return;
    }
    throw Error("unknown config key '" + key + "'");
  }

  void apply(const std::vector<std::pair<std::string, std::string>>& kv) {
    for (const auto& [k, v] : kv) set(k, v);
  }

  std::string dump() {
    std::string out;
    for (auto& [name, field] : fields()) {
      out += name + " = ";
      std::visit(
          [&out](auto* p) {
            using P = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<P, std::string>) out += *p;
            else if constexpr (std::is_same_v<P, bool>) out += *p ? "true" : "false";
            else if constexpr (std::is_same_v<P, double>) out += format_real(*p);
            else out += std::to_string(*p);
          },
          field);
      out += "\n";
    }
    return out;
  }

  Schedule schedule() const {
    Schedule s;
    s.peak_lr = peak_lr;
    s.min_lr = min_lr;
    s.total_steps = std::max(steps, 1);
    s.warmup_steps = static_cast<std::int64_t>(std::llround(warmup_frac * steps));
    if (decay == "cosine") s.shape = DecayShape::kCosine;
    else if (decay == "linear") s.shape = DecayShape::kLinear;
    else throw Error("decay must be cosine or linear");
    return s;
  }

  OptimState optimizer() const {
    OptimState st;
    st.beta1 = beta1;
    st.beta2 = beta2;
    st.eps = adam_eps;
    st.weight_decay = weight_decay;
    return st;
  }

  MaskConfig mask_config(int channels) const {
    MaskConfig m;
    m.patch_rate = patch_rate;
    m.span_masking = span_masking;
    m.text_rate = text_rate;
    m.channels = channels;
    return m;
  }

  PTPConfig ptp_config(const Vocab& vocab) const {
    PTPConfig c = ptp_preset(preset);
    c.vocab_size = static_cast<int>(vocab.size());
    if (max_patches > 0) c.max_patches = max_patches;
    c.use_embedding_layernorm = embedding_layernorm;
    c.loss_weight_text = loss_weight_text;
    return c;
  }

  ARConfig ar_config(const Vocab& vocab) const {
    ARConfig c = ar_preset(preset);
    c.vocab_size = static_cast<int>(vocab.size());
    c.loss_weight_text = loss_weight_text;
    return c;
  }

  RenderConfig render_config(int model_max_patches, int patch_w) const {
    RenderConfig r;
    r.max_patches = model_max_patches;
    r.patch_width = patch_w;
    r.prefix = prefix;
    r.eos_black_patch = eos_black_patch;
    return r;
  }

  /// BPE size used when a run trains its own vocabulary.
  int effective_vocab_size() const {
    if (vocab_size > 0) return vocab_size;
    return model == "ar" ? ar_preset(preset).vocab_size : ptp_preset(preset).vocab_size;
  }
};

// ---------------------------------------------------------------------------
// Example construction

/// Drops trailing words until `text` encodes to at most `max_tokens`.
inline std::string fit_tokens(std::string text, const Vocab& vocab, int max_tokens) {
  while (static_cast<int>(encode(text, vocab).size()) > max_tokens) {
    const auto cut = text.find_last_of(' ');
    if (cut == std::string::npos || cut == 0) {
      auto toks = encode(text, vocab);
      toks.resize(static_cast<std::size_t>(std::max(max_tokens, 1)));
      return decode(toks, vocab);
    }
    text.resize(cut);
  }
  return text;
}

/// (screenshot text, following text) for one autoregressive corpus line: an
/// explicit TAB-separated pair, or the line split in half at a word boundary.
inline std::pair<std::string, std::string> ar_segments(const std::string& line) {
  if (const auto tab = line.find('\t'); tab != std::string::npos) {
    return {line.substr(0, tab), line.substr(tab + 1)};
  }
  const auto words = split(line, ' ');
  const std::size_t half = (words.size() + 1) / 2;
  std::string a, b;
  for (std::size_t i = 0; i < words.size(); ++i) {
    auto& dst = i < half ? a : b;
    if (!dst.empty()) dst += ' ';
    dst += words[i];
  }
  return {a, b};
}

struct ARDataOptions {
  RenderConfig render;
  int max_seq = 0;
  int channels = 1;
  bool text_only = false;
};

/// Mixed sequence for one corpus line; the text segment ends with EOS and
/// is truncated to fit max_seq.
inline MixedSequence make_ar_sequence(const std::string& line, const GlyphAtlas& atlas, const Vocab& vocab,
                                      const ARDataOptions& opt) {
  const auto [shot_text, follow_text] = ar_segments(line);
  if (opt.text_only) {
    TokenSequence toks{special_id(Special::kBos)};
    const auto body = encode(replace_all(line, "\t", " "), vocab);
    toks.insert(toks.end(), body.begin(), body.end());
    toks.push_back(special_id(Special::kEos));
    if (static_cast<int>(toks.size()) > opt.max_seq) toks.resize(static_cast<std::size_t>(opt.max_seq));
    return token_sequence(toks);
  }
  const auto shot = render_ar_screenshot(shot_text, atlas, opt.render);
  TokenSequence follow = encode(follow_text, vocab);
  follow.push_back(special_id(Special::kEos));
  const int n = shot.num_patches();
  const int budget = opt.max_seq - (n + 3);
  if (budget < 0) throw Error("make_ar_sequence: screenshot alone exceeds max_seq");
  if (static_cast<int>(follow.size()) > budget) follow.resize(static_cast<std::size_t>(budget));
  return build_mixed_input(shot, follow, vocab, n, opt.channels);
}

/// Same layout as `seq` with every patch replaced by a white patch.
inline MixedSequence blank_patches(MixedSequence seq) {
  for (auto& e : seq.elements) {
    if (e.is_patch()) std::fill(e.patch.begin(), e.patch.end(), 1.0f);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Pre-training loop

struct MetricsRow {
  std::int64_t step = 0;
  double lr = 0;
  double mse = 0;
  double ce = 0;
  double total = 0;
  bool spike = false;
  bool plateau = false;
};

inline std::string metrics_header() { return "step\tlr\tmse\tce\ttotal\tspike\tplateau"; }

inline std::string format_metrics(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld\t%.9g\t%.9g\t%.9g\t%.9g\t%d\t%d", static_cast<long long>(r.step), r.lr, r.mse,
                r.ce, r.total, r.spike ? 1 : 0, r.plateau ? 1 : 0);
  return buf;
}

struct PretrainResult {
  Checkpoint final_checkpoint;
  std::vector<MetricsRow> log;
  bool aborted = false;
  std::string diagnostic_checkpoint;  // path, when aborted and an output dir was given
};

struct PretrainIO {
  std::string out_dir;                 // empty: nothing written
  std::ostream* progress = nullptr;    // optional per-step metrics echo
  int progress_every = 100;
};

namespace detail {

/// Shared optimization loop. `batch_loss(index, rng)` must build the graph
/// for one example and return {mse, ce, total} tensors.
template <typename Model, typename LossFn>
PretrainResult train_loop(Model& model, const TrainConfig& cfg, std::size_t corpus_size, LossFn batch_loss,
                          const PretrainIO& io) {
  if (corpus_size == 0) throw Error("run_pretraining: empty corpus");
  if (cfg.batch <= 0 || cfg.steps < 0) throw Error("run_pretraining: batch must be positive and steps non-negative");
  PretrainResult res;
  const auto schedule = cfg.schedule();
  auto opt = cfg.optimizer();
  StabilityMonitor monitor(cfg.monitor_window, cfg.spike_k, cfg.plateau_window, cfg.plateau_tau);
  Rng order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  Rng data_rng(cfg.seed + 1);
  std::vector<std::size_t> order(corpus_size);
  std::size_t cursor = corpus_size;

  std::ofstream metrics;
  if (!io.out_dir.empty()) {
    std::filesystem::create_directories(io.out_dir);
    metrics.open(io.out_dir + "/metrics.tsv");
    if (!metrics) throw Error("cannot write " + io.out_dir + "/metrics.tsv");
    metrics << metrics_header() << "\n";
  }
  int bad_streak = 0;
  for (int step = 1; step <= cfg.steps; ++step) {
    model.params().zero_grad();
    double mse = 0, ce = 0, total = 0;
    for (int b = 0; b < cfg.batch; ++b) {
      if (cursor == corpus_size) {
        for (std::size_t i = 0; i < corpus_size; ++i) order[i] = i;
        order_rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      Rng ex_rng = data_rng.fork(static_cast<std::uint64_t>(step) * 1000003u + static_cast<std::uint64_t>(b));
      const auto [l_mse, l_ce, l_total] = batch_loss(order[cursor++], ex_rng);
      backward(l_total, static_cast<decltype(l_total.item())>(1.0 / cfg.batch));
      mse += static_cast<double>(l_mse.item()) / cfg.batch;
      ce += static_cast<double>(l_ce.item()) / cfg.batch;
      total += static_cast<double>(l_total.item()) / cfg.batch;
    }
    MetricsRow row;
    row.step = step;
    row.lr = lr_at(schedule, step);
    row.mse = mse;
    row.ce = ce;
    row.total = total;
    if (!std::isfinite(total)) {
      ++bad_streak;
    } else {
      bad_streak = 0;
      const auto flags = monitor.observe(total);
      row.spike = flags.spike;
      row.plateau = flags.plateau;
      if (cfg.clip_norm > 0) clip_grad_norm(model.params(), cfg.clip_norm);
      adamw_step(model.params(), opt, row.lr);
    }
    res.log.push_back(row);
    if (metrics) metrics << format_metrics(row) << "\n" << std::flush;
    if (io.progress && (step % io.progress_every == 0 || step == cfg.steps)) *io.progress << format_metrics(row) << "\n";
    if (bad_streak >= cfg.abort_after) {
      res.aborted = true;
      res.final_checkpoint = model.to_checkpoint(step);
      if (!io.out_dir.empty()) {
        res.diagnostic_checkpoint = io.out_dir + "/diagnostic.ckpt";
        save_checkpoint(res.final_checkpoint, res.diagnostic_checkpoint);
      }
      return res;
    }
    if (!io.out_dir.empty() && cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0) {
      save_checkpoint(model.to_checkpoint(step), io.out_dir + "/step_" + std::to_string(step) + ".ckpt");
    }
  }
  res.final_checkpoint = model.to_checkpoint(cfg.steps);
  if (!io.out_dir.empty()) save_checkpoint(res.final_checkpoint, io.out_dir + "/final.ckpt");
  return res;
}

template <typename T>
struct LossTriple {
  Tensor<T> mse, ce, total;
};

}  // namespace detail

/// Pre-trains a PTP model from `cfg` (or continues from `init`).
inline PretrainResult run_ptp_pretraining(const std::vector<std::string>& corpus, const TrainConfig& cfg,
                                          const Vocab& vocab, const GlyphAtlas& atlas, const PretrainIO& io = {},
                                          const Checkpoint* init = nullptr) {
  PTPModel<float> model = init ? PTPModel<float>::from_checkpoint(*init) : PTPModel<float>(cfg.ptp_config(vocab), cfg.seed);
  const auto& mc = model.config();
  const auto render = cfg.render_config(mc.max_patches, mc.patch_w);
  const auto mask = cfg.mask_config(mc.channels);
  std::vector<std::string> texts;
  for (const auto& line : corpus) texts.push_back(fit_tokens(line, vocab, mc.max_text_len - 1));
  return detail::train_loop(
      model, cfg, texts.size(),
      [&](std::size_t i, Rng& rng) {
        const auto ex = assemble_ptp_example(texts[i], atlas, render, mask, vocab, rng);
        auto out = model.loss(ex);
        return detail::LossTriple<float>{out.mse_patch, out.ce_text, out.total};
      },
      io);
}

/// Pre-trains an autoregressive model. With `init` from a text-only run and
/// cfg.text_only false, the patch path is re-initialized before training.
inline PretrainResult run_ar_pretraining(const std::vector<std::string>& corpus, const TrainConfig& cfg,
                                         const Vocab& vocab, const GlyphAtlas& atlas, const PretrainIO& io = {},
                                         const Checkpoint* init = nullptr) {
  ARModel<float> model = init ? ARModel<float>::from_checkpoint(*init) : ARModel<float>(cfg.ar_config(vocab), cfg.seed);
  if (init && !cfg.text_only) model.reinitialize_patch_path(cfg.seed);
  ARDataOptions opt;
  opt.render = cfg.render_config(cfg.ar_max_patches, model.config().patch_w);
  opt.render.line_height = model.config().patch_h;
  opt.max_seq = model.config().max_seq;
  opt.channels = model.config().channels;
  opt.text_only = cfg.text_only;
  std::vector<MixedSequence> seqs;
  for (const auto& line : corpus) seqs.push_back(make_ar_sequence(line, atlas, vocab, opt));
  return detail::train_loop(
      model, cfg, seqs.size(),
      [&](std::size_t i, Rng&) {
        auto out = model.loss(seqs[i], cfg.no_patch_pred);
        return detail::LossTriple<float>{out.mse_patch, out.ce_text, out.total};
      },
      io);
}

/// Dispatches on cfg.model.
inline PretrainResult run_pretraining(const std::vector<std::string>& corpus, const TrainConfig& cfg,
                                      const Vocab& vocab, const GlyphAtlas& atlas, const PretrainIO& io = {},
                                      const Checkpoint* init = nullptr) {
  if (cfg.model == "ptp") return run_ptp_pretraining(corpus, cfg, vocab, atlas, io, init);
  if (cfg.model == "ar") return run_ar_pretraining(corpus, cfg, vocab, atlas, io, init);
  throw Error("model must be ptp or ar, got '" + cfg.model + "'");
}

/// Non-empty lines of a UTF-8 corpus file.
inline std::vector<std::string> load_corpus(const std::string& path) {
  std::vector<std::string> out;
  for (auto& line : split(read_text_file(path), '\n')) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!trim(line).empty()) out.push_back(line);
  }
  return out;
}

}  // namespace ptp
