// Fine-tuning and evaluation: encoder-only heads, label-text generation,
// metrics, synthetic task generators and the grid-search harness.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ptp/patchwork.hpp"
#include "ptp/ptp_model.hpp"
#include "ptp/screenrender.hpp"
#include "ptp/trainer.hpp"

namespace ptp {

enum class TaskKind { kClassification, kRegression };
enum class MetricKind { kAccuracy, kF1, kMatthews, kSpearman };
enum class FinetuneMode { kEncoderOnly, kS2S };

inline MetricKind parse_metric(const std::string& s) {
  if (s == "accuracy") return MetricKind::kAccuracy;
  if (s == "f1") return MetricKind::kF1;
  if (s == "matthews") return MetricKind::kMatthews;
  if (s == "spearman") return MetricKind::kSpearman;
  throw Error("unknown metric '" + s + "'");
}

inline std::string metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::kAccuracy: return "accuracy";
    case MetricKind::kF1: return "f1";
    case MetricKind::kMatthews: return "matthews";
    case MetricKind::kSpearman: return "spearman";
  }
  return "?";
}

inline FinetuneMode parse_mode(const std::string& s) {
  if (s == "encoder_only") return FinetuneMode::kEncoderOnly;
  if (s == "s2s") return FinetuneMode::kS2S;
  throw Error("mode must be encoder_only or s2s, got '" + s + "'");
}

struct TaskSpec {
  TaskKind kind = TaskKind::kClassification;
  std::vector<std::string> label_texts;  // class order; needed for s2s classification
  int n_classes = 2;
  MetricKind metric = MetricKind::kAccuracy;
  bool pair_task = false;

  int head_outputs() const { return kind == TaskKind::kRegression ? 1 : n_classes; }

  void validate() const {
    if (kind == TaskKind::kClassification) {
      if (n_classes < 2) throw Error("task: classification needs at least 2 classes");
      if (!label_texts.empty() && static_cast<int>(label_texts.size()) != n_classes) {
        throw Error("task: label_texts must list one text per class");
      }
      if (metric == MetricKind::kSpearman) throw Error("task: spearman is a regression metric");
      if ((metric == MetricKind::kF1 || metric == MetricKind::kMatthews) && n_classes != 2) {
        throw Error("task: f1/matthews need a binary task");
      }
    } else if (metric != MetricKind::kSpearman) {
      throw Error("task: regression tasks use the spearman metric");
    }
  }

  /// "key = value" lines: kind, n_classes, metric, pair, label_texts (comma separated).
  static TaskSpec parse(std::string_view text) {
    TaskSpec t;
    for (const auto& [k, v] : parse_kv_config(text)) {
      try {
        if (k == "kind") {
          if (v == "classification") t.kind = TaskKind::kClassification;
          else if (v == "regression") t.kind = TaskKind::kRegression;
          else throw Error("task kind must be classification or regression");
        } else if (k == "n_classes") {
          t.n_classes = std::stoi(v);
        } else if (k == "metric") {
          t.metric = parse_metric(v);
        } else if (k == "pair") {
          t.pair_task = v == "true" || v == "1";
        } else if (k == "label_texts") {
          t.label_texts.clear();
          for (const auto& s : split(v, ',')) t.label_texts.push_back(trim(s));
        } else {
          throw Error("unknown task spec key '" + k + "'");
        }
      } catch (const std::logic_error&) {
        throw Error("task spec key '" + k + "': bad value '" + v + "'");
      }
    }
    t.validate();
    return t;
  }

  std::string dump() const {
    std::string labels;
    for (const auto& l : label_texts) labels += (labels.empty() ? "" : ",") + l;
    return std::string("kind = ") + (kind == TaskKind::kRegression ? "regression" : "classification") +
           "\nn_classes = " + std::to_string(n_classes) + "\nmetric = " + metric_name(metric) +
           "\npair = " + (pair_task ? "true" : "false") + "\nlabel_texts = " + labels + "\n";
  }
};

/// Desk-scale default grid. Large models fine-tune at {1e-5, 3e-5, 5e-5};
/// the small presets need higher rates.
struct GridSpec {
  std::vector<double> lrs{3e-4, 1e-3};
  std::vector<int> batch_sizes{16};
  std::vector<int> steps{300};
  std::vector<std::uint64_t> seeds{42, 43, 44};
  int eval_every = 100;
  double warmup_frac = 0.1;
  double weight_decay = 0.01;

  void validate() const {
    if (lrs.empty() || batch_sizes.empty() || steps.empty() || seeds.empty()) throw Error("grid: every list must be nonempty");
    if (eval_every <= 0) throw Error("grid: eval_every must be positive");
  }

  static GridSpec parse(std::string_view text) {
    GridSpec g;
    const auto list = [](const std::string& v) {
      std::vector<std::string> out;
      for (const auto& s : split(v, ',')) out.push_back(trim(s));
      return out;
    };
    for (const auto& [k, v] : parse_kv_config(text)) {
      try {
        if (k == "lrs") {
          g.lrs.clear();
          for (const auto& s : list(v)) g.lrs.push_back(std::stod(s));
        } else if (k == "batch_sizes") {
          g.batch_sizes.clear();
          for (const auto& s : list(v)) g.batch_sizes.push_back(std::stoi(s));
        } else if (k == "steps") {
          g.steps.clear();
          for (const auto& s : list(v)) g.steps.push_back(std::stoi(s));
        } else if (k == "seeds") {
          g.seeds.clear();
          for (const auto& s : list(v)) g.seeds.push_back(std::stoull(s));
        } else if (k == "eval_every") {
          g.eval_every = std::stoi(v);
        } else if (k == "warmup_frac") {
          g.warmup_frac = std::stod(v);
        } else if (k == "weight_decay") {
          g.weight_decay = std::stod(v);
        } else {
          throw Error("unknown grid key '" + k + "'");
        }
      } catch (const std::logic_error&) {
        throw Error("grid key '" + k + "': bad value '" + v + "'");
      }
    }
    g.validate();
    return g;
  }

  std::string dump() const {
    const auto join = [](const auto& xs) {
      std::string s;
      for (const auto& x : xs) {
        if (!s.empty()) s += ",";
        if constexpr (std::is_floating_point_v<std::decay_t<decltype(x)>>) s += format_real(x);
        else s += std::to_string(x);
      }
      return s;
    };
    return "lrs = " + join(lrs) + "\nbatch_sizes = " + join(batch_sizes) + "\nsteps = " + join(steps) +
           "\nseeds = " + join(seeds) + "\neval_every = " + std::to_string(eval_every) +
           "\nwarmup_frac = " + format_real(warmup_frac) + "\nweight_decay = " + format_real(weight_decay) + "\n";
  }
};

struct TaskExample {
  std::string s1;
  std::optional<std::string> s2;
  double label = 0;
};

// ---------------------------------------------------------------------------
// Task data TSV: sentence1<TAB>[sentence2<TAB>]label

inline std::vector<TaskExample> parse_task_tsv(std::string_view text, bool pair_task) {
  std::vector<TaskExample> out;
  int line_no = 0;
  for (auto line : split(text, '\n')) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto cols = split(line, '\t');
    const std::size_t want = pair_task ? 3 : 2;
    if (cols.size() != want) {
      throw Error("task TSV line " + std::to_string(line_no) + ": expected " + std::to_string(want) + " columns");
    }
    TaskExample ex;
    ex.s1 = cols[0];
    if (pair_task) ex.s2 = cols[1];
    try {
      std::size_t used = 0;
      ex.label = std::stod(cols.back(), &used);
      if (used != cols.back().size()) throw Error("trailing text");
    } catch (const std::exception&) {
      throw Error("task TSV line " + std::to_string(line_no) + ": bad label '" + cols.back() + "'");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::string format_task_tsv(const std::vector<TaskExample>& data) {
  std::string out;
  for (const auto& ex : data) {
    out += ex.s1 + "\t";
    if (ex.s2) out += *ex.s2 + "\t";
    out += format_real(ex.label) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inputs and heads

/// prefix + s1 (+ "////" + s2), single line, EOS black patch per `cfg`.
inline Screenshot render_task_input(const std::string& s1, const std::optional<std::string>& s2, const GlyphAtlas& atlas,
                                    const RenderConfig& cfg) {
  if (s1.empty()) throw Error("render_task_input: empty first sentence");
  std::string text = s1;
  if (s2) text += cfg.newline_symbol + *s2;
  return render_line(text, atlas, cfg);
}

/// Rendered, patched fine-tuning input with its attention mask.
struct TaskInput {
  PatchGrid grid;
  AttentionMask attention;
};

inline TaskInput prepare_task_input(const TaskExample& ex, const GlyphAtlas& atlas, const RenderConfig& cfg,
                                    int channels) {
  const auto shot = render_task_input(ex.s1, ex.s2, atlas, cfg);
  TaskInput in;
  in.grid = split_patches(shot, cfg.line_height, cfg.patch_width, channels);
  in.attention = attention_mask(in.grid, shot.eos_patch_index);
  return in;
}

template <typename T>
struct EncoderHead {
  Linear<T> proj;
};

template <typename T>
EncoderHead<T> make_encoder_head(ParamStore<T>& ps, int hidden, int outputs, Rng& rng) {
  return {make_linear(ps, "head", hidden, outputs, true, rng)};
}

/// Mean of the last-layer states of the attended patches (CLS excluded).
template <typename T>
Tensor<T> pooled_features(const PTPModel<T>& model, const TaskInput& in) {
  const auto enc = model.encode(in.grid, in.attention, PatchMaskPlan{});
  std::vector<int> rows(enc.kept.size());
  std::iota(rows.begin(), rows.end(), 1);
  return mean_rows(select_rows(enc.states, rows));
}

template <typename T>
Tensor<T> encoder_head_forward(const PTPModel<T>& model, const EncoderHead<T>& head, const TaskInput& in) {
  return head.proj(pooled_features(model, in));
}

// ---------------------------------------------------------------------------
// Label texts

/// Nearest multiple of 0.2, ties upward, as text with one decimal.
inline std::string sts_label_text(double value) {
  const long long k = static_cast<long long>(std::floor(value * 5.0 + 0.5));
  const long long tenths = 2 * k;
  const long long whole = tenths / 10, frac = tenths % 10;
  std::string s = (tenths < 0 ? "-" : "") + std::to_string(std::llabs(whole)) + "." + std::to_string(std::llabs(frac));
  if (tenths < 0 && whole == 0) s = "-0." + std::to_string(std::llabs(frac));
  return s;
}

inline std::string label_text(const TaskSpec& spec, double label) {
  if (spec.kind == TaskKind::kRegression) return sts_label_text(label);
  const long idx = std::lround(label);
  if (idx < 0 || idx >= static_cast<long>(spec.label_texts.size())) {
    throw Error("label_text: class " + std::to_string(idx) + " has no label text");
  }
  return spec.label_texts[static_cast<std::size_t>(idx)];
}

struct ParsedPrediction {
  double value = 0.0;
  bool ok = true;
};

/// Classification: index of the matching label text, or -1. Regression: the
/// parsed number, or 0.0 with ok=false.
inline ParsedPrediction parse_label_text(const TaskSpec& spec, const std::string& generated) {
  const auto text = trim(generated);
  if (spec.kind == TaskKind::kClassification) {
    for (std::size_t i = 0; i < spec.label_texts.size(); ++i) {
      if (spec.label_texts[i] == text) return {static_cast<double>(i), true};
    }
    return {-1.0, false};
  }
  if (text.empty()) return {0.0, false};
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (end != text.c_str() + text.size() || !std::isfinite(v)) return {0.0, false};
  return {v, true};
}

// ---------------------------------------------------------------------------
// Metrics

namespace detail {

inline void check_metric_inputs(const std::vector<double>& p, const std::vector<double>& g) {
  if (p.size() != g.size()) throw Error("metric: predictions and golds differ in length");
  if (p.empty()) throw Error("metric: empty input");
}

struct Confusion {
  double tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Confusion confusion(const std::vector<double>& p, const std::vector<double>& g) {
  Confusion c;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pp = p[i] == 1.0, gp = g[i] == 1.0;
    if (pp && gp) ++c.tp;
    else if (pp) ++c.fp;
    else if (gp) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// 1-based ranks; ties share the average rank.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&x](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace detail

inline double accuracy(const std::vector<double>& preds, const std::vector<double>& golds) {
  detail::check_metric_inputs(preds, golds);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == golds[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

/// F1 of the positive class (label 1).
inline double f1_score(const std::vector<double>& preds, const std::vector<double>& golds) {
  detail::check_metric_inputs(preds, golds);
  const auto c = detail::confusion(preds, golds);
  const double denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 0.0 : 2 * c.tp / denom;
}

inline double matthews(const std::vector<double>& preds, const std::vector<double>& golds) {
  detail::check_metric_inputs(preds, golds);
  const auto c = detail::confusion(preds, golds);
  const double d = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn);
  if (d == 0) return 0.0;
  return (c.tp * c.tn - c.fp * c.fn) / std::sqrt(d);
}

inline double spearman(const std::vector<double>& preds, const std::vector<double>& golds) {
  detail::check_metric_inputs(preds, golds);
  return detail::pearson(detail::average_ranks(preds), detail::average_ranks(golds));
}

inline double metric(MetricKind kind, const std::vector<double>& preds, const std::vector<double>& golds) {
  switch (kind) {
    case MetricKind::kAccuracy: return accuracy(preds, golds);
    case MetricKind::kF1: return f1_score(preds, golds);
    case MetricKind::kMatthews: return matthews(preds, golds);
    case MetricKind::kSpearman: return spearman(preds, golds);
  }
  throw Error("metric: unknown kind");
}

// ---------------------------------------------------------------------------
// Synthetic tasks

namespace detail {

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> w{"the", "a", "dog", "tree", "house", "river", "stone", "cloud", "road",
                                          "book", "chair", "lamp", "field", "train", "bird", "door"};
  return w;
}

inline std::string sentence_with(Rng& rng, int n_words, const std::vector<std::string>& inserts) {
  std::vector<std::string> words;
  const auto& f = filler_words();
  for (int i = 0; i < n_words; ++i) words.push_back(f[rng.below(f.size())]);
  for (const auto& w : inserts) {
    words.insert(words.begin() + static_cast<std::ptrdiff_t>(rng.below(words.size() + 1)), w);
  }
  std::string s;
  for (const auto& w : words) s += (s.empty() ? "" : " ") + w;
  return s;
}

}  // namespace detail

/// Binary polarity: each sentence carries one keyword from a positive or a
/// negative set among filler words; label 0 for positive, so "good,bad"
/// label texts line up. A single keyword is a weak signal under mean pooling.
inline std::vector<TaskExample> make_polarity_task(int n, Rng& rng) {
  static const std::vector<std::string> pos{"great", "lovely", "superb", "happy"};
  static const std::vector<std::string> neg{"awful", "boring", "gloomy", "nasty"};
  std::vector<TaskExample> out;
  for (int i = 0; i < n; ++i) {
    const bool positive = rng.below(2) == 0;
    const auto& set = positive ? pos : neg;
    TaskExample ex;
    ex.s1 = detail::sentence_with(rng, 3 + static_cast<int>(rng.below(3)), {set[rng.below(set.size())]});
    ex.label = positive ? 0.0 : 1.0;
    out.push_back(std::move(ex));
  }
  return out;
}

/// Binary topic: every word of a sentence comes from the class vocabulary
/// (warm weather vs cold weather). Label 0 for warm.
inline std::vector<TaskExample> make_topic_task(int n, Rng& rng) {
  static const std::vector<std::string> warm{"sun", "beach", "warm", "summer", "sand", "swim", "hot", "bright"};
  static const std::vector<std::string> cold{"snow", "ice", "cold", "winter", "frost", "sled", "chill", "dark"};
  std::vector<TaskExample> out;
  for (int i = 0; i < n; ++i) {
    const bool is_warm = rng.below(2) == 0;
    const auto& words = is_warm ? warm : cold;
    const int k = 3 + static_cast<int>(rng.below(3));
    TaskExample ex;
    for (int j = 0; j < k; ++j) {
      if (j) ex.s1 += ' ';
      ex.s1 += words[rng.below(words.size())];
    }
    ex.label = is_warm ? 0.0 : 1.0;
    out.push_back(std::move(ex));
  }
  return out;
}

/// Label = parity of the number of occurrences of the keyword "red".
inline std::vector<TaskExample> make_keyword_parity_task(int n, int max_keywords, Rng& rng) {
  std::vector<TaskExample> out;
  for (int i = 0; i < n; ++i) {
    const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_keywords) + 1));
    TaskExample ex;
    ex.s1 = detail::sentence_with(rng, 3, std::vector<std::string>(static_cast<std::size_t>(k), "red"));
    ex.label = static_cast<double>(k % 2);
    out.push_back(std::move(ex));
  }
  return out;
}

/// Sentence mentions a number in [0, 5]; the target is that number.
inline std::vector<TaskExample> make_number_regression_task(int n, Rng& rng) {
  std::vector<TaskExample> out;
  for (int i = 0; i < n; ++i) {
    const double v = static_cast<double>(rng.below(51)) / 10.0;
    char num[16];
    std::snprintf(num, sizeof num, "%.1f", v);
    TaskExample ex;
    ex.s1 = detail::sentence_with(rng, 2, {std::string("score ") + num});
    ex.label = v;
    out.push_back(std::move(ex));
  }
  return out;
}

/// Sentence pairs: the hypothesis repeats the premise's subject (entailment,
/// class 0), swaps in an unrelated subject (neutral, 1), or negates it
/// (contradiction, 2). Label texts "yes,maybe,no".
inline std::vector<TaskExample> make_entailment_task(int n, Rng& rng) {
  static const std::vector<std::string> subj{"dog", "bird", "train", "lamp", "river", "cloud"};
  std::vector<TaskExample> out;
  for (int i = 0; i < n; ++i) {
    const auto& a = subj[rng.below(subj.size())];
    auto b = subj[rng.below(subj.size())];
    while (b == a) b = subj[rng.below(subj.size())];
    const int cls = static_cast<int>(rng.below(3));
    TaskExample ex;
    ex.s1 = "the " + a + " is here";
    ex.s2 = cls == 0 ? "a " + a + " is here" : cls == 1 ? "a " + b + " is here" : "no " + a + " is here";
    ex.label = cls;
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning and the grid harness

struct FinetuneOptions {
  FinetuneMode mode = FinetuneMode::kEncoderOnly;
  double lr = 1e-3;
  int batch = 16;
  int steps = 100;
  std::uint64_t seed = 42;
  int eval_every = 100;
  double warmup_frac = 0.1;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
};

struct FinetuneResult {
  double best_score = 0;
  int best_step = 0;
  std::vector<std::pair<int, double>> curve;  // (step, validation score)
  int unparseable = 0;  // s2s generations that matched no label at the best step
};

/// One fine-tuning run with periodic validation (including step 0).
class Finetuner {
 public:
  Finetuner(const Checkpoint& base, const TaskSpec& spec, const Vocab& vocab, const FinetuneOptions& opt,
            const RenderConfig& render)
      : model_(PTPModel<float>::from_checkpoint(base)), spec_(spec), vocab_(vocab), opt_(opt) {
    spec_.validate();
    if (opt_.mode == FinetuneMode::kS2S && spec_.kind == TaskKind::kClassification && spec_.label_texts.empty()) {
      throw Error("s2s fine-tuning needs label_texts");
    }
    render_ = render;
    render_.max_patches = model_.config().max_patches;
    render_.patch_width = model_.config().patch_w;
    render_.line_height = model_.config().patch_h;
    Rng rng(opt_.seed);
    for (const auto& [name, t] : model_.params().entries()) {
      const bool enc = name.rfind("enc.", 0) == 0;
      const bool txt = name.rfind("txtdec.", 0) == 0;
      if (enc || (opt_.mode == FinetuneMode::kS2S && txt)) trainable_.adopt(name, t);
    }
    if (opt_.mode == FinetuneMode::kEncoderOnly) {
      head_ = make_encoder_head(trainable_, model_.config().encoder.hidden, spec_.head_outputs(), rng);
    }
  }

  PTPModel<float>& model() { return model_; }
  const EncoderHead<float>& head() const { return head_; }

  /// Validation predictions (class indices or values) for prepared inputs.
  std::vector<double> predict(const std::vector<TaskInput>& inputs, int* unparseable = nullptr) const {
    std::vector<double> out;
    int bad = 0;
    for (const auto& in : inputs) {
      if (opt_.mode == FinetuneMode::kEncoderOnly) {
        const auto y = encoder_head_forward(model_, head_, in);
        if (spec_.kind == TaskKind::kRegression) {
          out.push_back(static_cast<double>(y.item()));
        } else {
          const auto r = y.row(0);
          out.push_back(static_cast<double>(std::max_element(r.begin(), r.end()) - r.begin()));
        }
      } else {
        const auto enc = model_.encode(in.grid, in.attention, PatchMaskPlan{});
        const auto gen = decode(model_.generate(enc.states, max_label_tokens() + 2), vocab_);
        const auto p = parse_label_text(spec_, gen);
        if (!p.ok) ++bad;
        out.push_back(p.value);
      }
    }
    if (unparseable) *unparseable = bad;
    return out;
  }

  FinetuneResult run(const std::vector<TaskExample>& train, const std::vector<TaskExample>& valid,
                     const GlyphAtlas& atlas) {
    if (train.empty() || valid.empty()) throw Error("fine-tuning needs nonempty train and validation splits");
    std::vector<TaskInput> train_in, valid_in;
    for (const auto& ex : train) train_in.push_back(prepare_task_input(ex, atlas, render_, model_.config().channels));
    for (const auto& ex : valid) valid_in.push_back(prepare_task_input(ex, atlas, render_, model_.config().channels));
    std::vector<double> golds;
    for (const auto& ex : valid) golds.push_back(ex.label);
    std::vector<TokenSequence> targets;
    if (opt_.mode == FinetuneMode::kS2S) {
      for (const auto& ex : train) targets.push_back(PTPModel<float>::text_target(encode(label_text(spec_, ex.label), vocab_)));
    }

    FinetuneResult res;
    const auto evaluate = [&](int step) {
      int bad = 0;
      const double score = metric(spec_.metric, predict(valid_in, &bad), golds);
      res.curve.emplace_back(step, score);
      if (res.curve.size() == 1 || score > res.best_score) {
        res.best_score = score;
        res.best_step = step;
        res.unparseable = bad;
      }
    };
    evaluate(0);

    Schedule sched;
    sched.peak_lr = opt_.lr;
    sched.total_steps = std::max(opt_.steps, 1);
    sched.warmup_steps = static_cast<std::int64_t>(std::llround(opt_.warmup_frac * opt_.steps));
    sched.shape = DecayShape::kLinear;
    OptimState st;
    st.weight_decay = opt_.weight_decay;
    Rng rng(opt_.seed ^ 0x5bd1e995u);
    std::vector<std::size_t> order(train.size());
    std::size_t cursor = order.size();
    for (int step = 1; step <= opt_.steps; ++step) {
      trainable_.zero_grad();
      for (int b = 0; b < opt_.batch; ++b) {
        if (cursor == order.size()) {
          std::iota(order.begin(), order.end(), 0);
          rng.shuffle(order.begin(), order.end());
          cursor = 0;
        }
        const std::size_t i = order[cursor++];
        Tensor<float> loss;
        if (opt_.mode == FinetuneMode::kEncoderOnly) {
          const auto y = encoder_head_forward(model_, head_, train_in[i]);
          loss = spec_.kind == TaskKind::kRegression
                     ? mse(y, std::vector<float>{static_cast<float>(train[i].label)})
                     : cross_entropy(y, {static_cast<int>(std::lround(train[i].label))});
        } else {
          const auto enc = model_.encode(train_in[i].grid, train_in[i].attention, PatchMaskPlan{});
          const auto& t = targets[i];
          loss = cross_entropy(model_.decode_text(enc.states, t), std::vector<int>(t.begin(), t.end()));
        }
        backward(loss, 1.0f / static_cast<float>(opt_.batch));
      }
      if (opt_.clip_norm > 0) clip_grad_norm(trainable_, opt_.clip_norm);
      adamw_step(trainable_, st, lr_at(sched, step));
      if (step % opt_.eval_every == 0 || step == opt_.steps) evaluate(step);
    }
    return res;
  }

 private:
  int max_label_tokens() const {
    if (spec_.kind == TaskKind::kRegression) return 4;
    std::size_t m = 1;
    for (const auto& l : spec_.label_texts) m = std::max(m, encode(l, vocab_).size());
    return static_cast<int>(m);
  }

  PTPModel<float> model_;
  TaskSpec spec_;
  const Vocab& vocab_;
  FinetuneOptions opt_;
  RenderConfig render_;
  ParamStore<float> trainable_;
  EncoderHead<float> head_;
};

struct GridRow {
  double lr = 0;
  int batch = 0;
  int steps = 0;
  std::uint64_t seed = 0;
  double best_score = 0;
  int best_step = 0;
};

struct GridCell {
  double lr = 0;
  int batch = 0;
  int steps = 0;
  double mean_score = 0;
};

struct GridResult {
  std::vector<GridRow> rows;
  std::vector<GridCell> cells;
  std::size_t best_cell = 0;
};

inline std::string format_grid_row(const GridRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%g\t%d\t%d\t%llu\t%.6f\t%d\n", r.lr, r.batch, r.steps,
                static_cast<unsigned long long>(r.seed), r.best_score, r.best_step);
  return buf;
}

inline std::string format_grid_tsv(const GridResult& g) {
  std::string out = "lr\tbatch\tsteps\tseed\tbest_score\tbest_step\n";
  for (const auto& r : g.rows) out += format_grid_row(r);
  return out;
}

/// Grid search: every (lr, batch, steps) cell over every seed, best
/// validation score per run, mean over seeds per cell.
inline GridResult run_grid(const std::vector<TaskExample>& train, const std::vector<TaskExample>& valid,
                           const TaskSpec& spec, const GridSpec& grid, const Checkpoint& base, FinetuneMode mode,
                           const GlyphAtlas& atlas, const Vocab& vocab, const RenderConfig& render,
                           std::ostream* progress = nullptr) {
  grid.validate();
  GridResult res;
  for (const double lr : grid.lrs) {
    for (const int batch : grid.batch_sizes) {
      for (const int steps : grid.steps) {
        GridCell cell{lr, batch, steps, 0.0};
        for (const auto seed : grid.seeds) {
          FinetuneOptions opt;
          opt.mode = mode;
          opt.lr = lr;
          opt.batch = batch;
          opt.steps = steps;
          opt.seed = seed;
          opt.eval_every = grid.eval_every;
          opt.warmup_frac = grid.warmup_frac;
          opt.weight_decay = grid.weight_decay;
          Finetuner ft(base, spec, vocab, opt, render);
          const auto r = ft.run(train, valid, atlas);
          res.rows.push_back({lr, batch, steps, seed, r.best_score, r.best_step});
          cell.mean_score += r.best_score / static_cast<double>(grid.seeds.size());
          if (progress) *progress << format_grid_row(res.rows.back()) << std::flush;
        }
        res.cells.push_back(cell);
        if (cell.mean_score > res.cells[res.best_cell].mean_score) res.best_cell = res.cells.size() - 1;
      }
    }
  }
  return res;
}

}  // namespace ptp
