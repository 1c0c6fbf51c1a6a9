// Patch grids, patch/text masking, target standardization, attention masks
// and assembly of complete pre-training examples.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <sstream>
#include <string>
#include <vector>

#include "ptp/common.hpp"
#include "ptp/screenrender.hpp"
#include "ptp/textcodec.hpp"

namespace ptp {

// ---------------------------------------------------------------------------
// Patch grid

/// n patches of p_h*p_w*c values each, left to right. Within a patch the
/// layout is (row, column, channel).
struct PatchGrid {
  int n = 0;
  int p_h = 0;
  int p_w = 0;
  int c = 1;
  std::vector<float> data;

  int patch_dim() const { return p_h * p_w * c; }
  std::span<const float> patch(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * patch_dim(), static_cast<std::size_t>(patch_dim())};
  }
  std::span<float> patch(int i) {
    return {data.data() + static_cast<std::size_t>(i) * patch_dim(), static_cast<std::size_t>(patch_dim())};
  }
};

inline PatchGrid split_patches(const Screenshot& s, int p_h, int p_w, int c) {
  if (p_h <= 0 || p_w <= 0 || c <= 0) throw Error("split_patches: patch dimensions must be positive");
  if (s.height != p_h) {
    throw Error("split_patches: screenshot height " + std::to_string(s.height) +
                " does not match patch height " + std::to_string(p_h));
  }
  if (s.width % p_w != 0) {
    throw Error("split_patches: screenshot width " + std::to_string(s.width) +
                " is not a multiple of patch width " + std::to_string(p_w));
  }
  PatchGrid g;
  g.n = s.width / p_w;
  g.p_h = p_h;
  g.p_w = p_w;
  g.c = c;
  g.data.resize(static_cast<std::size_t>(g.n) * g.patch_dim());
  for (int i = 0; i < g.n; ++i) {
    auto dst = g.patch(i);
    for (int y = 0; y < p_h; ++y) {
      for (int x = 0; x < p_w; ++x) {
        const float v = s.at(y, i * p_w + x);
        for (int ch = 0; ch < c; ++ch) dst[static_cast<std::size_t>((y * p_w + x) * c + ch)] = v;
      }
    }
  }
  return g;
}

/// Inverse of split_patches (channel 0 of each pixel).
inline std::vector<float> reassemble(const PatchGrid& g) {
  const int width = g.n * g.p_w;
  std::vector<float> pixels(static_cast<std::size_t>(g.p_h) * width);
  for (int i = 0; i < g.n; ++i) {
    const auto src = g.patch(i);
    for (int y = 0; y < g.p_h; ++y) {
      for (int x = 0; x < g.p_w; ++x) {
        pixels[static_cast<std::size_t>(y) * width + i * g.p_w + x] =
            src[static_cast<std::size_t>((y * g.p_w + x) * g.c)];
      }
    }
  }
  return pixels;
}

// ---------------------------------------------------------------------------
// Patch masking

struct MaskSpan {
  int start = 0;
  int length = 0;
  int drawn_length = 0;  // length drawn from the span distribution before budget truncation

  bool operator==(const MaskSpan&) const = default;
};

struct PatchMaskPlan {
  int n_maskable = 0;
  double target_rate = 0.0;
  std::vector<int> masked;  // sorted ascending
  std::vector<MaskSpan> spans;

  bool is_masked(int i) const { return std::binary_search(masked.begin(), masked.end(), i); }
  bool operator==(const PatchMaskPlan&) const = default;
};

inline int masked_count(int n_maskable, double rate) {
  return static_cast<int>(std::lround(rate * static_cast<double>(n_maskable)));
}

namespace detail {
inline void finalize_plan(PatchMaskPlan& plan, const std::vector<char>& mask) {
  for (int i = 0; i < static_cast<int>(mask.size()); ++i) {
    if (mask[static_cast<std::size_t>(i)]) plan.masked.push_back(i);
  }
}
}  // namespace detail

/// Span masking with an exact budget of round(rate*n_maskable) patches.
///
/// Each round draws a span length by inverting `cum_weights` (length i+1 with
/// probability cum[i]-cum[i-1]), truncates it to the remaining budget, then
/// rejection-samples a start whose span is entirely unmasked. After 100
/// rejections the leftmost unmasked run that can hold the span is used instead
/// (or, if none is long enough, the leftmost run, shortening the span).
inline PatchMaskPlan span_mask(int n_maskable, double rate, int max_span,
                               const std::vector<double>& cum_weights, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) throw Error("span_mask: rate must be in [0,1]");
  if (static_cast<int>(cum_weights.size()) != max_span || max_span < 1) {
    throw Error("span_mask: cum_weights must have max_span entries");
  }
  for (std::size_t i = 0; i < cum_weights.size(); ++i) {
    if ((i > 0 && cum_weights[i] <= cum_weights[i - 1]) || cum_weights[i] <= 0.0) {
      throw Error("span_mask: cum_weights must be strictly increasing and positive");
    }
  }
  if (std::abs(cum_weights.back() - 1.0) > 1e-12) throw Error("span_mask: cum_weights must end at 1");

  PatchMaskPlan plan;
  plan.n_maskable = std::max(n_maskable, 0);
  plan.target_rate = rate;
  std::vector<char> mask(static_cast<std::size_t>(plan.n_maskable), 0);
  int remaining = masked_count(plan.n_maskable, rate);

  const auto is_free = [&mask](int start, int len) {
    for (int k = start; k < start + len; ++k) {
      if (mask[static_cast<std::size_t>(k)]) return false;
    }
    return true;
  };

  while (remaining > 0) {
    const double u = rng.uniform();
    int drawn = max_span;
    for (int i = 0; i < max_span; ++i) {
      if (u < cum_weights[static_cast<std::size_t>(i)]) {
        drawn = i + 1;
        break;
      }
    }
    int len = std::min(drawn, remaining);
    int start = -1;
    for (int attempt = 0; attempt < 100 && start < 0; ++attempt) {
      if (len > plan.n_maskable) break;
      const int s = static_cast<int>(rng.below(static_cast<std::uint64_t>(plan.n_maskable - len + 1)));
      if (is_free(s, len)) start = s;
    }
    if (start < 0) {
      int first_run_start = -1, first_run_len = 0;
      for (int i = 0; i < plan.n_maskable && start < 0;) {
        if (mask[static_cast<std::size_t>(i)]) {
          ++i;
          continue;
        }
        int j = i;
        while (j < plan.n_maskable && !mask[static_cast<std::size_t>(j)]) ++j;
        if (first_run_start < 0) first_run_start = i, first_run_len = j - i;
        if (j - i >= len) start = i;
        i = j;
      }
      if (start < 0) {
        start = first_run_start;
        len = first_run_len;
      }
    }
    for (int k = start; k < start + len; ++k) mask[static_cast<std::size_t>(k)] = 1;
    plan.spans.push_back({start, len, drawn});
    remaining -= len;
  }
  detail::finalize_plan(plan, mask);
  return plan;
}

/// Masks round(rate*n_maskable) positions drawn uniformly without replacement.
inline PatchMaskPlan uniform_mask(int n_maskable, double rate, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) throw Error("uniform_mask: rate must be in [0,1]");
  PatchMaskPlan plan;
  plan.n_maskable = std::max(n_maskable, 0);
  plan.target_rate = rate;
  const int k = masked_count(plan.n_maskable, rate);
  std::vector<int> idx(static_cast<std::size_t>(plan.n_maskable));
  for (int i = 0; i < plan.n_maskable; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(plan.n_maskable - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  std::vector<char> mask(static_cast<std::size_t>(plan.n_maskable), 0);
  for (int i = 0; i < k; ++i) mask[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
  for (int i = 0; i < k; ++i) plan.spans.push_back({idx[static_cast<std::size_t>(i)], 1, 1});
  std::sort(plan.spans.begin(), plan.spans.end(),
            [](const MaskSpan& a, const MaskSpan& b) { return a.start < b.start; });
  detail::finalize_plan(plan, mask);
  return plan;
}

/// Line-oriented debug dump: one "span <start> <len>" record per span.
inline std::string dump_plan(const PatchMaskPlan& plan) {
  std::ostringstream os;
  for (const auto& s : plan.spans) os << "span " << s.start << ' ' << s.length << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Text masking

struct TextMaskPlan {
  TokenSequence original;
  std::vector<int> masked_positions;  // sorted ascending
  TokenSequence corrupted;            // masked runs merged into one mask token

  bool operator==(const TextMaskPlan&) const = default;
};

inline TextMaskPlan mask_text(const TokenSequence& tokens, double rate, TokenId mask_id, Rng& rng) {
  if (tokens.empty()) throw Error("mask_text: empty token sequence");
  if (rate < 0.0 || rate > 1.0) throw Error("mask_text: rate must be in [0,1]");
  TextMaskPlan plan;
  plan.original = tokens;
  const auto n = static_cast<int>(tokens.size());
  const int k = masked_count(n, rate);
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  plan.masked_positions.assign(idx.begin(), idx.begin() + k);
  std::sort(plan.masked_positions.begin(), plan.masked_positions.end());

  std::vector<char> is_masked(static_cast<std::size_t>(n), 0);
  for (const int p : plan.masked_positions) is_masked[static_cast<std::size_t>(p)] = 1;
  for (int i = 0; i < n; ++i) {
    if (!is_masked[static_cast<std::size_t>(i)]) {
      plan.corrupted.push_back(tokens[static_cast<std::size_t>(i)]);
    } else if (i == 0 || !is_masked[static_cast<std::size_t>(i - 1)]) {
      plan.corrupted.push_back(mask_id);
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Target standardization

inline constexpr double kStandardizeEps = 1e-6;

/// (x - mean) / sqrt(var + eps) with population variance.
template <typename T>
std::vector<T> standardize_patch(std::span<const T> x) {
  std::vector<T> out(x.size());
  if (x.empty()) return out;
  double mean = 0.0;
  for (const T v : x) mean += static_cast<double>(v);
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (const T v : x) {
    const double d = static_cast<double>(v) - mean;
    var += d * d;
  }
  var /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(var + kStandardizeEps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>((static_cast<double>(x[i]) - mean) * inv);
  return out;
}

template <typename T>
  requires(!std::is_const_v<T>)
std::vector<T> standardize_patch(std::span<T> x) {
  return standardize_patch(std::span<const T>(x));
}

template <typename T>
std::vector<T> standardize_patch(const std::vector<T>& x) {
  return standardize_patch(std::span<const T>(x));
}

struct PatchMoments {
  double mean = 0.0;
  double stddev = 0.0;  // sqrt(var + eps)
};

template <typename T>
PatchMoments patch_moments(std::span<const T> x) {
  PatchMoments m;
  for (const T v : x) m.mean += static_cast<double>(v);
  m.mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (const T v : x) var += (static_cast<double>(v) - m.mean) * (static_cast<double>(v) - m.mean);
  m.stddev = std::sqrt(var / static_cast<double>(x.size()) + kStandardizeEps);
  return m;
}

// ---------------------------------------------------------------------------
// Attention mask

struct AttentionMask {
  std::vector<char> attend;  // one flag per patch

  int attended_count() const {
    return static_cast<int>(std::count(attend.begin(), attend.end(), char{1}));
  }
  /// Flags with a leading always-attended CLS slot.
  std::vector<char> with_cls() const {
    std::vector<char> out{1};
    out.insert(out.end(), attend.begin(), attend.end());
    return out;
  }
};

inline AttentionMask attention_mask(int n, std::optional<int> eos_patch_index) {
  AttentionMask m;
  m.attend.assign(static_cast<std::size_t>(n), 1);
  if (eos_patch_index) {
    if (*eos_patch_index < 0 || *eos_patch_index >= n) throw Error("attention_mask: eos index out of range");
    for (int i = *eos_patch_index + 1; i < n; ++i) m.attend[static_cast<std::size_t>(i)] = 0;
  }
  return m;
}

inline AttentionMask attention_mask(const PatchGrid& grid, std::optional<int> eos_patch_index) {
  return attention_mask(grid.n, eos_patch_index);
}

/// Index of one past the last patch containing ink, ignoring the EOS patch.
inline int ink_patch_extent(const Screenshot& s) {
  const int n = s.num_patches();
  for (int i = n - 1; i >= 0; --i) {
    if (s.eos_patch_index && *s.eos_patch_index == i) continue;
    for (int y = 0; y < s.height; ++y) {
      for (int x = i * s.patch_width; x < (i + 1) * s.patch_width; ++x) {
        if (s.at(y, x) < 1.0f) return i + 1;
      }
    }
  }
  return 0;
}

/// Patches eligible for masking: everything before the EOS patch, or
/// everything up to the last ink patch when there is no EOS patch.
inline int maskable_patches(const Screenshot& s) {
  return s.eos_patch_index ? *s.eos_patch_index : ink_patch_extent(s);
}

// ---------------------------------------------------------------------------
// Pre-training example assembly

struct MaskConfig {
  double patch_rate = 0.10;
  bool span_masking = true;
  int max_span = 6;
  std::vector<double> cum_weights = {0.2, 0.4, 0.6, 0.8, 0.9, 1.0};
  double text_rate = 0.25;
  int channels = 3;
};

struct PTPExample {
  TokenSequence original_tokens;
  TextMaskPlan text_plan;
  Screenshot screenshot;
  PatchGrid grid;
  PatchMaskPlan patch_plan;
  AttentionMask attention;
  std::vector<std::vector<float>> patch_targets;  // aligned with patch_plan.masked
};

/// tokenize -> mask text -> render corrupted text -> patches -> attention
/// mask -> patch masking over maskable patches -> standardized targets.
inline PTPExample assemble_ptp_example(std::string_view text, const GlyphAtlas& atlas,
                                       const RenderConfig& render_cfg, const MaskConfig& mask_cfg,
                                       const Vocab& vocab, Rng& rng) {
  PTPExample ex;
  ex.original_tokens = encode(text, vocab);
  if (ex.original_tokens.empty()) throw Error("assemble_ptp_example: text produced no tokens");
  ex.text_plan = mask_text(ex.original_tokens, mask_cfg.text_rate, special_id(Special::kMask), rng);
  ex.screenshot = render_line(decode(ex.text_plan.corrupted, vocab), atlas, render_cfg);
  ex.grid = split_patches(ex.screenshot, render_cfg.line_height, render_cfg.patch_width, mask_cfg.channels);
  ex.attention = attention_mask(ex.grid, ex.screenshot.eos_patch_index);
  const int n_maskable = maskable_patches(ex.screenshot);
  ex.patch_plan = mask_cfg.span_masking
                      ? span_mask(n_maskable, mask_cfg.patch_rate, mask_cfg.max_span, mask_cfg.cum_weights, rng)
                      : uniform_mask(n_maskable, mask_cfg.patch_rate, rng);
  for (const int i : ex.patch_plan.masked) ex.patch_targets.push_back(standardize_patch(ex.grid.patch(i)));
  return ex;
}

/// Copy of the screenshot pixels with masked patches painted mid-gray.
inline std::vector<float> overlay_masked(const Screenshot& s, const PatchMaskPlan& plan) {
  std::vector<float> px = s.pixels;
  for (const int i : plan.masked) {
    for (int y = 0; y < s.height; ++y) {
      for (int x = i * s.patch_width; x < (i + 1) * s.patch_width; ++x) {
        px[static_cast<std::size_t>(y) * s.width + x] = 0.5f;
      }
    }
  }
  return px;
}

}  // namespace ptp
