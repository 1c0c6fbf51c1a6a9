// Single-line text rasterization into fixed-height grayscale screenshots.
//
// Glyphs come from a GlyphAtlas (pre-rasterized bitmaps plus metrics). The
// renderer lays out `prefix + ' ' + text` left to right on one baseline,
// composites ink with a max-ink rule and closes the sequence with an all-black
// end-of-sequence patch.
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ptp/common.hpp"

namespace ptp {

struct GlyphBitmap {
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::int16_t bearing_x = 0;
  std::int16_t bearing_y = 0;  // rows above the baseline of the top bitmap row
  std::uint16_t advance = 1;
  std::vector<std::uint8_t> coverage;  // row-major, width*height

  bool operator==(const GlyphBitmap&) const = default;
};

inline constexpr std::uint32_t kFallbackCodepoint = 0xFFFFFFFFu;

class GlyphAtlas {
 public:
  GlyphAtlas() = default;
  GlyphAtlas(std::uint16_t ascent, std::uint16_t descent, GlyphBitmap fallback)
      : ascent_(ascent), descent_(descent), fallback_(std::move(fallback)) {}

  void add(std::uint32_t codepoint, GlyphBitmap g) {
    if (codepoint == kFallbackCodepoint) {
      fallback_ = std::move(g);
    } else {
      glyphs_[codepoint] = std::move(g);
    }
  }

  /// Total: unmapped codepoints resolve to the fallback glyph.
  const GlyphBitmap& glyph(std::uint32_t codepoint) const {
    const auto it = glyphs_.find(codepoint);
    return it == glyphs_.end() ? fallback_ : it->second;
  }
  bool contains(std::uint32_t codepoint) const { return glyphs_.count(codepoint) != 0; }

  std::uint16_t ascent() const { return ascent_; }
  std::uint16_t descent() const { return descent_; }
  const GlyphBitmap& fallback() const { return fallback_; }
  const std::map<std::uint32_t, GlyphBitmap>& glyphs() const { return glyphs_; }
  std::size_t size() const { return glyphs_.size(); }

  bool operator==(const GlyphAtlas&) const = default;

 private:
  std::uint16_t ascent_ = 0;
  std::uint16_t descent_ = 0;
  GlyphBitmap fallback_;
  std::map<std::uint32_t, GlyphBitmap> glyphs_;
};

struct RenderConfig {
  int font_size = 10;  // informational: the atlas is rasterized at this size
  int line_height = 16;
  int patch_width = 16;
  int max_patches = 512;
  std::string newline_symbol = "////";
  std::string prefix = "Beginning of the sequence:";
  int word_spacing = 0;
  int margin_left = 2;
  int line_space = 6;  // accepted for config parity; inert for single-line rendering
  bool eos_black_patch = true;

  int width() const { return max_patches * patch_width; }
};

struct Screenshot {
  int height = 0;
  int width = 0;
  int patch_width = 0;
  std::vector<float> pixels;  // row-major [height x width], 1 = white, 0 = ink
  std::optional<int> eos_patch_index;
  std::string source_text;
  bool truncated = false;

  int num_patches() const { return patch_width == 0 ? 0 : width / patch_width; }
  float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

// ---------------------------------------------------------------------------
// UTF-8

/// Decodes UTF-8; malformed sequences yield U+FFFD one byte at a time.
inline std::vector<std::uint32_t> utf8_codepoints(std::string_view s) {
  std::vector<std::uint32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  const auto byte = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  while (i < s.size()) {
    const unsigned char c = byte(i);
    int len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      len = 1, cp = c;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2, cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3, cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4, cp = c & 0x07;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (int k = 1; ok && k < len; ++k) {
      const unsigned char cc = byte(i + k);
      if ((cc & 0xC0) != 0x80) ok = false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    if (ok && ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
               cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))) {
      ok = false;
    }
    if (!ok) {
      out.push_back(0xFFFD);
      ++i;
    } else {
      out.push_back(cp);
      i += static_cast<std::size_t>(len);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Atlas persistence ("GATL" v1, little-endian)

inline std::vector<unsigned char> serialize_atlas(const GlyphAtlas& atlas) {
  ByteWriter w;
  w.put_bytes("GATL", 4);
  w.put<std::uint16_t>(1);
  w.put<std::uint16_t>(atlas.ascent());
  w.put<std::uint16_t>(atlas.descent());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(atlas.size() + 1));
  const auto put_glyph = [&w](std::uint32_t cp, const GlyphBitmap& g) {
    w.put<std::uint32_t>(cp);
    w.put<std::uint16_t>(g.width);
    w.put<std::uint16_t>(g.height);
    w.put<std::int16_t>(g.bearing_x);
    w.put<std::int16_t>(g.bearing_y);
    w.put<std::uint16_t>(g.advance);
    w.put_bytes(g.coverage.data(), g.coverage.size());
  };
  for (const auto& [cp, g] : atlas.glyphs()) put_glyph(cp, g);
  put_glyph(kFallbackCodepoint, atlas.fallback());
  return w.bytes();
}

inline GlyphAtlas parse_atlas(std::vector<unsigned char> bytes) {
  ByteReader r(std::move(bytes));
  char magic[4];
  r.get_bytes(magic, 4, "atlas header");
  if (std::string_view(magic, 4) != "GATL") throw ParseError("bad atlas magic", 0);
  const auto version = r.get<std::uint16_t>("atlas header");
  if (version != 1) throw ParseError("unsupported atlas version " + std::to_string(version), 4);
  const auto ascent = r.get<std::uint16_t>("atlas header");
  const auto descent = r.get<std::uint16_t>("atlas header");
  const auto count = r.get<std::uint32_t>("atlas header");

  GlyphAtlas atlas(ascent, descent, GlyphBitmap{});
  bool have_fallback = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto record_start = r.offset();
    try {
      GlyphBitmap g;
      const auto cp = r.get<std::uint32_t>("glyph record");
      g.width = r.get<std::uint16_t>("glyph record");
      g.height = r.get<std::uint16_t>("glyph record");
      g.bearing_x = r.get<std::int16_t>("glyph record");
      g.bearing_y = r.get<std::int16_t>("glyph record");
      g.advance = r.get<std::uint16_t>("glyph record");
      if (g.advance == 0 && cp >= 0x20) throw ParseError("zero advance for printable glyph", record_start);
      g.coverage.resize(static_cast<std::size_t>(g.width) * g.height);
      r.get_bytes(g.coverage.data(), g.coverage.size(), "glyph coverage");
      if (cp == kFallbackCodepoint) {
        if (have_fallback) throw ParseError("duplicate fallback glyph", record_start);
        have_fallback = true;
      } else if (atlas.contains(cp)) {
        throw ParseError("duplicate codepoint " + std::to_string(cp), record_start);
      }
      atlas.add(cp, std::move(g));
    } catch (const ParseError& e) {
      throw ParseError("glyph record " + std::to_string(i) + ": " + e.what(), record_start);
    }
  }
  if (!have_fallback) throw ParseError("atlas has no fallback glyph", r.offset());
  if (!r.at_end()) throw ParseError("trailing bytes after glyph records", r.offset());
  return atlas;
}

inline void save_atlas(const GlyphAtlas& atlas, const std::string& path) {
  write_file_bytes(path, serialize_atlas(atlas));
}

inline GlyphAtlas load_atlas(const std::string& path) { return parse_atlas(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Builtin procedural font

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}
}  // namespace detail

inline constexpr int kBuiltinGlyphWidth = 6;
inline constexpr int kBuiltinGlyphHeight = 10;
inline constexpr int kBuiltinAdvance = 7;

/// 6x10 binary glyph whose bits are a fixed hash of the codepoint.
inline GlyphBitmap builtin_glyph(std::uint32_t codepoint) {
  GlyphBitmap g;
  g.width = kBuiltinGlyphWidth;
  g.height = kBuiltinGlyphHeight;
  g.bearing_x = 0;
  g.bearing_y = 8;
  g.advance = kBuiltinAdvance;
  g.coverage.assign(kBuiltinGlyphWidth * kBuiltinGlyphHeight, 0);
  if (codepoint == ' ' || codepoint == '\t') return g;
  std::uint64_t bits = detail::splitmix64(codepoint);
  for (int i = 0; i < kBuiltinGlyphWidth * kBuiltinGlyphHeight; ++i) {
    g.coverage[static_cast<std::size_t>(i)] = (bits >> i) & 1u ? 255 : 0;
  }
  return g;
}

/// Deterministic test font: printable ASCII plus a hollow-box fallback.
inline GlyphAtlas builtin_test_atlas() {
  GlyphBitmap box;
  box.width = kBuiltinGlyphWidth;
  box.height = kBuiltinGlyphHeight;
  box.bearing_y = 8;
  box.advance = kBuiltinAdvance;
  box.coverage.assign(kBuiltinGlyphWidth * kBuiltinGlyphHeight, 0);
  for (int y = 0; y < kBuiltinGlyphHeight; ++y) {
    for (int x = 0; x < kBuiltinGlyphWidth; ++x) {
      if (y == 0 || x == 0 || y == kBuiltinGlyphHeight - 1 || x == kBuiltinGlyphWidth - 1) {
        box.coverage[static_cast<std::size_t>(y * kBuiltinGlyphWidth + x)] = 255;
      }
    }
  }
  GlyphAtlas atlas(8, 2, std::move(box));
  for (std::uint32_t cp = 0x20; cp <= 0x7E; ++cp) atlas.add(cp, builtin_glyph(cp));
  return atlas;
}

// ---------------------------------------------------------------------------
// Layout and rasterization

/// The string actually laid out: prefix, a separating space, then the text
/// with newlines replaced by the newline symbol.
inline std::string compose_render_text(std::string_view text, const RenderConfig& cfg) {
  std::string body = replace_all(std::string(text), "\n", cfg.newline_symbol);
  if (cfg.prefix.empty()) return body;
  return cfg.prefix + " " + body;
}

inline void check_render_config(const GlyphAtlas& atlas, const RenderConfig& cfg) {
  if (cfg.patch_width <= 0 || cfg.line_height <= 0) throw Error("patch geometry must be positive");
  if (cfg.max_patches < 2) throw Error("max_patches must be >= 2");
  if (atlas.ascent() + atlas.descent() > cfg.line_height) {
    throw Error("atlas ascent+descent (" + std::to_string(atlas.ascent() + atlas.descent()) +
                ") exceeds line height " + std::to_string(cfg.line_height));
  }
}

namespace detail {

struct Placement {
  const GlyphBitmap* glyph;
  int x0;    // left edge of bitmap
  int top;   // top row of bitmap
};

struct Layout {
  std::vector<Placement> placements;
  int last_ink = 0;  // exclusive end column of the rightmost ink
  bool truncated = false;
};

inline bool has_ink(const GlyphBitmap& g) {
  return std::any_of(g.coverage.begin(), g.coverage.end(), [](std::uint8_t a) { return a != 0; });
}

inline Layout layout_line(const std::string& composed, const GlyphAtlas& atlas,
                          const RenderConfig& cfg) {
  Layout out;
  const int limit = cfg.eos_black_patch ? (cfg.max_patches - 1) * cfg.patch_width : cfg.width();
  const int top_pad = (cfg.line_height - atlas.ascent() - atlas.descent()) / 2;
  const int baseline = top_pad + atlas.ascent();
  int pen = cfg.margin_left;
  for (const std::uint32_t cp : utf8_codepoints(composed)) {
    const GlyphBitmap& g = atlas.glyph(cp);
    if (g.width > 0 && g.height > 0 && has_ink(g)) {
      const int x0 = pen + g.bearing_x;
      int ink_end = x0;
      for (int x = g.width - 1; x >= 0 && ink_end == x0; --x) {
        for (int y = 0; y < g.height; ++y) {
          if (g.coverage[static_cast<std::size_t>(y) * g.width + x] != 0) {
            ink_end = x0 + x + 1;
            break;
          }
        }
      }
      if (x0 + g.width > limit) {
        out.truncated = true;
        break;
      }
      out.placements.push_back({&g, x0, baseline - g.bearing_y});
      out.last_ink = std::max(out.last_ink, std::min(ink_end, cfg.width()));
    }
    pen += g.advance + (cp == ' ' ? cfg.word_spacing : 0);
  }
  return out;
}

}  // namespace detail

/// Rasterizes `text` (with prefix and newline substitution) into a
/// line_height x max_patches*patch_width strip.
inline Screenshot render_line(std::string_view text, const GlyphAtlas& atlas,
                              const RenderConfig& cfg) {
  check_render_config(atlas, cfg);
  Screenshot s;
  s.height = cfg.line_height;
  s.width = cfg.width();
  s.patch_width = cfg.patch_width;
  s.source_text = compose_render_text(text, cfg);
  s.pixels.assign(static_cast<std::size_t>(s.height) * s.width, 1.0f);

  const auto layout = detail::layout_line(s.source_text, atlas, cfg);
  s.truncated = layout.truncated;
  for (const auto& p : layout.placements) {
    const GlyphBitmap& g = *p.glyph;
    for (int y = 0; y < g.height; ++y) {
      const int py = p.top + y;
      if (py < 0 || py >= s.height) continue;
      float* row = s.pixels.data() + static_cast<std::size_t>(py) * s.width;
      for (int x = 0; x < g.width; ++x) {
        const int px = p.x0 + x;
        const std::uint8_t a = g.coverage[static_cast<std::size_t>(y) * g.width + x];
        if (a == 0 || px < 0 || px >= s.width) continue;
        row[px] = std::min(row[px], 1.0f - static_cast<float>(a) / 255.0f);
      }
    }
  }
  if (cfg.eos_black_patch) {
    const int eos = (layout.last_ink + cfg.patch_width - 1) / cfg.patch_width;
    s.eos_patch_index = eos;
    for (int y = 0; y < s.height; ++y) {
      float* row = s.pixels.data() + static_cast<std::size_t>(y) * s.width;
      std::fill(row + eos * cfg.patch_width, row + (eos + 1) * cfg.patch_width, 0.0f);
    }
  }
  return s;
}

/// Number of patches touched by ink in the would-be rendering of `text`.
inline int measure_fit(std::string_view text, const GlyphAtlas& atlas, const RenderConfig& cfg) {
  check_render_config(atlas, cfg);
  const auto layout = detail::layout_line(compose_render_text(text, cfg), atlas, cfg);
  return (layout.last_ink + cfg.patch_width - 1) / cfg.patch_width;
}

// ---------------------------------------------------------------------------
// Throughput benchmark

struct RenderThroughput {
  std::size_t strings = 0;
  std::size_t chars = 0;    // codepoints of the input texts (prefix excluded)
  std::size_t patches = 0;  // patches produced
  double seconds = 0.0;
  double chars_per_sec = 0.0;
  double patches_per_sec = 0.0;
  double checksum = 0.0;
};

inline RenderThroughput bench_render(const std::vector<std::string>& corpus,
                                     const GlyphAtlas& atlas, const RenderConfig& cfg) {
  if (corpus.empty()) throw Error("bench_render: empty corpus");
  RenderThroughput r;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& text : corpus) {
    const Screenshot s = render_line(text, atlas, cfg);
    r.chars += utf8_codepoints(text).size();
    r.patches += static_cast<std::size_t>(s.num_patches());
    // Sample a strided subset so the checksum cost stays negligible.
    for (std::size_t i = 0; i < s.pixels.size(); i += 61) r.checksum += s.pixels[i];
  }
  const auto t1 = std::chrono::steady_clock::now();
  r.strings = corpus.size();
  r.seconds = std::chrono::duration<double>(t1 - t0).count();
  const double denom = std::max(r.seconds, 1e-9);
  r.chars_per_sec = static_cast<double>(r.chars) / denom;
  r.patches_per_sec = static_cast<double>(r.patches) / denom;
  return r;
}

}  // namespace ptp
