// Byte-level BPE tokenizer with the special tokens used by both model families.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ptp/common.hpp"

namespace ptp {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

enum class Special : TokenId {
  kMask = 256,
  kPad,
  kBos,
  kEos,
  kImgBegin,
  kImgNewline,
  kImgEnd,
};

inline constexpr int kNumBytes = 256;
inline constexpr int kNumSpecials = 7;
inline constexpr TokenId kFirstMergeId = kNumBytes + kNumSpecials;

inline constexpr TokenId special_id(Special s) { return static_cast<TokenId>(s); }

inline constexpr std::array<std::string_view, kNumSpecials> kSpecialStrings = {
    "<mask>", "<pad>", "<s>", "</s>", "<img>", "<img_nl>", "</img>"};

class Vocab {
 public:
  /// Byte tokens and specials only.
  Vocab() {
    tokens_.reserve(kFirstMergeId);
    for (int b = 0; b < kNumBytes; ++b) {
      tokens_.push_back({std::string(1, static_cast<char>(b)), false});
      regular_index_.emplace(tokens_.back().text, b);
    }
    for (const auto s : kSpecialStrings) tokens_.push_back({std::string(s), true});
  }

  std::size_t size() const { return tokens_.size(); }
  bool valid(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < tokens_.size(); }
  bool is_special(TokenId id) const { return id >= kNumBytes && id < kFirstMergeId; }

  /// Raw bytes of a regular token, or the literal text of a special one.
  const std::string& token_text(TokenId id) const {
    if (!valid(id)) throw Error("invalid token id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)].text;
  }

  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }

  /// Appends the merge of (left, right) and returns the new token id.
  TokenId add_merge(TokenId left, TokenId right) {
    if (!valid(left) || !valid(right) || is_special(left) || is_special(right)) {
      throw Error("merge operands must be regular tokens");
    }
    const auto id = static_cast<TokenId>(tokens_.size());
    std::string text = tokens_[static_cast<std::size_t>(left)].text +
                       tokens_[static_cast<std::size_t>(right)].text;
    if (!regular_index_.emplace(text, id).second) throw Error("merge duplicates an existing token");
    tokens_.push_back({std::move(text), false});
    merge_rank_[pair_key(left, right)] = static_cast<int>(merges_.size());
    merges_.emplace_back(left, right);
    return id;
  }

  /// Rank of the merge (left, right), or -1.
  int merge_rank(TokenId left, TokenId right) const {
    const auto it = merge_rank_.find(pair_key(left, right));
    return it == merge_rank_.end() ? -1 : it->second;
  }

  /// Id of the regular token with these bytes, or -1.
  TokenId find(const std::string& bytes) const {
    const auto it = regular_index_.find(bytes);
    return it == regular_index_.end() ? -1 : it->second;
  }

  bool operator==(const Vocab& o) const { return merges_ == o.merges_; }

 private:
  struct Entry {
    std::string text;
    bool special;
  };
  static std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  std::vector<Entry> tokens_;
  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::unordered_map<std::uint64_t, int> merge_rank_;
  std::unordered_map<std::string, TokenId> regular_index_;
};

namespace detail {

/// Splits text into merge domains: an optional single leading space plus a
/// run of non-space bytes, or a run of spaces. Concatenation reproduces the input.
inline std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> out;
  const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  const std::size_t n = text.size();
  std::size_t i = 0;
  while (i < n) {
    const std::size_t start = i;
    std::size_t j = i;
    if (is_space(text[i])) {
      while (j < n && is_space(text[j])) ++j;
      if (j < n && text[j - 1] == ' ') {
        if (j - 1 > i) {
          --j;  // leave the last space to lead the next word
        } else {
          while (j < n && !is_space(text[j])) ++j;
        }
      }
    } else {
      while (j < n && !is_space(text[j])) ++j;
    }
    out.push_back(text.substr(start, j - start));
    i = j;
  }
  return out;
}

inline std::vector<TokenId> bytes_of(std::string_view chunk) {
  std::vector<TokenId> ids(chunk.size());
  for (std::size_t k = 0; k < chunk.size(); ++k) ids[k] = static_cast<unsigned char>(chunk[k]);
  return ids;
}

inline void apply_merge(std::vector<TokenId>& ids, TokenId left, TokenId right, TokenId merged) {
  std::size_t w = 0;
  for (std::size_t r = 0; r < ids.size();) {
    if (r + 1 < ids.size() && ids[r] == left && ids[r + 1] == right) {
      ids[w++] = merged;
      r += 2;
    } else {
      ids[w++] = ids[r++];
    }
  }
  ids.resize(w);
}

}  // namespace detail

/// Greedy byte-level BPE. Ties on pair frequency go to the lexicographically
/// smaller (left, right) byte-string pair.
inline Vocab train_bpe(const std::vector<std::string>& corpus, std::size_t vocab_size) {
  if (corpus.empty()) throw Error("train_bpe: empty corpus");
  if (vocab_size < static_cast<std::size_t>(kFirstMergeId)) {
    throw Error("train_bpe: vocab_size must be >= " + std::to_string(kFirstMergeId));
  }
  std::map<std::string, std::int64_t> chunk_counts;
  for (const auto& line : corpus) {
    for (const auto chunk : detail::pretokenize(line)) ++chunk_counts[std::string(chunk)];
  }
  std::vector<std::vector<TokenId>> words;
  std::vector<std::int64_t> counts;
  for (const auto& [chunk, n] : chunk_counts) {
    words.push_back(detail::bytes_of(chunk));
    counts.push_back(n);
  }

  Vocab vocab;
  while (vocab.size() < vocab_size) {
    std::map<std::pair<TokenId, TokenId>, std::int64_t> pair_counts;
    for (std::size_t w = 0; w < words.size(); ++w) {
      for (std::size_t k = 0; k + 1 < words[w].size(); ++k) {
        pair_counts[{words[w][k], words[w][k + 1]}] += counts[w];
      }
    }
    const std::pair<TokenId, TokenId>* best = nullptr;
    std::int64_t best_count = 0;
    for (const auto& [p, n] : pair_counts) {
      if (vocab.find(vocab.token_text(p.first) + vocab.token_text(p.second)) >= 0) continue;
      if (best == nullptr || n > best_count) {
        best = &p;
        best_count = n;
      } else if (n == best_count) {
        const auto& pl = vocab.token_text(p.first);
        const auto& bl = vocab.token_text(best->first);
        if (pl < bl || (pl == bl && vocab.token_text(p.second) < vocab.token_text(best->second))) {
          best = &p;
        }
      }
    }
    if (best == nullptr) break;
    const auto [left, right] = *best;
    const TokenId merged = vocab.add_merge(left, right);
    for (auto& w : words) detail::apply_merge(w, left, right, merged);
  }
  return vocab;
}

/// Applies merges in training order within each pretokenized chunk. Never
/// produces special ids.
inline TokenSequence encode(std::string_view text, const Vocab& vocab) {
  TokenSequence out;
  for (const auto chunk : detail::pretokenize(text)) {
    auto ids = detail::bytes_of(chunk);
    for (;;) {
      int best_rank = -1;
      for (std::size_t k = 0; k + 1 < ids.size(); ++k) {
        const int r = vocab.merge_rank(ids[k], ids[k + 1]);
        if (r >= 0 && (best_rank < 0 || r < best_rank)) best_rank = r;
      }
      if (best_rank < 0) break;
      const auto [l, r] = vocab.merges()[static_cast<std::size_t>(best_rank)];
      detail::apply_merge(ids, l, r, kFirstMergeId + best_rank);
    }
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

inline std::string decode(const TokenSequence& ids, const Vocab& vocab) {
  std::string out;
  for (const TokenId id : ids) out += vocab.token_text(id);
  return out;
}

// ---------------------------------------------------------------------------
// Vocab file: "ptpvocab 1 <size>", "token<TAB>id" lines, "#merges", "left<TAB>right" lines.
// Regular token bytes outside the printable range, and '\\', '<', '#', are
// written as \xHH so specials and section markers stay unambiguous.

namespace detail {

inline std::string escape_token(const std::string& bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (const char ch : bytes) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x21 || c >= 0x7F || c == '\\' || c == '<' || c == '#') {
      out += "\\x";
      out += kHex[c >> 4];
      out += kHex[c & 15];
    } else {
      out += ch;
    }
  }
  return out;
}

inline std::string unescape_token(std::string_view s, std::size_t line_offset) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (i + 4 > s.size()) throw ParseError("truncated escape in vocab token", line_offset);
    if (s[i + 1] != 'x') throw ParseError("bad escape in vocab token", line_offset);
    const auto hex = [&](char c) -> int {
      if (c >= '0' && c <= '9') return c - '0';
      if (c >= 'a' && c <= 'f') return c - 'a' + 10;
      throw ParseError("bad hex digit in vocab token", line_offset);
    };
    out += static_cast<char>(hex(s[i + 2]) * 16 + hex(s[i + 3]));
    i += 3;
  }
  return out;
}

}  // namespace detail

inline std::string serialize_vocab(const Vocab& vocab) {
  std::ostringstream os;
  os << "ptpvocab 1 " << vocab.size() << '\n';
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    const auto tid = static_cast<TokenId>(id);
    const auto& text = vocab.token_text(tid);
    os << (vocab.is_special(tid) ? text : detail::escape_token(text)) << '\t' << id << '\n';
  }
  os << "#merges\n";
  for (const auto& [l, r] : vocab.merges()) {
    os << detail::escape_token(vocab.token_text(l)) << '\t' << detail::escape_token(vocab.token_text(r))
       << '\n';
  }
  return os.str();
}

inline Vocab parse_vocab(std::string_view text) {
  std::size_t pos = 0;
  std::size_t line_start = 0;
  const auto next_line = [&]() -> std::optional<std::string_view> {
    if (pos >= text.size()) return std::nullopt;
    line_start = pos;
    const auto nl = text.find('\n', pos);
    const auto end = nl == std::string_view::npos ? text.size() : nl;
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    return text.substr(line_start, end - line_start);
  };
  const auto header = next_line();
  std::size_t declared = 0;
  {
    if (!header) throw ParseError("empty vocab file", 0);
    std::istringstream hs{std::string(*header)};
    std::string magic;
    int version = 0;
    if (!(hs >> magic >> version >> declared) || magic != "ptpvocab") {
      throw ParseError("bad vocab header", 0);
    }
    if (version != 1) throw ParseError("unsupported vocab version " + std::to_string(version), 0);
  }
  if (declared < static_cast<std::size_t>(kFirstMergeId)) {
    throw ParseError("vocab smaller than byte+special base", 0);
  }
  Vocab base;
  std::vector<std::string> entries;
  for (std::size_t id = 0; id < declared; ++id) {
    const auto line = next_line();
    if (!line) throw ParseError("vocab ends before entry " + std::to_string(id), pos);
    const auto tab = line->rfind('\t');
    if (tab == std::string_view::npos) throw ParseError("vocab entry without tab", line_start);
    if (std::string(line->substr(tab + 1)) != std::to_string(id)) {
      throw ParseError("vocab ids must be listed in order; expected " + std::to_string(id), line_start);
    }
    const auto token = line->substr(0, tab);
    const auto tid = static_cast<TokenId>(id);
    if (base.is_special(tid)) {
      if (token != kSpecialStrings[static_cast<std::size_t>(tid - kNumBytes)]) {
        throw ParseError("unexpected special token text", line_start);
      }
      entries.emplace_back(token);
    } else {
      entries.push_back(detail::unescape_token(token, line_start));
      if (id < kNumBytes && entries.back() != base.token_text(tid)) {
        throw ParseError("byte token " + std::to_string(id) + " mismatch", line_start);
      }
    }
  }
  const auto marker = next_line();
  if (!marker || *marker != "#merges") throw ParseError("missing #merges section", line_start);
  std::unordered_map<std::string, TokenId> by_text;
  for (std::size_t id = 0; id < entries.size(); ++id) {
    if (!base.is_special(static_cast<TokenId>(id))) by_text.emplace(entries[id], static_cast<TokenId>(id));
  }
  Vocab vocab;
  while (const auto line = next_line()) {
    if (line->empty()) continue;
    const auto tab = line->find('\t');
    if (tab == std::string_view::npos) throw ParseError("merge line without tab", line_start);
    const auto l = by_text.find(detail::unescape_token(line->substr(0, tab), line_start));
    const auto r = by_text.find(detail::unescape_token(line->substr(tab + 1), line_start));
    if (l == by_text.end() || r == by_text.end()) throw ParseError("merge references unknown token", line_start);
    const TokenId merged = vocab.add_merge(l->second, r->second);
    if (static_cast<std::size_t>(merged) >= entries.size() ||
        entries[static_cast<std::size_t>(merged)] != vocab.token_text(merged)) {
      throw ParseError("merge does not reproduce token " + std::to_string(merged), line_start);
    }
  }
  if (vocab.size() != declared) throw ParseError("merge count does not match vocab size", pos);
  return vocab;
}

inline void save_vocab(const Vocab& vocab, const std::string& path) {
  const auto s = serialize_vocab(vocab);
  write_file_bytes(path, {s.begin(), s.end()});
}

inline Vocab load_vocab(const std::string& path) { return parse_vocab(read_text_file(path)); }

}  // namespace ptp
