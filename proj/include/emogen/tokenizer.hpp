#pragma once

// Byte-level BPE with atomic reserved tokens.
//
// Id layout: [0, 8) emotion control tokens in canonical order, 8 = [EOS],
// 9 = [PAD], [10, 266) single bytes, then one id per learned merge. Reserved
// strings are cut out of the text before byte encoding, so no merge ever
// spans or splits one. Spaces are ordinary bytes.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "emogen/corpus.hpp"
#include "emogen/emotion.hpp"
#include "emogen/errors.hpp"
#include "emogen/random.hpp"

namespace emogen {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

inline constexpr TokenId kEosId = 8;
inline constexpr TokenId kPadId = 9;
inline constexpr std::size_t kNumReserved = 10;
inline constexpr std::size_t kNumBytes = 256;
inline constexpr TokenId kFirstByteId = static_cast<TokenId>(kNumReserved);
inline constexpr TokenId kFirstMergeId = static_cast<TokenId>(kNumReserved + kNumBytes);
inline constexpr std::string_view kVocabFormatTag = "emogen-vocab";
inline constexpr int kVocabFormatVersion = 1;

constexpr TokenId control_token_id(Emotion e) { return static_cast<TokenId>(index_of(e)); }

constexpr bool is_control_id(TokenId id) {
  return id >= 0 && id < static_cast<TokenId>(kNumEmotions);
}

inline std::string_view reserved_string(std::size_t i) {
  if (i < kNumEmotions) return kControlTokens[i];
  return i == static_cast<std::size_t>(kEosId) ? kEosToken : kPadToken;
}

class Vocabulary {
 public:
  struct Merge {
    TokenId left;
    TokenId right;
    bool operator==(const Merge&) const = default;
  };

  Vocabulary() { reset_base(); }

  std::size_t size() const { return strings_.size(); }
  const std::string& token_string(TokenId id) const { return strings_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& token_strings() const { return strings_; }
  const std::vector<Merge>& merges() const { return merges_; }

  void add_merge(Merge m) {
    if (m.left < kFirstByteId || m.right < kFirstByteId ||
        static_cast<std::size_t>(m.left) >= size() || static_cast<std::size_t>(m.right) >= size()) {
      throw DataError("merge references an invalid or reserved token id");
    }
    ranks_[key(m.left, m.right)] = merges_.size();
    merges_.push_back(m);
    strings_.push_back(token_string(m.left) + token_string(m.right));
  }

  TokenSequence encode(std::string_view text) const {
    TokenSequence out;
    std::size_t pos = 0;
    std::size_t plain_start = 0;
    while (pos < text.size()) {
      const auto reserved = match_reserved(text, pos);
      if (reserved < 0) {
        ++pos;
        continue;
      }
      encode_plain(text.substr(plain_start, pos - plain_start), out);
      out.push_back(reserved);
      pos += reserved_string(static_cast<std::size_t>(reserved)).size();
      plain_start = pos;
    }
    encode_plain(text.substr(plain_start), out);
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (auto id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= size()) {
        throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(size()));
      }
      out += strings_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  // Longest reserved token starting at `pos`, or -1.
  static TokenId match_reserved(std::string_view text, std::size_t pos) {
    TokenId best = -1;
    std::size_t best_len = 0;
    for (std::size_t i = 0; i < kNumReserved; ++i) {
      const auto r = reserved_string(i);
      if (r.size() > best_len && text.substr(pos, r.size()) == r) {
        best = static_cast<TokenId>(i);
        best_len = r.size();
      }
    }
    return best;
  }

  void write(std::ostream& out) const {
    out << kVocabFormatTag << ' ' << kVocabFormatVersion << '\n';
    out << "reserved " << kNumReserved << '\n';
    for (std::size_t i = 0; i < kNumReserved; ++i) out << reserved_string(i) << '\n';
    out << "merges " << merges_.size() << '\n';
    for (const auto& m : merges_) out << m.left << ' ' << m.right << '\n';
  }

  std::string serialized() const {
    std::ostringstream os;
    write(os);
    return os.str();
  }

  std::uint64_t hash() const { return fnv1a64(serialized()); }

  static Vocabulary read(std::istream& in) {
    std::string tag;
    int version = 0;
    if (!(in >> tag >> version) || tag != kVocabFormatTag) throw DataError("not a vocabulary file");
    if (version != kVocabFormatVersion) {
      throw DataError("vocabulary format version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kVocabFormatVersion) + ")");
    }
    std::string word;
    std::size_t n = 0;
    if (!(in >> word >> n) || word != "reserved" || n != kNumReserved) {
      throw DataError("vocabulary file: bad reserved-token header");
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::string r;
      if (!(in >> r) || r != reserved_string(i)) {
        throw DataError("vocabulary file: reserved token " + std::to_string(i) + " mismatch");
      }
    }
    if (!(in >> word >> n) || word != "merges") throw DataError("vocabulary file: bad merges header");
    Vocabulary v;
    for (std::size_t i = 0; i < n; ++i) {
      Merge m{};
      if (!(in >> m.left >> m.right)) throw DataError("vocabulary file: truncated merge list");
      v.add_merge(m);
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write vocabulary file '" + path + "'");
    write(out);
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary file '" + path + "'");
    return read(in);
  }

  bool operator==(const Vocabulary& o) const { return merges_ == o.merges_; }

 private:
  static std::uint64_t key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  void reset_base() {
    strings_.clear();
    for (std::size_t i = 0; i < kNumReserved; ++i) strings_.emplace_back(reserved_string(i));
    for (std::size_t b = 0; b < kNumBytes; ++b) strings_.emplace_back(1, static_cast<char>(b));
  }

  void encode_plain(std::string_view text, TokenSequence& out) const {
    if (text.empty()) return;
    std::vector<TokenId> symbols;
    symbols.reserve(text.size());
    for (unsigned char c : text) symbols.push_back(kFirstByteId + c);
    while (symbols.size() > 1) {
      std::size_t best_rank = SIZE_MAX;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = ranks_.find(key(symbols[i], symbols[i + 1]));
        if (it != ranks_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == SIZE_MAX) break;
      const auto merged = static_cast<TokenId>(kFirstMergeId + static_cast<TokenId>(best_rank));
      const Merge m = merges_[best_rank];
      // Apply this merge at every non-overlapping occurrence, left to right.
      std::vector<TokenId> next;
      next.reserve(symbols.size());
      for (std::size_t i = 0; i < symbols.size();) {
        if (i + 1 < symbols.size() && symbols[i] == m.left && symbols[i + 1] == m.right) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(symbols[i]);
          ++i;
        }
      }
      symbols.swap(next);
    }
    out.insert(out.end(), symbols.begin(), symbols.end());
  }

  std::vector<std::string> strings_;
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, std::size_t> ranks_;
};

// Learns vocab_size - 266 merges (fewer only if the data runs out of pairs).
// Most frequent adjacent pair wins; ties go to the lexicographically smaller
// (left string, right string).
inline Vocabulary train_vocab(const std::vector<std::string>& texts, std::size_t vocab_size) {
  if (vocab_size <= kNumReserved + kNumBytes) {
    throw std::invalid_argument("vocab_size must exceed " +
                                std::to_string(kNumReserved + kNumBytes));
  }
  if (texts.empty()) throw std::invalid_argument("no training texts for the vocabulary");

  // Plain segments between reserved tokens, deduplicated with multiplicity.
  std::map<std::string, std::size_t> segment_counts;
  for (const auto& text : texts) {
    std::string_view t(text);
    std::size_t pos = 0;
    std::size_t start = 0;
    while (pos < t.size()) {
      const auto r = Vocabulary::match_reserved(t, pos);
      if (r < 0) {
        ++pos;
        continue;
      }
      if (pos > start) ++segment_counts[std::string(t.substr(start, pos - start))];
      pos += reserved_string(static_cast<std::size_t>(r)).size();
      start = pos;
    }
    if (t.size() > start) ++segment_counts[std::string(t.substr(start))];
  }

  struct Segment {
    std::vector<TokenId> symbols;
    std::size_t weight;
  };
  std::vector<Segment> segments;
  segments.reserve(segment_counts.size());
  for (const auto& [s, n] : segment_counts) {
    Segment seg{{}, n};
    for (unsigned char c : s) seg.symbols.push_back(kFirstByteId + c);
    segments.push_back(std::move(seg));
  }

  auto key = [](TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  };
  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  auto count_segment = [&](const Segment& seg, std::int64_t sign) {
    for (std::size_t i = 0; i + 1 < seg.symbols.size(); ++i) {
      auto& c = pair_counts[key(seg.symbols[i], seg.symbols[i + 1])];
      c += sign * static_cast<std::int64_t>(seg.weight);
    }
  };
  for (const auto& seg : segments) count_segment(seg, +1);

  Vocabulary vocab;
  const std::size_t target_merges = vocab_size - kNumReserved - kNumBytes;
  while (vocab.merges().size() < target_merges) {
    std::uint64_t best_key = 0;
    std::int64_t best_count = 0;
    for (const auto& [k, c] : pair_counts) {
      if (c <= 0) continue;
      if (c > best_count) {
        best_key = k;
        best_count = c;
        continue;
      }
      if (c == best_count) {
        const auto al = static_cast<TokenId>(k >> 32), ar = static_cast<TokenId>(k & 0xFFFFFFFF);
        const auto bl = static_cast<TokenId>(best_key >> 32),
                   br = static_cast<TokenId>(best_key & 0xFFFFFFFF);
        const auto& as = vocab.token_string(al);
        const auto& bs = vocab.token_string(bl);
        if (as < bs || (as == bs && vocab.token_string(ar) < vocab.token_string(br))) best_key = k;
      }
    }
    if (best_count <= 0) break;

    const Vocabulary::Merge m{static_cast<TokenId>(best_key >> 32),
                              static_cast<TokenId>(best_key & 0xFFFFFFFF)};
    const auto merged = static_cast<TokenId>(vocab.size());
    vocab.add_merge(m);

    for (auto& seg : segments) {
      bool found = false;
      for (std::size_t i = 0; i + 1 < seg.symbols.size(); ++i) {
        if (seg.symbols[i] == m.left && seg.symbols[i + 1] == m.right) {
          found = true;
          break;
        }
      }
      if (!found) continue;
      count_segment(seg, -1);
      std::vector<TokenId> next;
      next.reserve(seg.symbols.size());
      for (std::size_t i = 0; i < seg.symbols.size();) {
        if (i + 1 < seg.symbols.size() && seg.symbols[i] == m.left && seg.symbols[i + 1] == m.right) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(seg.symbols[i++]);
        }
      }
      seg.symbols.swap(next);
      count_segment(seg, +1);
    }
    std::erase_if(pair_counts, [](const auto& kv) { return kv.second <= 0; });
  }
  return vocab;
}

// Training strings for a corpus, one per pair, with imputed prompt emotions.
// Replaces each byte that does not start a well-formed UTF-8 sequence with
// U+FFFD. Byte-level sampling can stop mid-character.
inline std::string repair_utf8(std::string_view in) {
  std::string out;
  out.reserve(in.size());
  std::size_t i = 0;
  while (i < in.size()) {
    const auto b0 = static_cast<unsigned char>(in[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (b0 < 0x80) {
      len = 1, cp = b0;
    } else if (b0 >= 0xC2 && b0 <= 0xDF) {
      len = 2, cp = b0 & 0x1Fu;
    } else if (b0 >= 0xE0 && b0 <= 0xEF) {
      len = 3, cp = b0 & 0x0Fu;
    } else if (b0 >= 0xF0 && b0 <= 0xF4) {
      len = 4, cp = b0 & 0x07u;
    }
    bool ok = len > 0 && i + len <= in.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto b = static_cast<unsigned char>(in[i + k]);
      ok = (b & 0xC0u) == 0x80u;
      cp = (cp << 6) | (b & 0x3Fu);
    }
    if (ok && len == 3) ok = cp >= 0x800 && (cp < 0xD800 || cp > 0xDFFF);
    if (ok && len == 4) ok = cp >= 0x10000 && cp <= 0x10FFFF;
    if (ok) {
      out.append(in.substr(i, len));
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      ++i;
    }
  }
  return out;
}

inline std::vector<std::string> training_texts(const Corpus& corpus) {
  std::vector<std::string> texts;
  texts.reserve(corpus.size());
  for (const auto& p : corpus.pairs) texts.push_back(serialize_training(with_imputed_prompt_emotion(p)));
  return texts;
}

}  // namespace emogen
