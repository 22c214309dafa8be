#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lnmt/core/error.hpp"
#include "lnmt/corpus/sentence.hpp"

namespace lnmt {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kBosId = 2;
inline constexpr TokenId kEosId = 3;
inline constexpr std::size_t kNumFixedReserved = 4;

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnkToken = "UNK";
inline constexpr std::string_view kBosToken = "<s>";
inline constexpr std::string_view kEosToken = "</s>";

/// Reserved status is a property of the token text: the four fixed specials
/// and anything shaped like a language indicator.
inline bool is_reserved_token(std::string_view t) {
  return t == kPadToken || t == kUnkToken || t == kBosToken || t == kEosToken || is_indicator(t);
}

struct VocabEntry {
  std::string token;
  std::uint64_t count = 0;
  bool reserved = false;

  friend bool operator==(const VocabEntry&, const VocabEntry&) = default;
};

/// Token inventory with PAD/UNK/BOS/EOS at indices 0-3. Indices are stable:
/// entries are only ever appended. The rank of a content token is its
/// position among non-reserved entries.
class Vocabulary {
 public:
  explicit Vocabulary(std::string lang = {}) : lang_(std::move(lang)) {
    for (auto t : {kPadToken, kUnkToken, kBosToken, kEosToken}) push(std::string(t), 0, true);
  }

  const std::string& lang() const { return lang_; }
  void set_lang(std::string lang) { lang_ = std::move(lang); }

  std::size_t size() const { return entries_.size(); }
  std::size_t content_size() const { return content_.size(); }
  const std::vector<VocabEntry>& entries() const { return entries_; }

  const VocabEntry& entry(TokenId id) const {
    check(id);
    return entries_[static_cast<std::size_t>(id)];
  }
  const std::string& token(TokenId id) const { return entry(id).token; }

  bool contains(std::string_view t) const { return index_.find(std::string(t)) != index_.end(); }

  std::optional<TokenId> find(std::string_view t) const {
    auto it = index_.find(std::string(t));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id_or_unk(std::string_view t) const { return find(t).value_or(kUnkId); }

  std::optional<std::size_t> rank(std::string_view t) const {
    auto id = find(t);
    if (!id || entries_[static_cast<std::size_t>(*id)].reserved) return std::nullopt;
    return rank_of_id_[static_cast<std::size_t>(*id)];
  }

  const std::string& token_at_rank(std::size_t r) const { return entries_.at(content_.at(r)).token; }
  std::uint64_t count_at_rank(std::size_t r) const { return entries_.at(content_.at(r)).count; }

  /// Registers a reserved token (indicator); no-op when already present.
  TokenId add_reserved(std::string t) {
    if (auto id = find(t)) return *id;
    if (!is_reserved_token(t)) throw InvalidArgument("'" + t + "' is not a reserved token");
    return push(std::move(t), 0, true);
  }

  /// Appends a content token. Existing tokens keep their index; their count
  /// becomes the max of old and new.
  TokenId add_content(std::string t, std::uint64_t count) {
    if (auto id = find(t)) {
      auto& e = entries_[static_cast<std::size_t>(*id)];
      e.count = std::max(e.count, count);
      return *id;
    }
    if (!is_valid_token(t)) throw InvalidArgument("invalid token '" + t + "'");
    if (is_reserved_token(t)) throw InvalidArgument("'" + t + "' is reserved");
    return push(std::move(t), count, false);
  }

  /// True when content counts are weakly decreasing with ties in ascending
  /// token order, i.e. the vocabulary is a valid frequency ranking.
  bool is_frequency_sorted() const {
    for (std::size_t r = 1; r < content_.size(); ++r) {
      const auto& a = entries_[content_[r - 1]];
      const auto& b = entries_[content_[r]];
      if (a.count < b.count || (a.count == b.count && !(a.token < b.token))) return false;
    }
    return true;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.entries_ == b.entries_; }

  /// "token<TAB>count" per line in index order.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary file " + path);
    for (const auto& e : entries_) out << e.token << '\t' << e.count << '\n';
    if (!out) throw IoError("failed writing vocabulary file " + path);
  }

  static Vocabulary load(const std::string& path, std::string lang = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read vocabulary file " + path);
    Vocabulary v(std::move(lang));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        throw IoError(path + ":" + std::to_string(lineno) + ": expected token<TAB>count");
      }
      std::string tok = line.substr(0, tab);
      const std::uint64_t count = std::stoull(line.substr(tab + 1));
      if (lineno <= kNumFixedReserved) {
        if (tok != v.entries_[lineno - 1].token) {
          throw IoError(path + ": reserved token " + std::to_string(lineno - 1) + " must be " +
                        v.entries_[lineno - 1].token);
        }
        continue;
      }
      if (is_reserved_token(tok)) {
        v.add_reserved(std::move(tok));
      } else {
        v.add_content(std::move(tok), count);
      }
    }
    return v;
  }

 private:
  TokenId push(std::string t, std::uint64_t count, bool reserved) {
    const auto id = static_cast<TokenId>(entries_.size());
    index_.emplace(t, id);
    rank_of_id_.push_back(reserved ? SIZE_MAX : content_.size());
    if (!reserved) content_.push_back(entries_.size());
    entries_.push_back({std::move(t), count, reserved});
    return id;
  }

  void check(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= entries_.size()) {
      throw InvalidArgument("token index " + std::to_string(id) + " out of range for vocabulary of size " +
                            std::to_string(entries_.size()));
    }
  }

  std::string lang_;
  std::vector<VocabEntry> entries_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<std::size_t> content_;     // rank -> entry index
  std::vector<std::size_t> rank_of_id_;  // entry index -> rank (SIZE_MAX if reserved)
};

/// Frequency-ranked vocabulary: count descending, ties by token ascending,
/// truncated to `max_size` content entries. Indicator tokens seen in the
/// corpus are registered as reserved entries instead of being counted.
inline Vocabulary build_vocab(std::span<const std::vector<std::string>> corpus, std::size_t max_size,
                              std::string lang = {}) {
  std::map<std::string, std::uint64_t> counts;
  std::vector<std::string> indicators;
  for (const auto& sent : corpus) {
    for (const auto& t : sent) {
      if (is_reserved_token(t)) {
        if (is_indicator(t) && std::find(indicators.begin(), indicators.end(), t) == indicators.end()) {
          indicators.push_back(t);
        }
        continue;
      }
      if (!is_valid_token(t)) throw InvalidArgument("invalid token '" + t + "'");
      ++counts[t];
    }
  }
  std::vector<std::pair<std::string, std::uint64_t>> sorted(counts.begin(), counts.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (sorted.size() > max_size) sorted.resize(max_size);

  std::sort(indicators.begin(), indicators.end());
  Vocabulary v(std::move(lang));
  for (auto& ind : indicators) v.add_reserved(ind);
  for (auto& [tok, c] : sorted) v.add_content(tok, c);
  return v;
}

inline Vocabulary build_vocab(std::span<const Sentence> corpus, std::size_t max_size, std::string lang = {}) {
  std::vector<std::vector<std::string>> toks;
  toks.reserve(corpus.size());
  for (const auto& s : corpus) toks.push_back(s.all_tokens());
  return build_vocab(std::span<const std::vector<std::string>>(toks), max_size, std::move(lang));
}

/// Append-only union: old entries keep their indices, unseen task entries are
/// appended in task index order, shared content counts merge by max.
inline Vocabulary union_vocab(const Vocabulary& v_old, const Vocabulary& v_task) {
  Vocabulary out = v_old;
  if (out.lang().empty()) out.set_lang(v_task.lang());
  for (const auto& e : v_task.entries()) {
    if (e.reserved) {
      out.add_reserved(e.token);
    } else {
      out.add_content(e.token, e.count);
    }
  }
  return out;
}

/// True when `bigger` extends `smaller` append-only.
inline bool is_extension_of(const Vocabulary& bigger, const Vocabulary& smaller) {
  if (bigger.size() < smaller.size()) return false;
  for (std::size_t i = 0; i < smaller.size(); ++i) {
    if (bigger.entries()[i].token != smaller.entries()[i].token) return false;
  }
  return true;
}

/// Token -> index; out-of-vocabulary tokens become UNK. Only the indicator
/// and content tokens are emitted (no BOS/EOS framing).
inline std::vector<TokenId> encode(const Sentence& s, const Vocabulary& v) {
  std::vector<TokenId> out;
  out.reserve(s.size());
  if (s.indicator) out.push_back(v.id_or_unk(*s.indicator));
  for (const auto& t : s.tokens) out.push_back(v.id_or_unk(t));
  return out;
}

inline Sentence decode(std::span<const TokenId> ids, const Vocabulary& v) {
  std::vector<std::string> toks;
  toks.reserve(ids.size());
  for (TokenId id : ids) toks.push_back(v.token(id));
  return make_sentence(std::move(toks));
}

/// Fraction of content tokens that encode to UNK.
inline double unk_rate(std::span<const Sentence> sents, const Vocabulary& v) {
  std::size_t total = 0, unk = 0;
  for (const auto& s : sents) {
    for (const auto& t : s.tokens) {
      ++total;
      if (v.id_or_unk(t) == kUnkId) ++unk;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unk) / static_cast<double>(total);
}

}  // namespace lnmt
