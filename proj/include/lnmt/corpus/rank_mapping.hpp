#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lnmt/core/error.hpp"
#include "lnmt/corpus/vocabulary.hpp"

namespace lnmt {

/// Rank-aligned substitution between the content tokens of two
/// frequency-sorted vocabularies: the rank-j token of the new language maps
/// to the rank-j token of the old one, or to UNK past the old range.
class RankMapping {
 public:
  RankMapping() = default;
  RankMapping(std::string from_lang, std::string to_lang, std::vector<std::string> from_tokens,
              std::vector<std::string> to_tokens)
      : from_lang_(std::move(from_lang)), to_lang_(std::move(to_lang)), from_(std::move(from_tokens)),
        to_(std::move(to_tokens)) {
    for (std::size_t r = 0; r < from_.size(); ++r) lookup_.emplace(from_[r], r);
  }

  const std::string& from_lang() const { return from_lang_; }
  const std::string& to_lang() const { return to_lang_; }
  std::size_t domain_size() const { return from_.size(); }
  /// Number of ranks present in both vocabularies.
  std::size_t shared_size() const { return std::min(from_.size(), to_.size()); }

  /// Image of a token; tokens outside the domain map to UNK.
  const std::string& map(const std::string& t) const {
    auto it = lookup_.find(t);
    if (it == lookup_.end() || it->second >= to_.size()) return unk_;
    return to_[it->second];
  }

  /// Rank of `t` in the source vocabulary, if present.
  std::optional<std::size_t> rank_of(const std::string& t) const {
    auto it = lookup_.find(t);
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

  const std::vector<std::string>& from_tokens() const { return from_; }
  const std::vector<std::string>& to_tokens() const { return to_; }

  /// One "from<TAB>to" line per rank of the source vocabulary.
  std::string serialize() const {
    std::string out;
    for (const auto& t : from_) out += t + '\t' + map(t) + '\n';
    return out;
  }

 private:
  std::string from_lang_, to_lang_;
  std::vector<std::string> from_, to_;
  std::unordered_map<std::string, std::size_t> lookup_;
  std::string unk_ = std::string(kUnkToken);
};

inline RankMapping build_rank_mapping(const Vocabulary& v_new, const Vocabulary& v_old) {
  if (!v_new.is_frequency_sorted() || !v_old.is_frequency_sorted()) {
    throw InvalidArgument("rank mapping requires frequency-sorted vocabularies (" + v_new.lang() + " -> " +
                          v_old.lang() + ")");
  }
  std::vector<std::string> from, to;
  from.reserve(v_new.content_size());
  to.reserve(v_old.content_size());
  for (std::size_t r = 0; r < v_new.content_size(); ++r) from.push_back(v_new.token_at_rank(r));
  for (std::size_t r = 0; r < v_old.content_size(); ++r) to.push_back(v_old.token_at_rank(r));
  return RankMapping(v_new.lang(), v_old.lang(), std::move(from), std::move(to));
}

/// Token-wise substitution producing a pseudo input in the mapped-to
/// language. Word order and length are preserved; an existing indicator is
/// dropped and `indicator` (if given) attached instead.
inline Sentence apply_mapping(const Sentence& s, const RankMapping& m,
                              std::optional<std::string> indicator = std::nullopt) {
  Sentence out;
  out.indicator = std::move(indicator);
  out.tokens.reserve(s.tokens.size());
  for (const auto& t : s.tokens) out.tokens.push_back(m.map(t));
  return out;
}

}  // namespace lnmt
