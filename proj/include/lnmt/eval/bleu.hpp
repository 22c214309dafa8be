#pragma once

#include <array>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lnmt/core/error.hpp"

namespace lnmt {

struct BleuScore {
  double bleu = 0.0;
  std::array<double, 4> precisions{};
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  double brevity_penalty = 0.0;
  std::size_t candidate_len = 0;
  std::size_t reference_len = 0;
};

struct BleuOptions {
  /// Score an empty corpus as 0 instead of rejecting it.
  bool allow_empty = false;
};

namespace detail {

using Ngram = std::vector<std::string>;

inline std::map<Ngram, std::size_t> ngram_counts(std::span<const std::string> toks, std::size_t n) {
  std::map<Ngram, std::size_t> out;
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[Ngram(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

}  // namespace detail

/// Corpus-level BLEU-4 against a single reference, case-sensitive, over
/// whitespace tokens.
///
/// Orders n >= 2 with candidate n-grams but no matches use 1 / (2 * total)
/// as their precision. Orders with no candidate n-grams at all contribute a
/// precision of 1, so a corpus scored against itself is exactly 100.
inline BleuScore corpus_bleu(std::span<const std::vector<std::string>> candidates,
                             std::span<const std::vector<std::string>> references, BleuOptions opts = {}) {
  if (candidates.size() != references.size()) {
    throw InvalidArgument("corpus_bleu: " + std::to_string(candidates.size()) + " candidates vs " +
                          std::to_string(references.size()) + " references");
  }
  BleuScore s;
  if (candidates.empty()) {
    if (opts.allow_empty) return s;
    throw InvalidArgument("corpus_bleu: empty corpus");
  }
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    const auto& r = references[i];
    s.candidate_len += c.size();
    s.reference_len += r.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto cc = detail::ngram_counts(c, n);
      const auto rc = detail::ngram_counts(r, n);
      for (const auto& [g, k] : cc) {
        s.totals[n - 1] += k;
        auto it = rc.find(g);
        if (it != rc.end()) s.matches[n - 1] += std::min(k, it->second);
      }
    }
  }
  if (s.candidate_len == 0) return s;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double p;
    if (s.totals[n] == 0) {
      p = 1.0;
    } else if (s.matches[n] == 0) {
      p = n == 0 ? 0.0 : 1.0 / (2.0 * static_cast<double>(s.totals[n]));
    } else {
      p = static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]);
    }
    s.precisions[n] = p;
    if (p == 0.0) return s;
    log_sum += 0.25 * std::log(p);
  }
  const double c = static_cast<double>(s.candidate_len);
  const double r = static_cast<double>(s.reference_len);
  s.brevity_penalty = c < r ? std::exp(1.0 - r / c) : 1.0;
  s.bleu = 100.0 * s.brevity_penalty * std::exp(log_sum);
  return s;
}

/// Percentage of candidates identical to their reference.
inline double exact_match(std::span<const std::vector<std::string>> candidates,
                          std::span<const std::vector<std::string>> references) {
  if (candidates.size() != references.size()) throw InvalidArgument("exact_match: count mismatch");
  if (candidates.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) hit += candidates[i] == references[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(candidates.size());
}

}  // namespace lnmt
