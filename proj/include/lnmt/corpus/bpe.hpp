#pragma once

#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lnmt/core/error.hpp"
#include "lnmt/corpus/sentence.hpp"

namespace lnmt {

inline constexpr std::string_view kEndOfWord = "</w>";

/// Ordered list of learned symbol-pair merges.
struct BpeModel {
  std::vector<std::pair<std::string, std::string>> merges;

  std::size_t num_merges() const { return merges.size(); }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write BPE model " + path);
    for (const auto& [a, b] : merges) out << a << ' ' << b << '\n';
  }

  static BpeModel load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read BPE model " + path);
    BpeModel m;
    std::string line;
    while (std::getline(in, line)) {
      auto parts = split_tokens(line);
      if (parts.size() != 2) throw IoError(path + ": malformed merge line '" + line + "'");
      m.merges.emplace_back(parts[0], parts[1]);
    }
    return m;
  }

  friend bool operator==(const BpeModel&, const BpeModel&) = default;
};

namespace detail {

/// Splits a word into UTF-8 characters with the end-of-word marker glued to
/// the last one.
inline std::vector<std::string> word_symbols(std::string_view word) {
  std::vector<std::string> syms;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, word.size() - i);
    syms.emplace_back(word.substr(i, len));
    i += len;
  }
  if (!syms.empty()) syms.back() += kEndOfWord;
  return syms;
}

inline void merge_pair(std::vector<std::string>& syms, const std::string& a, const std::string& b) {
  std::vector<std::string> out;
  out.reserve(syms.size());
  for (std::size_t i = 0; i < syms.size(); ++i) {
    if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
      out.push_back(a + b);
      ++i;
    } else {
      out.push_back(std::move(syms[i]));
    }
  }
  syms = std::move(out);
}

}  // namespace detail

/// Greedy pair-merge learning over word-internal symbol pairs. Each step
/// merges the most frequent pair; equal frequencies go to the
/// lexicographically smallest pair.
inline BpeModel learn_bpe(std::span<const std::vector<std::string>> corpus, std::size_t num_merges) {
  std::map<std::string, std::uint64_t> word_counts;
  for (const auto& sent : corpus) {
    for (const auto& w : sent) ++word_counts[w];
  }
  std::vector<std::pair<std::vector<std::string>, std::uint64_t>> words;
  for (const auto& [w, c] : word_counts) words.emplace_back(detail::word_symbols(w), c);

  BpeModel model;
  for (std::size_t step = 0; step < num_merges; ++step) {
    std::map<std::pair<std::string, std::string>, std::uint64_t> pairs;
    for (const auto& [syms, c] : words) {
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pairs[{syms[i], syms[i + 1]}] += c;
    }
    if (pairs.empty()) break;
    // std::map iterates in lexicographic order, so the first maximum wins ties.
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const auto [a, b] = best->first;
    for (auto& [syms, c] : words) detail::merge_pair(syms, a, b);
    model.merges.emplace_back(a, b);
  }
  return model;
}

/// Segments every word by replaying the merges in learned order.
inline std::vector<std::string> apply_bpe(std::span<const std::string> words, const BpeModel& model) {
  std::vector<std::string> out;
  for (const auto& w : words) {
    auto syms = detail::word_symbols(w);
    for (const auto& [a, b] : model.merges) {
      if (syms.size() < 2) break;
      detail::merge_pair(syms, a, b);
    }
    out.insert(out.end(), syms.begin(), syms.end());
  }
  return out;
}

inline Sentence apply_bpe(const Sentence& s, const BpeModel& model) {
  Sentence out;
  out.indicator = s.indicator;
  out.tokens = apply_bpe(std::span<const std::string>(s.tokens), model);
  return out;
}

/// Joins subword units back into words on the end-of-word marker. A trailing
/// unit without a marker (e.g. truncated decoder output) still closes a word.
inline std::vector<std::string> join_bpe(std::span<const std::string> units) {
  std::vector<std::string> words;
  std::string cur;
  for (const auto& u : units) {
    if (u.size() >= kEndOfWord.size() && u.compare(u.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0) {
      cur += u.substr(0, u.size() - kEndOfWord.size());
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += u;
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

inline Sentence join_bpe(const Sentence& s) {
  Sentence out;
  out.indicator = s.indicator;
  out.tokens = join_bpe(std::span<const std::string>(s.tokens));
  return out;
}

}  // namespace lnmt
