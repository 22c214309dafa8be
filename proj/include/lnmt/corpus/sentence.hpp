#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lnmt/core/error.hpp"

namespace lnmt {

inline bool is_space_char(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

/// A token is a non-empty string without whitespace.
inline bool is_valid_token(std::string_view t) {
  if (t.empty()) return false;
  for (char c : t) {
    if (is_space_char(c)) return false;
  }
  return true;
}

/// Language identifiers are lowercase ASCII letters or '_' so that the digit
/// in "<en2it>" is unambiguous.
inline bool is_valid_lang(std::string_view lang) {
  if (lang.empty()) return false;
  for (char c : lang) {
    if (!((c >= 'a' && c <= 'z') || c == '_')) return false;
  }
  return true;
}

inline std::string indicator_token(std::string_view src_lang, std::string_view tgt_lang) {
  if (!is_valid_lang(src_lang) || !is_valid_lang(tgt_lang)) {
    throw InvalidArgument("invalid language id in indicator: '" + std::string(src_lang) +
                          "', '" + std::string(tgt_lang) + "'");
  }
  return "<" + std::string(src_lang) + "2" + std::string(tgt_lang) + ">";
}

/// Splits "<src2tgt>" into its two language ids.
inline std::optional<std::pair<std::string, std::string>> parse_indicator(std::string_view t) {
  if (t.size() < 5 || t.front() != '<' || t.back() != '>') return std::nullopt;
  const std::string_view body = t.substr(1, t.size() - 2);
  const auto two = body.find('2');
  if (two == std::string_view::npos) return std::nullopt;
  const auto src = body.substr(0, two);
  const auto tgt = body.substr(two + 1);
  if (!is_valid_lang(src) || !is_valid_lang(tgt)) return std::nullopt;
  return std::pair{std::string(src), std::string(tgt)};
}

inline bool is_indicator(std::string_view t) { return parse_indicator(t).has_value(); }

/// A tokenized sentence; the language indicator, if any, is kept apart from
/// the content tokens and is rendered at position 0.
struct Sentence {
  std::optional<std::string> indicator;
  std::vector<std::string> tokens;

  std::size_t size() const { return tokens.size() + (indicator ? 1 : 0); }

  /// Indicator (if any) followed by content tokens.
  std::vector<std::string> all_tokens() const {
    std::vector<std::string> out;
    out.reserve(size());
    if (indicator) out.push_back(*indicator);
    out.insert(out.end(), tokens.begin(), tokens.end());
    return out;
  }

  std::string str() const {
    std::string out;
    for (const auto& t : all_tokens()) {
      if (!out.empty()) out += ' ';
      out += t;
    }
    return out;
  }

  friend bool operator==(const Sentence&, const Sentence&) = default;
};

/// Builds a sentence from a token list, lifting a leading indicator.
inline Sentence make_sentence(std::vector<std::string> toks) {
  Sentence s;
  std::size_t start = 0;
  if (!toks.empty() && is_indicator(toks.front())) {
    s.indicator = toks.front();
    start = 1;
  }
  for (std::size_t i = start; i < toks.size(); ++i) {
    if (is_indicator(toks[i])) {
      throw InvalidArgument("indicator '" + toks[i] + "' is only allowed at position 0");
    }
    s.tokens.push_back(std::move(toks[i]));
  }
  return s;
}

inline std::vector<std::string> split_tokens(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space_char(line[i])) ++i;
    std::size_t j = i;
    while (j < line.size() && !is_space_char(line[j])) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline Sentence parse_sentence(std::string_view line) { return make_sentence(split_tokens(line)); }

/// Prepends "<src2tgt>". A sentence may carry at most one indicator.
inline Sentence add_indicator(Sentence s, std::string_view src_lang, std::string_view tgt_lang) {
  if (s.indicator) {
    throw InvalidArgument("sentence already carries indicator " + *s.indicator);
  }
  s.indicator = indicator_token(src_lang, tgt_lang);
  return s;
}

inline Sentence strip_indicator(Sentence s) {
  s.indicator.reset();
  return s;
}

}  // namespace lnmt
