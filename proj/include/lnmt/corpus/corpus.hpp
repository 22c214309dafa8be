#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "lnmt/core/error.hpp"
#include "lnmt/corpus/sentence.hpp"

namespace lnmt {

struct SentencePair {
  Sentence src;
  Sentence tgt;

  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

/// Aligned sentence pairs of one translation direction. `weight` scales the
/// loss of every pair (1/k for k-best distillation output).
struct ParallelCorpus {
  std::string src_lang;
  std::string tgt_lang;
  std::vector<SentencePair> pairs;
  double weight = 1.0;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }

  std::vector<Sentence> sources() const {
    std::vector<Sentence> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(p.src);
    return out;
  }
  std::vector<Sentence> targets() const {
    std::vector<Sentence> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(p.tgt);
    return out;
  }

  /// Swaps source and target sides.
  ParallelCorpus reversed() const {
    ParallelCorpus r{tgt_lang, src_lang, {}, weight};
    r.pairs.reserve(pairs.size());
    for (const auto& p : pairs) r.pairs.push_back({p.tgt, p.src});
    return r;
  }

  friend bool operator==(const ParallelCorpus&, const ParallelCorpus&) = default;
};

inline std::vector<Sentence> read_sentences(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus file " + path.string());
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(parse_sentence(line));
  return out;
}

inline void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file " + path.string());
  for (const auto& s : sents) out << s.str() << '\n';
  if (!out) throw IoError("failed writing corpus file " + path.string());
}

/// Reads `<prefix>.<src>` / `<prefix>.<tgt>`, which must have equal line
/// counts.
inline ParallelCorpus read_parallel(const std::filesystem::path& prefix, const std::string& src_lang,
                                    const std::string& tgt_lang) {
  const auto src_path = prefix.string() + "." + src_lang;
  const auto tgt_path = prefix.string() + "." + tgt_lang;
  auto src = read_sentences(src_path);
  auto tgt = read_sentences(tgt_path);
  if (src.size() != tgt.size()) {
    throw IoError("line count mismatch: " + src_path + " has " + std::to_string(src.size()) + ", " + tgt_path +
                  " has " + std::to_string(tgt.size()));
  }
  ParallelCorpus c{src_lang, tgt_lang, {}, 1.0};
  c.pairs.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) c.pairs.push_back({std::move(src[i]), std::move(tgt[i])});
  return c;
}

inline void write_parallel(const std::filesystem::path& prefix, const ParallelCorpus& c) {
  if (c.src_lang == c.tgt_lang) throw InvalidArgument("parallel corpus needs distinct language ids");
  write_sentences(prefix.string() + "." + c.src_lang, c.sources());
  write_sentences(prefix.string() + "." + c.tgt_lang, c.targets());
}

}  // namespace lnmt
