#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lnmt/core/error.hpp"
#include "lnmt/core/hash.hpp"
#include "lnmt/core/rng.hpp"
#include "lnmt/corpus/corpus.hpp"

namespace lnmt::synth {

using BaseSentence = std::vector<std::string>;

inline std::string base_token(std::size_t rank) { return "t" + std::to_string(rank); }

inline std::size_t base_rank(const std::string& tok) {
  if (tok.size() < 2 || tok[0] != 't') throw InvalidArgument("not a base token: '" + tok + "'");
  return std::stoul(tok.substr(1));
}

/// A surrogate language: a substitution over base ranks followed by an
/// optional adjacent-swap reordering. Language tokens are "<lang>_<k>".
struct SyntheticLanguage {
  std::string lang;
  std::vector<std::size_t> permutation;  // base rank -> language token number
  int reorder_period = 0;                // 0: none; else swap (i, i+1) for i % period == 0

  bool rank_preserving() const {
    for (std::size_t r = 0; r < permutation.size(); ++r) {
      if (permutation[r] != r) return false;
    }
    return true;
  }

  std::string token(std::size_t base) const { return lang + "_" + std::to_string(permutation.at(base)); }

  void validate() const {
    if (!is_valid_lang(lang)) throw InvalidArgument("synthetic language: invalid id '" + lang + "'");
    std::vector<std::size_t> sorted = permutation;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] != i) throw InvalidArgument("synthetic language " + lang + ": permutation is not a bijection");
    }
    if (reorder_period == 1 || reorder_period < 0) {
      throw InvalidArgument("synthetic language " + lang + ": reorder period must be 0 or >= 2");
    }
  }

  friend bool operator==(const SyntheticLanguage&, const SyntheticLanguage&) = default;
};

inline SyntheticLanguage make_language(std::string lang, std::size_t vocab_size, bool rank_preserving,
                                       int reorder_period, std::uint64_t seed) {
  SyntheticLanguage L{std::move(lang), std::vector<std::size_t>(vocab_size), reorder_period};
  std::iota(L.permutation.begin(), L.permutation.end(), std::size_t{0});
  if (!rank_preserving) {
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(L.permutation));
  }
  L.validate();
  return L;
}

/// Swaps positions (i, i+1) for every i that is a multiple of `period`.
/// Self-inverse for period >= 2.
template <typename T>
void reorder(std::vector<T>& xs, int period) {
  if (period <= 0) return;
  for (std::size_t i = 0; i + 1 < xs.size(); i += static_cast<std::size_t>(period)) std::swap(xs[i], xs[i + 1]);
}

inline Sentence realize(const SyntheticLanguage& L, const BaseSentence& base) {
  Sentence s;
  s.tokens.reserve(base.size());
  for (const auto& t : base) s.tokens.push_back(L.token(base_rank(t)));
  reorder(s.tokens, L.reorder_period);
  return s;
}

inline BaseSentence unrealize(const SyntheticLanguage& L, const Sentence& s) {
  std::vector<std::size_t> inverse(L.permutation.size());
  for (std::size_t r = 0; r < L.permutation.size(); ++r) inverse[L.permutation[r]] = r;
  std::vector<std::string> toks = s.tokens;
  reorder(toks, L.reorder_period);
  const std::string prefix = L.lang + "_";
  BaseSentence out;
  out.reserve(toks.size());
  for (const auto& t : toks) {
    if (t.rfind(prefix, 0) != 0) throw InvalidArgument("token '" + t + "' is not in language " + L.lang);
    out.push_back(base_token(inverse.at(std::stoul(t.substr(prefix.size())))));
  }
  return out;
}

/// The reference translation of `s` from `from` into `to`.
inline Sentence oracle_translate(const SyntheticLanguage& from, const SyntheticLanguage& to, const Sentence& s) {
  return realize(to, unrealize(from, s));
}

struct BaseCorpusSpec {
  std::size_t vocab_size = 30;
  double zipf_s = 1.0;
  int min_len = 3;
  int max_len = 8;

  void validate() const {
    if (vocab_size < 10) throw InvalidArgument("synthetic corpus: vocab_size must be at least 10");
    if (zipf_s < 0) throw InvalidArgument("synthetic corpus: zipf_s must be non-negative");
    if (min_len < 1 || max_len < min_len) throw InvalidArgument("synthetic corpus: invalid length range");
  }
};

/// Zipf sampler over ranks 0..V-1 with P(r) proportional to 1/(r+1)^s.
class ZipfSampler {
 public:
  ZipfSampler(std::size_t vocab, double s) : cdf_(vocab) {
    double acc = 0.0;
    for (std::size_t r = 0; r < vocab; ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r + 1), s);
      cdf_[r] = acc;
    }
    for (auto& c : cdf_) c /= acc;
  }

  std::size_t operator()(Rng& rng) const {
    const double u = rng.uniform();
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return std::min(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
  }

  double probability(std::size_t r) const { return r == 0 ? cdf_[0] : cdf_[r] - cdf_[r - 1]; }

 private:
  std::vector<double> cdf_;
};

/// Endless stream of base sentences with i.i.d. Zipf tokens.
class BaseSentenceStream {
 public:
  BaseSentenceStream(std::uint64_t seed, const BaseCorpusSpec& spec)
      : spec_(spec), rng_(seed), zipf_(spec.vocab_size, spec.zipf_s) {
    spec_.validate();
  }

  BaseSentence next() {
    const auto span = static_cast<std::uint64_t>(spec_.max_len - spec_.min_len + 1);
    const auto len = static_cast<std::size_t>(spec_.min_len) + rng_.below(span);
    BaseSentence s;
    s.reserve(len);
    for (std::size_t i = 0; i < len; ++i) s.push_back(base_token(zipf_(rng_)));
    return s;
  }

 private:
  BaseCorpusSpec spec_;
  Rng rng_;
  ZipfSampler zipf_;
};

inline std::vector<BaseSentence> gen_base_corpus(std::uint64_t seed, std::size_t size, const BaseCorpusSpec& spec) {
  BaseSentenceStream stream(seed, spec);
  std::vector<BaseSentence> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) out.push_back(stream.next());
  return out;
}

struct SplitSizes {
  std::size_t train = 2000;
  std::size_t dev = 200;
  std::size_t test = 200;
};

struct SyntheticTaskSpec {
  std::string task_id;
  SyntheticLanguage src;
  SyntheticLanguage tgt;
  SplitSizes sizes;
  BaseCorpusSpec corpus;
  std::uint64_t seed = 1;
};

/// Train/dev/test base sentences. Dev and test draw from their own seed
/// streams and skip sentences already used by an earlier split.
struct BaseSplits {
  std::vector<BaseSentence> train, dev, test;
};

inline BaseSplits gen_base_splits(const SyntheticTaskSpec& spec) {
  BaseSplits out;
  out.train = gen_base_corpus(derive_seed(spec.seed, "train"), spec.sizes.train, spec.corpus);
  std::set<BaseSentence> seen(out.train.begin(), out.train.end());
  auto draw = [&](const char* label, std::size_t n) {
    BaseSentenceStream stream(derive_seed(spec.seed, label), spec.corpus);
    std::vector<BaseSentence> xs;
    std::size_t attempts = 0;
    while (xs.size() < n) {
      if (++attempts > 1000 * (n + 10)) {
        throw InvalidArgument(std::string("synthetic task: cannot draw enough unseen ") + label + " sentences");
      }
      auto s = stream.next();
      if (seen.insert(s).second) xs.push_back(std::move(s));
    }
    return xs;
  };
  out.dev = draw("dev", spec.sizes.dev);
  out.test = draw("test", spec.sizes.test);
  return out;
}

inline ParallelCorpus realize_pairs(const SyntheticTaskSpec& spec, const std::vector<BaseSentence>& base) {
  ParallelCorpus c{spec.src.lang, spec.tgt.lang, {}, 1.0};
  c.pairs.reserve(base.size());
  for (const auto& b : base) c.pairs.push_back({realize(spec.src, b), realize(spec.tgt, b)});
  return c;
}

inline nlohmann::json language_json(const SyntheticLanguage& L) {
  return {{"lang", L.lang}, {"permutation", L.permutation}, {"reorder_period", L.reorder_period},
          {"rank_preserving", L.rank_preserving()}};
}

inline SyntheticLanguage language_from_json(const nlohmann::json& j) {
  SyntheticLanguage L{j.at("lang").get<std::string>(), j.at("permutation").get<std::vector<std::size_t>>(),
                      j.at("reorder_period").get<int>()};
  L.validate();
  return L;
}

inline nlohmann::json task_manifest(const SyntheticTaskSpec& spec) {
  return {{"task_id", spec.task_id},
          {"seed", spec.seed},
          {"seeds",
           {{"train", derive_seed(spec.seed, "train")},
            {"dev", derive_seed(spec.seed, "dev")},
            {"test", derive_seed(spec.seed, "test")}}},
          {"src", language_json(spec.src)},
          {"tgt", language_json(spec.tgt)},
          {"sizes", {{"train", spec.sizes.train}, {"dev", spec.sizes.dev}, {"test", spec.sizes.test}}},
          {"corpus",
           {{"vocab_size", spec.corpus.vocab_size},
            {"zipf_s", spec.corpus.zipf_s},
            {"min_len", spec.corpus.min_len},
            {"max_len", spec.corpus.max_len}}}};
}

inline SyntheticTaskSpec task_spec_from_manifest(const nlohmann::json& m) {
  SyntheticTaskSpec s;
  s.task_id = m.at("task_id").get<std::string>();
  s.seed = m.at("seed").get<std::uint64_t>();
  s.src = language_from_json(m.at("src"));
  s.tgt = language_from_json(m.at("tgt"));
  s.sizes = {m.at("sizes").at("train").get<std::size_t>(), m.at("sizes").at("dev").get<std::size_t>(),
             m.at("sizes").at("test").get<std::size_t>()};
  const auto& c = m.at("corpus");
  s.corpus = {c.at("vocab_size").get<std::size_t>(), c.at("zipf_s").get<double>(), c.at("min_len").get<int>(),
              c.at("max_len").get<int>()};
  return s;
}

/// Writes `{train,dev,test}.{src,tgt}` and `task.manifest` into `dir`.
/// Returns false (and writes nothing) when `dir` already holds an identical
/// manifest.
inline bool gen_task(const SyntheticTaskSpec& spec, const std::filesystem::path& dir) {
  spec.src.validate();
  spec.tgt.validate();
  if (spec.src.lang == spec.tgt.lang) throw InvalidArgument("synthetic task: source and target language coincide");
  if (spec.src.permutation.size() != spec.corpus.vocab_size || spec.tgt.permutation.size() != spec.corpus.vocab_size) {
    throw InvalidArgument("synthetic task " + spec.task_id + ": language size differs from base vocabulary");
  }
  const auto manifest = task_manifest(spec);
  const auto mpath = dir / "task.manifest";
  if (std::filesystem::exists(mpath)) {
    std::ifstream in(mpath);
    nlohmann::json existing;
    try {
      existing = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception&) {
      existing = nullptr;
    }
    if (existing == manifest) {
      bool complete = true;
      for (const char* split : {"train", "dev", "test"}) {
        for (const auto* lang : {&spec.src.lang, &spec.tgt.lang}) {
          complete = complete && std::filesystem::exists(dir / (std::string(split) + "." + *lang));
        }
      }
      if (complete) return false;
    }
  }
  std::filesystem::create_directories(dir);
  const auto splits = gen_base_splits(spec);
  write_parallel(dir / "train", realize_pairs(spec, splits.train));
  write_parallel(dir / "dev", realize_pairs(spec, splits.dev));
  write_parallel(dir / "test", realize_pairs(spec, splits.test));
  std::ofstream out(mpath, std::ios::binary);
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + mpath.string());
  return true;
}

}  // namespace lnmt::synth
