#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lnmt/core/error.hpp"
#include "lnmt/corpus/vocabulary.hpp"
#include "lnmt/model/transformer.hpp"

namespace lnmt {

enum class DecodeMode { greedy, beam, kbest };

inline std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::greedy: return "greedy";
    case DecodeMode::beam: return "beam";
    case DecodeMode::kbest: return "kbest";
  }
  return "?";
}

inline DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "greedy") return DecodeMode::greedy;
  if (s == "beam") return DecodeMode::beam;
  if (s == "kbest") return DecodeMode::kbest;
  throw InvalidArgument("unknown decode mode '" + s + "'");
}

struct DecodeConfig {
  DecodeMode mode = DecodeMode::beam;
  int beam_size = 4;
  int k_best = 1;
  double length_penalty = 0.6;
  int max_len = 64;

  void validate() const {
    if (beam_size <= 0) throw InvalidArgument("decode config: beam_size must be positive");
    if (k_best <= 0) throw InvalidArgument("decode config: k_best must be positive");
    if (k_best > beam_size) throw InvalidArgument("decode config: k_best must not exceed beam_size");
    if (length_penalty < 0) throw InvalidArgument("decode config: length_penalty must be non-negative");
    if (max_len <= 0) throw InvalidArgument("decode config: max_len must be positive");
  }

  int effective_beam() const { return mode == DecodeMode::greedy ? 1 : beam_size; }

  std::string label() const {
    if (mode == DecodeMode::kbest) return std::to_string(k_best) + "-best";
    return to_string(mode);
  }

  friend bool operator==(const DecodeConfig&, const DecodeConfig&) = default;
};

inline void to_json(nlohmann::json& j, const DecodeConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"beam_size", c.beam_size},
                     {"k_best", c.k_best},
                     {"length_penalty", c.length_penalty},
                     {"max_len", c.max_len}};
}

inline void from_json(const nlohmann::json& j, DecodeConfig& c) {
  DecodeConfig d;
  c.mode = parse_decode_mode(j.value("mode", to_string(d.mode)));
  c.beam_size = j.value("beam_size", d.beam_size);
  c.k_best = j.value("k_best", d.k_best);
  c.length_penalty = j.value("length_penalty", d.length_penalty);
  c.max_len = j.value("max_len", d.max_len);
  // For k-best the beam must hold at least k hypotheses.
  if (c.mode == DecodeMode::kbest && !j.contains("beam_size")) c.beam_size = std::max(4, c.k_best);
}

/// A generated target sequence. `tokens` ends with EOS unless the length
/// limit was hit.
struct Hypothesis {
  std::vector<TokenId> tokens;
  double logprob = 0.0;
  double score = 0.0;  // length-normalized
  int finish_step = 0;

  /// Content tokens without the closing EOS.
  std::vector<TokenId> content() const {
    std::vector<TokenId> out = tokens;
    if (!out.empty() && out.back() == kEosId) out.pop_back();
    return out;
  }

  friend bool operator==(const Hypothesis&, const Hypothesis&) = default;
};

/// ((5 + len) / 6)^alpha
inline double length_penalty(std::size_t len, double alpha) {
  if (alpha == 0.0) return 1.0;
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

namespace detail {

/// PAD and BOS are never generated.
inline bool decodable(TokenId id) { return id != kPadId && id != kBosId; }

/// Higher score first; then earlier finish; then lexicographic token order.
inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.finish_step != b.finish_step) return a.finish_step < b.finish_step;
  return a.tokens < b.tokens;
}

inline Hypothesis finish(std::vector<TokenId> tokens, double logprob, int step, double alpha) {
  Hypothesis h;
  h.score = logprob / length_penalty(tokens.size(), alpha);
  h.tokens = std::move(tokens);
  h.logprob = logprob;
  h.finish_step = step;
  return h;
}

}  // namespace detail

/// Argmax token per step from BOS until EOS or `max_len` tokens.
template <typename S>
Hypothesis greedy_decode(const Transformer<S>& model, std::span<const TokenId> src, const DecodeConfig& cfg) {
  cfg.validate();
  const auto enc = model.encode(src);
  auto st = model.start();
  std::vector<TokenId> out;
  double logprob = 0.0;
  TokenId last = kBosId;
  for (int t = 1; t <= cfg.max_len; ++t) {
    const auto lp = model.step(enc, st, last);
    TokenId best = -1;
    for (Eigen::Index v = 0; v < lp.size(); ++v) {
      if (!detail::decodable(static_cast<TokenId>(v))) continue;
      if (best < 0 || lp(v) > lp(best)) best = static_cast<TokenId>(v);
    }
    logprob += static_cast<double>(lp(best));
    out.push_back(best);
    last = best;
    if (best == kEosId) break;
  }
  const int step = static_cast<int>(out.size());
  return detail::finish(std::move(out), logprob, step, cfg.length_penalty);
}

/// Finished hypotheses of a beam search, best first, pairwise distinct.
/// The greedy hypothesis always competes, so the returned best is never
/// scored below greedy decoding.
template <typename S>
std::vector<Hypothesis> beam_search(const Transformer<S>& model, std::span<const TokenId> src,
                                    const DecodeConfig& cfg) {
  cfg.validate();
  const int beam = cfg.effective_beam();
  const double alpha = cfg.length_penalty;
  const auto enc = model.encode(src);

  struct Alive {
    std::vector<TokenId> tokens;
    double logprob;
    typename Transformer<S>::DecoderState state;
  };
  struct Candidate {
    double logprob;
    std::size_t parent;
    TokenId token;
  };

  std::vector<Alive> alive;
  alive.push_back({{}, 0.0, model.start()});
  std::vector<Hypothesis> finished;

  for (int t = 1; t <= cfg.max_len && !alive.empty(); ++t) {
    std::vector<Candidate> cands;
    for (std::size_t a = 0; a < alive.size(); ++a) {
      auto& h = alive[a];
      const TokenId last = h.tokens.empty() ? kBosId : h.tokens.back();
      const auto lp = model.step(enc, h.state, last);
      for (Eigen::Index v = 0; v < lp.size(); ++v) {
        if (!detail::decodable(static_cast<TokenId>(v))) continue;
        cands.push_back({h.logprob + static_cast<double>(lp(v)), a, static_cast<TokenId>(v)});
      }
    }
    std::sort(cands.begin(), cands.end(), [&](const Candidate& x, const Candidate& y) {
      if (x.logprob != y.logprob) return x.logprob > y.logprob;
      const auto& px = alive[x.parent].tokens;
      const auto& py = alive[y.parent].tokens;
      if (px != py) return px < py;
      return x.token < y.token;
    });

    std::vector<Alive> next;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const auto& c = cands[i];
      const bool in_top = i < static_cast<std::size_t>(beam);
      if (!in_top && next.size() >= static_cast<std::size_t>(beam)) break;
      std::vector<TokenId> toks = alive[c.parent].tokens;
      toks.push_back(c.token);
      if (c.token == kEosId) {
        if (in_top) finished.push_back(detail::finish(std::move(toks), c.logprob, t, alpha));
        continue;
      }
      if (next.size() >= static_cast<std::size_t>(beam)) continue;
      if (t == cfg.max_len) {
        finished.push_back(detail::finish(std::move(toks), c.logprob, t, alpha));
        next.push_back({{}, 0.0, {}});  // occupies a beam slot only
      } else {
        next.push_back({std::move(toks), c.logprob, alive[c.parent].state});
      }
    }
    if (t == cfg.max_len) break;
    alive = std::move(next);
    if (finished.size() >= static_cast<std::size_t>(beam)) break;
  }

  if (beam > 1) {
    auto g = greedy_decode(model, src, cfg);
    if (std::none_of(finished.begin(), finished.end(), [&](const Hypothesis& h) { return h.tokens == g.tokens; })) {
      finished.push_back(std::move(g));
    }
  }
  std::sort(finished.begin(), finished.end(), detail::better);
  return finished;
}

template <typename S>
Hypothesis beam_decode(const Transformer<S>& model, std::span<const TokenId> src, const DecodeConfig& cfg) {
  auto all = beam_search(model, src, cfg);
  if (all.empty()) throw Error("beam search produced no hypothesis");
  return std::move(all.front());
}

struct KBestResult {
  std::vector<Hypothesis> hypotheses;  // score-descending, distinct
  bool short_list = false;             // fewer than k were found
};

template <typename S>
KBestResult kbest_decode(const Transformer<S>& model, std::span<const TokenId> src, const DecodeConfig& cfg) {
  auto all = beam_search(model, src, cfg);
  KBestResult r;
  const auto k = static_cast<std::size_t>(cfg.k_best);
  r.short_list = all.size() < k;
  if (all.size() > k) all.resize(k);
  r.hypotheses = std::move(all);
  return r;
}

/// Decodes according to `cfg.mode`; greedy and beam return one hypothesis,
/// k-best up to k.
template <typename S>
std::vector<Hypothesis> decode(const Transformer<S>& model, std::span<const TokenId> src, const DecodeConfig& cfg) {
  switch (cfg.mode) {
    case DecodeMode::greedy: return {greedy_decode(model, src, cfg)};
    case DecodeMode::beam: return {beam_decode(model, src, cfg)};
    case DecodeMode::kbest: return kbest_decode(model, src, cfg).hypotheses;
  }
  return {};
}

/// Runs `fn(i)` for i in [0, n) over `threads` workers; each index is
/// handled exactly once, so results written by index are deterministic.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex mu;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

template <typename S>
std::vector<std::vector<Hypothesis>> decode_all(const Transformer<S>& model,
                                                const std::vector<std::vector<TokenId>>& sources,
                                                const DecodeConfig& cfg, int threads = 1) {
  std::vector<std::vector<Hypothesis>> out(sources.size());
  parallel_for(sources.size(), threads, [&](std::size_t i) { out[i] = decode(model, sources[i], cfg); });
  return out;
}

}  // namespace lnmt
