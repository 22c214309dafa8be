#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lnmt/core/error.hpp"
#include "lnmt/core/rng.hpp"
#include "lnmt/corpus/corpus.hpp"
#include "lnmt/corpus/vocabulary.hpp"
#include "lnmt/model/fisher.hpp"
#include "lnmt/model/optimizer.hpp"
#include "lnmt/model/transformer.hpp"

namespace lnmt {

/// One training pair as vocabulary indices, with its loss weight.
struct EncodedPair {
  std::vector<TokenId> src;
  std::vector<TokenId> tgt;
  double weight = 1.0;
};

struct EncodedCorpus {
  std::vector<EncodedPair> pairs;
};

inline EncodedCorpus encode_corpus(const ParallelCorpus& c, const Vocabulary& src_vocab, const Vocabulary& tgt_vocab) {
  EncodedCorpus out;
  out.pairs.reserve(c.pairs.size());
  for (const auto& p : c.pairs) out.pairs.push_back({encode(p.src, src_vocab), encode(p.tgt, tgt_vocab), c.weight});
  return out;
}

struct TrainHyper {
  int epochs = 15;
  int batch_tokens = 512;
  double label_smoothing = 0.1;
  double grad_clip = 1.0;  // global norm; 0 disables
  AdamConfig adam;
  std::uint64_t seed = 1;

  friend bool operator==(const TrainHyper&, const TrainHyper&) = default;
};

inline void to_json(nlohmann::json& j, const TrainHyper& h) {
  j = nlohmann::json{{"epochs", h.epochs},
                     {"batch_tokens", h.batch_tokens},
                     {"label_smoothing", h.label_smoothing},
                     {"grad_clip", h.grad_clip},
                     {"adam", h.adam},
                     {"seed", h.seed}};
}

inline void from_json(const nlohmann::json& j, TrainHyper& h) {
  TrainHyper d;
  h.epochs = j.value("epochs", d.epochs);
  h.batch_tokens = j.value("batch_tokens", d.batch_tokens);
  h.label_smoothing = j.value("label_smoothing", d.label_smoothing);
  h.grad_clip = j.value("grad_clip", d.grad_clip);
  h.adam = j.contains("adam") ? j.at("adam").get<AdamConfig>() : d.adam;
  h.seed = j.value("seed", d.seed);
}

/// Quadratic consolidation penalty (lambda/2) * sum F (theta - theta*)^2.
template <typename S>
struct EwcPenalty {
  const FisherDiag<S>* fisher = nullptr;
  double lambda = 0.0;
};

template <typename S>
double ewc_penalty(const ParamSet<S>& params, const FisherDiag<S>& f, double lambda) {
  if (!params.same_shapes(f.fisher) || !params.same_shapes(f.anchor)) {
    throw InvalidArgument("ewc: Fisher shapes do not match the model");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    acc += static_cast<double>((f.fisher[i].array() * (params[i] - f.anchor[i]).array().square()).sum());
  }
  return 0.5 * lambda * acc;
}

/// Adds d(penalty)/d(theta) = lambda * F * (theta - theta*) into `grads`.
template <typename S>
void add_ewc_gradient(const ParamSet<S>& params, const FisherDiag<S>& f, double lambda, ParamSet<S>& grads) {
  if (!params.same_shapes(f.fisher) || !grads.same_shapes(params)) {
    throw InvalidArgument("ewc: Fisher shapes do not match the model");
  }
  const S l = static_cast<S>(lambda);
  for (std::size_t i = 0; i < params.size(); ++i) {
    grads[i].array() += l * f.fisher[i].array() * (params[i] - f.anchor[i]).array();
  }
}

template <typename S>
struct LossAndGrads {
  double loss = 0.0;  // mean label-smoothed token loss (+ EWC penalty)
  double nll = 0.0;   // mean token NLL
  ParamSet<S> grads;
};

/// Mean token-level loss over a weighted batch and its gradient.
template <typename S>
LossAndGrads<S> loss_and_grads(const Transformer<S>& model, std::span<const EncodedPair> batch,
                               double label_smoothing, Rng* dropout_rng = nullptr,
                               const EwcPenalty<S>& ewc = {}) {
  if (batch.empty()) throw InvalidArgument("loss_and_grads: empty batch");
  LossAndGrads<S> out{0.0, 0.0, model.params().zeros_like()};
  LossStats stats;
  for (const auto& p : batch) {
    if (p.weight <= 0) throw InvalidArgument("loss_and_grads: pair weight must be positive");
    stats += model.accumulate_gradients(p.src, p.tgt, static_cast<S>(p.weight), label_smoothing, out.grads,
                                        dropout_rng);
  }
  out.grads.scale(static_cast<S>(1.0 / stats.weighted_tokens));
  out.loss = stats.mean_loss();
  out.nll = stats.mean_nll();
  if (ewc.fisher && ewc.lambda != 0.0) {
    out.loss += ewc_penalty(model.params(), *ewc.fisher, ewc.lambda);
    add_ewc_gradient(model.params(), *ewc.fisher, ewc.lambda, out.grads);
  }
  return out;
}

/// Batches built by shuffling, sorting windows by length, then cutting to a
/// token budget; batch order is shuffled again.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<EncodedPair>& pairs, int batch_tokens,
                                                          Rng& rng) {
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  auto cost = [&](std::size_t i) { return pairs[i].src.size() + pairs[i].tgt.size() + 2; };
  const std::size_t budget = static_cast<std::size_t>(std::max(1, batch_tokens));
  const std::size_t window = std::max<std::size_t>(1, 32 * budget / 16);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t w = 0; w < order.size(); w += window) {
    const auto end = std::min(order.size(), w + window);
    std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(w), order.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return cost(a) < cost(b); });
    std::vector<std::size_t> cur;
    std::size_t used = 0;
    for (std::size_t k = w; k < end; ++k) {
      const auto c = cost(order[k]);
      if (!cur.empty() && used + c > budget) {
        batches.push_back(std::move(cur));
        cur.clear();
        used = 0;
      }
      cur.push_back(order[k]);
      used += c;
    }
    if (!cur.empty()) batches.push_back(std::move(cur));
  }
  rng.shuffle(std::span<std::vector<std::size_t>>(batches));
  return batches;
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_nll = 0.0;
  std::optional<double> selection_score;
};

template <typename S>
struct TrainResult {
  Transformer<S> model;  // best epoch by selection score, else the last
  int best_epoch = 0;
  std::vector<EpochRecord> epochs;
  std::int64_t steps = 0;
};

/// Called after each epoch with (epoch, model); may return a score used
/// to keep the best epoch (ties go to the later epoch).
template <typename S>
using EpochCallback = std::function<std::optional<double>(int, const Transformer<S>&)>;

/// Weighted MLE over the concatenation of `corpora`.
template <typename S>
TrainResult<S> train_mixture(Transformer<S> model, const std::vector<EncodedCorpus>& corpora, const TrainHyper& hyper,
                             const EpochCallback<S>& on_epoch = {}, const EwcPenalty<S>& ewc = {}) {
  std::vector<EncodedPair> pairs;
  for (const auto& c : corpora) pairs.insert(pairs.end(), c.pairs.begin(), c.pairs.end());
  if (pairs.empty()) throw InvalidArgument("train_mixture: no training pairs");
  const auto& cfg = model.config();
  for (const auto& p : pairs) {
    for (auto id : p.src) {
      if (id < 0 || id >= cfg.src_vocab_size) {
        throw InvalidArgument("train_mixture: vocab coverage violation (source id " + std::to_string(id) + ")");
      }
    }
    for (auto id : p.tgt) {
      if (id < 0 || id >= cfg.tgt_vocab_size) {
        throw InvalidArgument("train_mixture: vocab coverage violation (target id " + std::to_string(id) + ")");
      }
    }
    if (p.tgt.empty()) throw InvalidArgument("train_mixture: zero-length target");
  }

  Rng shuffle_rng(derive_seed(hyper.seed, "shuffle"));
  Rng dropout_rng(derive_seed(hyper.seed, "dropout"));
  AdamState<S> opt(hyper.adam, model.params());
  TrainResult<S> result{model, 0, {}, 0};
  std::optional<double> best;

  for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
    const auto batches = make_batches(pairs, hyper.batch_tokens, shuffle_rng);
    LossStats epoch_stats;
    double loss_sum = 0.0, nll_sum = 0.0, weight_sum = 0.0;
    for (const auto& batch : batches) {
      std::vector<EncodedPair> items;
      items.reserve(batch.size());
      for (auto i : batch) items.push_back(pairs[i]);
      auto lg = loss_and_grads<S>(model, items, hyper.label_smoothing,
                                  cfg.dropout > 0 ? &dropout_rng : nullptr, ewc);
      if (!std::isfinite(lg.loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(opt.step + 1));
      }
      if (hyper.grad_clip > 0) {
        const double norm = std::sqrt(lg.grads.squared_norm());
        if (norm > hyper.grad_clip) lg.grads.scale(static_cast<S>(hyper.grad_clip / norm));
      }
      apply_update(model.params(), lg.grads, opt);
      if (const auto bad = model.params().first_non_finite(); !bad.empty()) {
        throw NumericError("parameter " + bad + " became non-finite at step " + std::to_string(opt.step));
      }
      double w = 0.0;
      for (const auto& p : items) w += p.weight;
      loss_sum += lg.loss * w;
      nll_sum += lg.nll * w;
      weight_sum += w;
    }
    EpochRecord rec{epoch, loss_sum / weight_sum, nll_sum / weight_sum, std::nullopt};
    if (on_epoch) rec.selection_score = on_epoch(epoch, model);
    const bool take = !rec.selection_score ? true : (!best || *rec.selection_score >= *best);
    if (take) {
      if (rec.selection_score) best = rec.selection_score;
      result.model = model;
      result.best_epoch = epoch;
    }
    result.epochs.push_back(rec);
  }
  result.steps = opt.step;
  return result;
}

}  // namespace lnmt
