#pragma once

#include <algorithm>
#include <optional>

#include "lnmt/core/error.hpp"
#include "lnmt/lifelong/trainer.hpp"
#include "lnmt/model/fisher.hpp"
#include "lnmt/model/transformer.hpp"

namespace lnmt {

struct EwcConfig {
  double lambda = 100.0;
  std::size_t sample_cap = 1000;

  friend bool operator==(const EwcConfig&, const EwcConfig&) = default;
};

inline void to_json(nlohmann::json& j, const EwcConfig& c) {
  j = nlohmann::json{{"lambda", c.lambda}, {"sample_cap", c.sample_cap}};
}

inline void from_json(const nlohmann::json& j, EwcConfig& c) {
  EwcConfig d;
  c.lambda = j.value("lambda", d.lambda);
  c.sample_cap = j.value("sample_cap", d.sample_cap);
  if (c.lambda < 0) throw ConfigError("ewc.lambda must be non-negative");
  if (c.sample_cap == 0) throw ConfigError("ewc.sample_cap must be positive");
}

/// Empirical diagonal Fisher: the mean over the first `sample_cap` pairs of
/// the element-wise squared gradient of the sentence NLL. No dropout and no
/// label smoothing. The anchor is the model's current parameters.
template <typename S>
FisherDiag<S> compute_fisher(const Transformer<S>& model, const EncodedCorpus& corpus, std::size_t sample_cap) {
  if (corpus.pairs.empty()) throw InvalidArgument("compute_fisher: empty corpus");
  if (sample_cap == 0) throw InvalidArgument("compute_fisher: sample_cap must be positive");
  const std::size_t n = std::min(sample_cap, corpus.pairs.size());
  FisherDiag<S> f{model.params().zeros_like(), model.params(), n};
  auto g = model.params().zeros_like();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = corpus.pairs[i];
    g.set_zero();
    model.accumulate_gradients(p.src, p.tgt, S(1), 0.0, g, nullptr);
    for (std::size_t t = 0; t < g.size(); ++t) f.fisher[t].array() += g[t].array().square();
  }
  f.fisher.scale(static_cast<S>(1.0 / static_cast<double>(n)));
  return f;
}

/// Online accumulation: Fishers add up across tasks and the anchor moves to
/// the newest snapshot. `previous` may be smaller than `latest` after a
/// vocabulary expansion.
template <typename S>
FisherDiag<S> accumulate_fisher(const std::optional<FisherDiag<S>>& previous, FisherDiag<S> latest) {
  if (!previous) return latest;
  const auto grown = previous->expanded_to(latest.anchor);
  for (std::size_t i = 0; i < latest.fisher.size(); ++i) latest.fisher[i] += grown.fisher[i];
  latest.sample_count += previous->sample_count;
  return latest;
}

/// base + (lambda / 2) * sum F (theta - theta*)^2
template <typename S>
double ewc_loss(const ParamSet<S>& params, const FisherDiag<S>& fisher, double lambda, double base_nll) {
  return base_nll + ewc_penalty(params, fisher, lambda);
}

}  // namespace lnmt
