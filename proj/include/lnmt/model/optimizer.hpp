#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include <nlohmann/json.hpp>

#include "lnmt/core/error.hpp"
#include "lnmt/model/params.hpp"

namespace lnmt {

struct AdamConfig {
  double peak_lr = 1e-3;
  int warmup_steps = 200;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

inline void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = nlohmann::json{{"peak_lr", c.peak_lr},
                     {"warmup_steps", c.warmup_steps},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps}};
}

inline void from_json(const nlohmann::json& j, AdamConfig& c) {
  AdamConfig d;
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
}

/// Linear warmup to `peak_lr`, then inverse square-root decay.
inline double scheduled_lr(const AdamConfig& c, std::int64_t step) {
  if (step <= 0) return 0.0;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(std::max(1, c.warmup_steps));
  return c.peak_lr * std::min(s / w, std::sqrt(w / s));
}

/// Adam moments plus step counter.
template <typename S>
struct AdamState {
  AdamConfig config;
  ParamSet<S> m, v;
  std::int64_t step = 0;

  AdamState() = default;
  AdamState(const AdamConfig& c, const ParamSet<S>& params) : config(c), m(params.zeros_like()), v(params.zeros_like()) {}
};

/// One Adam step on `params` with the scheduled learning rate.
template <typename S>
void apply_update(ParamSet<S>& params, const ParamSet<S>& grads, AdamState<S>& opt) {
  if (!params.same_shapes(grads) || !params.same_shapes(opt.m) || !params.same_shapes(opt.v)) {
    throw InvalidArgument("apply_update: gradient/optimizer shapes do not match parameters");
  }
  ++opt.step;
  const auto& c = opt.config;
  const double lr = scheduled_lr(c, opt.step);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  const S b1 = static_cast<S>(c.beta1), b2 = static_cast<S>(c.beta2);
  const S step_size = static_cast<S>(lr / bc1);
  const S inv_bc2 = static_cast<S>(1.0 / bc2);
  const S eps = static_cast<S>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = opt.m[i];
    auto& v = opt.v[i];
    const auto& g = grads[i];
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
    params[i].array() -= step_size * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
  }
}

}  // namespace lnmt
