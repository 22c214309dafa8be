#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "lnmt/core/rng.hpp"
#include "lnmt/model/params.hpp"

// Forward/backward building blocks. Every backward takes the forward cache
// and accumulates parameter gradients into the matching ParamSet slots.

namespace lnmt::layers {

template <typename S>
using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <typename S>
using Col = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct LnIdx {
  std::size_t g, b;
};
struct AttnIdx {
  std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
};
struct FfIdx {
  std::size_t w1, b1, w2, b2;
};

inline constexpr double kLnEps = 1e-5;

// ---- layer norm ----------------------------------------------------------

template <typename S>
struct LnCache {
  Mat<S> xhat;
  Col<S> rstd;
};

template <typename S>
Mat<S> layer_norm(const Mat<S>& x, const ParamSet<S>& p, LnIdx idx, LnCache<S>* cache) {
  const auto d = x.cols();
  Col<S> mean = x.rowwise().mean();
  Mat<S> xc = x.colwise() - mean;
  Col<S> var = xc.array().square().rowwise().sum() / static_cast<S>(d);
  Col<S> rstd = (var.array() + static_cast<S>(kLnEps)).rsqrt();
  Mat<S> xhat = xc.array().colwise() * rstd.array();
  Mat<S> y = (xhat.array().rowwise() * p[idx.g].row(0).array()).rowwise() + p[idx.b].row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const LnCache<S>& c, const ParamSet<S>& p, LnIdx idx,
                           ParamSet<S>& g) {
  const auto d = static_cast<S>(dy.cols());
  g[idx.g].row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g[idx.b].row(0) += dy.colwise().sum();
  Mat<S> dxhat = dy.array().rowwise() * p[idx.g].row(0).array();
  Col<S> m1 = dxhat.rowwise().sum() / d;
  Col<S> m2 = (dxhat.array() * c.xhat.array()).rowwise().sum() / d;
  Mat<S> dx = dxhat.colwise() - m1;
  dx -= (c.xhat.array().colwise() * m2.array()).matrix();
  return dx.array().colwise() * c.rstd.array();
}

// ---- linear helpers --------------------------------------------------------

template <typename S>
Mat<S> affine(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b) {
  Mat<S> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

// ---- multi-head attention --------------------------------------------------

template <typename S>
struct AttnCache {
  Mat<S> xq, xkv, q, k, v, o;
  std::vector<Mat<S>> probs;  // one (Tq x Tk) matrix per head
};

template <typename S>
void softmax_rows(Mat<S>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const S mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

/// Scaled dot-product attention of `q` rows over `k`/`v` rows for each head.
/// With `causal`, query i sees keys 0..i + `offset`.
template <typename S>
Mat<S> attend(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v, int n_heads, bool causal,
              std::vector<Mat<S>>* probs_out, Eigen::Index offset = 0) {
  const auto dh = q.cols() / n_heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  Mat<S> o(q.rows(), q.cols());
  if (probs_out) probs_out->clear();
  for (int h = 0; h < n_heads; ++h) {
    Mat<S> s = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        for (Eigen::Index j = i + offset + 1; j < s.cols(); ++j) s(i, j) = -std::numeric_limits<S>::infinity();
      }
    }
    softmax_rows(s);
    o.middleCols(h * dh, dh) = s * v.middleCols(h * dh, dh);
    if (probs_out) probs_out->push_back(std::move(s));
  }
  return o;
}

template <typename S>
Mat<S> attention(const Mat<S>& xq, const Mat<S>& xkv, const ParamSet<S>& p, AttnIdx idx, int n_heads,
                 bool causal, AttnCache<S>* cache) {
  Mat<S> q = affine(xq, p[idx.wq], p[idx.bq]);
  Mat<S> k = affine(xkv, p[idx.wk], p[idx.bk]);
  Mat<S> v = affine(xkv, p[idx.wv], p[idx.bv]);
  std::vector<Mat<S>> probs;
  Mat<S> o = attend(q, k, v, n_heads, causal, cache ? &probs : nullptr);
  Mat<S> out = affine(o, p[idx.wo], p[idx.bo]);
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
    cache->probs = std::move(probs);
  }
  return out;
}

/// Returns (d xq, d xkv).
template <typename S>
std::pair<Mat<S>, Mat<S>> attention_backward(const Mat<S>& dout, const AttnCache<S>& c, const ParamSet<S>& p,
                                             AttnIdx idx, int n_heads, ParamSet<S>& g) {
  g[idx.wo].noalias() += c.o.transpose() * dout;
  g[idx.bo].row(0) += dout.colwise().sum();
  Mat<S> d_o = dout * p[idx.wo].transpose();

  const auto dh = c.q.cols() / n_heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  Mat<S> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
  for (int h = 0; h < n_heads; ++h) {
    const Mat<S>& a = c.probs[static_cast<std::size_t>(h)];
    Mat<S> doh = d_o.middleCols(h * dh, dh);
    Mat<S> da = doh * c.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh) = a.transpose() * doh;
    Col<S> rs = (da.array() * a.array()).rowwise().sum();
    Mat<S> ds = (a.array() * (da.colwise() - rs).array()).matrix() * scale;
    dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
  }
  g[idx.wq].noalias() += c.xq.transpose() * dq;
  g[idx.bq].row(0) += dq.colwise().sum();
  g[idx.wk].noalias() += c.xkv.transpose() * dk;
  g[idx.bk].row(0) += dk.colwise().sum();
  g[idx.wv].noalias() += c.xkv.transpose() * dv;
  g[idx.bv].row(0) += dv.colwise().sum();
  Mat<S> dxq = dq * p[idx.wq].transpose();
  Mat<S> dxkv = dk * p[idx.wk].transpose();
  dxkv.noalias() += dv * p[idx.wv].transpose();
  return {std::move(dxq), std::move(dxkv)};
}

// ---- position-wise feed-forward ------------------------------------------

template <typename S>
struct FfCache {
  Mat<S> x, hpre, h;
};

template <typename S>
Mat<S> feed_forward(const Mat<S>& x, const ParamSet<S>& p, FfIdx idx, FfCache<S>* cache) {
  Mat<S> hpre = affine(x, p[idx.w1], p[idx.b1]);
  Mat<S> h = hpre.cwiseMax(S(0));
  Mat<S> y = affine(h, p[idx.w2], p[idx.b2]);
  if (cache) {
    cache->x = x;
    cache->hpre = std::move(hpre);
    cache->h = std::move(h);
  }
  return y;
}

template <typename S>
Mat<S> feed_forward_backward(const Mat<S>& dy, const FfCache<S>& c, const ParamSet<S>& p, FfIdx idx,
                             ParamSet<S>& g) {
  g[idx.w2].noalias() += c.h.transpose() * dy;
  g[idx.b2].row(0) += dy.colwise().sum();
  Mat<S> dh = dy * p[idx.w2].transpose();
  dh = (c.hpre.array() > S(0)).select(dh, S(0));
  g[idx.w1].noalias() += c.x.transpose() * dh;
  g[idx.b1].row(0) += dh.colwise().sum();
  return dh * p[idx.w1].transpose();
}

// ---- dropout ---------------------------------------------------------------

/// Inverted dropout mask; empty when inactive.
template <typename S>
Mat<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return {};
  Mat<S> m(rows, cols);
  const S keep = static_cast<S>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng->uniform() < rate ? S(0) : keep;
  return m;
}

template <typename S>
void apply_mask(Mat<S>& x, const Mat<S>& mask) {
  if (mask.size() != 0) x.array() *= mask.array();
}

// ---- output projection -----------------------------------------------------

/// logits(t, v) = b(v) + sum_k h(t, k) w(v, k), accumulated in a fixed order
/// per entry so that adding vocabulary rows leaves existing logits bit-identical.
template <typename S>
Mat<S> output_logits(const Mat<S>& h, const Mat<S>& w, const Mat<S>& b) {
  const auto n_vocab = w.rows();
  const auto d = w.cols();
  Mat<S> logits(h.rows(), n_vocab);
  for (Eigen::Index t = 0; t < h.rows(); ++t) {
    const S* hr = h.row(t).data();
    for (Eigen::Index v = 0; v < n_vocab; ++v) {
      const S* wr = w.row(v).data();
      S acc = b(0, v);
      for (Eigen::Index k = 0; k < d; ++k) acc += hr[k] * wr[k];
      logits(t, v) = acc;
    }
  }
  return logits;
}

template <typename S>
Row<S> log_softmax(const Eigen::Ref<const Row<S>>& z) {
  const S mx = z.maxCoeff();
  const S lse = mx + std::log((z.array() - mx).exp().sum());
  return z.array() - lse;
}

/// Sinusoidal position table with `n` rows.
template <typename S>
Mat<S> positional_table(int n, int d) {
  Mat<S> pe(n, d);
  for (int pos = 0; pos < n; ++pos) {
    for (int i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      pe(pos, i) = static_cast<S>(std::sin(pos * freq));
      if (i + 1 < d) pe(pos, i + 1) = static_cast<S>(std::cos(pos * freq));
    }
  }
  return pe;
}

}  // namespace lnmt::layers
