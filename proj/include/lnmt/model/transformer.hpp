#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lnmt/core/error.hpp"
#include "lnmt/core/hash.hpp"
#include "lnmt/core/rng.hpp"
#include "lnmt/corpus/vocabulary.hpp"
#include "lnmt/model/config.hpp"
#include "lnmt/model/layers.hpp"
#include "lnmt/model/params.hpp"

namespace lnmt {

/// Parameter slots of one pre-norm encoder layer.
struct EncoderLayerIdx {
  layers::LnIdx ln1;
  layers::AttnIdx self_attn;
  layers::LnIdx ln2;
  layers::FfIdx ff;
};

struct DecoderLayerIdx {
  layers::LnIdx ln1;
  layers::AttnIdx self_attn;
  layers::LnIdx ln2;
  layers::AttnIdx cross_attn;
  layers::LnIdx ln3;
  layers::FfIdx ff;
};

struct ModelLayout {
  std::size_t src_emb = 0;
  std::size_t tgt_emb = 0;  // == src_emb when embeddings are shared
  std::vector<EncoderLayerIdx> enc;
  layers::LnIdx enc_ln{};
  std::vector<DecoderLayerIdx> dec;
  layers::LnIdx dec_ln{};
  std::size_t out_w = 0;
  std::size_t out_b = 0;
};

/// Teacher-forced log-likelihood of one target sentence.
struct SentenceScore {
  double total = 0.0;
  std::vector<double> per_token;  // one entry per target token, EOS last
};

/// Loss bookkeeping for one accumulated pair or batch.
struct LossStats {
  double weighted_loss = 0.0;  // sum of w * smoothed token loss
  double weighted_nll = 0.0;   // sum of w * token NLL
  double weighted_tokens = 0.0;
  std::size_t tokens = 0;

  LossStats& operator+=(const LossStats& o) {
    weighted_loss += o.weighted_loss;
    weighted_nll += o.weighted_nll;
    weighted_tokens += o.weighted_tokens;
    tokens += o.tokens;
    return *this;
  }
  double mean_loss() const { return weighted_tokens > 0 ? weighted_loss / weighted_tokens : 0.0; }
  double mean_nll() const { return weighted_tokens > 0 ? weighted_nll / weighted_tokens : 0.0; }
};

/// Pre-norm Transformer encoder-decoder with explicit backpropagation.
/// Instantiated with float for training and double for gradient checks.
template <typename S>
class Transformer {
 public:
  using Matrix = Mat<S>;

  Transformer() = default;

  explicit Transformer(const ModelConfig& config) : config_(config) {
    config_.validate();
    build_layout();
    pe_ = layers::positional_table<S>(config_.max_len + 1, config_.d_model);
    initialize();
  }

  /// Wraps existing parameters; shapes must match the config's layout.
  Transformer(const ModelConfig& config, ParamSet<S> params) : config_(config) {
    config_.validate();
    build_layout();
    pe_ = layers::positional_table<S>(config_.max_len + 1, config_.d_model);
    if (!params.same_shapes(params_) || params.names != params_.names) {
      throw InvalidArgument("parameter set does not match model layout");
    }
    params_ = std::move(params);
  }

  const ModelConfig& config() const { return config_; }
  const ParamSet<S>& params() const { return params_; }
  ParamSet<S>& params() { return params_; }
  const ModelLayout& layout() const { return layout_; }
  std::size_t param_count() const { return params_.count(); }
  std::uint64_t checksum() const { return params_.checksum(); }

  template <typename T>
  Transformer<T> cast() const {
    return Transformer<T>(config_, params_.template cast<T>());
  }

  // ---- scoring ------------------------------------------------------------

  /// log p(tgt | src) with the decoder fed BOS + tgt and predicting tgt + EOS.
  SentenceScore sentence_logprob(std::span<const TokenId> src, std::span<const TokenId> tgt) const {
    check_inputs(src, tgt);
    Matrix logits = forward(src, tgt, nullptr, nullptr);
    SentenceScore out;
    out.per_token.reserve(tgt.size() + 1);
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
      const auto lp = layers::log_softmax<S>(logits.row(t));
      const TokenId y = t < static_cast<Eigen::Index>(tgt.size()) ? tgt[static_cast<std::size_t>(t)] : kEosId;
      const double v = static_cast<double>(lp(y));
      out.per_token.push_back(v);
      out.total += v;
    }
    return out;
  }

  /// Pre-softmax scores, one row per target position (len(tgt) + 1 rows).
  Matrix logits(std::span<const TokenId> src, std::span<const TokenId> tgt) const {
    check_inputs(src, tgt);
    return forward(src, tgt, nullptr, nullptr);
  }

  /// Adds `weight` * d(loss)/d(params) into `grads`, where the loss is the
  /// label-smoothed cross entropy summed over target tokens. Returns the
  /// unnormalized statistics; callers divide by the batch token weight.
  LossStats accumulate_gradients(std::span<const TokenId> src, std::span<const TokenId> tgt, S weight,
                                 double label_smoothing, ParamSet<S>& grads, Rng* dropout_rng) const {
    check_inputs(src, tgt);
    if (tgt.empty()) throw InvalidArgument("zero-length target sentence");
    Cache cache;
    Matrix logits = forward(src, tgt, &cache, dropout_rng);
    const auto n_vocab = logits.cols();
    const S eps = static_cast<S>(label_smoothing);
    const S uniform = eps / static_cast<S>(n_vocab);
    LossStats stats;
    Matrix dlogits(logits.rows(), n_vocab);
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
      const auto lp = layers::log_softmax<S>(logits.row(t));
      const TokenId y = t < static_cast<Eigen::Index>(tgt.size()) ? tgt[static_cast<std::size_t>(t)] : kEosId;
      const S nll = -lp(y);
      const S smooth = (S(1) - eps) * nll - uniform * lp.sum();
      stats.weighted_loss += static_cast<double>(weight * smooth);
      stats.weighted_nll += static_cast<double>(weight * nll);
      stats.weighted_tokens += static_cast<double>(weight);
      stats.tokens += 1;
      dlogits.row(t) = lp.array().exp() - uniform;
      dlogits(t, y) -= S(1) - eps;
    }
    dlogits *= weight;
    backward(dlogits, cache, src, tgt, grads);
    return stats;
  }

  // ---- incremental decoding ---------------------------------------------

  /// Encoder output plus per-layer cross-attention keys/values.
  struct EncoderState {
    Matrix memory;
    std::vector<Matrix> cross_k, cross_v;
  };

  /// Self-attention keys/values of the positions decoded so far.
  struct DecoderState {
    std::vector<Matrix> self_k, self_v;
    int length = 0;
  };

  EncoderState encode(std::span<const TokenId> src) const {
    check_ids(src, config_.src_vocab_size, "source");
    check_length(src.size(), "source");
    EncoderState st;
    st.memory = run_encoder(src, nullptr, nullptr);
    for (const auto& L : layout_.dec) {
      st.cross_k.push_back(layers::affine(st.memory, params_[L.cross_attn.wk], params_[L.cross_attn.bk]));
      st.cross_v.push_back(layers::affine(st.memory, params_[L.cross_attn.wv], params_[L.cross_attn.bv]));
    }
    return st;
  }

  DecoderState start() const {
    DecoderState st;
    st.self_k.assign(layout_.dec.size(), Matrix(0, config_.d_model));
    st.self_v.assign(layout_.dec.size(), Matrix(0, config_.d_model));
    return st;
  }

  /// Feeds `token` at the next position and returns log-probabilities over
  /// the target vocabulary for the following position.
  layers::Row<S> step(const EncoderState& enc, DecoderState& st, TokenId token) const {
    if (st.length > config_.max_len) throw InvalidArgument("decoder position exceeds max_len");
    const auto& p = params_;
    Matrix y = p[layout_.tgt_emb].row(token) * emb_scale() + pe_.row(st.length);
    for (std::size_t l = 0; l < layout_.dec.size(); ++l) {
      const auto& L = layout_.dec[l];
      Matrix a = layers::layer_norm<S>(y, p, L.ln1, nullptr);
      Matrix q = layers::affine(a, p[L.self_attn.wq], p[L.self_attn.bq]);
      append_row(st.self_k[l], layers::affine(a, p[L.self_attn.wk], p[L.self_attn.bk]));
      append_row(st.self_v[l], layers::affine(a, p[L.self_attn.wv], p[L.self_attn.bv]));
      Matrix o = layers::attend<S>(q, st.self_k[l], st.self_v[l], config_.n_heads, false, nullptr);
      y += layers::affine(o, p[L.self_attn.wo], p[L.self_attn.bo]);

      Matrix b = layers::layer_norm<S>(y, p, L.ln2, nullptr);
      Matrix qc = layers::affine(b, p[L.cross_attn.wq], p[L.cross_attn.bq]);
      Matrix oc = layers::attend<S>(qc, enc.cross_k[l], enc.cross_v[l], config_.n_heads, false, nullptr);
      y += layers::affine(oc, p[L.cross_attn.wo], p[L.cross_attn.bo]);

      Matrix e = layers::layer_norm<S>(y, p, L.ln3, nullptr);
      y += layers::feed_forward<S>(e, p, L.ff, nullptr);
    }
    ++st.length;
    Matrix h = layers::layer_norm<S>(y, p, layout_.dec_ln, nullptr);
    Matrix z = layers::output_logits(h, p[layout_.out_w], p[layout_.out_b]);
    return layers::log_softmax<S>(z.row(0));
  }

  // ---- vocabulary growth -------------------------------------------------

  /// Returns a model whose embedding and output rows for ids below the old
  /// sizes are copied bit-exactly; new rows come from a seeded initializer.
  Transformer expanded(int new_src_vocab, int new_tgt_vocab) const {
    if (new_src_vocab < config_.src_vocab_size || new_tgt_vocab < config_.tgt_vocab_size) {
      throw InvalidArgument("vocabulary expansion cannot shrink the model");
    }
    ModelConfig cfg = config_;
    cfg.src_vocab_size = new_src_vocab;
    cfg.tgt_vocab_size = new_tgt_vocab;
    cfg.validate();
    Transformer out(cfg, /*skip_init=*/true);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Matrix& old_t = params_[i];
      Matrix& new_t = out.params_[i];
      if (old_t.rows() == new_t.rows() && old_t.cols() == new_t.cols()) {
        new_t = old_t;
        continue;
      }
      Rng rng(derive_seed(config_.seed, "expand/" + params_.names[i] + "/" + std::to_string(old_t.rows()) + "x" +
                                            std::to_string(old_t.cols())));
      out.init_tensor(i, rng);
      new_t.topLeftCorner(old_t.rows(), old_t.cols()) = old_t;
    }
    return out;
  }

 private:
  struct EncLayerCache {
    layers::LnCache<S> ln1, ln2;
    layers::AttnCache<S> attn;
    layers::FfCache<S> ff;
    Matrix drop_attn, drop_ff;
  };
  struct DecLayerCache {
    layers::LnCache<S> ln1, ln2, ln3;
    layers::AttnCache<S> self_attn, cross_attn;
    layers::FfCache<S> ff;
    Matrix drop_self, drop_cross, drop_ff;
  };
  struct Cache {
    Matrix drop_src, drop_tgt;
    std::vector<EncLayerCache> enc;
    layers::LnCache<S> enc_ln;
    Matrix memory;
    std::vector<DecLayerCache> dec;
    layers::LnCache<S> dec_ln;
    Matrix dec_out;
  };

  Transformer(const ModelConfig& config, bool /*skip_init*/) : config_(config) {
    build_layout();
    pe_ = layers::positional_table<S>(config_.max_len + 1, config_.d_model);
  }

  S emb_scale() const { return std::sqrt(static_cast<S>(config_.d_model)); }

  static void append_row(Matrix& m, const Matrix& row) {
    m.conservativeResize(m.rows() + 1, Eigen::NoChange);
    m.row(m.rows() - 1) = row.row(0);
  }

  void build_layout() {
    params_ = {};
    const int d = config_.d_model, f = config_.d_ff;
    auto ln = [&](const std::string& name) {
      layers::LnIdx idx{params_.add(name + ".g", 1, d), params_.add(name + ".b", 1, d)};
      return idx;
    };
    auto attn = [&](const std::string& name) {
      layers::AttnIdx a{};
      a.wq = params_.add(name + ".wq", d, d);
      a.bq = params_.add(name + ".bq", 1, d);
      a.wk = params_.add(name + ".wk", d, d);
      a.bk = params_.add(name + ".bk", 1, d);
      a.wv = params_.add(name + ".wv", d, d);
      a.bv = params_.add(name + ".bv", 1, d);
      a.wo = params_.add(name + ".wo", d, d);
      a.bo = params_.add(name + ".bo", 1, d);
      return a;
    };
    auto ff = [&](const std::string& name) {
      layers::FfIdx x{};
      x.w1 = params_.add(name + ".w1", d, f);
      x.b1 = params_.add(name + ".b1", 1, f);
      x.w2 = params_.add(name + ".w2", f, d);
      x.b2 = params_.add(name + ".b2", 1, d);
      return x;
    };
    layout_ = {};
    layout_.src_emb = params_.add("src_emb", config_.src_vocab_size, d);
    layout_.tgt_emb = config_.shared_src_tgt_embeddings ? layout_.src_emb
                                                        : params_.add("tgt_emb", config_.tgt_vocab_size, d);
    for (int l = 0; l < config_.n_enc_layers; ++l) {
      const std::string pre = "enc." + std::to_string(l);
      EncoderLayerIdx L{};
      L.ln1 = ln(pre + ".ln1");
      L.self_attn = attn(pre + ".self");
      L.ln2 = ln(pre + ".ln2");
      L.ff = ff(pre + ".ff");
      layout_.enc.push_back(L);
    }
    layout_.enc_ln = ln("enc.ln");
    for (int l = 0; l < config_.n_dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l);
      DecoderLayerIdx L{};
      L.ln1 = ln(pre + ".ln1");
      L.self_attn = attn(pre + ".self");
      L.ln2 = ln(pre + ".ln2");
      L.cross_attn = attn(pre + ".cross");
      L.ln3 = ln(pre + ".ln3");
      L.ff = ff(pre + ".ff");
      layout_.dec.push_back(L);
    }
    layout_.dec_ln = ln("dec.ln");
    layout_.out_w = params_.add("out.w", config_.tgt_vocab_size, d);
    layout_.out_b = params_.add("out.b", 1, config_.tgt_vocab_size);
  }

  static bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  }

  /// Embeddings ~ N(0, 1/d); matrices Xavier-uniform; biases 0; LN gain 1.
  void init_tensor(std::size_t i, Rng& rng) {
    const auto& name = params_.names[i];
    Matrix& t = params_[i];
    if (name == "src_emb" || name == "tgt_emb") {
      const double sd = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<S>(rng.normal() * sd);
    } else if (ends_with(name, ".g")) {
      t.setOnes();
    } else if (t.rows() == 1) {
      t.setZero();
    } else {
      const double a = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<S>(rng.uniform(-a, a));
    }
  }

  void initialize() {
    Rng rng(config_.seed);
    for (std::size_t i = 0; i < params_.size(); ++i) init_tensor(i, rng);
  }

  static void check_ids(std::span<const TokenId> ids, int vocab, const char* what) {
    for (TokenId id : ids) {
      if (id < 0 || id >= vocab) {
        throw InvalidArgument(std::string(what) + " token index " + std::to_string(id) +
                              " out of range for vocabulary of size " + std::to_string(vocab));
      }
    }
  }

  void check_length(std::size_t n, const char* what) const {
    if (n > static_cast<std::size_t>(config_.max_len)) {
      throw InvalidArgument(std::string(what) + " length " + std::to_string(n) + " exceeds max_len " +
                            std::to_string(config_.max_len));
    }
  }

  void check_inputs(std::span<const TokenId> src, std::span<const TokenId> tgt) const {
    check_ids(src, config_.src_vocab_size, "source");
    check_ids(tgt, config_.tgt_vocab_size, "target");
    check_length(src.size(), "source");
    check_length(tgt.size(), "target");
  }

  Matrix embed(std::size_t table, std::span<const TokenId> ids, TokenId framing, bool frame_front) const {
    const auto n = static_cast<Eigen::Index>(ids.size() + 1);
    Matrix x(n, config_.d_model);
    const S scale = emb_scale();
    for (Eigen::Index t = 0; t < n; ++t) {
      TokenId id;
      if (frame_front) {
        id = t == 0 ? framing : ids[static_cast<std::size_t>(t - 1)];
      } else {
        id = t + 1 == n ? framing : ids[static_cast<std::size_t>(t)];
      }
      x.row(t) = params_[table].row(id) * scale + pe_.row(t);
    }
    return x;
  }

  Matrix run_encoder(std::span<const TokenId> src, Cache* cache, Rng* rng) const {
    const auto& p = params_;
    const double rate = config_.dropout;
    Matrix x = embed(layout_.src_emb, src, kEosId, false);
    if (cache) {
      cache->drop_src = layers::dropout_mask<S>(x.rows(), x.cols(), rate, rng);
      layers::apply_mask(x, cache->drop_src);
      cache->enc.resize(layout_.enc.size());
    }
    for (std::size_t l = 0; l < layout_.enc.size(); ++l) {
      const auto& L = layout_.enc[l];
      EncLayerCache* c = cache ? &cache->enc[l] : nullptr;
      Matrix a = layers::layer_norm<S>(x, p, L.ln1, c ? &c->ln1 : nullptr);
      Matrix s = layers::attention<S>(a, a, p, L.self_attn, config_.n_heads, false, c ? &c->attn : nullptr);
      if (c) {
        c->drop_attn = layers::dropout_mask<S>(s.rows(), s.cols(), rate, rng);
        layers::apply_mask(s, c->drop_attn);
      }
      x += s;
      Matrix b = layers::layer_norm<S>(x, p, L.ln2, c ? &c->ln2 : nullptr);
      Matrix f = layers::feed_forward<S>(b, p, L.ff, c ? &c->ff : nullptr);
      if (c) {
        c->drop_ff = layers::dropout_mask<S>(f.rows(), f.cols(), rate, rng);
        layers::apply_mask(f, c->drop_ff);
      }
      x += f;
    }
    return layers::layer_norm<S>(x, p, layout_.enc_ln, cache ? &cache->enc_ln : nullptr);
  }

  Matrix forward(std::span<const TokenId> src, std::span<const TokenId> tgt, Cache* cache, Rng* rng) const {
    const auto& p = params_;
    const double rate = config_.dropout;
    Matrix memory = run_encoder(src, cache, rng);
    Matrix y = embed(layout_.tgt_emb, tgt, kBosId, true);
    if (cache) {
      cache->drop_tgt = layers::dropout_mask<S>(y.rows(), y.cols(), rate, rng);
      layers::apply_mask(y, cache->drop_tgt);
      cache->dec.resize(layout_.dec.size());
    }
    for (std::size_t l = 0; l < layout_.dec.size(); ++l) {
      const auto& L = layout_.dec[l];
      DecLayerCache* c = cache ? &cache->dec[l] : nullptr;
      Matrix a = layers::layer_norm<S>(y, p, L.ln1, c ? &c->ln1 : nullptr);
      Matrix s = layers::attention<S>(a, a, p, L.self_attn, config_.n_heads, true, c ? &c->self_attn : nullptr);
      if (c) {
        c->drop_self = layers::dropout_mask<S>(s.rows(), s.cols(), rate, rng);
        layers::apply_mask(s, c->drop_self);
      }
      y += s;
      Matrix b = layers::layer_norm<S>(y, p, L.ln2, c ? &c->ln2 : nullptr);
      Matrix x = layers::attention<S>(b, memory, p, L.cross_attn, config_.n_heads, false,
                                      c ? &c->cross_attn : nullptr);
      if (c) {
        c->drop_cross = layers::dropout_mask<S>(x.rows(), x.cols(), rate, rng);
        layers::apply_mask(x, c->drop_cross);
      }
      y += x;
      Matrix e = layers::layer_norm<S>(y, p, L.ln3, c ? &c->ln3 : nullptr);
      Matrix f = layers::feed_forward<S>(e, p, L.ff, c ? &c->ff : nullptr);
      if (c) {
        c->drop_ff = layers::dropout_mask<S>(f.rows(), f.cols(), rate, rng);
        layers::apply_mask(f, c->drop_ff);
      }
      y += f;
    }
    Matrix h = layers::layer_norm<S>(y, p, layout_.dec_ln, cache ? &cache->dec_ln : nullptr);
    if (cache) {
      cache->memory = memory;
      cache->dec_out = h;
    }
    return layers::output_logits(h, p[layout_.out_w], p[layout_.out_b]);
  }

  void backward(const Matrix& dlogits, const Cache& c, std::span<const TokenId> src, std::span<const TokenId> tgt,
                ParamSet<S>& g) const {
    const auto& p = params_;
    g[layout_.out_w].noalias() += dlogits.transpose() * c.dec_out;
    g[layout_.out_b].row(0) += dlogits.colwise().sum();
    Matrix dy = dlogits * p[layout_.out_w];
    dy = layers::layer_norm_backward<S>(dy, c.dec_ln, p, layout_.dec_ln, g);

    Matrix dmem = Matrix::Zero(c.memory.rows(), c.memory.cols());
    for (std::size_t li = layout_.dec.size(); li-- > 0;) {
      const auto& L = layout_.dec[li];
      const auto& lc = c.dec[li];
      Matrix df = dy;
      layers::apply_mask(df, lc.drop_ff);
      dy += layers::layer_norm_backward<S>(layers::feed_forward_backward<S>(df, lc.ff, p, L.ff, g), lc.ln3, p,
                                           L.ln3, g);
      Matrix dx = dy;
      layers::apply_mask(dx, lc.drop_cross);
      auto [dq, dkv] = layers::attention_backward<S>(dx, lc.cross_attn, p, L.cross_attn, config_.n_heads, g);
      dmem += dkv;
      dy += layers::layer_norm_backward<S>(dq, lc.ln2, p, L.ln2, g);
      Matrix ds = dy;
      layers::apply_mask(ds, lc.drop_self);
      auto [sq, skv] = layers::attention_backward<S>(ds, lc.self_attn, p, L.self_attn, config_.n_heads, g);
      sq += skv;
      dy += layers::layer_norm_backward<S>(sq, lc.ln1, p, L.ln1, g);
    }
    layers::apply_mask(dy, c.drop_tgt);
    const S scale = emb_scale();
    for (Eigen::Index t = 0; t < dy.rows(); ++t) {
      const TokenId id = t == 0 ? kBosId : tgt[static_cast<std::size_t>(t - 1)];
      g[layout_.tgt_emb].row(id) += dy.row(t) * scale;
    }

    Matrix dx = layers::layer_norm_backward<S>(dmem, c.enc_ln, p, layout_.enc_ln, g);
    for (std::size_t li = layout_.enc.size(); li-- > 0;) {
      const auto& L = layout_.enc[li];
      const auto& lc = c.enc[li];
      Matrix df = dx;
      layers::apply_mask(df, lc.drop_ff);
      dx += layers::layer_norm_backward<S>(layers::feed_forward_backward<S>(df, lc.ff, p, L.ff, g), lc.ln2, p,
                                           L.ln2, g);
      Matrix ds = dx;
      layers::apply_mask(ds, lc.drop_attn);
      auto [sq, skv] = layers::attention_backward<S>(ds, lc.attn, p, L.self_attn, config_.n_heads, g);
      sq += skv;
      dx += layers::layer_norm_backward<S>(sq, lc.ln1, p, L.ln1, g);
    }
    layers::apply_mask(dx, c.drop_src);
    for (Eigen::Index t = 0; t < dx.rows(); ++t) {
      const TokenId id = t + 1 == dx.rows() ? kEosId : src[static_cast<std::size_t>(t)];
      g[layout_.src_emb].row(id) += dx.row(t) * scale;
    }
  }

  ModelConfig config_;
  ModelLayout layout_;
  ParamSet<S> params_;
  Matrix pe_;

  template <typename>
  friend class Transformer;
};

}  // namespace lnmt
