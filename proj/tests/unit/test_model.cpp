#include <cmath>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "lnmt/lifelong/trainer.hpp"
#include "lnmt/model/checkpoint.hpp"
#include "lnmt/model/optimizer.hpp"
#include "lnmt/model/transformer.hpp"
#include "test_util.hpp"

using namespace lnmt;
using lnmt::testing::random_ids;
using lnmt::testing::TempDir;
using lnmt::testing::tiny_config;

namespace {

/// Closed-form parameter count of the pre-norm encoder-decoder.
std::size_t expected_param_count(std::size_t d, std::size_t ff, std::size_t enc, std::size_t dec, std::size_t vs,
                                 std::size_t vt) {
  const std::size_t ln = 2 * d;
  const std::size_t attn = 4 * d * d + 4 * d;
  const std::size_t ffn = d * ff + ff + ff * d + d;
  const std::size_t enc_layer = 2 * ln + attn + ffn;
  const std::size_t dec_layer = 3 * ln + 2 * attn + ffn;
  return vs * d + vt * d + enc * enc_layer + ln + dec * dec_layer + ln + vt * d + vt;
}

double weighted_loss(const Transformer<double>& m, const std::vector<TokenId>& src, const std::vector<TokenId>& tgt,
                     double smoothing) {
  auto g = m.params().zeros_like();
  return m.accumulate_gradients(src, tgt, 1.0, smoothing, g, nullptr).weighted_loss;
}

}  // namespace

TEST(ModelConfig, RejectsIndivisibleHeads) {
  auto c = tiny_config(10, 10);
  c.d_model = 8;
  c.n_heads = 3;
  EXPECT_THROW(Transformer<float>{c}, InvalidArgument);
}

TEST(ModelConfig, RejectsTinyVocabulary) {
  auto c = tiny_config(3, 10);
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(Transformer, InitializationIsDeterministic) {
  const auto c = tiny_config(12, 14);
  EXPECT_EQ(Transformer<float>(c).checksum(), Transformer<float>(c).checksum());
  auto c2 = c;
  c2.seed = 6;
  EXPECT_NE(Transformer<float>(c).checksum(), Transformer<float>(c2).checksum());
}

TEST(Transformer, ParamCountMatchesFormula) {
  ModelConfig c;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.d_ff = 64;
  c.src_vocab_size = 200;
  c.tgt_vocab_size = 200;
  EXPECT_EQ(Transformer<float>(c).param_count(), expected_param_count(32, 64, 2, 2, 200, 200));
  // Hand evaluation of the same formula for this configuration.
  EXPECT_EQ(expected_param_count(32, 64, 2, 2, 200, 200), 62280u);
}

TEST(Transformer, ZeroOutputProjectionIsUniform) {
  auto m = Transformer<double>(tiny_config(10, 13));
  m.params()[m.layout().out_w].setZero();
  m.params()[m.layout().out_b].setZero();
  const std::vector<TokenId> src{4, 5, 6}, tgt{7, 8};
  const auto s = m.sentence_logprob(src, tgt);
  ASSERT_EQ(s.per_token.size(), 3u);
  for (double lp : s.per_token) EXPECT_NEAR(lp, -std::log(13.0), 1e-12);
}

TEST(Transformer, RejectsOutOfRangeAndOverlength) {
  auto m = Transformer<float>(tiny_config(10, 10, 4));
  const std::vector<TokenId> ok{4}, bad{10}, longer{4, 5, 6, 7, 8};
  EXPECT_THROW(m.sentence_logprob(bad, ok), InvalidArgument);
  EXPECT_THROW(m.sentence_logprob(longer, ok), InvalidArgument);
}

TEST(Transformer, IncrementalStepMatchesFullForward) {
  auto m = Transformer<double>(tiny_config(11, 9));
  const std::vector<TokenId> src{4, 7, 5, 10}, tgt{5, 8, 6};
  const auto full = m.logits(src, tgt);
  const auto enc = m.encode(src);
  auto st = m.start();
  TokenId prev = kBosId;
  for (std::size_t t = 0; t <= tgt.size(); ++t) {
    const auto lp = m.step(enc, st, prev);
    const auto ref = layers::log_softmax<double>(full.row(static_cast<Eigen::Index>(t)));
    for (Eigen::Index v = 0; v < lp.size(); ++v) EXPECT_NEAR(lp(v), ref(v), 1e-12);
    if (t < tgt.size()) prev = tgt[t];
  }
}

// Central differences against the analytic gradient, 64-bit, 50 coordinates.
TEST(Transformer, GradientMatchesFiniteDifferences) {
  auto c = tiny_config(9, 10);
  c.dropout = 0.0;
  auto m = Transformer<double>(c);
  ASSERT_LE(m.param_count(), 10000u);
  const std::vector<TokenId> src{4, 6, 8, 5}, tgt{7, 4, 9};
  const double smoothing = 0.1;
  auto grads = m.params().zeros_like();
  m.accumulate_gradients(src, tgt, 1.0, smoothing, grads, nullptr);

  std::mt19937_64 gen(17);
  const double h = 1e-6;
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    const std::size_t ti = gen() % m.params().size();
    auto& tensor = m.params()[ti];
    const Eigen::Index idx = static_cast<Eigen::Index>(gen() % static_cast<std::uint64_t>(tensor.size()));
    const double orig = tensor.data()[idx];
    tensor.data()[idx] = orig + h;
    const double up = weighted_loss(m, src, tgt, smoothing);
    tensor.data()[idx] = orig - h;
    const double down = weighted_loss(m, src, tgt, smoothing);
    tensor.data()[idx] = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grads[ti].data()[idx];
    const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-7});
    worst = std::max(worst, rel);
    EXPECT_LT(rel, 1e-3) << m.params().names[ti] << "[" << idx << "] analytic=" << analytic << " numeric=" << numeric;
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Training, DuplicateEntryEqualsDoubleWeight) {
  auto m = Transformer<double>(tiny_config(9, 9));
  EncodedPair p{{4, 5, 6}, {7, 8}, 1.0};
  EncodedPair q{{5, 5}, {4}, 1.0};
  EncodedPair p2 = p;
  p2.weight = 2.0;
  const std::vector<EncodedPair> dup{p, p, q}, weighted{p2, q};
  const auto a = loss_and_grads<double>(m, dup, 0.1);
  const auto b = loss_and_grads<double>(m, weighted, 0.1);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  for (std::size_t i = 0; i < a.grads.size(); ++i) EXPECT_TRUE(a.grads[i].isApprox(b.grads[i], 1e-12));
}

TEST(Training, EmptyBatchIsRejected) {
  auto m = Transformer<double>(tiny_config(9, 9));
  EXPECT_THROW(loss_and_grads<double>(m, std::span<const EncodedPair>{}, 0.1), InvalidArgument);
}

TEST(Training, HalfWeightCopiesMatchOneCopy) {
  auto m = Transformer<double>(tiny_config(9, 9));
  std::vector<EncodedPair> one{{{4, 5}, {6, 7}, 1.0}, {{8}, {5}, 1.0}};
  std::vector<EncodedPair> halves;
  for (auto p : one) {
    p.weight = 0.5;
    halves.push_back(p);
    halves.push_back(p);
  }
  const auto a = loss_and_grads<double>(m, one, 0.0);
  const auto b = loss_and_grads<double>(m, halves, 0.0);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  for (std::size_t i = 0; i < a.grads.size(); ++i) EXPECT_TRUE(a.grads[i].isApprox(b.grads[i], 1e-12));
}

// ---- optimizer ------------------------------------------------------------------------

TEST(Adam, SingleStepMatchesHandFormula) {
  ParamSet<double> p;
  p.add("x", 1, 1);
  p[0](0, 0) = 0.5;
  auto g = p.zeros_like();
  g[0](0, 0) = 0.2;
  AdamConfig cfg;
  cfg.peak_lr = 0.01;
  cfg.warmup_steps = 4;
  AdamState<double> opt(cfg, p);
  apply_update(p, g, opt);
  // step 1: lr = 0.01 * min(1/4, sqrt(4)) = 0.0025
  // m = 0.1*0.2 = 0.02, v = 0.02*0.04 = 0.0008
  // m_hat = 0.02/0.1 = 0.2, v_hat = 0.0008/0.02 = 0.04
  const double expect = 0.5 - 0.0025 * 0.2 / (std::sqrt(0.04) + 1e-9);
  EXPECT_NEAR(p[0](0, 0), expect, 1e-15);
  EXPECT_EQ(opt.step, 1);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  auto m = Transformer<float>(tiny_config(9, 9));
  auto params = m.params();
  AdamState<float> opt(AdamConfig{}, params);
  apply_update(params, params.zeros_like(), opt);
  EXPECT_EQ(params.checksum(), m.params().checksum());
  EXPECT_EQ(opt.step, 1);
}

TEST(Adam, ScheduleWarmsUpThenDecays) {
  AdamConfig c;
  c.peak_lr = 1.0;
  c.warmup_steps = 100;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 50), 0.5);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 100), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 400), 0.5);
}

TEST(Adam, ShapeMismatchIsRejected) {
  ParamSet<double> p, g;
  p.add("x", 2, 2);
  g.add("x", 2, 3);
  AdamState<double> opt(AdamConfig{}, p);
  EXPECT_THROW(apply_update(p, g, opt), InvalidArgument);
}

// ---- vocabulary expansion -----------------------------------------------------------------

TEST(Expansion, SameSizeIsUnchanged) {
  auto m = Transformer<float>(tiny_config(9, 11));
  EXPECT_EQ(m.expanded(9, 11).checksum(), m.checksum());
}

TEST(Expansion, OldRowsAndLogitsAreBitIdentical) {
  auto m = Transformer<float>(tiny_config(9, 11));
  auto g = m.expanded(14, 16);
  const auto& L = m.layout();
  EXPECT_EQ(g.params()[L.src_emb].rows(), 14);
  EXPECT_EQ(g.params()[L.out_w].rows(), 16);
  EXPECT_TRUE((g.params()[L.src_emb].topRows(9).array() == m.params()[L.src_emb].array()).all());
  EXPECT_TRUE((g.params()[L.out_w].topRows(11).array() == m.params()[L.out_w].array()).all());

  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto src = random_ids(gen, 9, 1 + gen() % 6);
    const auto tgt = random_ids(gen, 11, 1 + gen() % 6);
    const auto before = m.logits(src, tgt);
    const auto after = g.logits(src, tgt);
    ASSERT_EQ(after.cols(), 16);
    for (Eigen::Index r = 0; r < before.rows(); ++r) {
      for (Eigen::Index v = 0; v < before.cols(); ++v) {
        ASSERT_EQ(before(r, v), after(r, v)) << "row " << r << " token " << v;
      }
    }
  }
}

TEST(Expansion, ShrinkingIsRejected) {
  auto m = Transformer<float>(tiny_config(9, 11));
  EXPECT_THROW(m.expanded(8, 11), InvalidArgument);
}

// ---- checkpoints ---------------------------------------------------------------------------

namespace {

Checkpoint sample_checkpoint() {
  auto m = Transformer<float>(tiny_config(9, 10));
  Vocabulary sv("en"), tv("de");
  for (int i = 0; i < 5; ++i) sv.add_content("s" + std::to_string(i), 10 - i);
  for (int i = 0; i < 6; ++i) tv.add_content("t" + std::to_string(i), 10 - i);
  AdamState<float> opt(AdamConfig{}, m.params());
  auto g = m.params().zeros_like();
  for (auto& t : g.tensors) t.setConstant(0.01f);
  auto p = m.params();
  apply_update(p, g, opt);
  FisherDiag<float> f{m.params().zeros_like(), m.params(), 3};
  for (auto& t : f.fisher.tensors) t.setConstant(0.5f);
  return Checkpoint{m, sv, tv, opt, f, nlohmann::json{{"note", "x"}}};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Checkpoint, RoundtripIsBitExact) {
  TempDir tmp("ckpt");
  const auto ck = sample_checkpoint();
  save_checkpoint(tmp / "a", ck);
  const auto back = load_checkpoint(tmp / "a");
  EXPECT_EQ(back.model.checksum(), ck.model.checksum());
  EXPECT_EQ(back.model.config(), ck.model.config());
  EXPECT_EQ(back.src_vocab, ck.src_vocab);
  EXPECT_EQ(back.tgt_vocab, ck.tgt_vocab);
  ASSERT_TRUE(back.opt && back.fisher);
  EXPECT_EQ(back.opt->step, 1);
  EXPECT_EQ(back.opt->m.checksum(), ck.opt->m.checksum());
  EXPECT_EQ(back.fisher->fisher.checksum(), ck.fisher->fisher.checksum());
  EXPECT_EQ(back.extra, ck.extra);
  save_checkpoint(tmp / "b", back);
  for (const char* f : {"manifest", "params.bin", "opt.bin", "fisher.bin", "src.vocab", "tgt.vocab"}) {
    EXPECT_EQ(slurp(tmp / "a" / f), slurp(tmp / "b" / f)) << f;
  }
}

TEST(Checkpoint, VersionMismatchIsExplicit) {
  TempDir tmp("ckpt_ver");
  save_checkpoint(tmp.path(), sample_checkpoint());
  auto j = nlohmann::json::parse(slurp(tmp / "manifest"));
  j["format_version"] = kCheckpointFormatVersion + 1;
  std::ofstream(tmp / "manifest", std::ios::trunc) << j.dump();
  try {
    load_checkpoint(tmp.path());
    FAIL() << "expected a version error";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(Checkpoint, TruncatedBlobNamesTheFile) {
  TempDir tmp("ckpt_trunc");
  save_checkpoint(tmp.path(), sample_checkpoint());
  const auto blob = slurp(tmp / "params.bin");
  std::ofstream(tmp / "params.bin", std::ios::binary | std::ios::trunc) << blob.substr(0, blob.size() / 2);
  try {
    load_checkpoint(tmp.path());
    FAIL() << "expected a checksum error";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("params.bin"), std::string::npos);
  }
}
