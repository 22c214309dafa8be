#include <cmath>
#include <map>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "lnmt/lifelong/distill.hpp"
#include "lnmt/lifelong/ewc.hpp"
#include "lnmt/lifelong/learner.hpp"
#include "lnmt/synth/synthetic.hpp"
#include "test_util.hpp"

using namespace lnmt;
using lnmt::testing::random_ids;
using lnmt::testing::tiny_config;

namespace {

constexpr std::size_t kPairs = 100;

synth::SyntheticLanguage lang(const std::string& id) {
  static const std::map<std::string, std::pair<std::uint64_t, int>> table{
      {"en", {1, 0}}, {"de", {2, 3}}, {"fr", {3, 2}}, {"es", {4, 0}}};
  const auto& [seed, period] = table.at(id);
  return synth::make_language(id, 20, id == "en", period, seed);
}

TaskData make_task(const std::string& src, const std::string& tgt, std::uint64_t seed) {
  synth::SyntheticTaskSpec spec;
  spec.task_id = src + "-" + tgt;
  spec.src = lang(src);
  spec.tgt = lang(tgt);
  spec.corpus = {20, 1.0, 2, 6};
  spec.sizes = {kPairs, 10, 10};
  spec.seed = seed;
  const auto b = synth::gen_base_splits(spec);
  return {spec.task_id, src, tgt, synth::realize_pairs(spec, b.train), synth::realize_pairs(spec, b.dev),
          synth::realize_pairs(spec, b.test)};
}

LearnerConfig tiny_learner() {
  LearnerConfig c;
  c.model = tiny_config(1, 1, 12);
  c.train.epochs = 1;
  c.train.batch_tokens = 200;
  c.train.adam.warmup_steps = 5;
  c.distill_decode.mode = DecodeMode::beam;
  c.distill_decode.beam_size = 2;
  c.distill_decode.max_len = 10;
  c.dev_decode.max_len = 10;
  c.seed = 3;
  return c;
}

LifelongState learn_all(Scenario sc, Method m, const std::vector<TaskData>& tasks, const LearnerConfig& cfg) {
  auto st = make_state(sc, m);
  for (const auto& t : tasks) st = learn_task(std::move(st), t, cfg).state;
  return st;
}

std::size_t produced(const DistilledCorpus& dc) { return dc.corpus.size() + dc.dropped_empty; }

}  // namespace

// ---- distilled corpus construction -----------------------------------------------------

TEST(Distill, OneToManyOneCorpusPerLearnedLanguage) {
  const auto cfg = tiny_learner();
  const auto st = learn_all(Scenario::one_to_many, Method::multi_distill,
                            {make_task("en", "de", 1), make_task("en", "fr", 2)}, cfg);
  const auto es = make_task("en", "es", 3);
  const auto set = distill_for_task(st, es, cfg);
  ASSERT_TRUE(set);
  ASSERT_EQ(set->forward.size(), 2u);
  EXPECT_EQ(set->forward[0].lang, "de");
  EXPECT_EQ(set->forward[1].lang, "fr");
  for (const auto& dc : set->forward) {
    EXPECT_EQ(produced(dc), kPairs);
    EXPECT_EQ(dc.corpus.weight, 1.0);
    EXPECT_EQ(dc.corpus.tgt_lang, dc.lang);
    for (const auto& p : dc.corpus.pairs) EXPECT_EQ(p.src.indicator, indicator_token("en", dc.lang));
  }
}

TEST(Distill, KBestWeightsEachHypothesis) {
  auto cfg = tiny_learner();
  const auto st = learn_all(Scenario::one_to_many, Method::multi_distill,
                            {make_task("en", "de", 1), make_task("en", "fr", 2)}, cfg);
  cfg.distill_decode.mode = DecodeMode::kbest;
  cfg.distill_decode.beam_size = 4;
  cfg.distill_decode.k_best = 4;
  const auto set = distill_for_task(st, make_task("en", "es", 3), cfg);
  ASSERT_TRUE(set);
  for (const auto& dc : set->forward) {
    EXPECT_EQ(produced(dc), 4 * kPairs);
    EXPECT_DOUBLE_EQ(dc.corpus.weight, 0.25);
  }
}

TEST(Distill, TeacherIsNotModified) {
  const auto cfg = tiny_learner();
  auto st = learn_all(Scenario::one_to_many, Method::multi_distill, {make_task("en", "de", 1)}, cfg);
  const auto before = st.forward->model.checksum();
  const auto res = learn_task(st, make_task("en", "fr", 2), cfg);
  EXPECT_EQ(res.teacher_checksum_before, before);
  EXPECT_EQ(res.teacher_checksum_after, before);
  EXPECT_EQ(st.forward->model.checksum(), before);
}

TEST(Distill, NothingToDistillAtFirstStage) {
  const auto st = make_state(Scenario::one_to_many, Method::multi_distill);
  EXPECT_FALSE(distill_for_task(st, make_task("en", "de", 1), tiny_learner()));
  const auto ft = make_state(Scenario::one_to_many, Method::finetune);
  EXPECT_FALSE(distill_for_task(ft, make_task("en", "de", 1), tiny_learner()));
}

TEST(Distill, DirectInputsAreAlmostAllUnknown) {
  const auto cfg = tiny_learner();
  const auto st = learn_all(Scenario::many_to_one, Method::direct_distill, {make_task("de", "en", 1)}, cfg);
  const auto set = distill_for_task(st, make_task("fr", "en", 2), cfg);
  ASSERT_TRUE(set);
  ASSERT_EQ(set->forward.size(), 1u);
  EXPECT_GE(set->forward[0].input_unk_rate, 0.95);
  EXPECT_EQ(produced(set->forward[0]), kPairs);
}

TEST(Distill, PseudoInputsAreKnownOnSharedRanks) {
  const auto cfg = tiny_learner();
  const auto st = learn_all(Scenario::many_to_one, Method::pseudo_distill,
                            {make_task("de", "en", 1), make_task("fr", "en", 2)}, cfg);
  const auto set = distill_for_task(st, make_task("es", "en", 3), cfg);
  ASSERT_TRUE(set);
  ASSERT_EQ(set->forward.size(), 2u);
  for (const auto& dc : set->forward) {
    EXPECT_EQ(dc.input_unk_rate_shared, 0.0) << dc.lang;
    EXPECT_EQ(dc.corpus.src_lang, dc.lang);
    for (const auto& p : dc.corpus.pairs) {
      EXPECT_FALSE(p.src.indicator);
      for (const auto& t : p.src.tokens) EXPECT_EQ(t.rfind(dc.lang + "_", 0), 0u) << t;
    }
  }
  EXPECT_EQ(set->mappings.size(), 2u);
}

TEST(Distill, IdentityMappingIsVerbatim) {
  const auto task = make_task("de", "en", 1);
  const auto v = task_lang_vocab(Scenario::many_to_one, task, 1000);
  const auto m = build_rank_mapping(v, v);
  for (const auto& p : task.train.pairs) EXPECT_EQ(apply_mapping(p.src, m), p.src);
}

TEST(Distill, ReverseKeepsAuthenticTargets) {
  const auto cfg = tiny_learner();
  const auto st = learn_all(Scenario::many_to_one, Method::reverse_distill,
                            {make_task("de", "en", 1), make_task("fr", "en", 2)}, cfg);
  ASSERT_TRUE(st.reverse);
  EXPECT_TRUE(st.mirror_invariant());
  const auto es = make_task("es", "en", 3);
  const auto set = distill_for_task(st, es, cfg);
  ASSERT_TRUE(set);
  ASSERT_EQ(set->forward.size(), 2u);
  ASSERT_EQ(set->reverse.size(), 2u);
  std::set<std::string> authentic;
  for (const auto& p : es.train.pairs) authentic.insert(p.tgt.str());
  std::size_t fwd = 0, rev = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& dc = set->forward[i];
    EXPECT_EQ(produced(dc), kPairs);
    fwd += dc.corpus.size();
    rev += set->reverse[i].size();
    for (const auto& p : dc.corpus.pairs) EXPECT_TRUE(authentic.count(p.tgt.str()));
    for (const auto& p : set->reverse[i].pairs) EXPECT_EQ(p.src.indicator, indicator_token("en", dc.lang));
  }
  EXPECT_EQ(fwd, rev);
}

TEST(Distill, UnknownIndicatorIsRejected) {
  const auto cfg = tiny_learner();
  const auto st = learn_all(Scenario::one_to_many, Method::multi_distill, {make_task("en", "de", 1)}, cfg);
  EXPECT_THROW(build_one2many_distill_set(st.forward->teacher(), make_task("en", "fr", 2).train, {"es"},
                                          cfg.distill_decode),
               InvalidArgument);
}

TEST(Distill, PseudoNeedsAMapping) {
  const auto cfg = tiny_learner();
  const auto st = learn_all(Scenario::many_to_one, Method::pseudo_distill, {make_task("de", "en", 1)}, cfg);
  EXPECT_THROW(build_many2one_distill_set(st.forward->teacher(), make_task("fr", "en", 2).train, {"de"},
                                          Many2OneMode::pseudo, {}, cfg.distill_decode),
               InvalidArgument);
}

TEST(Distill, SaveLoadRoundtrip) {
  lnmt::testing::TempDir tmp("distill");
  const auto cfg = tiny_learner();
  const auto st = learn_all(Scenario::many_to_one, Method::reverse_distill, {make_task("de", "en", 1)}, cfg);
  const auto set = *distill_for_task(st, make_task("fr", "en", 2), cfg);
  save_distilled_set(tmp.path(), set);
  const auto back = load_distilled_set(tmp.path());
  EXPECT_EQ(back.teacher_checksum, set.teacher_checksum);
  ASSERT_EQ(back.forward.size(), 1u);
  EXPECT_EQ(back.forward[0].corpus.pairs, set.forward[0].corpus.pairs);
  EXPECT_EQ(back.reverse[0].pairs, set.reverse[0].pairs);
}

// ---- scenario rules -------------------------------------------------------------------------

TEST(Learner, MethodScenarioCompatibility) {
  EXPECT_TRUE(compatible(Scenario::one_to_many, Method::multi_distill));
  EXPECT_FALSE(compatible(Scenario::many_to_one, Method::multi_distill));
  for (auto m : {Method::direct_distill, Method::pseudo_distill, Method::reverse_distill}) {
    EXPECT_TRUE(compatible(Scenario::many_to_one, m));
    EXPECT_FALSE(compatible(Scenario::one_to_many, m));
  }
  for (auto m : {Method::finetune, Method::joint, Method::ewc}) {
    EXPECT_TRUE(compatible(Scenario::one_to_many, m));
    EXPECT_TRUE(compatible(Scenario::many_to_one, m));
  }
  EXPECT_THROW(make_state(Scenario::one_to_many, Method::pseudo_distill), ConfigError);
}

TEST(Learner, RejectsForeignPivotAndRepeatedLanguage) {
  const auto cfg = tiny_learner();
  auto st = learn_all(Scenario::one_to_many, Method::finetune, {make_task("en", "de", 1)}, cfg);
  EXPECT_THROW(learn_task(st, make_task("fr", "de", 2), cfg), ConfigError);
  EXPECT_THROW(learn_task(st, make_task("en", "de", 3), cfg), ConfigError);
}

TEST(Learner, MirrorInvariantDetectsMissingLanguage) {
  const auto cfg = tiny_learner();
  auto st = learn_all(Scenario::many_to_one, Method::reverse_distill, {make_task("de", "en", 1)}, cfg);
  EXPECT_TRUE(st.mirror_invariant());
  st.learned_langs.push_back("fr");
  EXPECT_FALSE(st.mirror_invariant());
}

TEST(Learner, VocabularyOnlyGrows) {
  const auto cfg = tiny_learner();
  auto st = learn_all(Scenario::one_to_many, Method::finetune, {make_task("en", "de", 1)}, cfg);
  const auto old_tgt = st.forward->tgt_vocab;
  st = learn_task(std::move(st), make_task("en", "fr", 2), cfg).state;
  EXPECT_TRUE(is_extension_of(st.forward->tgt_vocab, old_tgt));
  EXPECT_GT(st.forward->tgt_vocab.size(), old_tgt.size());
}

// ---- EWC ------------------------------------------------------------------------------------

namespace {

EncodedCorpus random_corpus(std::mt19937_64& gen, int vocab, std::size_t n) {
  EncodedCorpus c;
  for (std::size_t i = 0; i < n; ++i) c.pairs.push_back({random_ids(gen, vocab, 2 + gen() % 3), random_ids(gen, vocab, 2 + gen() % 3), 1.0});
  return c;
}

}  // namespace

TEST(Ewc, PenaltyVanishesAtAnchor) {
  std::mt19937_64 gen(1);
  Transformer<double> m(tiny_config(12, 12));
  const auto f = compute_fisher(m, random_corpus(gen, 12, 8), 100);
  EXPECT_EQ(ewc_penalty(m.params(), f, 100.0), 0.0);
  auto g = m.params().zeros_like();
  add_ewc_gradient(m.params(), f, 100.0, g);
  EXPECT_EQ(g.squared_norm(), 0.0);
}

TEST(Ewc, ZeroLambdaMatchesPlainLoss) {
  std::mt19937_64 gen(2);
  Transformer<double> m(tiny_config(12, 12));
  const auto data = random_corpus(gen, 12, 6);
  auto f = compute_fisher(m, data, 100);
  for (auto& t : f.anchor.tensors) t.array() += 0.3;
  const auto plain = loss_and_grads<double>(m, data.pairs, 0.1);
  const auto zero = loss_and_grads<double>(m, data.pairs, 0.1, nullptr, EwcPenalty<double>{&f, 0.0});
  EXPECT_EQ(plain.loss, zero.loss);
  for (std::size_t i = 0; i < plain.grads.size(); ++i) EXPECT_TRUE(plain.grads[i] == zero.grads[i]);
}

TEST(Ewc, ZeroLambdaTrainsLikeFinetune) {
  auto cfg = tiny_learner();
  cfg.ewc.lambda = 0.0;
  const std::vector<TaskData> tasks{make_task("en", "de", 1), make_task("en", "fr", 2)};
  const auto ft = learn_all(Scenario::one_to_many, Method::finetune, tasks, cfg);
  const auto ewc = learn_all(Scenario::one_to_many, Method::ewc, tasks, cfg);
  EXPECT_EQ(ft.forward->model.checksum(), ewc.forward->model.checksum());
}

TEST(Ewc, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(3);
  Transformer<double> m(tiny_config(10, 10));
  const auto data = random_corpus(gen, 10, 4);
  auto f = compute_fisher(m, data, 100);
  // Move away from the anchor so the penalty term is active.
  std::normal_distribution<double> nd(0.0, 0.05);
  for (auto& t : m.params().tensors) {
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] += nd(gen);
  }
  const EwcPenalty<double> pen{&f, 50.0};
  const auto lg = loss_and_grads<double>(m, data.pairs, 0.0, nullptr, pen);
  const double h = 1e-6;
  int checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const auto ti = gen() % m.params().size();
    auto& t = m.params()[ti];
    const auto k = static_cast<Eigen::Index>(gen() % static_cast<std::uint64_t>(t.size()));
    const double orig = t.data()[k];
    t.data()[k] = orig + h;
    const double up = loss_and_grads<double>(m, data.pairs, 0.0, nullptr, pen).loss;
    t.data()[k] = orig - h;
    const double down = loss_and_grads<double>(m, data.pairs, 0.0, nullptr, pen).loss;
    t.data()[k] = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = lg.grads[ti].data()[k];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-7});
    EXPECT_LT(std::abs(numeric - analytic) / denom, 1e-4) << m.params().names[ti] << "[" << k << "]";
    ++checked;
  }
  EXPECT_EQ(checked, 40);
}

TEST(Fisher, RepeatedPairIsSquaredGradient) {
  std::mt19937_64 gen(4);
  Transformer<double> m(tiny_config(10, 10));
  auto one = random_corpus(gen, 10, 1);
  EncodedCorpus three{{one.pairs[0], one.pairs[0], one.pairs[0]}};
  auto g = m.params().zeros_like();
  m.accumulate_gradients(one.pairs[0].src, one.pairs[0].tgt, 1.0, 0.0, g, nullptr);
  const auto f = compute_fisher(m, three, 100);
  EXPECT_EQ(f.sample_count, 3u);
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_LT((f.fisher[i].array() - g[i].array().square()).abs().maxCoeff(), 1e-12) << f.fisher.names[i];
  }
}

TEST(Fisher, SampleCapUsesLeadingPairs) {
  std::mt19937_64 gen(5);
  Transformer<double> m(tiny_config(10, 10));
  const auto data = random_corpus(gen, 10, 5);
  EncodedCorpus head{{data.pairs[0], data.pairs[1]}};
  const auto capped = compute_fisher(m, data, 2);
  const auto direct = compute_fisher(m, head, 100);
  EXPECT_EQ(capped.fisher.checksum(), direct.fisher.checksum());
  EXPECT_THROW(compute_fisher(m, EncodedCorpus{}, 10), InvalidArgument);
}

TEST(Fisher, AccumulationSumsAndMovesAnchor) {
  std::mt19937_64 gen(6);
  Transformer<double> m(tiny_config(10, 10));
  const auto a = compute_fisher(m, random_corpus(gen, 10, 3), 100);
  auto big = m.expanded(12, 12);
  for (auto& t : big.params().tensors) t.array() += 0.1;
  const auto b = compute_fisher(big, random_corpus(gen, 12, 4), 100);
  const auto sum = accumulate_fisher(std::optional{a}, b);
  EXPECT_EQ(sum.sample_count, 7u);
  EXPECT_EQ(sum.anchor.checksum(), big.params().checksum());
  const auto grown = a.expanded_to(big.params());
  for (std::size_t i = 0; i < sum.fisher.size(); ++i) {
    EXPECT_LT((sum.fisher[i] - grown.fisher[i] - b.fisher[i]).cwiseAbs().maxCoeff(), 1e-15);
  }
}
