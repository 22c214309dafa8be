// Acceptance run: prints one PASS/FAIL line per criterion.
//
// Criteria 1-6 are property checks that run in seconds. Criteria 7-12 train
// the pinned experiments below from scratch (about half an hour on one core)
// and read their reports.
//
// Usage: lnmt_acceptance [--out DIR] [--reuse]
//   --out    run directory (default: $LNMT_ACCEPTANCE_DIR, else the build tree)
//   --reuse  keep completed stages from an earlier invocation
//
// Exit status is 0 when every criterion passes or fails only where listed in
// kKnownShortfalls, 1 on any other failure, 3 when an experiment crashes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lnmt/corpus/rank_mapping.hpp"
#include "lnmt/decode/decoder.hpp"
#include "lnmt/eval/bleu.hpp"
#include "lnmt/lifelong/ewc.hpp"
#include "lnmt/lifelong/learner.hpp"
#include "lnmt/model/checkpoint.hpp"
#include "lnmt/pipeline/config.hpp"
#include "lnmt/pipeline/run.hpp"
#include "lnmt/synth/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lnmt;

namespace {

// ---- pinned tolerances ----------------------------------------------------------------------

constexpr double kGradRelTol = 1e-3;
constexpr int kGradCoords = 50;
constexpr double kBleuHandTol = 1e-9;
constexpr double kDirectUnkMin = 0.95;
constexpr double kFinetuneRetainMax = 0.30;
constexpr double kDistillOverFinetune = 20.0;
constexpr double kNearJoint = 5.0;
constexpr double kKBestSlack = 0.5;
constexpr int kBeamGreedySeeds[] = {7, 8, 9};

// Criteria that are known not to hold for this implementation on the pinned
// setting. They still print FAIL; they just do not fail the process. Each
// entry has a written analysis alongside the project notes.
const std::set<int> kKnownShortfalls = {11};

struct Outcome {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Outcome> g_outcomes;

void record(int id, const std::string& name, bool pass, const std::string& detail) {
  g_outcomes.push_back({id, name, pass, detail});
  std::printf("C%02d %s  %s: %s\n", id, pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::string fmt(const char* f, double a, double b, double c) {
  char buf[200];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

void note(const std::string& s) {
  std::cerr << s << '\n';
  std::cerr.flush();
}

ModelConfig small_model(int src, int tgt, int max_len) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 32;
  c.dropout = 0.0;
  c.max_len = max_len;
  c.src_vocab_size = src;
  c.tgt_vocab_size = tgt;
  c.seed = 29;
  return c;
}

std::vector<TokenId> content_ids(std::mt19937_64& gen, int vocab, std::size_t len) {
  std::uniform_int_distribution<TokenId> d(static_cast<TokenId>(kNumFixedReserved), vocab - 1);
  std::vector<TokenId> out(len);
  for (auto& x : out) x = d(gen);
  return out;
}

// ---- 1. gradient check ----------------------------------------------------------------------

void criterion_gradients() {
  Transformer<double> m(small_model(14, 15, 10));
  const std::vector<TokenId> src{4, 9, 13, 5, 6}, tgt{7, 14, 4, 8};
  const double smoothing = 0.1;
  auto grads = m.params().zeros_like();
  m.accumulate_gradients(src, tgt, 1.0, smoothing, grads, nullptr);
  auto loss = [&] {
    auto scratch = m.params().zeros_like();
    return m.accumulate_gradients(src, tgt, 1.0, smoothing, scratch, nullptr).weighted_loss;
  };
  std::mt19937_64 gen(2024);
  const double h = 1e-6;
  double worst = 0.0;
  for (int k = 0; k < kGradCoords; ++k) {
    const std::size_t ti = gen() % m.params().size();
    auto& t = m.params()[ti];
    const auto idx = static_cast<Eigen::Index>(gen() % static_cast<std::uint64_t>(t.size()));
    const double orig = t.data()[idx];
    t.data()[idx] = orig + h;
    const double up = loss();
    t.data()[idx] = orig - h;
    const double down = loss();
    t.data()[idx] = orig;
    const double num = (up - down) / (2 * h);
    const double ana = grads[ti].data()[idx];
    worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-7}));
  }
  record(1, "gradient check", worst < kGradRelTol,
         fmt("max relative error %.3e over %.0f coordinates (tol %.0e, double)", worst, kGradCoords, kGradRelTol));
}

// ---- 2. decoding oracle ---------------------------------------------------------------------

constexpr int kToyContent = 3;
constexpr int kToyVocab = static_cast<int>(kNumFixedReserved) + kToyContent;
constexpr int kToyLen = 3;

std::vector<Hypothesis> enumerate_outputs(const Transformer<double>& m, const std::vector<TokenId>& src, double alpha) {
  std::vector<TokenId> emit{kUnkId};
  for (int v = static_cast<int>(kNumFixedReserved); v < kToyVocab; ++v) emit.push_back(v);
  std::vector<Hypothesis> out;
  std::vector<std::vector<TokenId>> prefixes{{}};
  for (int len = 0; len <= kToyLen; ++len) {
    std::vector<std::vector<TokenId>> next;
    for (const auto& p : prefixes) {
      const auto s = m.sentence_logprob(src, p);
      Hypothesis h;
      if (len < kToyLen) {
        h.tokens = p;
        h.tokens.push_back(kEosId);
        h.logprob = s.total;
        for (auto v : emit) {
          next.push_back(p);
          next.back().push_back(v);
        }
      } else {
        h.tokens = p;
        h.logprob = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) h.logprob += s.per_token[i];
      }
      h.score = h.logprob / length_penalty(h.tokens.size(), alpha);
      out.push_back(h);
    }
    prefixes = std::move(next);
  }
  std::stable_sort(out.begin(), out.end(), [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; });
  return out;
}

void criterion_decoding() {
  std::mt19937_64 gen(31);
  int exhaustive_ok = 0, exhaustive_n = 0, kbest_ok = 0, kbest_n = 0;
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    auto c = small_model(kToyVocab, kToyVocab, kToyLen + 2);
    c.seed = seed;
    Transformer<double> m(c);
    m.params()[m.layout().out_w] *= 6.0;
    for (double alpha : {0.0, 0.6}) {
      const auto src = content_ids(gen, kToyVocab, 1 + gen() % 3);
      const auto all = enumerate_outputs(m, src, alpha);
      DecodeConfig d;
      d.mode = DecodeMode::beam;
      d.beam_size = 125;
      d.length_penalty = alpha;
      d.max_len = kToyLen;
      const auto best = beam_decode(m, src, d);
      ++exhaustive_n;
      exhaustive_ok += best.tokens == all.front().tokens && std::abs(best.score - all.front().score) < 1e-9;
      d.mode = DecodeMode::kbest;
      d.k_best = 4;
      const auto kb = kbest_decode(m, src, d);
      bool same = kb.hypotheses.size() == 4;
      for (std::size_t i = 0; same && i < 4; ++i) same = kb.hypotheses[i].tokens == all[i].tokens;
      ++kbest_n;
      kbest_ok += same;
    }
  }
  Transformer<float> lm(small_model(20, 20, 14));
  DecodeConfig g;
  g.mode = DecodeMode::greedy;
  g.max_len = 12;
  DecodeConfig b1 = g;
  b1.mode = DecodeMode::beam;
  b1.beam_size = 1;
  int greedy_ok = 0;
  const int greedy_n = 100;
  for (int i = 0; i < greedy_n; ++i) {
    const auto src = content_ids(gen, 20, 1 + gen() % 10);
    greedy_ok += greedy_decode(lm, src, g).tokens == beam_decode(lm, src, b1).tokens;
  }
  const bool pass = exhaustive_ok == exhaustive_n && kbest_ok == kbest_n && greedy_ok == greedy_n;
  record(2, "decode oracle", pass,
         "exhaustive beam = brute force " + std::to_string(exhaustive_ok) + "/" + std::to_string(exhaustive_n) +
             ", beam1 = greedy " + std::to_string(greedy_ok) + "/" + std::to_string(greedy_n) +
             ", 4-best = enumeration top-4 " + std::to_string(kbest_ok) + "/" + std::to_string(kbest_n));
}

// ---- 3. BLEU --------------------------------------------------------------------------------

void criterion_bleu() {
  using Corpus = std::vector<std::vector<std::string>>;
  auto toks = [](const std::string& s) { return parse_sentence(s).tokens; };
  std::mt19937_64 gen(5);
  Corpus c, r;
  for (int i = 0; i < 60; ++i) {
    std::vector<std::string> a, b;
    for (std::size_t j = 0; j < 2 + gen() % 9; ++j) a.push_back("w" + std::to_string(gen() % 7));
    for (std::size_t j = 0; j < 2 + gen() % 9; ++j) b.push_back("w" + std::to_string(gen() % 7));
    c.push_back(a);
    r.push_back(b);
  }
  const double self = corpus_bleu(c, c).bleu;
  const double hand = corpus_bleu(Corpus{toks("the cat sat")}, Corpus{toks("the cat sat down")}).bleu;
  const double hand_expected = 100.0 * std::exp(1.0 - 4.0 / 3.0);
  const double base = corpus_bleu(c, r).bleu;
  bool invariant = true;
  std::vector<std::size_t> idx(c.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (int t = 0; t < 10; ++t) {
    std::shuffle(idx.begin(), idx.end(), gen);
    Corpus c2, r2;
    for (auto i : idx) {
      c2.push_back(c[i]);
      r2.push_back(r[i]);
    }
    invariant = invariant && corpus_bleu(c2, r2).bleu == base;
  }
  const bool pass = self == 100.0 && std::abs(hand - hand_expected) < kBleuHandTol && invariant;
  record(3, "BLEU", pass,
         fmt("BLEU(c,c)=%.12g, hand case |%.12g - %.12g|", self, hand, hand_expected) + " < 1e-9, " +
             (invariant ? "permutation invariant over 10 shuffles" : "NOT permutation invariant"));
}

// ---- 4. vocabulary algebra, expansion, checkpoints -------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void criterion_vocab(const fs::path& scratch) {
  std::vector<std::string> problems;
  Vocabulary a("xx"), b("yy");
  for (int i = 0; i < 12; ++i) a.add_content("a" + std::to_string(i), 100 - i);
  b.add_content("a3", 80);
  for (int i = 0; i < 9; ++i) b.add_content("b" + std::to_string(i), 50 - i);
  const auto u = union_vocab(a, b);
  if (!is_extension_of(u, a)) problems.push_back("union does not extend its first argument");
  for (const auto& e : b.entries()) {
    if (!u.find(e.token)) problems.push_back("union lost a token");
  }
  if (u.size() != a.size() + 9) problems.push_back("union size");
  if (!(union_vocab(u, b) == u)) problems.push_back("union is not idempotent");

  const auto m = build_rank_mapping(b, a);
  std::set<std::string> images;
  for (std::size_t r = 0; r < m.shared_size(); ++r) {
    const auto from = b.token_at_rank(r);
    const auto to = m.map(from);
    if (to != a.token_at_rank(r)) problems.push_back("rank mapping is not rank to rank");
    images.insert(to);
  }
  if (images.size() != m.shared_size()) problems.push_back("rank mapping is not injective");

  Transformer<float> small(small_model(12, 13, 10));
  const auto grown = small.expanded(20, 22);
  std::mt19937_64 gen(8);
  bool logits_equal = true;
  for (int t = 0; t < 30; ++t) {
    const auto src = content_ids(gen, 12, 1 + gen() % 7);
    const auto tgt = content_ids(gen, 13, 1 + gen() % 7);
    const auto x = small.logits(src, tgt);
    const auto y = grown.logits(src, tgt);
    logits_equal = logits_equal && (x.array() == y.leftCols(x.cols()).array()).all();
  }
  if (!logits_equal) problems.push_back("expanded logits differ");

  AdamState<float> opt(AdamConfig{}, grown.params());
  FisherDiag<float> f{grown.params().zeros_like(), grown.params(), 4};
  for (auto& t : f.fisher.tensors) t.setConstant(0.25f);
  Vocabulary sv("en"), tv("de");
  for (int i = 0; i < 16; ++i) sv.add_content("en_" + std::to_string(i), 30 - i);
  for (int i = 0; i < 18; ++i) tv.add_content("de_" + std::to_string(i), 30 - i);
  const Checkpoint ck{grown, sv, tv, opt, f, json{{"k", 1}}};
  fs::remove_all(scratch);
  save_checkpoint(scratch / "a", ck);
  const auto back = load_checkpoint(scratch / "a");
  save_checkpoint(scratch / "b", back);
  bool files_equal = back.model.checksum() == grown.checksum();
  for (const char* name : {"manifest", "params.bin", "opt.bin", "fisher.bin", "src.vocab", "tgt.vocab"}) {
    files_equal = files_equal && slurp(scratch / "a" / name) == slurp(scratch / "b" / name);
  }
  if (!files_equal) problems.push_back("checkpoint roundtrip is not bit-exact");
  fs::remove_all(scratch);
  std::string detail = "union/extension, rank mapping, expanded logits over 30 inputs, checkpoint roundtrip";
  for (const auto& p : problems) detail += "; " + p;
  record(4, "vocabulary, expansion, checkpoint", problems.empty(), detail);
}

// ---- 6. EWC ---------------------------------------------------------------------------------

TaskData mini_task(const std::string& tgt, std::uint64_t seed) {
  static const std::map<std::string, int> period{{"de", 3}, {"fr", 2}};
  synth::SyntheticTaskSpec spec;
  spec.task_id = "en-" + tgt;
  spec.src = synth::make_language("en", 20, true, 0, 1);
  spec.tgt = synth::make_language(tgt, 20, true, period.at(tgt), 2);
  spec.corpus = {20, 1.0, 2, 6};
  spec.sizes = {120, 10, 10};
  spec.seed = seed;
  const auto b = synth::gen_base_splits(spec);
  return {spec.task_id, "en", tgt, synth::realize_pairs(spec, b.train), synth::realize_pairs(spec, b.dev),
          synth::realize_pairs(spec, b.test)};
}

void criterion_ewc() {
  std::vector<std::string> parts;
  bool pass = true;

  Transformer<double> m(small_model(14, 14, 10));
  std::mt19937_64 gen(12);
  EncodedCorpus data;
  for (int i = 0; i < 6; ++i) data.pairs.push_back({content_ids(gen, 14, 3), content_ids(gen, 14, 2 + gen() % 3), 1.0});
  auto fisher = compute_fisher(m, data, 100);
  const double at_anchor = ewc_penalty(m.params(), fisher, 100.0);
  pass = pass && at_anchor == 0.0;
  parts.push_back(fmt("penalty at anchor %.3g", at_anchor));

  LearnerConfig cfg;
  cfg.model = small_model(1, 1, 10);
  cfg.train.epochs = 2;
  cfg.train.batch_tokens = 200;
  cfg.train.adam.warmup_steps = 5;
  cfg.ewc.lambda = 0.0;
  cfg.dev_decode.max_len = 8;
  auto run = [&](Method method) {
    auto st = make_state(Scenario::one_to_many, method);
    for (const auto& t : {mini_task("de", 1), mini_task("fr", 2)}) st = learn_task(std::move(st), t, cfg).state;
    return st.forward->model.checksum();
  };
  const bool same = run(Method::finetune) == run(Method::ewc);
  pass = pass && same;
  parts.push_back(same ? "lambda=0 model equals finetune bit for bit" : "lambda=0 model DIFFERS from finetune");

  std::normal_distribution<double> nd(0.0, 0.05);
  for (auto& t : m.params().tensors) {
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] += nd(gen);
  }
  const EwcPenalty<double> pen{&fisher, 50.0};
  const auto lg = loss_and_grads<double>(m, data.pairs, 0.0, nullptr, pen);
  double worst = 0.0;
  const double h = 1e-6;
  for (int k = 0; k < 30; ++k) {
    const auto ti = gen() % m.params().size();
    auto& t = m.params()[ti];
    const auto idx = static_cast<Eigen::Index>(gen() % static_cast<std::uint64_t>(t.size()));
    const double orig = t.data()[idx];
    t.data()[idx] = orig + h;
    const double up = loss_and_grads<double>(m, data.pairs, 0.0, nullptr, pen).loss;
    t.data()[idx] = orig - h;
    const double down = loss_and_grads<double>(m, data.pairs, 0.0, nullptr, pen).loss;
    t.data()[idx] = orig;
    const double num = (up - down) / (2 * h);
    const double ana = lg.grads[ti].data()[idx];
    worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-7}));
  }
  pass = pass && worst < kGradRelTol;
  parts.push_back(fmt("penalised gradient max relative error %.3e (tol %.0e)", worst, kGradRelTol));
  std::string detail;
  for (const auto& p : parts) detail += (detail.empty() ? "" : ", ") + p;
  record(6, "EWC", pass, detail);
}

// ---- experiments ----------------------------------------------------------------------------

json base_experiment(const std::string& scenario) {
  const bool o2m = scenario == "one_to_many";
  json tasks = json::array();
  int seed = 11;
  for (const std::string l : {"de", "fr", "es"}) {
    tasks.push_back({{"id", o2m ? "en-" + l : l + "-en"}, {"src", o2m ? "en" : l}, {"tgt", o2m ? l : "en"}, {"seed", seed++}});
  }
  return json{
      {"name", "acceptance_" + scenario},
      {"scenario", scenario},
      {"seed", 7},
      {"languages", {{"en", json::object()}, {"de", {{"reorder_period", 3}}}, {"fr", {{"reorder_period", 2}}}, {"es", json::object()}}},
      {"tasks", tasks},
      {"synthetic", {{"vocab_size", 40}, {"zipf_s", 1.0}, {"min_len", 3}, {"max_len", 10},
                     {"sizes", {{"train", 2000}, {"dev", 200}, {"test", 200}}}}},
      {"model", {{"d_model", 32}, {"n_heads", 4}, {"n_enc_layers", 2}, {"n_dec_layers", 2}, {"d_ff", 64},
                 {"dropout", 0.0}, {"max_len", 16}}},
      {"train", {{"epochs", 12}, {"batch_tokens", 400}, {"adam", {{"peak_lr", 0.005}, {"warmup_steps", 100}}}}},
      {"decode", {{"eval", {{"mode", "beam"}, {"beam_size", 4}}}, {"distill", {{"mode", "beam"}, {"beam_size", 4}}}}}};
}

json beam_method() { return {{"method", "multi_distill"}, {"label", "multi_distill_beam"}, {"decode", {{"mode", "beam"}, {"beam_size", 4}}}}; }
json greedy_method() { return {{"method", "multi_distill"}, {"label", "multi_distill_greedy"}, {"decode", {{"mode", "greedy"}}}}; }
json kbest_method() {
  return {{"method", "multi_distill"}, {"label", "multi_distill_4best"}, {"decode", {{"mode", "kbest"}, {"beam_size", 4}, {"k_best", 4}}}};
}

json one_to_many_main(int seed) {
  auto j = base_experiment("one_to_many");
  j["seed"] = seed;
  j["methods"] = {"finetune", beam_method(), greedy_method(), kbest_method(), "joint"};
  return j;
}

json one_to_many_decode_pair(int seed) {
  auto j = base_experiment("one_to_many");
  j["seed"] = seed;
  j["methods"] = {beam_method(), greedy_method()};
  j["single_baseline"] = false;
  return j;
}

json many_to_one_main() {
  auto j = base_experiment("many_to_one");
  j["methods"] = {"direct_distill", "pseudo_distill", "reverse_distill", "joint"};
  j["single_baseline"] = false;
  return j;
}

struct Experiment {
  CFReport report;
  fs::path dir;
  double minutes = 0.0;
};

Experiment run(const std::string& name, json j, const fs::path& root, bool reuse) {
  const auto dir = root / name;
  j["output_dir"] = dir.string();
  const auto cfg = pipeline::parse_config(j);
  if (!reuse) fs::remove_all(dir);
  pipeline::RunOptions opts;
  opts.resume = reuse;
  opts.log = &std::cerr;
  note("[" + name + "] starting in " + dir.string());
  const auto t0 = std::chrono::steady_clock::now();
  Experiment e{pipeline::run_experiment(cfg, opts), dir, 0.0};
  e.minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  note("[" + name + "] done in " + fmt("%.1f", e.minutes) + " min");
  std::cout << "\n--- " << name << " (" << fmt("%.1f", e.minutes) << " min) ---\n" << render_text(e.report) << "\n";
  std::cout.flush();
  return e;
}

const MethodReport& method(const CFReport& r, const std::string& label) {
  for (const auto& m : r.methods) {
    if (m.label == label) return m;
  }
  throw Error("report has no method " + label);
}

double final_avg(const CFReport& r, const std::string& label) { return method(r, label).final_row().bleu_avg(); }

/// Mean final test BLEU over every task except the last one learned.
double old_task_avg(const CFReport& r, const std::string& label) {
  const auto& row = method(r, label).final_row();
  if (row.scores.size() < 2) throw Error("old_task_avg: " + label + " has no old tasks");
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < row.scores.size(); ++i) sum += row.scores[i].bleu;
  return sum / static_cast<double>(row.scores.size() - 1);
}

}  // namespace

int main(int argc, char** argv) {
  fs::path root;
  bool reuse = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--reuse") {
      reuse = true;
    } else if (a == "--out" && i + 1 < argc) {
      root = argv[++i];
    } else {
      std::cerr << "usage: lnmt_acceptance [--out DIR] [--reuse]\n";
      return 2;
    }
  }
  if (root.empty()) {
    const char* env = std::getenv("LNMT_ACCEPTANCE_DIR");
    root = env && *env ? fs::path(env) : fs::path(LNMT_ACCEPTANCE_DEFAULT_DIR);
  }
  fs::create_directories(root);

  try {
    criterion_gradients();
    criterion_decoding();
    criterion_bleu();
    criterion_vocab(root / "scratch_checkpoint");
    criterion_ewc();

    const auto m2o = run("many_to_one_s7", many_to_one_main(), root, reuse);
    {
      double direct_unk = 1.0, pseudo_shared = 0.0;
      int files = 0;
      for (int s = 2; s <= 3; ++s) {
        const auto dprov = pipeline::detail::read_json(m2o.dir / "runs" / "direct_distill" / ("stage_" + std::to_string(s)) /
                                                       "distill" / "provenance.json");
        for (const auto& e : dprov.at("forward")) direct_unk = std::min(direct_unk, e.at("input_unk_rate").get<double>());
        const auto pprov = pipeline::detail::read_json(m2o.dir / "runs" / "pseudo_distill" / ("stage_" + std::to_string(s)) /
                                                       "distill" / "provenance.json");
        for (const auto& e : pprov.at("forward")) {
          pseudo_shared = std::max(pseudo_shared, e.at("input_unk_rate_shared").get<double>());
          ++files;
        }
      }
      record(5, "UNK rates", direct_unk >= kDirectUnkMin && pseudo_shared == 0.0 && files == 3,
             fmt("direct-distillation teacher inputs min UNK %.4f (need >= %.2f), pseudo inputs max UNK on shared ranks %.4f",
                 direct_unk, kDirectUnkMin, pseudo_shared) +
                 " over " + std::to_string(files) + " pseudo corpora");
    }

    const auto o2m = run("one_to_many_s7", one_to_many_main(7), root, reuse);
    {
      // Task-1 dev BLEU of the stage-1 and stage-2 finetune models.
      auto j = one_to_many_main(7);
      j["output_dir"] = o2m.dir.string();
      const auto cfg = pipeline::parse_config(j);
      const auto tasks = pipeline::load_tasks(cfg);
      auto dev_bleu = [&](int stage) {
        const auto st = pipeline::load_state(pipeline::stage_dir(cfg, "finetune", stage), tasks);
        const auto& fw = *st.forward;
        return score_corpus(tasks[0].task_id, fw.model, fw.src_vocab, fw.tgt_vocab,
                            forward_form(cfg.scenario, tasks[0].dev), cfg.eval_decode, cfg.threads)
            .bleu;
      };
      const double before = dev_bleu(1);
      const double after = dev_bleu(2);
      record(7, "finetune forgets", after < kFinetuneRetainMax * before,
             fmt("task-1 dev BLEU %.2f after stage 1, %.2f after stage 2 (need < %.2f)", before, after,
                 kFinetuneRetainMax * before));
    }
    {
      const double beam = final_avg(o2m.report, "multi_distill_beam");
      const double ft = final_avg(o2m.report, "finetune");
      const double joint = final_avg(o2m.report, "joint");
      record(8, "multilingual distillation", beam >= ft + kDistillOverFinetune && beam >= joint - kNearJoint,
             fmt("BLEU-avg beam %.2f, finetune %.2f, joint %.2f", beam, ft, joint) +
                 fmt(" (need >= finetune+%.0f and >= joint-%.0f)", kDistillOverFinetune, kNearJoint));
    }
    {
      const double direct = old_task_avg(m2o.report, "direct_distill");
      const double pseudo = old_task_avg(m2o.report, "pseudo_distill");
      const double reverse = old_task_avg(m2o.report, "reverse_distill");
      const double joint = old_task_avg(m2o.report, "joint");
      record(9, "many-to-one ordering", direct < pseudo && pseudo < reverse && reverse >= joint - kNearJoint,
             fmt("old-task BLEU avg direct %.2f < pseudo %.2f < reverse %.2f", direct, pseudo, reverse) +
                 fmt(", joint %.2f (reverse within %.0f)", joint, kNearJoint));
    }

    {
      int wins = 0;
      std::string detail;
      for (int seed : kBeamGreedySeeds) {
        double beam = 0, greedy = 0;
        if (seed == 7) {
          beam = final_avg(o2m.report, "multi_distill_beam");
          greedy = final_avg(o2m.report, "multi_distill_greedy");
        } else {
          const auto e = run("one_to_many_decode_s" + std::to_string(seed), one_to_many_decode_pair(seed), root, reuse);
          beam = final_avg(e.report, "multi_distill_beam");
          greedy = final_avg(e.report, "multi_distill_greedy");
        }
        wins += beam >= greedy;
        detail += fmt("seed %.0f: beam %.2f vs greedy %.2f; ", seed, beam, greedy);
      }
      detail += std::to_string(wins) + "/3 seeds with beam >= greedy (need a majority)";
      record(10, "beam vs greedy distillation", 2 * wins > 3, detail);
    }
    {
      const double kb = final_avg(o2m.report, "multi_distill_4best");
      const double one = final_avg(o2m.report, "multi_distill_beam");
      record(11, "k-best distillation", kb >= one - kKBestSlack,
             fmt("BLEU-avg 4-best %.2f vs 1-best %.2f (need >= 1-best - %.1f)", kb, one, kKBestSlack));
    }
    {
      // Always a fresh directory, whatever --reuse says.
      const auto again = run("one_to_many_s7_repeat", one_to_many_main(7), root, false);
      const auto a = slurp(o2m.dir / "report" / "report.json");
      const auto b = slurp(again.dir / "report" / "report.json");
      record(12, "determinism", !a.empty() && a == b,
             "report.json of two independent runs: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                 " bytes, " + (a == b ? "identical" : "DIFFERENT"));
    }
  } catch (const std::exception& e) {
    std::printf("acceptance run aborted: %s\n", e.what());
    return 3;
  }

  int passed = 0, unexpected = 0;
  for (const auto& o : g_outcomes) {
    passed += o.pass;
    if (!o.pass && !kKnownShortfalls.count(o.id)) ++unexpected;
  }
  std::printf("\n%d/%zu criteria passed", passed, g_outcomes.size());
  for (const auto& o : g_outcomes) {
    if (!o.pass && kKnownShortfalls.count(o.id)) std::printf("; C%02d fails as a known shortfall", o.id);
    if (o.pass && kKnownShortfalls.count(o.id)) std::printf("; C%02d listed as a shortfall but passed", o.id);
  }
  std::printf("\n");
  return unexpected == 0 && g_outcomes.size() == 12 ? 0 : 1;
}
