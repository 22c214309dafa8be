#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lnmt/core/error.hpp"
#include "lnmt/core/hash.hpp"
#include "lnmt/corpus/corpus.hpp"
#include "lnmt/corpus/rank_mapping.hpp"
#include "lnmt/corpus/vocabulary.hpp"
#include "lnmt/decode/decoder.hpp"
#include "lnmt/eval/report.hpp"
#include "lnmt/lifelong/distill.hpp"
#include "lnmt/lifelong/ewc.hpp"
#include "lnmt/lifelong/trainer.hpp"
#include "lnmt/model/config.hpp"
#include "lnmt/model/transformer.hpp"

namespace lnmt {

enum class Scenario { one_to_many, many_to_one };

inline std::string to_string(Scenario s) { return s == Scenario::one_to_many ? "one_to_many" : "many_to_one"; }

inline Scenario parse_scenario(const std::string& s) {
  if (s == "one_to_many") return Scenario::one_to_many;
  if (s == "many_to_one") return Scenario::many_to_one;
  throw ConfigError("unknown scenario '" + s + "' (expected one_to_many or many_to_one)");
}

enum class Method { finetune, joint, ewc, multi_distill, direct_distill, pseudo_distill, reverse_distill };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::finetune: return "finetune";
    case Method::joint: return "joint";
    case Method::ewc: return "ewc";
    case Method::multi_distill: return "multi_distill";
    case Method::direct_distill: return "direct_distill";
    case Method::pseudo_distill: return "pseudo_distill";
    case Method::reverse_distill: return "reverse_distill";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (auto m : {Method::finetune, Method::joint, Method::ewc, Method::multi_distill, Method::direct_distill,
                 Method::pseudo_distill, Method::reverse_distill}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown method '" + s + "'");
}

/// multi_distill needs one-to-many; the three source-side methods need
/// many-to-one; the baselines run in both.
inline bool compatible(Scenario s, Method m) {
  switch (m) {
    case Method::multi_distill: return s == Scenario::one_to_many;
    case Method::direct_distill:
    case Method::pseudo_distill:
    case Method::reverse_distill: return s == Scenario::many_to_one;
    default: return true;
  }
}

/// Raw splits of one translation task; sentences carry no indicators.
struct TaskData {
  std::string task_id;
  std::string src_lang;
  std::string tgt_lang;
  ParallelCorpus train, dev, test;
};

/// Sources as the forward model reads them. One-to-many prefixes the
/// target-language indicator; many-to-one has a single target and uses none.
inline ParallelCorpus forward_form(Scenario s, const ParallelCorpus& c) {
  ParallelCorpus out{c.src_lang, c.tgt_lang, {}, c.weight};
  out.pairs.reserve(c.size());
  for (const auto& p : c.pairs) {
    Sentence src = strip_indicator(p.src);
    if (s == Scenario::one_to_many) src = add_indicator(std::move(src), c.src_lang, c.tgt_lang);
    out.pairs.push_back({std::move(src), p.tgt});
  }
  return out;
}

/// The reverse direction with a target-language indicator, as read by the
/// reverse one-to-many model.
inline ParallelCorpus reverse_form(const ParallelCorpus& c) {
  ParallelCorpus out{c.tgt_lang, c.src_lang, {}, c.weight};
  out.pairs.reserve(c.size());
  for (const auto& p : c.pairs) {
    out.pairs.push_back({add_indicator(strip_indicator(p.tgt), c.tgt_lang, c.src_lang), strip_indicator(p.src)});
  }
  return out;
}

struct ModelBundle {
  Transformer<float> model;
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;

  Teacher teacher() const { return {&model, &src_vocab, &tgt_vocab}; }
};

struct LifelongState {
  Scenario scenario = Scenario::one_to_many;
  Method method = Method::finetune;
  std::string pivot_lang;  // shared source (one-to-many) or shared target (many-to-one)
  int stage = 0;
  std::vector<std::string> task_ids;        // learned tasks, arrival order
  std::vector<std::string> learned_langs;   // the non-pivot language of each task
  std::optional<ModelBundle> forward;
  std::optional<ModelBundle> reverse;       // reverse_distill only
  std::map<std::string, Vocabulary> lang_vocabs;  // frequency-sorted, per learned language
  std::optional<FisherDiag<float>> fisher;  // ewc only
  std::vector<ParallelCorpus> retained;     // joint only: raw training corpora

  /// The reverse model knows an indicator for exactly the learned
  /// languages, which are the forward model's source languages.
  bool mirror_invariant() const {
    if (!reverse) return true;
    std::size_t indicators = 0;
    for (const auto& e : reverse->src_vocab.entries()) indicators += e.reserved && is_indicator(e.token);
    if (indicators != learned_langs.size()) return false;
    for (const auto& l : learned_langs) {
      if (!reverse->src_vocab.find(indicator_token(pivot_lang, l))) return false;
    }
    return true;
  }
};

inline LifelongState make_state(Scenario s, Method m) {
  if (!compatible(s, m)) {
    throw ConfigError("method " + to_string(m) + " is not available in the " + to_string(s) + " scenario");
  }
  LifelongState st;
  st.scenario = s;
  st.method = m;
  return st;
}

struct LearnerConfig {
  ModelConfig model;           // vocabulary sizes are set from the data
  TrainHyper train;            // seed is replaced per stage
  DecodeConfig distill_decode;
  DecodeConfig dev_decode{DecodeMode::greedy, 1, 1, 0.6, 64};
  EwcConfig ewc;
  std::size_t vocab_max = 1000;
  int threads = 1;
  std::uint64_t seed = 1;
};

/// Stored outcome of a training run, keyed by a hash of all its inputs.
struct MemoEntry {
  ModelConfig config;
  ParamSet<float> params;
  nlohmann::json record;
};

class TrainMemo {
 public:
  virtual ~TrainMemo() = default;
  virtual std::optional<MemoEntry> lookup(const std::string& key) = 0;
  virtual void store(const std::string& key, const MemoEntry& entry) = 0;
};

/// Harness hooks. `monitor` holds dev splits of earlier tasks; they are read
/// only to draw forgetting curves, never for training or model selection.
struct LearnHooks {
  std::function<void(const CurvePoint&)> on_curve;
  std::vector<TaskData> monitor;
  TrainMemo* memo = nullptr;
};

struct TrainSummary {
  int best_epoch = 0;
  std::int64_t steps = 0;
  std::vector<EpochRecord> epochs;
  bool from_memo = false;
};

struct LearnResult {
  LifelongState state;
  std::optional<DistilledSet> distilled;
  TrainSummary forward_train;
  std::optional<TrainSummary> reverse_train;
  std::uint64_t teacher_checksum_before = 0;
  std::uint64_t teacher_checksum_after = 0;
};

namespace detail {

inline void hash_corpus(Fnv1a& h, const EncodedCorpus& c) {
  const auto n = c.pairs.size();
  h.update(&n, sizeof n);
  for (const auto& p : c.pairs) {
    const auto ls = p.src.size(), lt = p.tgt.size();
    h.update(&ls, sizeof ls);
    h.update(p.src.data(), ls * sizeof(TokenId));
    h.update(&lt, sizeof lt);
    h.update(p.tgt.data(), lt * sizeof(TokenId));
    h.update(&p.weight, sizeof p.weight);
  }
}

struct MonitorSet {
  std::vector<EvalTask> tasks;  // model form
  std::vector<bool> selects;    // contributes to the selection score
};

inline std::string memo_key(const Transformer<float>& init, const std::vector<EncodedCorpus>& corpora,
                            const TrainHyper& hyper, const EwcPenalty<float>& ewc, const MonitorSet& mon,
                            const Vocabulary& src_vocab, const Vocabulary& tgt_vocab, const DecodeConfig& dev) {
  Fnv1a h;
  nlohmann::json meta{{"config", init.config()}, {"hyper", hyper}, {"dev_decode", dev},
                      {"init", to_hex(init.checksum())}};
  if (ewc.fisher && ewc.lambda != 0.0) {
    meta["ewc"] = {{"lambda", ewc.lambda},
                   {"fisher", to_hex(ewc.fisher->fisher.checksum())},
                   {"anchor", to_hex(ewc.fisher->anchor.checksum())}};
  }
  h.update(meta.dump());
  for (const auto& c : corpora) hash_corpus(h, c);
  for (std::size_t i = 0; i < mon.tasks.size(); ++i) {
    h.update(mon.tasks[i].task_id);
    h.update(mon.selects[i] ? "1" : "0");
    for (const auto& p : mon.tasks[i].corpus.pairs) {
      h.update(p.src.str());
      h.update("\t");
      h.update(p.tgt.str());
      h.update("\n");
    }
  }
  for (const auto* v : {&src_vocab, &tgt_vocab}) {
    for (const auto& e : v->entries()) {
      h.update(e.token);
      h.update("\n");
    }
  }
  return to_hex(h.digest());
}

/// Trains one model with per-epoch dev monitoring, reusing a memoized run
/// when one with identical inputs exists.
inline std::pair<Transformer<float>, TrainSummary> train_stage(
    const std::string& model_kind, const Transformer<float>& init, const Vocabulary& src_vocab,
    const Vocabulary& tgt_vocab, const std::vector<EncodedCorpus>& corpora, const TrainHyper& hyper,
    const EwcPenalty<float>& ewc, const MonitorSet& mon, const LearnerConfig& cfg, const LearnHooks& hooks,
    const std::string& method_label, int stage) {
  std::vector<CurvePoint> curve;
  auto emit = [&](const std::vector<CurvePoint>& pts) {
    if (!hooks.on_curve) return;
    for (auto p : pts) {
      p.method = method_label;
      p.stage = stage;
      p.model = model_kind;
      hooks.on_curve(p);
    }
  };

  std::string key;
  if (hooks.memo) {
    key = memo_key(init, corpora, hyper, ewc, mon, src_vocab, tgt_vocab, cfg.dev_decode);
    if (auto hit = hooks.memo->lookup(key)) {
      TrainSummary s;
      s.from_memo = true;
      s.best_epoch = hit->record.at("best_epoch").get<int>();
      s.steps = hit->record.at("steps").get<std::int64_t>();
      for (const auto& e : hit->record.at("epochs")) {
        EpochRecord r{e.at("epoch").get<int>(), e.at("train_loss").get<double>(), e.at("train_nll").get<double>(),
                      std::nullopt};
        if (!e.at("selection").is_null()) r.selection_score = e.at("selection").get<double>();
        s.epochs.push_back(r);
      }
      for (const auto& c : hit->record.at("curve")) curve.push_back(curve_point_from_json(c));
      emit(curve);
      return {Transformer<float>(init.config(), std::move(hit->params)), s};
    }
  }

  EpochCallback<float> cb = [&](int epoch, const Transformer<float>& m) -> std::optional<double> {
    CurvePoint p;
    p.epoch = epoch;
    double sel = 0.0;
    int nsel = 0;
    for (std::size_t i = 0; i < mon.tasks.size(); ++i) {
      const auto sc =
          score_corpus(mon.tasks[i].task_id, m, src_vocab, tgt_vocab, mon.tasks[i].corpus, cfg.dev_decode, cfg.threads);
      p.dev_bleu.emplace_back(sc.task_id, sc.bleu);
      if (mon.selects[i]) {
        sel += sc.bleu;
        ++nsel;
      }
    }
    curve.push_back(p);
    if (nsel == 0) return std::nullopt;
    return sel / nsel;
  };
  auto res = train_mixture<float>(init, corpora, hyper, cb, ewc);
  for (std::size_t i = 0; i < curve.size() && i < res.epochs.size(); ++i) curve[i].train_loss = res.epochs[i].train_loss;
  emit(curve);

  TrainSummary s{res.best_epoch, res.steps, res.epochs, false};
  if (hooks.memo) {
    nlohmann::json rec{{"best_epoch", s.best_epoch}, {"steps", s.steps}};
    rec["epochs"] = nlohmann::json::array();
    for (const auto& e : s.epochs) {
      rec["epochs"].push_back({{"epoch", e.epoch},
                               {"train_loss", e.train_loss},
                               {"train_nll", e.train_nll},
                               {"selection", e.selection_score ? nlohmann::json(*e.selection_score) : nlohmann::json(nullptr)}});
    }
    rec["curve"] = nlohmann::json::array();
    for (const auto& c : curve) rec["curve"].push_back(curve_json(c));
    hooks.memo->store(key, {res.model.config(), res.model.params(), rec});
  }
  return {std::move(res.model), s};
}

inline Vocabulary content_vocab(const std::vector<Sentence>& sents, std::size_t max_size, const std::string& lang) {
  std::vector<Sentence> plain;
  plain.reserve(sents.size());
  for (const auto& s : sents) plain.push_back(strip_indicator(s));
  return build_vocab(std::span<const Sentence>(plain), max_size, lang);
}

/// Grows `b` to cover the task vocabularies (append-only) and expands the
/// model's embedding and output rows accordingly.
inline void grow(ModelBundle& b, const Vocabulary& task_src, const Vocabulary& task_tgt) {
  b.src_vocab = union_vocab(b.src_vocab, task_src);
  b.tgt_vocab = union_vocab(b.tgt_vocab, task_tgt);
  b.model = b.model.expanded(static_cast<int>(b.src_vocab.size()), static_cast<int>(b.tgt_vocab.size()));
}

inline ModelBundle fresh_bundle(const LearnerConfig& cfg, const Vocabulary& src, const Vocabulary& tgt,
                                const std::string& label) {
  ModelConfig mc = cfg.model;
  mc.src_vocab_size = static_cast<int>(src.size());
  mc.tgt_vocab_size = static_cast<int>(tgt.size());
  mc.seed = derive_seed(cfg.seed, "init/" + label);
  return {Transformer<float>(mc), src, tgt};
}

inline MonitorSet make_monitor(const LifelongState& st, const TaskData& task, const LearnHooks& hooks, bool reverse,
                               bool select_all) {
  MonitorSet mon;
  auto add = [&](const TaskData& t, bool selects) {
    EvalTask e{t.task_id, reverse ? reverse_form(t.dev) : forward_form(st.scenario, t.dev)};
    if (e.corpus.empty()) return;
    mon.tasks.push_back(std::move(e));
    mon.selects.push_back(selects);
  };
  for (const auto& t : hooks.monitor) {
    if (t.task_id != task.task_id) add(t, select_all);
  }
  add(task, true);
  return mon;
}

}  // namespace detail

/// The frequency-sorted vocabulary of a task's non-pivot language.
inline Vocabulary task_lang_vocab(Scenario sc, const TaskData& task, std::size_t vocab_max) {
  const bool o2m = sc == Scenario::one_to_many;
  return detail::content_vocab(o2m ? task.train.targets() : task.train.sources(), vocab_max,
                               o2m ? task.tgt_lang : task.src_lang);
}

/// Builds the distilled set the state's method uses for `task`, from the
/// current (frozen) models. Returns nothing for methods without
/// distillation or when no language has been learned yet. The teacher
/// checksum is recorded before and after decoding.
inline std::optional<DistilledSet> distill_for_task(const LifelongState& state, const TaskData& task,
                                                    const LearnerConfig& cfg, std::uint64_t* checksum_before = nullptr,
                                                    std::uint64_t* checksum_after = nullptr) {
  const auto& learned = state.learned_langs;
  const Method method = state.method;
  const bool distills = method == Method::multi_distill || method == Method::direct_distill ||
                        method == Method::pseudo_distill || method == Method::reverse_distill;
  if (learned.empty() || !distills) return std::nullopt;
  const auto& bundle = method == Method::reverse_distill ? state.reverse : state.forward;
  if (!bundle) throw InvalidArgument("distillation needs a trained teacher model");
  const Teacher t = bundle->teacher();
  const auto before = t.checksum();
  DistilledSet set;
  switch (method) {
    case Method::multi_distill:
      set = build_one2many_distill_set(t, task.train, learned, cfg.distill_decode, cfg.threads);
      break;
    case Method::direct_distill:
      set = build_many2one_distill_set(t, task.train, learned, Many2OneMode::direct, {}, cfg.distill_decode,
                                       cfg.threads);
      break;
    case Method::pseudo_distill: {
      const auto v_new = task_lang_vocab(state.scenario, task, cfg.vocab_max);
      std::map<std::string, RankMapping> maps;
      for (const auto& l : learned) maps.emplace(l, build_rank_mapping(v_new, state.lang_vocabs.at(l)));
      set = build_many2one_distill_set(t, task.train, learned, Many2OneMode::pseudo, maps, cfg.distill_decode,
                                       cfg.threads);
      break;
    }
    default:
      set = build_reverse_distill_set(t, task.train, learned, cfg.distill_decode, cfg.threads);
      break;
  }
  const auto after = t.checksum();
  if (checksum_before) *checksum_before = before;
  if (checksum_after) *checksum_after = after;
  if (after != before) throw Error("teacher parameters changed during distillation");
  return set;
}

/// Learns `task` on top of `state` with the state's method.
///
/// The distilled set is built once from the previous model, which is not
/// modified. Vocabularies are then unioned and the model expanded, and the
/// student trains on the authentic task data plus the distilled
/// (or, for the joint baseline, retained) corpora.
inline LearnResult learn_task(LifelongState state, const TaskData& task, const LearnerConfig& cfg,
                              const LearnHooks& hooks = {}, const std::string& method_label = {}) {
  const Scenario sc = state.scenario;
  const Method method = state.method;
  if (!compatible(sc, method)) {
    throw ConfigError("method " + to_string(method) + " is not available in the " + to_string(sc) + " scenario");
  }
  if (task.train.empty()) throw InvalidArgument("task " + task.task_id + " has no training data");
  const std::string& pivot = sc == Scenario::one_to_many ? task.src_lang : task.tgt_lang;
  const std::string& lang = sc == Scenario::one_to_many ? task.tgt_lang : task.src_lang;
  if (state.pivot_lang.empty()) state.pivot_lang = pivot;
  if (pivot != state.pivot_lang) {
    throw ConfigError("task " + task.task_id + " does not share the scenario's pivot language " + state.pivot_lang);
  }
  if (std::find(state.learned_langs.begin(), state.learned_langs.end(), lang) != state.learned_langs.end()) {
    throw ConfigError("language " + lang + " has already been learned");
  }
  const std::string label = method_label.empty() ? to_string(method) : method_label;
  const int stage = state.stage + 1;
  const std::uint64_t stage_seed = derive_seed(cfg.seed, "stage/" + std::to_string(stage));

  LearnResult out;
  const auto fwd_task = forward_form(sc, task.train);
  const auto task_src_vocab = build_vocab(std::span<const Sentence>(fwd_task.sources()), cfg.vocab_max, task.src_lang);
  const auto task_tgt_vocab = build_vocab(std::span<const Sentence>(fwd_task.targets()), cfg.vocab_max, task.tgt_lang);
  const auto lang_vocab = task_lang_vocab(sc, task, cfg.vocab_max);

  // The teachers are the models as they were before this task; distillation
  // only reads them.
  out.distilled = distill_for_task(state, task, cfg, &out.teacher_checksum_before, &out.teacher_checksum_after);

  if (!state.forward) {
    state.forward = detail::fresh_bundle(cfg, task_src_vocab, task_tgt_vocab, "forward");
  } else {
    detail::grow(*state.forward, task_src_vocab, task_tgt_vocab);
  }

  // Forward student.
  auto& fw = *state.forward;
  std::vector<EncodedCorpus> corpora{encode_corpus(fwd_task, fw.src_vocab, fw.tgt_vocab)};
  if (out.distilled) {
    for (const auto& dc : out.distilled->forward) {
      if (!dc.corpus.empty()) corpora.push_back(encode_corpus(dc.corpus, fw.src_vocab, fw.tgt_vocab));
    }
  }
  if (method == Method::joint) {
    for (const auto& c : state.retained) corpora.push_back(encode_corpus(forward_form(sc, c), fw.src_vocab, fw.tgt_vocab));
  }
  std::optional<FisherDiag<float>> grown_fisher;
  EwcPenalty<float> penalty;
  if (method == Method::ewc && state.fisher) {
    grown_fisher = state.fisher->expanded_to(fw.model.params());
    penalty = {&*grown_fisher, cfg.ewc.lambda};
  }
  TrainHyper hyper = cfg.train;
  hyper.seed = derive_seed(stage_seed, "forward");
  const auto mon = detail::make_monitor(state, task, hooks, false, method == Method::joint);
  auto [model, summary] = detail::train_stage("forward", fw.model, fw.src_vocab, fw.tgt_vocab, corpora, hyper,
                                              penalty, mon, cfg, hooks, label, stage);
  fw.model = std::move(model);
  out.forward_train = summary;

  if (method == Method::ewc) {
    auto f = compute_fisher(fw.model, corpora.front(), cfg.ewc.sample_cap);
    state.fisher = accumulate_fisher(state.fisher, std::move(f));
  }

  // Reverse student: learns the new reverse direction plus the reverse
  // pairs produced while distilling.
  if (method == Method::reverse_distill) {
    const auto rev_task = reverse_form(task.train);
    const auto rsrc = build_vocab(std::span<const Sentence>(rev_task.sources()), cfg.vocab_max, task.tgt_lang);
    const auto rtgt = build_vocab(std::span<const Sentence>(rev_task.targets()), cfg.vocab_max, task.src_lang);
    if (!state.reverse) {
      state.reverse = detail::fresh_bundle(cfg, rsrc, rtgt, "reverse");
    } else {
      detail::grow(*state.reverse, rsrc, rtgt);
    }
    auto& rv = *state.reverse;
    std::vector<EncodedCorpus> rcorp{encode_corpus(rev_task, rv.src_vocab, rv.tgt_vocab)};
    if (out.distilled) {
      for (const auto& c : out.distilled->reverse) {
        if (!c.empty()) rcorp.push_back(encode_corpus(c, rv.src_vocab, rv.tgt_vocab));
      }
    }
    TrainHyper rh = cfg.train;
    rh.seed = derive_seed(stage_seed, "reverse");
    const auto rmon = detail::make_monitor(state, task, hooks, true, false);
    auto [rmodel, rsummary] = detail::train_stage("reverse", rv.model, rv.src_vocab, rv.tgt_vocab, rcorp, rh, {}, rmon,
                                                  cfg, hooks, label, stage);
    rv.model = std::move(rmodel);
    out.reverse_train = rsummary;
  }

  if (method == Method::joint) state.retained.push_back(task.train);
  state.learned_langs.push_back(lang);
  state.lang_vocabs[lang] = lang_vocab;
  state.task_ids.push_back(task.task_id);
  state.stage = stage;
  out.state = std::move(state);
  return out;
}

/// Test-set evaluation of every learned task with the forward model.
inline StageRow evaluate_state(const LifelongState& st, const std::vector<TaskData>& learned_tasks,
                               const DecodeConfig& cfg, int threads = 1) {
  if (!st.forward) throw InvalidArgument("evaluate_state: no model has been trained yet");
  std::vector<EvalTask> tasks;
  for (const auto& t : learned_tasks) {
    if (t.test.empty()) throw InvalidArgument("evaluate_stage: missing test split for task " + t.task_id);
    tasks.push_back({t.task_id, forward_form(st.scenario, t.test)});
  }
  return evaluate_stage(st.stage, st.task_ids.empty() ? std::string{} : st.task_ids.back(), st.forward->model,
                        st.forward->src_vocab, st.forward->tgt_vocab, tasks, cfg, threads);
}

}  // namespace lnmt
