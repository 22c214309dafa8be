#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lnmt/core/error.hpp"
#include "lnmt/core/hash.hpp"
#include "lnmt/corpus/corpus.hpp"
#include "lnmt/eval/report.hpp"
#include "lnmt/lifelong/distill.hpp"
#include "lnmt/lifelong/learner.hpp"
#include "lnmt/model/checkpoint.hpp"
#include "lnmt/pipeline/config.hpp"
#include "lnmt/synth/synthetic.hpp"

namespace lnmt::pipeline {

namespace fs = std::filesystem;

/// A stage that threw. Carries where the last good state lives.
class StageFailure : public Error {
 public:
  StageFailure(const std::string& what, fs::path last_good) : Error(what), last_good_(std::move(last_good)) {}
  const fs::path& last_good() const { return last_good_; }

 private:
  fs::path last_good_;
};

namespace detail {

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw IoError("cannot write " + p.string());
  }
  fs::rename(tmp, p);
}

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

}  // namespace detail

/// Training memo on disk: one checkpoint directory per input hash.
class DirectoryMemo : public TrainMemo {
 public:
  explicit DirectoryMemo(fs::path dir) : dir_(std::move(dir)) {}

  std::optional<MemoEntry> lookup(const std::string& key) override {
    const auto d = dir_ / key;
    if (!fs::exists(d / "manifest")) return std::nullopt;
    auto ck = load_checkpoint(d);
    return MemoEntry{ck.model.config(), ck.model.params(), ck.extra};
  }

  void store(const std::string& key, const MemoEntry& e) override {
    const auto d = dir_ / key;
    const auto tmp = dir_ / (key + ".tmp");
    fs::remove_all(tmp);
    Checkpoint ck{Transformer<float>(e.config, e.params), Vocabulary(), Vocabulary(), std::nullopt, std::nullopt,
                  e.record};
    save_checkpoint(tmp, ck);
    fs::remove_all(d);
    fs::rename(tmp, d);
  }

 private:
  fs::path dir_;
};

/// Writes every synthetic task directory. Returns task id -> whether files
/// were (re)generated; identical existing manifests are left alone.
inline std::map<std::string, bool> generate_tasks(const ExperimentConfig& cfg) {
  std::map<std::string, bool> out;
  for (const auto& t : cfg.tasks) {
    if (t.path) continue;
    out[t.id] = synth::gen_task(cfg.synthetic_spec(t), cfg.task_dir(t.id));
  }
  return out;
}

inline std::vector<TaskData> load_tasks(const ExperimentConfig& cfg) {
  std::vector<TaskData> out;
  for (const auto& t : cfg.tasks) {
    const auto dir = cfg.task_dir(t.id);
    TaskData d{t.id, t.src, t.tgt, {}, {}, {}};
    d.train = read_parallel(dir / "train", t.src, t.tgt);
    d.dev = read_parallel(dir / "dev", t.src, t.tgt);
    d.test = read_parallel(dir / "test", t.src, t.tgt);
    if (d.train.empty()) throw InvalidArgument("task " + t.id + " has an empty training split");
    if (d.test.empty()) throw InvalidArgument("task " + t.id + " has an empty test split");
    out.push_back(std::move(d));
  }
  return out;
}

// ---- state persistence ------------------------------------------------------

inline void save_state(const fs::path& dir, const LifelongState& st) {
  nlohmann::json j{{"scenario", to_string(st.scenario)},
                   {"method", to_string(st.method)},
                   {"pivot_lang", st.pivot_lang},
                   {"stage", st.stage},
                   {"task_ids", st.task_ids},
                   {"learned_langs", st.learned_langs},
                   {"retained", nlohmann::json::array()}};
  for (const auto& c : st.retained) j["retained"].push_back({{"src", c.src_lang}, {"tgt", c.tgt_lang}});
  if (st.forward) {
    Checkpoint ck{st.forward->model, st.forward->src_vocab, st.forward->tgt_vocab, std::nullopt, st.fisher, {}};
    save_checkpoint(dir / "forward", ck);
    j["forward_checksum"] = to_hex(st.forward->model.checksum());
  }
  if (st.reverse) {
    Checkpoint ck{st.reverse->model, st.reverse->src_vocab, st.reverse->tgt_vocab, std::nullopt, std::nullopt, {}};
    save_checkpoint(dir / "reverse", ck);
    j["reverse_checksum"] = to_hex(st.reverse->model.checksum());
  }
  fs::create_directories(dir / "lang_vocabs");
  for (const auto& [lang, v] : st.lang_vocabs) v.save((dir / "lang_vocabs" / (lang + ".vocab")).string());
  detail::write_text(dir / "state.json", j.dump(2) + "\n");
}

/// `tasks` supplies the raw corpora a joint-training state retains.
inline LifelongState load_state(const fs::path& dir, const std::vector<TaskData>& tasks) {
  const auto j = detail::read_json(dir / "state.json");
  LifelongState st = make_state(parse_scenario(j.at("scenario")), parse_method(j.at("method")));
  st.pivot_lang = j.at("pivot_lang").get<std::string>();
  st.stage = j.at("stage").get<int>();
  st.task_ids = j.at("task_ids").get<std::vector<std::string>>();
  st.learned_langs = j.at("learned_langs").get<std::vector<std::string>>();
  if (fs::exists(dir / "forward" / "manifest")) {
    auto ck = load_checkpoint(dir / "forward");
    st.fisher = std::move(ck.fisher);
    st.forward = ModelBundle{std::move(ck.model), std::move(ck.src_vocab), std::move(ck.tgt_vocab)};
  }
  if (fs::exists(dir / "reverse" / "manifest")) {
    auto ck = load_checkpoint(dir / "reverse");
    st.reverse = ModelBundle{std::move(ck.model), std::move(ck.src_vocab), std::move(ck.tgt_vocab)};
  }
  for (const auto& l : st.learned_langs) {
    st.lang_vocabs[l] = Vocabulary::load((dir / "lang_vocabs" / (l + ".vocab")).string(), l);
  }
  for (const auto& r : j.at("retained")) {
    bool found = false;
    for (const auto& t : tasks) {
      if (t.src_lang == r.at("src").get<std::string>() && t.tgt_lang == r.at("tgt").get<std::string>()) {
        st.retained.push_back(t.train);
        found = true;
      }
    }
    if (!found) throw IoError("retained corpus of " + dir.string() + " is not among the configured tasks");
  }
  return st;
}

// ---- run layout ---------------------------------------------------------------

inline fs::path method_dir(const ExperimentConfig& cfg, const std::string& label) {
  return cfg.output_dir / "runs" / label;
}

inline fs::path stage_dir(const ExperimentConfig& cfg, const std::string& label, int stage) {
  return method_dir(cfg, label) / ("stage_" + std::to_string(stage));
}

inline nlohmann::json method_fingerprint(const ExperimentConfig& cfg, const MethodDef& m) {
  return {{"config", cfg.fingerprint()}, {"method", to_string(m.method)}, {"decode", m.distill_decode}};
}

/// Highest stage whose completion marker exists and matches this config.
inline int last_complete_stage(const ExperimentConfig& cfg, const MethodDef& m) {
  int done = 0;
  for (int s = 1; s <= static_cast<int>(cfg.tasks.size()); ++s) {
    const auto marker = stage_dir(cfg, m.label, s) / "stage.json";
    if (!fs::exists(marker)) break;
    const auto j = detail::read_json(marker);
    if (j.value("fingerprint", nlohmann::json()) != method_fingerprint(cfg, m)) {
      throw ConfigError("run directory " + method_dir(cfg, m.label).string() +
                        " was produced by a different configuration; remove it or run without --resume");
    }
    done = s;
  }
  return done;
}

inline StageRow read_stage_row(const fs::path& sdir) { return detail::read_json(sdir / "eval.json").get<StageRow>(); }

struct RunOptions {
  std::optional<std::string> only_method;
  bool resume = false;
  int stop_after_stage = 0;  // 0: run every task
  std::ostream* log = nullptr;
};

namespace detail {

inline void say(const RunOptions& o, const std::string& msg) {
  if (o.log) *o.log << msg << std::endl;
}

inline nlohmann::json summary_json(const TrainSummary& s) {
  nlohmann::json j{{"best_epoch", s.best_epoch}, {"steps", s.steps}, {"from_memo", s.from_memo}};
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : s.epochs) {
    j["epochs"].push_back({{"epoch", e.epoch},
                           {"train_loss", e.train_loss},
                           {"train_nll", e.train_nll},
                           {"selection", e.selection_score ? nlohmann::json(*e.selection_score) : nlohmann::json()}});
  }
  return j;
}

}  // namespace detail

/// Runs one method through every task, resuming after the last completed
/// stage when `opts.resume` is set.
inline void run_method(const ExperimentConfig& cfg, const MethodDef& m, const std::vector<TaskData>& tasks,
                       TrainMemo* memo, const RunOptions& opts) {
  const auto mdir = method_dir(cfg, m.label);
  int done = 0;
  if (opts.resume) {
    done = last_complete_stage(cfg, m);
  } else {
    fs::remove_all(mdir);
  }
  fs::create_directories(mdir);
  CurveLog curves(mdir / "curves.jsonl");
  curves.truncate_from(done + 1);
  LifelongState state = done > 0 ? load_state(stage_dir(cfg, m.label, done), tasks) : make_state(cfg.scenario, m.method);
  const auto lcfg = cfg.learner(m);
  const int last = opts.stop_after_stage > 0 ? std::min<int>(opts.stop_after_stage, static_cast<int>(tasks.size()))
                                             : static_cast<int>(tasks.size());
  for (int s = done + 1; s <= last; ++s) {
    const auto& task = tasks[static_cast<std::size_t>(s - 1)];
    const auto sdir = stage_dir(cfg, m.label, s);
    detail::say(opts, "[" + m.label + "] stage " + std::to_string(s) + ": learning " + task.task_id);
    try {
      fs::remove_all(sdir);
      LearnHooks hooks;
      hooks.memo = memo;
      hooks.monitor.assign(tasks.begin(), tasks.begin() + s);
      hooks.on_curve = [&](const CurvePoint& p) { curves.append(p); };
      auto res = learn_task(state, task, lcfg, hooks, m.label);
      if (res.distilled) save_distilled_set(sdir / "distill", *res.distilled);
      save_state(sdir, res.state);
      std::vector<TaskData> learned(tasks.begin(), tasks.begin() + s);
      const auto row = evaluate_state(res.state, learned, cfg.eval_decode, cfg.threads);
      detail::write_text(sdir / "eval.json", nlohmann::json(row).dump(2) + "\n");
      nlohmann::json train{{"forward", detail::summary_json(res.forward_train)}};
      if (res.reverse_train) train["reverse"] = detail::summary_json(*res.reverse_train);
      detail::write_text(sdir / "train.json", train.dump(2) + "\n");
      nlohmann::json marker{{"stage", s},
                            {"task_id", task.task_id},
                            {"label", m.label},
                            {"fingerprint", method_fingerprint(cfg, m)},
                            {"forward_checksum", to_hex(res.state.forward->model.checksum())}};
      if (res.distilled) marker["teacher_checksum"] = to_hex(res.distilled->teacher_checksum);
      detail::write_text(sdir / "stage.json", marker.dump(2) + "\n");
      state = std::move(res.state);
      std::string line = "[" + m.label + "] stage " + std::to_string(s) + " test BLEU:";
      for (const auto& sc : row.scores) line += " " + sc.task_id + "=" + lnmt::detail::fixed2(sc.bleu);
      detail::say(opts, line + " avg=" + lnmt::detail::fixed2(row.bleu_avg()));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      const auto good = s > 1 ? stage_dir(cfg, m.label, s - 1) : fs::path();
      throw StageFailure("method " + m.label + ", stage " + std::to_string(s) + " (" + task.task_id +
                             ") failed: " + e.what() +
                             (good.empty() ? std::string("; no completed stage")
                                           : "; last good state: " + good.string()),
                         good);
    }
  }
}

/// Trains one model per task from scratch; its test BLEU is the reference
/// for the delta column.
inline void run_single(const ExperimentConfig& cfg, const std::vector<TaskData>& tasks, TrainMemo* memo,
                       const RunOptions& opts) {
  MethodDef m{Method::finetune, "single", cfg.distill_decode};
  for (const auto& task : tasks) {
    const auto dir = cfg.output_dir / "runs" / "single" / task.task_id;
    if (opts.resume && fs::exists(dir / "stage.json")) {
      const auto j = detail::read_json(dir / "stage.json");
      if (j.value("fingerprint", nlohmann::json()) == method_fingerprint(cfg, m)) continue;
    }
    detail::say(opts, "[single] " + task.task_id);
    fs::remove_all(dir);
    try {
      LearnHooks hooks;
      hooks.memo = memo;
      auto res = learn_task(make_state(cfg.scenario, Method::finetune), task, cfg.learner(m), hooks, "single");
      save_state(dir, res.state);
      const auto row = evaluate_state(res.state, {task}, cfg.eval_decode, cfg.threads);
      detail::write_text(dir / "eval.json", nlohmann::json(row).dump(2) + "\n");
      detail::write_text(dir / "stage.json",
                         nlohmann::json{{"task_id", task.task_id}, {"fingerprint", method_fingerprint(cfg, m)}}
                                 .dump(2) +
                             "\n");
      detail::say(opts, "[single] " + task.task_id + " test BLEU=" + lnmt::detail::fixed2(row.scores.front().bleu));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw StageFailure("single baseline for " + task.task_id + " failed: " + e.what(), {});
    }
  }
}

/// Collects whatever stages exist on disk into a CFReport. Methods appear in
/// configuration order, or directory order when no config is given.
inline CFReport collect_report(const fs::path& out_dir, const std::vector<std::string>& task_ids,
                               const std::vector<std::string>& labels) {
  const auto runs = out_dir / "runs";
  if (!fs::exists(runs)) throw InvalidArgument("no runs found under " + out_dir.string());
  CFReport r;
  r.task_ids = task_ids;
  std::vector<std::string> order = labels;
  if (order.empty()) {
    for (const auto& e : fs::directory_iterator(runs)) {
      if (e.is_directory() && e.path().filename() != "single") order.push_back(e.path().filename().string());
    }
    std::sort(order.begin(), order.end());
  }
  for (const auto& label : order) {
    MethodReport mr{label, {}};
    for (int s = 1;; ++s) {
      const auto sdir = runs / label / ("stage_" + std::to_string(s));
      if (!fs::exists(sdir / "stage.json") || !fs::exists(sdir / "eval.json")) break;
      mr.stages.push_back(read_stage_row(sdir));
    }
    if (!mr.stages.empty()) r.methods.push_back(std::move(mr));
  }
  if (fs::exists(runs / "single")) {
    for (const auto& e : fs::directory_iterator(runs / "single")) {
      if (!fs::exists(e.path() / "eval.json")) continue;
      const auto row = read_stage_row(e.path());
      if (!row.scores.empty()) r.single[row.scores.front().task_id] = row.scores.front();
    }
  }
  if (r.task_ids.empty()) {
    for (const auto& m : r.methods) {
      for (const auto& st : m.stages) {
        if (std::find(r.task_ids.begin(), r.task_ids.end(), st.task_id) == r.task_ids.end()) {
          r.task_ids.push_back(st.task_id);
        }
      }
    }
  }
  if (r.methods.empty() && r.single.empty()) throw InvalidArgument("run directory " + out_dir.string() + " is empty");
  return r;
}

/// Writes report.json, report.txt and curves.csv into `<out>/report`.
inline void write_report(const fs::path& out_dir, const CFReport& r) {
  const auto dir = out_dir / "report";
  detail::write_text(dir / "report.json", report_json(r).dump(2) + "\n");
  detail::write_text(dir / "report.txt", render_text(r));
  std::string csv = "method,model,stage,epoch,task,dev_bleu,train_loss\n";
  std::vector<std::string> labels;
  for (const auto& m : r.methods) labels.push_back(m.label);
  for (const auto& label : labels) {
    for (const auto& p : CurveLog::read(out_dir / "runs" / label / "curves.jsonl")) {
      for (const auto& [task, b] : p.dev_bleu) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6f,%.6f", b, p.train_loss);
        csv += p.method + "," + p.model + "," + std::to_string(p.stage) + "," + std::to_string(p.epoch) + "," + task +
               "," + buf + "\n";
      }
    }
  }
  detail::write_text(dir / "curves.csv", csv);
}

inline std::vector<std::string> method_labels(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& m : cfg.methods) out.push_back(m.label);
  return out;
}

inline std::vector<std::string> task_ids(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& t : cfg.tasks) out.push_back(t.id);
  return out;
}

/// Full pipeline: generate tasks, run every selected method and the single
/// baseline, then write the report.
inline CFReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  fs::create_directories(cfg.output_dir);
  detail::write_text(cfg.output_dir / "provenance.json",
                     nlohmann::json{{"config", cfg.resolved()},
                                    {"source", cfg.source},
                                    {"overrides", cfg.overrides},
                                    {"fingerprint", cfg.fingerprint()}}
                             .dump(2) +
                         "\n");
  generate_tasks(cfg);
  const auto tasks = load_tasks(cfg);
  DirectoryMemo memo(cfg.output_dir / "cache");
  bool ran = false;
  for (const auto& m : cfg.methods) {
    if (opts.only_method && *opts.only_method != m.label) continue;
    run_method(cfg, m, tasks, &memo, opts);
    ran = true;
  }
  if (opts.only_method && !ran) throw ConfigError("--method " + *opts.only_method + " is not in the config");
  if (cfg.single_baseline && (!opts.only_method || *opts.only_method == "single")) {
    run_single(cfg, tasks, &memo, opts);
  }
  auto report = collect_report(cfg.output_dir, task_ids(cfg), method_labels(cfg));
  write_report(cfg.output_dir, report);
  return report;
}

}  // namespace lnmt::pipeline
