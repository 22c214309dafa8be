#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lnmt/core/error.hpp"
#include "lnmt/corpus/corpus.hpp"
#include "lnmt/corpus/vocabulary.hpp"
#include "lnmt/decode/decoder.hpp"
#include "lnmt/eval/bleu.hpp"
#include "lnmt/model/transformer.hpp"

namespace lnmt {

/// Scores of one task on one split.
struct TaskScore {
  std::string task_id;
  double bleu = 0.0;
  double exact_match = 0.0;  // auxiliary; synthetic tasks have an oracle
};

/// Translates `corpus` (sources already carrying any indicator the model
/// expects) and scores it against the authentic targets.
inline TaskScore score_corpus(const std::string& task_id, const Transformer<float>& model, const Vocabulary& src_vocab,
                              const Vocabulary& tgt_vocab, const ParallelCorpus& corpus, const DecodeConfig& cfg,
                              int threads = 1) {
  if (corpus.empty()) throw InvalidArgument("evaluation: empty corpus for task " + task_id);
  std::vector<std::vector<TokenId>> ids;
  ids.reserve(corpus.size());
  for (const auto& p : corpus.pairs) ids.push_back(encode(p.src, src_vocab));
  DecodeConfig one = cfg;
  if (one.mode == DecodeMode::kbest) one.mode = DecodeMode::beam;
  const auto hyps = decode_all(model, ids, one, threads);
  std::vector<std::vector<std::string>> cands, refs;
  cands.reserve(hyps.size());
  refs.reserve(hyps.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    cands.push_back(decode(hyps[i].front().content(), tgt_vocab).tokens);
    refs.push_back(corpus.pairs[i].tgt.tokens);
  }
  return {task_id, corpus_bleu(cands, refs).bleu, exact_match(cands, refs)};
}

/// Test scores of every learned task after one learning stage.
struct StageRow {
  int stage = 0;
  std::string task_id;  // the task learned at this stage
  std::vector<TaskScore> scores;  // arrival order
  std::string checkpoint_checksum;

  double bleu_avg() const {
    if (scores.empty()) return 0.0;
    double s = 0.0;
    for (const auto& t : scores) s += t.bleu;
    return s / static_cast<double>(scores.size());
  }

  std::optional<double> bleu_of(const std::string& task) const {
    for (const auto& t : scores) {
      if (t.task_id == task) return t.bleu;
    }
    return std::nullopt;
  }
};

inline void to_json(nlohmann::json& j, const TaskScore& s) {
  j = nlohmann::json{{"task_id", s.task_id}, {"bleu", s.bleu}, {"exact_match", s.exact_match}};
}
inline void from_json(const nlohmann::json& j, TaskScore& s) {
  s.task_id = j.at("task_id").get<std::string>();
  s.bleu = j.at("bleu").get<double>();
  s.exact_match = j.at("exact_match").get<double>();
}
inline void to_json(nlohmann::json& j, const StageRow& r) {
  j = nlohmann::json{{"stage", r.stage},
                     {"task_id", r.task_id},
                     {"scores", r.scores},
                     {"bleu_avg", r.bleu_avg()},
                     {"checkpoint_checksum", r.checkpoint_checksum}};
}
inline void from_json(const nlohmann::json& j, StageRow& r) {
  r.stage = j.at("stage").get<int>();
  r.task_id = j.at("task_id").get<std::string>();
  r.scores = j.at("scores").get<std::vector<TaskScore>>();
  r.checkpoint_checksum = j.value("checkpoint_checksum", std::string{});
}

/// A model paired with what it needs to read each learned task's input.
struct EvalTask {
  std::string task_id;
  ParallelCorpus corpus;  // sources in model form (indicators attached)
};

inline StageRow evaluate_stage(int stage, const std::string& task_id, const Transformer<float>& model,
                               const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                               const std::vector<EvalTask>& tasks, const DecodeConfig& cfg, int threads = 1) {
  StageRow row{stage, task_id, {}, {}};
  for (const auto& t : tasks) {
    if (t.corpus.empty()) throw InvalidArgument("evaluate_stage: missing test split for task " + t.task_id);
    row.scores.push_back(score_corpus(t.task_id, model, src_vocab, tgt_vocab, t.corpus, cfg, threads));
  }
  row.checkpoint_checksum = to_hex(model.checksum());
  return row;
}

/// Stage rows of one method, plus the final-row summary.
struct MethodReport {
  std::string label;
  std::vector<StageRow> stages;

  const StageRow& final_row() const {
    if (stages.empty()) throw InvalidArgument("method " + label + " has no completed stage");
    return stages.back();
  }
};

/// Catastrophic-forgetting report: per-task test BLEU after the last
/// completed stage of each method, BLEU-avg, and the difference to the
/// per-task single-model baseline.
struct CFReport {
  std::vector<std::string> task_ids;  // arrival order
  std::map<std::string, TaskScore> single;  // task -> single-model score
  std::vector<MethodReport> methods;

  /// Mean single-model BLEU over the tasks a row covers.
  std::optional<double> single_avg(const StageRow& row) const {
    if (row.scores.empty()) return std::nullopt;
    double s = 0.0;
    for (const auto& t : row.scores) {
      auto it = single.find(t.task_id);
      if (it == single.end()) return std::nullopt;
      s += it->second.bleu;
    }
    return s / static_cast<double>(row.scores.size());
  }

  std::optional<double> delta(const StageRow& row) const {
    const auto s = single_avg(row);
    if (!s) return std::nullopt;
    return row.bleu_avg() - *s;
  }

  const MethodReport* find(const std::string& label) const {
    for (const auto& m : methods) {
      if (m.label == label) return &m;
    }
    return nullptr;
  }
};

namespace detail {

inline std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string pad(const std::string& s, std::size_t w, bool right = true) {
  if (s.size() >= w) return s;
  return right ? std::string(w - s.size(), ' ') + s : s + std::string(w - s.size(), ' ');
}

}  // namespace detail

inline nlohmann::json report_json(const CFReport& r) {
  nlohmann::json j;
  j["tasks"] = r.task_ids;
  j["single"] = nlohmann::json::object();
  for (const auto& [task, s] : r.single) j["single"][task] = s;
  j["methods"] = nlohmann::json::array();
  for (const auto& m : r.methods) {
    nlohmann::json mj{{"label", m.label}, {"stages", m.stages}};
    if (!m.stages.empty()) {
      const auto& f = m.final_row();
      mj["final"] = {{"bleu_avg", f.bleu_avg()}};
      const auto d = r.delta(f);
      mj["final"]["delta_vs_single"] = d ? nlohmann::json(*d) : nlohmann::json(nullptr);
    }
    j["methods"].push_back(mj);
  }
  return j;
}

inline CFReport cf_report_from_json(const nlohmann::json& j) {
  CFReport r;
  r.task_ids = j.at("tasks").get<std::vector<std::string>>();
  for (const auto& [task, s] : j.at("single").items()) r.single[task] = s.get<TaskScore>();
  for (const auto& mj : j.at("methods")) {
    r.methods.push_back({mj.at("label").get<std::string>(), mj.at("stages").get<std::vector<StageRow>>()});
  }
  return r;
}

/// Aligned text table: one row per method with the final per-task BLEU,
/// BLEU-avg and delta, followed by each method's stage-by-stage scores.
inline std::string render_text(const CFReport& r) {
  using detail::fixed2;
  using detail::pad;
  std::size_t wl = 6;
  for (const auto& m : r.methods) wl = std::max(wl, m.label.size());
  for (const auto& t : r.task_ids) wl = std::max(wl, t.size() + 6);
  std::size_t wc = 8;
  for (const auto& t : r.task_ids) wc = std::max(wc, t.size());
  std::string out;
  auto header = [&] {
    std::string h = pad("method", wl, false);
    for (const auto& t : r.task_ids) h += "  " + pad(t, wc);
    h += "  " + pad("BLEU-avg", wc) + "  " + pad("delta", wc) + "\n";
    out += h;
    out += std::string(h.size() - 1, '-') + "\n";
  };
  auto row_line = [&](const std::string& label, const StageRow& row) {
    std::string line = pad(label, wl, false);
    for (const auto& t : r.task_ids) {
      const auto b = row.bleu_of(t);
      line += "  " + pad(b ? fixed2(*b) : "-", wc);
    }
    line += "  " + pad(fixed2(row.bleu_avg()), wc);
    const auto d = r.delta(row);
    line += "  " + pad(d ? (*d >= 0 ? "+" : "") + fixed2(*d) : "-", wc) + "\n";
    out += line;
  };

  out += "Final test BLEU\n";
  header();
  if (!r.single.empty()) {
    StageRow s{0, "", {}, {}};
    for (const auto& t : r.task_ids) {
      auto it = r.single.find(t);
      if (it != r.single.end()) s.scores.push_back(it->second);
    }
    row_line("single", s);
  }
  for (const auto& m : r.methods) {
    if (!m.stages.empty()) row_line(m.label, m.final_row());
  }
  for (const auto& m : r.methods) {
    out += "\nStages: " + m.label + "\n";
    header();
    for (const auto& st : m.stages) row_line("after " + st.task_id, st);
  }
  return out;
}

/// One per-epoch record of a training curve.
struct CurvePoint {
  std::string method;
  int stage = 0;
  int epoch = 0;
  std::string model = "forward";  // forward | reverse
  double train_loss = 0.0;
  std::vector<std::pair<std::string, double>> dev_bleu;  // arrival order

  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

inline nlohmann::json curve_json(const CurvePoint& p) {
  nlohmann::json dev = nlohmann::json::object();
  for (const auto& [t, b] : p.dev_bleu) dev[t] = b;
  nlohmann::json order = nlohmann::json::array();
  for (const auto& [t, b] : p.dev_bleu) order.push_back(t);
  return {{"method", p.method}, {"stage", p.stage}, {"epoch", p.epoch}, {"model", p.model},
          {"train_loss", p.train_loss}, {"tasks", order}, {"dev_bleu", dev}};
}

inline CurvePoint curve_point_from_json(const nlohmann::json& j) {
  CurvePoint p;
  p.method = j.at("method").get<std::string>();
  p.stage = j.at("stage").get<int>();
  p.epoch = j.at("epoch").get<int>();
  p.model = j.value("model", std::string("forward"));
  p.train_loss = j.at("train_loss").get<double>();
  for (const auto& t : j.at("tasks")) {
    const auto id = t.get<std::string>();
    p.dev_bleu.emplace_back(id, j.at("dev_bleu").at(id).get<double>());
  }
  return p;
}

/// Append-only JSON-lines curve file. Records must arrive in increasing
/// (stage, epoch) order per model; an existing file is continued.
class CurveLog {
 public:
  explicit CurveLog(std::filesystem::path path) : path_(std::move(path)) {
    for (const auto& p : read(path_)) last_[p.model] = {p.stage, p.epoch};
  }

  void append(const CurvePoint& p) {
    auto it = last_.find(p.model);
    if (it != last_.end() && std::pair{p.stage, p.epoch} <= it->second) {
      throw InvalidArgument("curve log: record (" + std::to_string(p.stage) + ", " + std::to_string(p.epoch) +
                            ") does not follow (" + std::to_string(it->second.first) + ", " +
                            std::to_string(it->second.second) + ")");
    }
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    out << curve_json(p).dump() << '\n';
    if (!out) throw IoError("cannot append to " + path_.string());
    last_[p.model] = {p.stage, p.epoch};
  }

  /// Drops records of stages >= `stage` (used when a stage is re-run).
  void truncate_from(int stage) {
    auto points = read(path_);
    std::ofstream out(path_, std::ios::binary | std::ios::trunc);
    last_.clear();
    for (const auto& p : points) {
      if (p.stage >= stage) continue;
      out << curve_json(p).dump() << '\n';
      last_[p.model] = {p.stage, p.epoch};
    }
  }

  static std::vector<CurvePoint> read(const std::filesystem::path& path) {
    std::vector<CurvePoint> out;
    std::ifstream in(path, std::ios::binary);
    if (!in) return out;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        out.push_back(curve_point_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed curve record in " + path.string() + ": " + e.what());
      }
    }
    return out;
  }

 private:
  std::filesystem::path path_;
  std::map<std::string, std::pair<int, int>> last_;
};

}  // namespace lnmt
