#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lnmt/core/error.hpp"
#include "lnmt/core/hash.hpp"
#include "lnmt/decode/decoder.hpp"
#include "lnmt/lifelong/ewc.hpp"
#include "lnmt/lifelong/learner.hpp"
#include "lnmt/lifelong/trainer.hpp"
#include "lnmt/model/config.hpp"
#include "lnmt/synth/synthetic.hpp"

namespace lnmt::pipeline {

struct LanguageDef {
  std::string id;
  bool rank_preserving = true;
  int reorder_period = 0;
  std::uint64_t seed = 0;
};

/// A task is either generated synthetically or read from `<path>/{train,dev,test}.<lang>`.
struct TaskDef {
  std::string id;
  std::string src;
  std::string tgt;
  std::optional<std::uint64_t> seed;       // synthetic
  std::optional<std::filesystem::path> path;  // corpus files
};

struct MethodDef {
  Method method = Method::finetune;
  std::string label;
  DecodeConfig distill_decode;
};

struct ExperimentConfig {
  std::string name;
  Scenario scenario = Scenario::one_to_many;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir;
  std::vector<MethodDef> methods;
  bool single_baseline = true;
  std::map<std::string, LanguageDef> languages;
  std::vector<TaskDef> tasks;
  synth::BaseCorpusSpec synthetic_corpus;
  synth::SplitSizes synthetic_sizes;
  ModelConfig model;
  TrainHyper train;
  DecodeConfig eval_decode;
  DecodeConfig distill_decode;
  DecodeConfig dev_decode{DecodeMode::greedy, 1, 1, 0.6, 64};
  EwcConfig ewc;
  std::size_t vocab_max = 1000;
  int threads = 1;
  nlohmann::json source;     // the document as read, before overrides
  nlohmann::json overrides = nlohmann::json::object();

  std::filesystem::path task_dir(const std::string& id) const {
    for (const auto& t : tasks) {
      if (t.id == id && t.path) return *t.path;
    }
    return output_dir / "tasks" / id;
  }

  LearnerConfig learner(const MethodDef& m) const {
    LearnerConfig c;
    c.model = model;
    c.train = train;
    c.distill_decode = m.distill_decode;
    c.dev_decode = dev_decode;
    c.ewc = ewc;
    c.vocab_max = vocab_max;
    c.threads = threads;
    c.seed = seed;
    return c;
  }

  synth::SyntheticTaskSpec synthetic_spec(const TaskDef& t) const {
    auto lang = [&](const std::string& id) {
      const auto& L = languages.at(id);
      return synth::make_language(L.id, synthetic_corpus.vocab_size, L.rank_preserving, L.reorder_period, L.seed);
    };
    synth::SyntheticTaskSpec s;
    s.task_id = t.id;
    s.src = lang(t.src);
    s.tgt = lang(t.tgt);
    s.sizes = synthetic_sizes;
    s.corpus = synthetic_corpus;
    s.seed = *t.seed;
    return s;
  }

  /// Everything that affects results, for resume compatibility checks.
  std::string fingerprint() const {
    nlohmann::json j = resolved();
    j.erase("output_dir");
    j.erase("threads");
    j.erase("methods");
    return to_hex(fnv1a(j.dump()));
  }

  nlohmann::json resolved() const;
};

namespace detail {

[[noreturn]] inline void fail(const std::string& field, const std::string& what) {
  throw ConfigError("config: " + field + ": " + what);
}

inline const nlohmann::json& require(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) fail(where.empty() ? key : where + "." + key, "missing required field");
  return j.at(key);
}

template <typename T>
T get_as(const nlohmann::json& j, const std::string& field) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(field, "has the wrong type");
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T def, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) return def;
  return get_as<T>(j.at(key), where.empty() ? key : where + "." + key);
}

/// Fields allowed at each level; anything else is rejected so typos surface.
inline void only_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) fail(where, "must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : keys) ok = ok || k == a;
    if (!ok) fail(where.empty() ? k : where + "." + k, "unknown field");
  }
}

template <typename T>
T parse_section(const nlohmann::json& j, const std::string& field) {
  try {
    return j.get<T>();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    fail(field, e.what());
  } catch (const nlohmann::json::exception& e) {
    fail(field, e.what());
  }
}

}  // namespace detail

inline nlohmann::json ExperimentConfig::resolved() const {
  nlohmann::json j;
  j["name"] = name;
  j["scenario"] = to_string(scenario);
  j["seed"] = seed;
  j["output_dir"] = output_dir.string();
  j["methods"] = nlohmann::json::array();
  for (const auto& m : methods) {
    j["methods"].push_back({{"method", to_string(m.method)}, {"label", m.label}, {"decode", m.distill_decode}});
  }
  j["single_baseline"] = single_baseline;
  j["languages"] = nlohmann::json::object();
  for (const auto& [id, L] : languages) {
    j["languages"][id] = {{"rank_preserving", L.rank_preserving}, {"reorder_period", L.reorder_period}, {"seed", L.seed}};
  }
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : tasks) {
    nlohmann::json tj{{"id", t.id}, {"src", t.src}, {"tgt", t.tgt}};
    if (t.seed) tj["seed"] = *t.seed;
    if (t.path) tj["path"] = t.path->string();
    j["tasks"].push_back(tj);
  }
  j["synthetic"] = {{"vocab_size", synthetic_corpus.vocab_size},
                    {"zipf_s", synthetic_corpus.zipf_s},
                    {"min_len", synthetic_corpus.min_len},
                    {"max_len", synthetic_corpus.max_len},
                    {"sizes",
                     {{"train", synthetic_sizes.train}, {"dev", synthetic_sizes.dev}, {"test", synthetic_sizes.test}}}};
  j["model"] = model;
  j["train"] = train;
  j["decode"] = {{"eval", eval_decode}, {"distill", distill_decode}, {"dev", dev_decode}};
  j["ewc"] = ewc;
  j["vocab_max"] = vocab_max;
  j["threads"] = threads;
  return j;
}

/// Parses and validates a configuration document. `base_dir` resolves
/// relative paths. Every error names the offending field.
inline ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using namespace detail;
  only_keys(j,
            {"name", "scenario", "seed", "output_dir", "methods", "single_baseline", "languages", "tasks", "synthetic",
             "model", "train", "decode", "ewc", "vocab_max", "threads", "$schema"},
            "");
  ExperimentConfig c;
  c.source = j;
  c.name = get_or<std::string>(j, "name", "experiment", "");
  c.scenario = [&] {
    try {
      return parse_scenario(get_as<std::string>(require(j, "scenario", ""), "scenario"));
    } catch (const ConfigError& e) {
      fail("scenario", e.what());
    }
  }();
  c.seed = get_as<std::uint64_t>(require(j, "seed", ""), "seed");
  c.output_dir = get_or<std::string>(j, "output_dir", "lnmt_out", "");
  if (c.output_dir.is_relative() && !base_dir.empty()) c.output_dir = base_dir / c.output_dir;
  c.single_baseline = get_or<bool>(j, "single_baseline", true, "");
  c.vocab_max = get_or<std::size_t>(j, "vocab_max", 1000, "");
  c.threads = get_or<int>(j, "threads", 1, "");
  if (c.threads < 1) fail("threads", "must be at least 1");
  if (c.vocab_max == 0) fail("vocab_max", "must be positive");

  if (j.contains("model")) c.model = parse_section<ModelConfig>(j.at("model"), "model");
  if (j.contains("train")) c.train = parse_section<TrainHyper>(j.at("train"), "train");
  if (c.train.epochs < 1) fail("train.epochs", "must be at least 1");
  if (c.train.batch_tokens < 1) fail("train.batch_tokens", "must be positive");
  if (j.contains("ewc")) c.ewc = parse_section<EwcConfig>(j.at("ewc"), "ewc");
  c.eval_decode.max_len = c.model.max_len;
  c.distill_decode.max_len = c.model.max_len;
  c.dev_decode.max_len = c.model.max_len;
  if (j.contains("decode")) {
    const auto& d = j.at("decode");
    only_keys(d, {"eval", "distill", "dev"}, "decode");
    auto section = [&](const char* key, DecodeConfig& into) {
      if (!d.contains(key)) return;
      nlohmann::json merged = into;
      merged.erase("beam_size");
      for (const auto& [k, v] : d.at(key).items()) merged[k] = v;
      into = parse_section<DecodeConfig>(merged, std::string("decode.") + key);
    };
    section("eval", c.eval_decode);
    section("distill", c.distill_decode);
    section("dev", c.dev_decode);
  }
  for (const auto& [name, dc] : {std::pair<const char*, DecodeConfig*>{"decode.eval", &c.eval_decode},
                                 {"decode.distill", &c.distill_decode},
                                 {"decode.dev", &c.dev_decode}}) {
    try {
      dc->validate();
    } catch (const Error& e) {
      fail(name, e.what());
    }
    if (dc->max_len > c.model.max_len) fail(std::string(name) + ".max_len", "exceeds model.max_len");
  }
  if (c.eval_decode.mode == DecodeMode::kbest) fail("decode.eval.mode", "k-best is only meaningful for distillation");
  try {
    c.model.validate();
  } catch (const Error& e) {
    fail("model", e.what());
  }

  // Synthetic corpus parameters.
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    only_keys(s, {"vocab_size", "zipf_s", "min_len", "max_len", "sizes"}, "synthetic");
    c.synthetic_corpus.vocab_size = get_or<std::size_t>(s, "vocab_size", 30, "synthetic");
    c.synthetic_corpus.zipf_s = get_or<double>(s, "zipf_s", 1.0, "synthetic");
    c.synthetic_corpus.min_len = get_or<int>(s, "min_len", 3, "synthetic");
    c.synthetic_corpus.max_len = get_or<int>(s, "max_len", 8, "synthetic");
    if (s.contains("sizes")) {
      const auto& z = s.at("sizes");
      only_keys(z, {"train", "dev", "test"}, "synthetic.sizes");
      c.synthetic_sizes.train = get_or<std::size_t>(z, "train", 2000, "synthetic.sizes");
      c.synthetic_sizes.dev = get_or<std::size_t>(z, "dev", 200, "synthetic.sizes");
      c.synthetic_sizes.test = get_or<std::size_t>(z, "test", 200, "synthetic.sizes");
    }
    try {
      c.synthetic_corpus.validate();
    } catch (const Error& e) {
      fail("synthetic", e.what());
    }
    // Sources gain an indicator and targets an EOS.
    if (c.synthetic_corpus.max_len + 1 > c.model.max_len) fail("synthetic.max_len", "exceeds model.max_len - 1");
  }

  // Languages.
  if (j.contains("languages")) {
    const auto& ls = j.at("languages");
    if (!ls.is_object()) fail("languages", "must be an object keyed by language id");
    for (const auto& [id, lj] : ls.items()) {
      const std::string where = "languages." + id;
      if (!is_valid_lang(id)) fail(where, "language ids use [a-z_] only");
      only_keys(lj, {"rank_preserving", "reorder_period", "seed"}, where);
      LanguageDef L{id, get_or<bool>(lj, "rank_preserving", true, where), get_or<int>(lj, "reorder_period", 0, where),
                    get_or<std::uint64_t>(lj, "seed", derive_seed(c.seed, "lang/" + id), where)};
      if (L.reorder_period < 0 || L.reorder_period == 1) fail(where + ".reorder_period", "must be 0 or >= 2");
      c.languages.emplace(id, L);
    }
  }

  // Tasks.
  const auto& tj = require(j, "tasks", "");
  if (!tj.is_array() || tj.empty()) fail("tasks", "must be a non-empty array");
  std::set<std::string> ids;
  for (std::size_t i = 0; i < tj.size(); ++i) {
    const std::string where = "tasks[" + std::to_string(i) + "]";
    const auto& t = tj[i];
    only_keys(t, {"id", "src", "tgt", "seed", "path"}, where);
    TaskDef d;
    d.id = get_as<std::string>(require(t, "id", where), where + ".id");
    d.src = get_as<std::string>(require(t, "src", where), where + ".src");
    d.tgt = get_as<std::string>(require(t, "tgt", where), where + ".tgt");
    if (!ids.insert(d.id).second) fail(where + ".id", "duplicate task id '" + d.id + "'");
    if (d.id.empty() || d.id.find('/') != std::string::npos) fail(where + ".id", "must be a plain name");
    if (!is_valid_lang(d.src) || !is_valid_lang(d.tgt)) fail(where, "language ids use [a-z_] only");
    if (d.src == d.tgt) fail(where, "source and target language coincide");
    if (t.contains("path")) {
      std::filesystem::path p = get_as<std::string>(t.at("path"), where + ".path");
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      for (const char* split : {"train", "dev", "test"}) {
        for (const auto* l : {&d.src, &d.tgt}) {
          const auto f = p / (std::string(split) + "." + *l);
          if (!std::filesystem::exists(f)) fail(where + ".path", "missing corpus file " + f.string());
        }
      }
      d.path = p;
    } else {
      d.seed = get_as<std::uint64_t>(require(t, "seed", where), where + ".seed");
      for (const auto* l : {&d.src, &d.tgt}) {
        if (!c.languages.count(*l)) fail(where, "synthetic task uses undeclared language '" + *l + "'");
      }
    }
    c.tasks.push_back(d);
  }
  // Scenario shape: one shared pivot, distinct other languages.
  std::set<std::string> others;
  for (std::size_t i = 0; i < c.tasks.size(); ++i) {
    const auto& t = c.tasks[i];
    const auto& pivot = c.scenario == Scenario::one_to_many ? t.src : t.tgt;
    const auto& first = c.scenario == Scenario::one_to_many ? c.tasks[0].src : c.tasks[0].tgt;
    const auto& other = c.scenario == Scenario::one_to_many ? t.tgt : t.src;
    const std::string where = "tasks[" + std::to_string(i) + "]";
    if (pivot != first) {
      fail(where, to_string(c.scenario) + " tasks must share the " +
                      (c.scenario == Scenario::one_to_many ? std::string("source") : std::string("target")) +
                      " language '" + first + "'");
    }
    if (!others.insert(other).second) fail(where, "language '" + other + "' appears in two tasks");
  }

  // Methods.
  const auto& mj = require(j, "methods", "");
  if (!mj.is_array() || mj.empty()) fail("methods", "must be a non-empty array");
  std::set<std::string> labels;
  for (std::size_t i = 0; i < mj.size(); ++i) {
    const std::string where = "methods[" + std::to_string(i) + "]";
    MethodDef m;
    m.distill_decode = c.distill_decode;
    std::string name;
    if (mj[i].is_string()) {
      name = mj[i].get<std::string>();
    } else {
      only_keys(mj[i], {"method", "label", "decode"}, where);
      name = get_as<std::string>(require(mj[i], "method", where), where + ".method");
      if (mj[i].contains("decode")) {
        nlohmann::json merged = c.distill_decode;
        merged.erase("beam_size");
        for (const auto& [k, v] : mj[i].at("decode").items()) merged[k] = v;
        m.distill_decode = parse_section<DecodeConfig>(merged, where + ".decode");
        try {
          m.distill_decode.validate();
        } catch (const Error& e) {
          fail(where + ".decode", e.what());
        }
        if (m.distill_decode.max_len > c.model.max_len) fail(where + ".decode.max_len", "exceeds model.max_len");
      }
    }
    try {
      m.method = parse_method(name);
    } catch (const ConfigError& e) {
      fail(where + ".method", e.what());
    }
    if (!compatible(c.scenario, m.method)) {
      fail(where, "method " + name + " is not available in the " + to_string(c.scenario) + " scenario");
    }
    m.label = mj[i].is_object() ? get_or<std::string>(mj[i], "label", name, where) : name;
    if (m.label.empty() || m.label == "single" || m.label.find('/') != std::string::npos) {
      fail(where + ".label", "'" + m.label + "' is not a usable label");
    }
    if (!labels.insert(m.label).second) fail(where + ".label", "duplicate label '" + m.label + "'");
    c.methods.push_back(m);
  }
  return c;
}

/// Reads a config file and applies top-level `overrides` (from the command
/// line) before validation. The overrides are kept for provenance.
inline ExperimentConfig load_config(const std::filesystem::path& path,
                                    const nlohmann::json& overrides = nlohmann::json::object()) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path.string() + " must be a JSON object");
  nlohmann::json merged = j;
  for (const auto& [k, v] : overrides.items()) merged[k] = v;
  auto c = parse_config(merged, path.parent_path());
  // Command-line paths are relative to the working directory, not the file.
  if (overrides.contains("output_dir")) c.output_dir = overrides.at("output_dir").get<std::string>();
  c.source = j;
  c.overrides = overrides;
  return c;
}

}  // namespace lnmt::pipeline
