#pragma once

#include <filesystem>
#include <fstream>
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
#include "lnmt/model/transformer.hpp"

namespace lnmt {

enum class DistillMethod { multilingual, direct, pseudo, reverse };

inline std::string to_string(DistillMethod m) {
  switch (m) {
    case DistillMethod::multilingual: return "multilingual";
    case DistillMethod::direct: return "direct";
    case DistillMethod::pseudo: return "pseudo";
    case DistillMethod::reverse: return "reverse";
  }
  return "?";
}

inline DistillMethod parse_distill_method(const std::string& s) {
  if (s == "multilingual") return DistillMethod::multilingual;
  if (s == "direct") return DistillMethod::direct;
  if (s == "pseudo") return DistillMethod::pseudo;
  if (s == "reverse") return DistillMethod::reverse;
  throw InvalidArgument("unknown distillation method '" + s + "'");
}

/// A frozen model together with the vocabularies it was trained with.
struct Teacher {
  const Transformer<float>* model = nullptr;
  const Vocabulary* src_vocab = nullptr;
  const Vocabulary* tgt_vocab = nullptr;

  std::uint64_t checksum() const { return model->checksum(); }
};

/// Teacher output for one previously learned language, in student form.
struct DistilledCorpus {
  ParallelCorpus corpus;
  std::string lang;  // the learned language this corpus rehearses
  DistillMethod method = DistillMethod::multilingual;
  std::string decode;  // decode mode label
  std::size_t dropped_empty = 0;
  double input_unk_rate = 0.0;         // teacher inputs, content tokens
  double input_unk_rate_shared = 0.0;  // pseudo mode: tokens on the shared rank range only
};

struct DistilledSet {
  std::vector<DistilledCorpus> forward;
  std::vector<ParallelCorpus> reverse;  // reverse-teacher method: (Y + <Y2X_i>, X_i hat)
  std::uint64_t teacher_checksum = 0;
  DecodeConfig decode;
  std::map<std::string, std::string> mappings;  // learned lang -> serialized rank mapping

  std::size_t pair_count() const {
    std::size_t n = 0;
    for (const auto& c : forward) n += c.corpus.size();
    return n;
  }
};

namespace detail {

/// Decodes every input with the teacher. Returns the content of each
/// hypothesis as a sentence in the teacher's target vocabulary.
inline std::vector<std::vector<Sentence>> teacher_translate(const Teacher& t, const std::vector<Sentence>& inputs,
                                                            const DecodeConfig& cfg, int threads) {
  std::vector<std::vector<TokenId>> ids;
  ids.reserve(inputs.size());
  for (const auto& s : inputs) ids.push_back(encode(s, *t.src_vocab));
  const auto hyps = decode_all(*t.model, ids, cfg, threads);
  std::vector<std::vector<Sentence>> out(hyps.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    for (const auto& h : hyps[i]) out[i].push_back(decode(h.content(), *t.tgt_vocab));
  }
  return out;
}

inline void require_indicator(const Teacher& t, const std::string& ind) {
  if (!t.src_vocab->find(ind)) throw InvalidArgument("unknown indicator " + ind + " for the teacher model");
}

/// Student pairs from teacher outputs. Empty outputs are dropped.
inline DistilledCorpus collect(const std::vector<Sentence>& student_src, const std::vector<Sentence>& fixed_tgt,
                               const std::vector<std::vector<Sentence>>& outputs, bool outputs_are_sources,
                               const std::string& src_lang, const std::string& tgt_lang, const DecodeConfig& cfg) {
  DistilledCorpus dc;
  dc.decode = cfg.label();
  dc.corpus = ParallelCorpus{src_lang, tgt_lang, {}, cfg.mode == DecodeMode::kbest ? 1.0 / cfg.k_best : 1.0};
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    for (const auto& o : outputs[i]) {
      if (o.tokens.empty()) {
        ++dc.dropped_empty;
        continue;
      }
      if (outputs_are_sources) {
        dc.corpus.pairs.push_back({o, fixed_tgt[i]});
      } else {
        dc.corpus.pairs.push_back({student_src[i], o});
      }
    }
  }
  return dc;
}

}  // namespace detail

/// One-to-many multilingual distillation. For each learned target language
/// the new task's sources are tagged with that language's indicator and
/// translated by the frozen teacher.
inline DistilledSet build_one2many_distill_set(const Teacher& teacher, const ParallelCorpus& new_task,
                                               const std::vector<std::string>& learned_tgt_langs,
                                               const DecodeConfig& cfg, int threads = 1) {
  cfg.validate();
  DistilledSet set;
  set.teacher_checksum = teacher.checksum();
  set.decode = cfg;
  for (const auto& lang : learned_tgt_langs) {
    std::vector<Sentence> inputs;
    inputs.reserve(new_task.size());
    for (const auto& p : new_task.pairs) inputs.push_back(add_indicator(strip_indicator(p.src), new_task.src_lang, lang));
    detail::require_indicator(teacher, *inputs.front().indicator);
    const auto outs = detail::teacher_translate(teacher, inputs, cfg, threads);
    auto dc = detail::collect(inputs, {}, outs, false, new_task.src_lang, lang, cfg);
    dc.lang = lang;
    dc.method = DistillMethod::multilingual;
    dc.input_unk_rate = unk_rate(inputs, *teacher.src_vocab);
    set.forward.push_back(std::move(dc));
  }
  return set;
}

enum class Many2OneMode { direct, pseudo };

/// Many-to-one distillation from the new language's sources.
///
/// direct: the new sources are fed to the teacher as they are, so almost
/// every token is UNK under the old vocabulary. The input does not depend on
/// the learned language, so a single corpus is produced.
///
/// pseudo: the sources are rewritten into each learned language with that
/// language's rank mapping before decoding.
inline DistilledSet build_many2one_distill_set(const Teacher& teacher, const ParallelCorpus& new_task,
                                               const std::vector<std::string>& learned_src_langs, Many2OneMode mode,
                                               const std::map<std::string, RankMapping>& mappings,
                                               const DecodeConfig& cfg, int threads = 1) {
  cfg.validate();
  DistilledSet set;
  set.teacher_checksum = teacher.checksum();
  set.decode = cfg;
  if (learned_src_langs.empty()) return set;
  std::vector<Sentence> sources;
  sources.reserve(new_task.size());
  for (const auto& p : new_task.pairs) sources.push_back(p.src);

  if (mode == Many2OneMode::direct) {
    const auto outs = detail::teacher_translate(teacher, sources, cfg, threads);
    auto dc = detail::collect(sources, {}, outs, false, new_task.src_lang, new_task.tgt_lang, cfg);
    dc.lang = new_task.src_lang;
    dc.method = DistillMethod::direct;
    dc.input_unk_rate = unk_rate(sources, *teacher.src_vocab);
    set.forward.push_back(std::move(dc));
    return set;
  }

  for (const auto& lang : learned_src_langs) {
    auto it = mappings.find(lang);
    if (it == mappings.end()) throw InvalidArgument("pseudo distillation: missing rank mapping to " + lang);
    const auto& m = it->second;
    std::vector<Sentence> pseudo;
    pseudo.reserve(sources.size());
    std::size_t shared_total = 0, shared_unk = 0;
    for (const auto& s : sources) {
      auto x = apply_mapping(s, m, s.indicator);
      for (std::size_t j = 0; j < s.tokens.size(); ++j) {
        const auto r = m.rank_of(s.tokens[j]);
        if (r && *r < m.shared_size()) {
          ++shared_total;
          shared_unk += teacher.src_vocab->id_or_unk(x.tokens[j]) == kUnkId;
        }
      }
      pseudo.push_back(std::move(x));
    }
    const auto outs = detail::teacher_translate(teacher, pseudo, cfg, threads);
    auto dc = detail::collect(pseudo, {}, outs, false, lang, new_task.tgt_lang, cfg);
    dc.lang = lang;
    dc.method = DistillMethod::pseudo;
    dc.input_unk_rate = unk_rate(pseudo, *teacher.src_vocab);
    dc.input_unk_rate_shared =
        shared_total == 0 ? 0.0 : static_cast<double>(shared_unk) / static_cast<double>(shared_total);
    set.forward.push_back(std::move(dc));
    set.mappings[lang] = m.serialize();
  }
  return set;
}

/// Reverse-teacher distillation. The reverse (one-to-many) teacher turns the
/// new task's authentic targets into sources of each learned language. Every
/// forward pair keeps the authentic target.
inline DistilledSet build_reverse_distill_set(const Teacher& reverse_teacher, const ParallelCorpus& new_task,
                                              const std::vector<std::string>& learned_src_langs,
                                              const DecodeConfig& cfg, int threads = 1) {
  cfg.validate();
  DistilledSet set;
  set.teacher_checksum = reverse_teacher.checksum();
  set.decode = cfg;
  std::vector<Sentence> targets;
  targets.reserve(new_task.size());
  for (const auto& p : new_task.pairs) targets.push_back(p.tgt);
  for (const auto& lang : learned_src_langs) {
    std::vector<Sentence> inputs;
    inputs.reserve(targets.size());
    for (const auto& y : targets) inputs.push_back(add_indicator(strip_indicator(y), new_task.tgt_lang, lang));
    detail::require_indicator(reverse_teacher, *inputs.front().indicator);
    const auto outs = detail::teacher_translate(reverse_teacher, inputs, cfg, threads);
    auto dc = detail::collect({}, targets, outs, true, lang, new_task.tgt_lang, cfg);
    dc.lang = lang;
    dc.method = DistillMethod::reverse;
    dc.input_unk_rate = unk_rate(inputs, *reverse_teacher.src_vocab);
    ParallelCorpus rev{new_task.tgt_lang, lang, {}, dc.corpus.weight};
    for (std::size_t i = 0; i < outs.size(); ++i) {
      for (const auto& o : outs[i]) {
        if (!o.tokens.empty()) rev.pairs.push_back({inputs[i], o});
      }
    }
    set.forward.push_back(std::move(dc));
    set.reverse.push_back(std::move(rev));
  }
  return set;
}

namespace detail {

inline std::string file_checksum(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return to_hex(fnv1a(bytes));
}

}  // namespace detail

/// Writes every corpus as a file pair plus `provenance.json` recording the
/// method, decode mode, teacher checksum and per-file checksums.
inline void save_distilled_set(const std::filesystem::path& dir, const DistilledSet& set) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json prov;
  prov["teacher_checksum"] = to_hex(set.teacher_checksum);
  prov["decode"] = set.decode;
  auto corpus_entry = [&](const ParallelCorpus& c, const std::string& prefix) {
    write_parallel(dir / prefix, c);
    const auto s = prefix + "." + c.src_lang;
    const auto t = prefix + "." + c.tgt_lang;
    return nlohmann::json{{"prefix", prefix},
                          {"src_lang", c.src_lang},
                          {"tgt_lang", c.tgt_lang},
                          {"weight", c.weight},
                          {"pairs", c.size()},
                          {"checksums", {{s, detail::file_checksum(dir / s)}, {t, detail::file_checksum(dir / t)}}}};
  };
  prov["forward"] = nlohmann::json::array();
  for (std::size_t i = 0; i < set.forward.size(); ++i) {
    const auto& dc = set.forward[i];
    auto e = corpus_entry(dc.corpus, "forward." + std::to_string(i));
    e["lang"] = dc.lang;
    e["method"] = to_string(dc.method);
    e["decode"] = dc.decode;
    e["dropped_empty"] = dc.dropped_empty;
    e["input_unk_rate"] = dc.input_unk_rate;
    e["input_unk_rate_shared"] = dc.input_unk_rate_shared;
    prov["forward"].push_back(e);
  }
  prov["reverse"] = nlohmann::json::array();
  for (std::size_t i = 0; i < set.reverse.size(); ++i) {
    prov["reverse"].push_back(corpus_entry(set.reverse[i], "reverse." + std::to_string(i)));
  }
  prov["mappings"] = nlohmann::json::object();
  for (const auto& [lang, text] : set.mappings) {
    const auto name = "mapping." + lang + ".tsv";
    std::ofstream out(dir / name, std::ios::binary);
    out << text;
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out.close();
    prov["mappings"][lang] = {{"file", name}, {"checksum", detail::file_checksum(dir / name)}};
  }
  std::ofstream out(dir / "provenance.json", std::ios::binary);
  out << prov.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + (dir / "provenance.json").string());
}

/// Reads a set written by `save_distilled_set`, verifying file checksums.
inline DistilledSet load_distilled_set(const std::filesystem::path& dir) {
  std::ifstream in(dir / "provenance.json", std::ios::binary);
  if (!in) throw IoError("cannot read " + (dir / "provenance.json").string());
  nlohmann::json prov;
  try {
    prov = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed provenance.json in " + dir.string() + ": " + e.what());
  }
  auto read_corpus = [&](const nlohmann::json& e) {
    for (const auto& [name, sum] : e.at("checksums").items()) {
      if (detail::file_checksum(dir / name) != sum.get<std::string>()) {
        throw IoError("checksum error: " + (dir / name).string() + " does not match provenance.json");
      }
    }
    auto c = read_parallel(dir / e.at("prefix").get<std::string>(), e.at("src_lang").get<std::string>(),
                           e.at("tgt_lang").get<std::string>());
    c.weight = e.at("weight").get<double>();
    return c;
  };
  DistilledSet set;
  set.teacher_checksum = std::stoull(prov.at("teacher_checksum").get<std::string>(), nullptr, 16);
  set.decode = prov.at("decode").get<DecodeConfig>();
  for (const auto& e : prov.at("forward")) {
    DistilledCorpus dc;
    dc.corpus = read_corpus(e);
    dc.lang = e.at("lang").get<std::string>();
    dc.method = parse_distill_method(e.at("method").get<std::string>());
    dc.decode = e.at("decode").get<std::string>();
    dc.dropped_empty = e.at("dropped_empty").get<std::size_t>();
    dc.input_unk_rate = e.at("input_unk_rate").get<double>();
    dc.input_unk_rate_shared = e.at("input_unk_rate_shared").get<double>();
    set.forward.push_back(std::move(dc));
  }
  for (const auto& e : prov.at("reverse")) set.reverse.push_back(read_corpus(e));
  for (const auto& [lang, e] : prov.at("mappings").items()) {
    const auto path = dir / e.at("file").get<std::string>();
    if (detail::file_checksum(path) != e.at("checksum").get<std::string>()) {
      throw IoError("checksum error: " + path.string() + " does not match provenance.json");
    }
    std::ifstream m(path, std::ios::binary);
    set.mappings[lang] = std::string((std::istreambuf_iterator<char>(m)), std::istreambuf_iterator<char>());
  }
  return set;
}

}  // namespace lnmt
