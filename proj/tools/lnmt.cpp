// Command-line driver for lifelong NMT experiments.
//
//   lnmt gen-synthetic --config exp.json
//   lnmt run --config exp.json [--method LABEL] [--resume] [--threads N]
//   lnmt evaluate --config exp.json [--method LABEL]
//   lnmt report --config exp.json | --out DIR
//   lnmt distill --config exp.json --method LABEL [STAGE]
//   lnmt inspect-checkpoint DIR
//
// Exit status: 0 on success, 2 for configuration or validation errors,
// 3 for failures while running.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lnmt/pipeline/run.hpp"

namespace fs = std::filesystem;
using namespace lnmt;
using namespace lnmt::pipeline;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr const char* kOutEnv = "LNMT_OUT_DIR";

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 0;
  std::string method;
  bool resume = false;
};

/// Output directory precedence: --out, then $LNMT_OUT_DIR, then the config.
ExperimentConfig load(const Common& c) {
  if (c.config.empty()) throw ConfigError("--config is required");
  nlohmann::json ov = nlohmann::json::object();
  if (c.seed) ov["seed"] = *c.seed;
  if (!c.out.empty()) {
    ov["output_dir"] = c.out;
  } else if (const char* env = std::getenv(kOutEnv); env && *env) {
    ov["output_dir"] = std::string(env);
  }
  if (c.threads > 0) ov["threads"] = c.threads;
  return load_config(c.config, ov);
}

const MethodDef& find_method(const ExperimentConfig& cfg, const std::string& label) {
  for (const auto& m : cfg.methods) {
    if (m.label == label) return m;
  }
  throw ConfigError("--method " + label + " is not in the config");
}

int cmd_gen(const Common& c) {
  const auto cfg = load(c);
  for (const auto& [id, made] : generate_tasks(cfg)) {
    std::cout << id << ": " << (made ? "generated " : "up to date ") << cfg.task_dir(id).string() << "\n";
  }
  return 0;
}

int cmd_run(const Common& c) {
  const auto cfg = load(c);
  RunOptions opts;
  opts.resume = c.resume;
  opts.log = &std::cerr;
  if (!c.method.empty()) opts.only_method = c.method;
  const auto report = run_experiment(cfg, opts);
  std::cout << render_text(report);
  return 0;
}

int cmd_evaluate(const Common& c) {
  const auto cfg = load(c);
  const auto tasks = load_tasks(cfg);
  nlohmann::json out = nlohmann::json::array();
  for (const auto& m : cfg.methods) {
    if (!c.method.empty() && m.label != c.method) continue;
    const int done = last_complete_stage(cfg, m);
    if (done == 0) {
      std::cerr << m.label << ": no completed stage\n";
      continue;
    }
    const auto st = load_state(stage_dir(cfg, m.label, done), tasks);
    const std::vector<TaskData> learned(tasks.begin(), tasks.begin() + done);
    const auto row = evaluate_state(st, learned, cfg.eval_decode, cfg.threads);
    out.push_back({{"method", m.label}, {"row", row}});
    std::cout << m.label << " after " << row.task_id << ":";
    for (const auto& s : row.scores) std::cout << " " << s.task_id << "=" << lnmt::detail::fixed2(s.bleu);
    std::cout << " avg=" << lnmt::detail::fixed2(row.bleu_avg()) << "\n";
  }
  if (!c.method.empty() && out.empty()) throw ConfigError("--method " + c.method + " has nothing to evaluate");
  pipeline::detail::write_text(cfg.output_dir / "report" / "evaluate.json", out.dump(2) + "\n");
  return 0;
}

int cmd_report(const Common& c) {
  CFReport r;
  fs::path out_dir;
  if (!c.config.empty()) {
    const auto cfg = load(c);
    out_dir = cfg.output_dir;
    r = collect_report(out_dir, task_ids(cfg), method_labels(cfg));
  } else {
    if (!c.out.empty()) {
      out_dir = c.out;
    } else if (const char* env = std::getenv(kOutEnv); env && *env) {
      out_dir = env;
    } else {
      throw ConfigError("report needs --config or --out");
    }
    r = collect_report(out_dir, {}, {});
  }
  write_report(out_dir, r);
  std::cout << render_text(r);
  return 0;
}

int cmd_distill(const Common& c, int stage) {
  const auto cfg = load(c);
  if (c.method.empty()) throw ConfigError("distill needs --method");
  const auto& m = find_method(cfg, c.method);
  if (stage < 2 || stage > static_cast<int>(cfg.tasks.size())) {
    throw ConfigError("stage must lie in [2, " + std::to_string(cfg.tasks.size()) + "]");
  }
  const auto prev = stage_dir(cfg, m.label, stage - 1);
  if (!fs::exists(prev / "stage.json")) {
    throw Error("stage " + std::to_string(stage - 1) + " of " + m.label + " has not been run (" + prev.string() + ")");
  }
  generate_tasks(cfg);
  const auto tasks = load_tasks(cfg);
  const auto st = load_state(prev, tasks);
  const auto set = distill_for_task(st, tasks[static_cast<std::size_t>(stage - 1)], cfg.learner(m));
  if (!set) throw ConfigError("method " + to_string(m.method) + " does not distill");
  const auto dir = cfg.output_dir / "distill" / m.label / ("stage_" + std::to_string(stage));
  fs::remove_all(dir);
  save_distilled_set(dir, *set);
  for (const auto& d : set->forward) {
    std::cout << d.lang << ": " << d.corpus.size() << " pairs (" << d.decode << "), dropped " << d.dropped_empty
              << ", input UNK " << lnmt::detail::fixed2(100.0 * d.input_unk_rate) << "%\n";
  }
  if (!set->reverse.empty()) {
    std::size_t n = 0;
    for (const auto& r : set->reverse) n += r.size();
    std::cout << "reverse pairs: " << n << "\n";
  }
  std::cout << "written to " << dir.string() << "\n";
  return 0;
}

int cmd_inspect(const std::string& dir) {
  const auto manifest = read_manifest(dir);
  const auto ck = load_checkpoint(dir);
  nlohmann::json j{{"format_version", manifest.at("format_version")},
                   {"config", ck.model.config()},
                   {"param_count", ck.model.param_count()},
                   {"param_checksum", to_hex(ck.model.checksum())},
                   {"src_vocab_size", ck.src_vocab.size()},
                   {"tgt_vocab_size", ck.tgt_vocab.size()},
                   {"has_optimizer", ck.opt.has_value()},
                   {"has_fisher", ck.fisher.has_value()}};
  if (ck.fisher) j["fisher_samples"] = ck.fisher->sample_count;
  if (!ck.extra.empty()) j["extra"] = ck.extra;
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lifelong neural machine translation experiments"};
  app.require_subcommand(1);
  Common c;
  int stage = 2;
  std::string ck_dir;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "experiment configuration (JSON)");
    sub->add_option("--seed", c.seed, "override the experiment seed");
    sub->add_option("--out", c.out, "output directory (overrides $LNMT_OUT_DIR and the config)");
    sub->add_option("--threads", c.threads, "decoding threads")->check(CLI::PositiveNumber);
  };
  auto* gen = app.add_subcommand("gen-synthetic", "write the synthetic task corpora");
  add_common(gen);
  auto* run = app.add_subcommand("run", "train every method over the task sequence");
  add_common(run);
  run->add_option("--method", c.method, "only run the method with this label");
  run->add_flag("--resume", c.resume, "continue after the last completed stage");
  auto* eval = app.add_subcommand("evaluate", "score the latest stage of each method on the test sets");
  add_common(eval);
  eval->add_option("--method", c.method, "only evaluate this method");
  auto* rep = app.add_subcommand("report", "rebuild the forgetting report from a run directory");
  add_common(rep);
  auto* dis = app.add_subcommand("distill", "build the distilled set for one stage and save it");
  add_common(dis);
  dis->add_option("--method", c.method, "method label")->required();
  dis->add_option("stage", stage, "stage whose distilled set to build");
  auto* insp = app.add_subcommand("inspect-checkpoint", "print a checkpoint summary");
  insp->add_option("dir", ck_dir, "checkpoint directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen(c);
    if (run->parsed()) return cmd_run(c);
    if (eval->parsed()) return cmd_evaluate(c);
    if (rep->parsed()) return cmd_report(c);
    if (dis->parsed()) return cmd_distill(c, stage);
    if (insp->parsed()) return cmd_inspect(ck_dir);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
