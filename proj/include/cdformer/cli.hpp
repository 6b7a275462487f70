#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cdformer/ablation.hpp"
#include "cdformer/checkpoint.hpp"
#include "cdformer/episode_io.hpp"
#include "cdformer/gradcheck_suite.hpp"
#include "cdformer/harness.hpp"
#include "cdformer/report.hpp"

namespace cdformer {

namespace cli {

// Flags shared by the verbs that take a run configuration. Precedence:
// flags over the config file over built-in defaults.
struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> overrides;

  void attach(CLI::App& app) {
    app.add_option("-c,--config", config, "JSON configuration file");
    app.add_option("--seed", seed, "run seed (initialization and training stream)");
    app.add_option("-o,--out", out, "output directory");
    app.add_option("--set", overrides, "override a config key, e.g. --set model.dim=32")
        ->take_all();
  }

  void apply(RunConfig& run) const {
    for (const auto& o : overrides) apply_override(run, o);
    if (seed) run.seed = *seed;
    if (out) run.output_dir = *out;
    run.sync();
    run.validate();
  }

  RunConfig resolve() const {
    RunConfig run = config.empty() ? RunConfig{} : load_run_config(config);
    apply(run);
    return run;
  }
};

inline std::filesystem::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  return dir;
}

class LineWriter {
 public:
  LineWriter(const std::filesystem::path& path, bool append)
      : path_(path.string()),
        out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw IoError("cannot open '" + path_ + "' for writing");
  }
  void write(const nlohmann::json& j) {
    out_ << j.dump() << '\n';
    if (!out_) throw IoError("write to '" + path_ + "' failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

inline nlohmann::json loss_json(const StepLog& l) {
  return {{"step", l.step},         {"phase", l.phase},         {"cls", l.loss.cls},
          {"box", l.loss.box},      {"giou", l.loss.giou},      {"ood", l.loss.ood},
          {"total", l.loss.total}};
}

inline int cmd_gen(const RunFlags& flags, std::size_t count, const std::string& split_name,
                   std::ostream& out) {
  const RunConfig run = flags.resolve();
  Split split;
  if (split_name == "base") split = Split::kBase;
  else if (split_name == "novel") split = Split::kNovel;
  else throw ConfigError("unknown split '" + split_name + "' (base or novel)");
  const auto path = ensure_dir(run.output_dir) / ("episodes-" + split_name + ".cdfe");
  const std::string digest = write_episodes(run.benchmark, count, path.string(), split);
  out << nlohmann::json{{"event", "gen"}, {"path", path.string()}, {"count", count},
                        {"split", split_name}, {"manifest_digest", digest}}
             .dump()
      << "\nmanifest " << digest << "\n";
  return 0;
}

inline int cmd_train(const RunFlags& flags, const std::string& resume,
                     const std::string& variant, std::ostream& out) {
  Experiment x;
  if (!resume.empty()) {
    Checkpoint ck = load_checkpoint(resume);
    flags.apply(ck.config);
    x = Experiment::from_checkpoint(ck);
  } else {
    RunConfig run = flags.resolve();
    if (!variant.empty()) run.train.variant = variant;
    x = Experiment::create(run, parse_variant(run.train.variant));
  }
  const auto dir = ensure_dir(x.run.output_dir);
  write_file((dir / "config.json").string(), to_json(x.run).dump(2) + "\n");
  LineWriter metrics(dir / "metrics.jsonl", !resume.empty());
  const auto& t = x.run.train;
  const auto t0 = std::chrono::steady_clock::now();
  train_until(x, x.total_steps(), [&](const StepLog& l) {
    const auto row = loss_json(l);
    metrics.write(row);
    const std::uint64_t done = l.step + 1;
    if (t.log_interval > 0 && (done % t.log_interval == 0 || done == x.total_steps())) {
      out << row.dump() << std::endl;
    }
    if (t.checkpoint_interval > 0 && done % t.checkpoint_interval == 0) {
      // x.step is advanced after the callback returns.
      save_checkpoint((dir / ("checkpoint-" + std::to_string(done) + ".cdfk")).string(), x.run,
                      done, x.state, x.adam);
    }
  });
  const auto ck_path = dir / "checkpoint.cdfk";
  save_checkpoint(ck_path.string(), x.run, x.step, x.state, x.adam);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << nlohmann::json{{"event", "train_done"}, {"variant", variant_name(x.variant)},
                        {"steps", x.step}, {"checkpoint", ck_path.string()},
                        {"seconds", seconds}}
             .dump()
      << std::endl;
  return 0;
}

inline int cmd_eval(const RunFlags& flags, const std::string& checkpoint,
                    const std::string& episodes_path, std::optional<double> threshold,
                    std::ostream& out) {
  Checkpoint ck = load_checkpoint(checkpoint);
  flags.apply(ck.config);
  Experiment x = Experiment::from_checkpoint(ck);
  std::vector<Episode> episodes;
  if (episodes_path.empty()) {
    episodes = evaluation_episodes(x.run);
  } else {
    episodes = read_episodes(episodes_path).episodes;
  }
  const double thr = threshold.value_or(x.run.train.score_threshold);
  const auto summary = EvalSummary::from(evaluate(x.state, x.model, episodes, thr));
  const auto dir = ensure_dir(x.run.output_dir);
  const auto j = to_json(summary);
  write_file((dir / "report.json").string(), j.dump(2) + "\n");
  const std::string table = format_report(summary);
  write_file((dir / "report.txt").string(), table);
  out << nlohmann::json{{"event", "eval"}, {"episodes", episodes.size()},
                        {"map", summary.report.map}, {"map50", summary.report.map50},
                        {"report", (dir / "report.json").string()}}
             .dump()
      << "\n"
      << table;
  return 0;
}

inline std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(10) << "variant" << std::right << std::setw(10) << "mAP@.5"
     << std::setw(14) << "mAP@[.5:.95]" << std::setw(12) << "separation" << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(10) << variant_name(r.variant) << std::right << std::setw(10)
       << r.map50 << std::setw(14) << r.map << std::setw(12) << r.separation << "\n";
  }
  return os.str();
}

inline int cmd_ablate(const RunFlags& flags, std::vector<std::uint64_t> seeds,
                      std::ostream& out) {
  const RunConfig run = flags.resolve();
  if (seeds.empty()) seeds = {run.seed};
  nlohmann::json runs = nlohmann::json::array();
  const auto all = run_ablation(run, seeds, [&](const AblationRun& a) {
    nlohmann::json j{{"event", "ablation_run"}, {"variant", variant_name(a.variant)},
                     {"seed", a.seed},         {"map", a.map},
                     {"map50", a.map50},       {"separation", a.separation},
                     {"seconds", a.seconds}};
    out << j.dump() << std::endl;
    runs.push_back(j);
  });
  const auto rows = summarize_ablation(all);
  nlohmann::json table = nlohmann::json::array();
  for (const auto& r : rows) {
    table.push_back({{"variant", variant_name(r.variant)}, {"map", r.map}, {"map50", r.map50},
                     {"separation", r.separation}});
  }
  const auto dir = ensure_dir(run.output_dir);
  write_file((dir / "ablation.json").string(),
             nlohmann::json{{"seeds", seeds}, {"runs", runs}, {"table", table}}.dump(2) + "\n");
  out << format_ablation(rows);
  return 0;
}

inline int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out, std::ostream& err) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = run_gradcheck(opt);
  std::vector<std::string> failed;
  for (const auto& r : reports) {
    out << nlohmann::json{{"op", r.op},
                          {"max_rel_error", r.max_rel_error},
                          {"max_abs_error", r.max_abs_error},
                          {"rtol", r.rtol},
                          {"ok", r.ok}}
               .dump()
        << "\n";
    if (!r.ok) failed.push_back(r.op);
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << nlohmann::json{{"event", "gradcheck"}, {"ops", reports.size()},
                        {"failed", failed.size()}, {"seconds", seconds}}
             .dump()
      << std::endl;
  if (failed.empty()) return 0;
  for (const auto& op : failed) err << "gradient mismatch: " << op << "\n";
  return static_cast<int>(ExitCode::kNumeric);
}

}  // namespace cli

// Entry point shared by the executable and the tests. Returns the process
// exit code.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-domain few-shot detection with object-background distinguishing"};
  app.require_subcommand(1);

  cli::RunFlags gen_flags, train_flags, eval_flags, ablate_flags;
  std::size_t gen_count = 10;
  std::string gen_split = "novel";
  auto* gen = app.add_subcommand("gen", "write a benchmark episode file");
  gen_flags.attach(*gen);
  gen->add_option("-n,--count", gen_count, "number of episodes")->capture_default_str();
  gen->add_option("--split", gen_split, "base or novel")->capture_default_str();

  std::string train_resume, train_variant;
  auto* train = app.add_subcommand("train", "train one ablation variant");
  train_flags.attach(*train);
  train->add_option("--checkpoint", train_resume, "resume from this checkpoint");
  train->add_option("--variant", train_variant, "baseline, +OBD or full");

  std::string eval_checkpoint, eval_episodes;
  std::optional<double> eval_threshold;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_flags.attach(*eval);
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint to evaluate")->required();
  eval->add_option("--episodes", eval_episodes, "episode file (default: the config's novel set)");
  eval->add_option("--threshold", eval_threshold, "detection score threshold");

  std::vector<std::uint64_t> ablate_seeds;
  auto* ablate = app.add_subcommand("ablate", "train and compare baseline, +OBD and full");
  ablate_flags.attach(*ablate);
  ablate->add_option("--seeds", ablate_seeds, "comma-separated run seeds")->delimiter(',');

  GradcheckOptions gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  gradcheck->add_option("--seed", gc.seed, "input seed")->capture_default_str();
  gradcheck->add_option("--flip-sign", gc.sign_flip_op,
                        "test hook: negate the analytic gradient of this op");

  std::vector<const char*> argv{"cdformer"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*gen) return cli::cmd_gen(gen_flags, gen_count, gen_split, out);
    if (*train) return cli::cmd_train(train_flags, train_resume, train_variant, out);
    if (*eval) return cli::cmd_eval(eval_flags, eval_checkpoint, eval_episodes, eval_threshold, out);
    if (*ablate) return cli::cmd_ablate(ablate_flags, ablate_seeds, out);
    if (*gradcheck) return cli::cmd_gradcheck(gc, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kUsage);
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kIo);
  }
  return static_cast<int>(ExitCode::kUsage);
}

}  // namespace cdformer
