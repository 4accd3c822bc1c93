// vqg: synth, train, eval, ground and gradcheck front end.
// Exit codes: 0 success, 1 validation error, 2 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "vqg/checks.hpp"
#include "vqg/errors.hpp"
#include "vqg/trainer.hpp"

namespace fs = std::filesystem;
using namespace vqg;

namespace {

constexpr double kGradTolerance = 1e-4;

Config config_or_default(const std::string& path) {
  return path.empty() ? Config{} : load_config(path);
}

// A synth output directory holds train/ and val/; anything else is taken as
// a dataset directory or manifest file.
fs::path split_manifest(const fs::path& data, const char* split) {
  if (fs::is_directory(data / split)) return resolve_manifest(data / split);
  return resolve_manifest(data);
}

std::vector<Instance> load_split(const std::string& data, const char* split,
                                 const Config& cfg) {
  const fs::path manifest = split_manifest(data, split);
  auto instances = load_dataset(manifest, cfg.data);
  std::cerr << "loaded " << instances.size() << " instances from " << manifest.string()
            << '\n';
  return instances;
}

int run_synth(const std::string& config_path, const std::string& out) {
  const Config cfg = config_or_default(config_path);
  SynthConfig train_cfg = cfg.synth;
  SynthConfig val_cfg = cfg.synth;
  val_cfg.instances = cfg.val_instances;
  val_cfg.seed = cfg.synth.seed + 0x9E3779B97F4A7C15ULL;
  const fs::path dir(out);
  save_dataset(dir / "train", synth_dataset(train_cfg, cfg.data, "train"));
  save_dataset(dir / "val", synth_dataset(val_cfg, cfg.data, "val"));
  std::cout << "wrote " << train_cfg.instances << " train and " << val_cfg.instances
            << " val instances to " << dir.string() << '\n';
  return 0;
}

int run_train(const std::string& data, const std::string& setting_name,
              const std::string& config_path, const std::string& out,
              std::string log_path) {
  const Config cfg = config_or_default(config_path);
  const SupervisionSetting setting = parse_setting(setting_name);
  const auto instances = load_split(data, "train", cfg);
  if (log_path.empty()) log_path = out + ".log.jsonl";
  if (const fs::path parent = fs::path(out).parent_path(); !parent.empty()) {
    fs::create_directories(parent);
  }
  std::ofstream log(log_path);
  if (!log) throw ValidationError(log_path + ": cannot open log for writing");

  TrainHooks hooks;
  hooks.checkpoint = fs::path(out);
  hooks.keep_step_logs = false;
  hooks.on_epoch = [&](const EpochLog& e) {
    const std::string line = to_json(e).dump();
    log << line << '\n' << std::flush;
    std::cout << line << '\n' << std::flush;
  };
  const TrainResult result = train(instances, setting, cfg.train, hooks);
  if (cfg.train.epochs == 0) result.params.save(out);
  std::cout << "checkpoint " << out << " (" << result.params.num_scalars()
            << " parameters), log " << log_path << '\n';
  return 0;
}

int run_eval(const std::string& data, const std::string& ckpt,
             const std::string& setting_name, const std::string& config_path,
             const std::string& report_path, const std::string& predictions_path) {
  const Config cfg = config_or_default(config_path);
  const SupervisionSetting setting = parse_setting(setting_name);
  const ModelParams params = ModelParams::load(ckpt);
  const auto instances = load_split(data, "val", cfg);
  const auto preds = infer(instances, params, setting, cfg.train);
  if (!predictions_path.empty()) write_predictions(predictions_path, preds);
  const EvalReport report = evaluate(to_eval_records(preds));
  std::ofstream out(report_path);
  if (!out) throw ValidationError(report_path + ": cannot open report for writing");
  out << std::setw(2) << to_json(report) << '\n';
  std::cout << format_table(report);
  return 0;
}

int run_ground(const std::string& traces_path, double alpha, bool no_refine,
               const std::string& scoring, const std::string& out_path) {
  WsqgConfig cfg;
  cfg.alpha = no_refine ? 0.0 : alpha;
  cfg.scoring = parse_scoring(scoring);
  cfg.validate();

  std::ifstream in(traces_path);
  if (!in) throw ValidationError(traces_path + ": cannot open traces");
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) throw ValidationError(out_path + ": cannot open output");
  }
  std::ostream& out = out_path.empty() ? std::cout : file;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = traces_path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() ||
        !j.contains("scores") || !j["scores"].is_array()) {
      throw ValidationError(where + ": expected {\"id\": string, \"scores\": [numbers]}");
    }
    std::vector<double> scores;
    for (const auto& v : j["scores"]) {
      if (!v.is_number() || !std::isfinite(v.get<double>())) {
        throw ValidationError(where + ": scores must be finite numbers");
      }
      scores.push_back(v.get<double>());
    }
    if (scores.empty()) throw ValidationError(where + ": empty trace");
    const Span s = ground(scores, cfg);
    out << nlohmann::json{{"id", j["id"]}, {"span", {s.st, s.ed}}}.dump() << '\n';
  }
  return 0;
}

int run_gradcheck(std::uint64_t seed, std::size_t seeds) {
  double worst = 0.0;
  std::size_t entries = 0;
  for (std::uint64_t s = seed; s < seed + seeds; ++s) {
    for (const auto& [name, report] : run_gradcheck_suite(s)) {
      if (seeds == 1) {
        std::printf("%-24s %5zu entries  max rel error %.3e\n", name.c_str(),
                    report.entries_checked, report.max_rel_error);
      }
      worst = std::max(worst, report.max_rel_error);
      entries += report.entries_checked;
    }
  }
  std::printf("%zu entries over %zu seed(s), max rel error %.3e (tolerance %.0e)\n",
              entries, seeds, worst, kGradTolerance);
  return worst <= kGradTolerance ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video QA with question grounding: synthetic data, training, evaluation"};
  app.require_subcommand(1);

  std::string config, out, data, setting, ckpt, report, predictions, traces, log;
  std::string scoring = "mean";
  double alpha = WsqgConfig{}.alpha;
  bool no_refine = false;
  std::uint64_t seed = 1;
  std::size_t seeds = 1;

  auto* synth = app.add_subcommand("synth", "Write a planted-span dataset (train/ and val/)");
  synth->add_option("--config", config, "Config file (key = value)");
  synth->add_option("--out", out, "Output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model, checkpointing every epoch");
  train_cmd->add_option("--data", data, "Dataset directory or manifest")->required();
  train_cmd->add_option("--setting", setting, "qa | qa+self | full | full+self")->required();
  train_cmd->add_option("--config", config, "Config file (key = value)");
  train_cmd->add_option("--out", out, "Checkpoint path")->required();
  train_cmd->add_option("--log", log, "Epoch log (JSON lines); default <out>.log.jsonl");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint and write a report");
  eval_cmd->add_option("--data", data, "Dataset directory or manifest")->required();
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--setting", setting, "qa | qa+self | full | full+self")->required();
  eval_cmd->add_option("--config", config, "Config file (key = value)");
  eval_cmd->add_option("--report", report, "Report JSON path")->required();
  eval_cmd->add_option("--predictions", predictions, "Per-instance predictions (JSON lines)");

  auto* ground_cmd = app.add_subcommand("ground", "Ground attention traces to spans");
  ground_cmd->add_option("--traces", traces, "JSON lines with id and scores")->required();
  ground_cmd->add_option("--alpha", alpha, "Length exponent for refinement")->required();
  ground_cmd->add_flag("--no-refine", no_refine, "Rank proposals by raw score");
  ground_cmd->add_option("--scoring", scoring, "mean | sum")
      ->check(CLI::IsMember({"mean", "sum"}));
  ground_cmd->add_option("--out", out, "Output path; default stdout");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and the model");
  grad_cmd->add_option("--seed", seed, "First seed");
  grad_cmd->add_option("--seeds", seeds, "Number of consecutive seeds")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) return run_synth(config, out);
    if (*train_cmd) return run_train(data, setting, config, out, log);
    if (*eval_cmd) return run_eval(data, ckpt, setting, config, report, predictions);
    if (*ground_cmd) return run_ground(traces, alpha, no_refine, scoring, out);
    if (*grad_cmd) return run_gradcheck(seed, seeds);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
