#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ovdsim/harness.hpp"

namespace {

using namespace ovdsim;

void print_report_summary(const RunOutputs& run) {
  auto fmt = [](const std::optional<double>& v) {
    return v ? std::to_string(*v) : std::string("n/a");
  };
  std::cout << "seed " << run.repeat_seed
            << ": ap50_novel=" << fmt(run.report.ap50_novel)
            << " ap50_base=" << fmt(run.report.ap50_base)
            << " ap50_all=" << fmt(run.report.ap50_all) << "\n";
}

void print_trend(const TrendReport& trend) {
  std::cout << "preset " << trend.preset << "\n";
  for (const VariantResult& v : trend.variants)
    std::cout << "  " << v.name << ": mean " << v.metric << " = " << v.mean
              << " (stddev " << v.stddev << ")\n";
  for (const TrendAssertion& a : trend.assertions)
    std::cout << "  assert " << a.lhs << " " << a.op << " " << a.rhs << " + "
              << a.margin << ": " << (a.passed ? "PASS" : "FAIL") << " ("
              << a.lhs_mean << " vs " << a.rhs_mean << ")\n";
}

int run_cli(int argc, char** argv) {
  CLI::App app{
      "Deterministic testbed for open-vocabulary detection self-training"};
  app.require_subcommand(1);

  std::string run_config, run_out;
  CLI::App* run_cmd = app.add_subcommand(
      "run", "Train and evaluate a config across its repeat seeds");
  run_cmd->add_option("--config", run_config, "Experiment config (JSON)")
      ->required();
  run_cmd->add_option("--out", run_out,
                      "Output directory (default: the config's output_dir)");

  std::string preset;
  std::vector<uint64_t> seeds;
  std::string ablate_out = "out";
  CLI::App* ablate_cmd = app.add_subcommand(
      "ablate", "Run an ablation preset and check its trend assertions");
  ablate_cmd
      ->add_option("--preset", preset,
                   "Preset name, or \"all\" for the full suite")
      ->required();
  ablate_cmd->add_option("--seeds", seeds, "Repeat seeds (comma separated)")
      ->delimiter(',');
  ablate_cmd->add_option("--out", ablate_out, "Output root directory");

  std::string eval_checkpoint, eval_config, eval_branch = "fused", eval_out;
  std::optional<double> eval_alpha;
  std::optional<uint64_t> eval_seed;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "Evaluate a checkpoint on a config's test split");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")
      ->required();
  eval_cmd->add_option("--config", eval_config, "Experiment config (JSON)")
      ->required();
  eval_cmd->add_option("--branch", eval_branch, "Scoring branch")
      ->check(CLI::IsMember({"fused", "open", "closed"}));
  eval_cmd->add_option("--alpha", eval_alpha, "Fusion weight override in [0,1]");
  eval_cmd->add_option("--seed", eval_seed,
                       "Repeat seed the checkpoint was trained under "
                       "(default: first repeat seed)");
  eval_cmd->add_option("--out", eval_out, "Write the report here as well");

  std::string exp_checkpoint, exp_config, exp_out, exp_phase = "updated";
  std::optional<uint64_t> exp_seed;
  CLI::App* export_cmd = app.add_subcommand(
      "export-pls", "Write a teacher's pseudo labels for every training scene");
  export_cmd->add_option("--checkpoint", exp_checkpoint, "Teacher checkpoint")
      ->required();
  export_cmd->add_option("--config", exp_config, "Experiment config (JSON)")
      ->required();
  export_cmd->add_option("--out", exp_out, "Output PL file (JSON lines)")
      ->required();
  export_cmd
      ->add_option("--phase", exp_phase,
                   "Scoring phase: initial keeps objectness averaging "
                   "(when the config enables it), updated does not")
      ->check(CLI::IsMember({"initial", "updated"}));
  export_cmd->add_option("--seed", exp_seed,
                         "Repeat seed the checkpoint was trained under "
                         "(default: first repeat seed)");

  std::string retrain_pls, retrain_config, retrain_out;
  CLI::App* retrain_cmd = app.add_subcommand(
      "retrain", "Train a fresh student on a fixed pseudo-label file");
  retrain_cmd->add_option("--pls", retrain_pls, "PL file (JSON lines)")
      ->required();
  retrain_cmd->add_option("--config", retrain_config, "Experiment config (JSON)")
      ->required();
  retrain_cmd->add_option("--out", retrain_out,
                          "Output directory (default: output_dir/retrain)");

  CLI11_PARSE(app, argc, argv);

  if (*run_cmd) {
    const ExperimentConfig cfg = load_config_file(run_config);
    const std::vector<RunOutputs> runs = run_experiment(cfg, run_out);
    for (const RunOutputs& run : runs) print_report_summary(run);
    return 0;
  }

  if (*ablate_cmd) {
    std::vector<std::string> presets;
    if (preset == "all")
      presets = ablation_preset_names();
    else
      presets.push_back(preset);
    DatasetCache cache;
    bool all_passed = true;
    for (const std::string& name : presets) {
      const TrendReport trend = run_ablation(name, seeds, ablate_out, &cache);
      print_trend(trend);
      all_passed = all_passed && trend.all_passed;
    }
    return all_passed ? 0 : 1;
  }

  if (*eval_cmd) {
    const ExperimentConfig cfg = load_config_file(eval_config);
    const uint64_t repeat = eval_seed.value_or(cfg.repeat_seeds.front());
    const ExperimentConfig run_cfg = with_repeat_seed(cfg, repeat);
    const Dataset ds = build_dataset(run_cfg.world, run_cfg.splits);
    const DetectorParams params = load_checkpoint(eval_checkpoint);
    if (params.dim() != ds.space.dim())
      throw ConfigError("checkpoint dimension does not match the config's world");

    EvalOptions options = run_cfg.eval;
    options.branch_mode = eval_branch == "open"     ? BranchMode::OpenOnly
                          : eval_branch == "closed" ? BranchMode::ClosedOnly
                                                    : BranchMode::Fused;
    if (eval_alpha) options.alpha = eval_alpha;
    const EvalReport report = evaluate_detector(
        params, ds.test_records(), ds.space, options, run_cfg.trainer.alpha,
        config_fingerprint(run_cfg.world, run_cfg.trainer));
    std::cout << eval_report_to_json(report).dump(2) << "\n";
    if (!eval_out.empty()) save_eval_report(eval_out, report);
    return 0;
  }

  if (*export_cmd) {
    const ExperimentConfig cfg = load_config_file(exp_config);
    const uint64_t repeat = exp_seed.value_or(cfg.repeat_seeds.front());
    const PlPhase phase = exp_phase == "initial" ? PlPhase::PreFirstUpdate
                                                 : PlPhase::PostUpdate;
    export_pls(exp_checkpoint, cfg, repeat, exp_out, phase);
    std::cout << "wrote " << exp_out << "\n";
    return 0;
  }

  if (*retrain_cmd) {
    const ExperimentConfig cfg = load_config_file(retrain_config);
    const std::string out_dir =
        retrain_out.empty() ? cfg.output_dir + "/retrain" : retrain_out;
    const RunOutputs run = retrain_from_pls(retrain_pls, cfg, out_dir);
    print_report_summary(run);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const ovdsim::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ovdsim::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const ovdsim::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
