#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ovdsim/config.hpp"
#include "ovdsim/errors.hpp"
#include "ovdsim/eval.hpp"
#include "ovdsim/train.hpp"

namespace ovdsim {

/// Output verbosity, selected by the single environment variable
/// OVDSIM_VERBOSE (0 = quiet, 1 = progress lines on stderr).
inline int verbosity() {
  static const int level = [] {
    const char* v = std::getenv("OVDSIM_VERBOSE");
    return v ? std::atoi(v) : 0;
  }();
  return level;
}

inline void log_progress(const std::string& line) {
  if (verbosity() > 0) std::cerr << line << "\n";
}

/// The shipped desk-scale configuration every preset starts from.
inline ExperimentConfig reference_config() {
  ExperimentConfig c;
  c.world.confusion_pairs = {{0, 10, 0.85}, {1, 11, 0.8}};
  c.output_dir = "out/reference";
  return c;
}

/// Caches built datasets by (world, splits) so ablation variants that share a
/// world do not regenerate scenes and features.
class DatasetCache {
 public:
  const Dataset& get(const WorldConfig& world, const SplitSpec& splits) {
    nlohmann::ordered_json key_json;
    key_json["world"] = world_config_to_json(world);
    key_json["splits"] = split_spec_to_json(splits);
    const std::string key = key_json.dump();
    auto it = cache_.find(key);
    if (it == cache_.end())
      it = cache_.emplace(key, std::make_unique<Dataset>(build_dataset(world, splits)))
               .first;
    return *it->second;
  }

 private:
  std::map<std::string, std::unique_ptr<Dataset>> cache_;
};

/// Everything one seeded training run produces.
struct RunOutputs {
  uint64_t repeat_seed = 0;
  EvalReport report;
  TrainHistory history;
  DetectorParams student;
  DetectorParams teacher;
};

/// Trains and evaluates one already-seed-derived config against a built
/// dataset. The eval report carries the PL-quality curve of the run.
inline RunOutputs execute_run(const ExperimentConfig& run_cfg, const Dataset& ds,
                              uint64_t repeat_seed) {
  ExternalPlTable table;
  bool have_external = false;
  if (run_cfg.external_pls) {
    table = load_external_pls(*run_cfg.external_pls, ds.splits.total(),
                              ds.space.num_real());
    have_external = true;
  }

  RunOutputs out;
  out.repeat_seed = repeat_seed;
  TrainResult trained =
      train(ds, run_cfg.trainer, have_external ? &table : nullptr,
            run_cfg.external_pls_whole_run);
  out.student = std::move(trained.student);
  out.teacher = std::move(trained.teacher);
  out.history = std::move(trained.history);

  out.report = evaluate_detector(
      out.student, ds.test_records(), ds.space, run_cfg.eval,
      run_cfg.trainer.alpha, config_fingerprint(run_cfg.world, run_cfg.trainer));
  out.report.pl_quality_series = out.history.pl_quality;
  return out;
}

inline void write_run_files(const std::string& dir, const RunOutputs& run,
                            bool with_checkpoint = true) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string tag = "_seed" + std::to_string(run.repeat_seed);
  save_eval_report(dir + "/report" + tag + ".json", run.report);
  save_train_history(dir + "/history" + tag + ".json", run.history);
  save_pl_quality_csv(dir + "/pl_quality" + tag + ".csv", run.report);
  if (with_checkpoint)
    save_checkpoint(dir + "/checkpoint" + tag + ".ckpt", run.student);
}

/// Runs the config once per repeat seed, writing report/history/CSV/checkpoint
/// files into out_dir (default: the config's output_dir).
inline std::vector<RunOutputs> run_experiment(const ExperimentConfig& cfg,
                                              std::string out_dir = "",
                                              DatasetCache* cache = nullptr) {
  cfg.validate();
  if (out_dir.empty()) out_dir = cfg.output_dir;
  DatasetCache local_cache;
  DatasetCache& datasets = cache ? *cache : local_cache;

  std::filesystem::create_directories(out_dir);
  std::vector<RunOutputs> runs;
  for (uint64_t repeat : cfg.repeat_seeds) {
    const ExperimentConfig run_cfg = with_repeat_seed(cfg, repeat);
    const Dataset& ds = datasets.get(run_cfg.world, run_cfg.splits);
    log_progress("run seed=" + std::to_string(repeat));
    save_scenes(out_dir + "/scenes_seed" + std::to_string(repeat) + ".jsonl",
                ds.records);
    RunOutputs run = execute_run(run_cfg, ds, repeat);
    write_run_files(out_dir, run);
    runs.push_back(std::move(run));
  }
  return runs;
}

// ---------------------------------------------------------------------------
// Trend reports
// ---------------------------------------------------------------------------

struct VariantResult {
  std::string name;
  std::string metric;  // "ap50_novel" or "initial_pl_quality_novel"
  // One value per seed, in seed order. Report files keep APs in [0, 1];
  // trend values are on the 0-100 points scale so margins read in AP points.
  std::vector<double> values;
  double mean = 0.0;
  double stddev = 0.0;

  void finalize() {
    if (values.empty()) return;
    double sum = 0.0;
    for (double v : values) sum += v;
    mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
      double ss = 0.0;
      for (double v : values) ss += (v - mean) * (v - mean);
      stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
  }
};

/// One directional claim: mean(lhs) op mean(rhs) + margin, with op in
/// {">", ">="}. Margins follow the shipped policy: 1.0 AP point where the
/// corresponding published gap exceeds 3 points, 0.0 otherwise.
struct TrendAssertion {
  std::string lhs;
  std::string op;  // ">" or ">="
  std::string rhs;
  double margin = 0.0;
  double lhs_mean = 0.0;
  double rhs_mean = 0.0;
  bool passed = false;
};

struct TrendReport {
  std::string preset;
  std::vector<uint64_t> seeds;
  std::vector<VariantResult> variants;
  std::vector<TrendAssertion> assertions;
  bool all_passed = true;

  const VariantResult* find_variant(const std::string& name) const {
    for (const VariantResult& v : variants)
      if (v.name == name) return &v;
    return nullptr;
  }

  /// Evaluates one assertion from the stored per-seed numbers (so a report
  /// file alone is enough to re-check every claim offline).
  void add_assertion(const std::string& lhs, const std::string& op,
                     const std::string& rhs, double margin) {
    const VariantResult* l = find_variant(lhs);
    const VariantResult* r = find_variant(rhs);
    if (!l || !r)
      throw ConfigError("trend assertion references unknown variant " +
                        (l ? rhs : lhs));
    TrendAssertion a;
    a.lhs = lhs;
    a.op = op;
    a.rhs = rhs;
    a.margin = margin;
    a.lhs_mean = l->mean;
    a.rhs_mean = r->mean;
    a.passed = op == ">" ? a.lhs_mean > a.rhs_mean + margin
                         : a.lhs_mean >= a.rhs_mean + margin;
    all_passed = all_passed && a.passed;
    assertions.push_back(a);
  }
};

inline nlohmann::ordered_json trend_report_to_json(const TrendReport& t) {
  nlohmann::ordered_json j;
  j["preset"] = t.preset;
  j["seeds"] = t.seeds;
  nlohmann::ordered_json variants = nlohmann::ordered_json::array();
  for (const VariantResult& v : t.variants) {
    nlohmann::ordered_json vj;
    vj["name"] = v.name;
    vj["metric"] = v.metric;
    vj["values"] = v.values;
    vj["mean"] = v.mean;
    vj["stddev"] = v.stddev;
    variants.push_back(vj);
  }
  j["variants"] = variants;
  nlohmann::ordered_json asserts = nlohmann::ordered_json::array();
  for (const TrendAssertion& a : t.assertions) {
    nlohmann::ordered_json aj;
    aj["lhs"] = a.lhs;
    aj["op"] = a.op;
    aj["rhs"] = a.rhs;
    aj["margin"] = a.margin;
    aj["lhs_mean"] = a.lhs_mean;
    aj["rhs_mean"] = a.rhs_mean;
    aj["passed"] = a.passed;
    asserts.push_back(aj);
  }
  j["assertions"] = asserts;
  j["all_passed"] = t.all_passed;
  return j;
}

inline TrendReport trend_report_from_json(const nlohmann::json& j) {
  TrendReport t;
  t.preset = j.at("preset").get<std::string>();
  t.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  for (const auto& vj : j.at("variants")) {
    VariantResult v;
    v.name = vj.at("name").get<std::string>();
    v.metric = vj.at("metric").get<std::string>();
    v.values = vj.at("values").get<std::vector<double>>();
    v.mean = vj.at("mean").get<double>();
    v.stddev = vj.at("stddev").get<double>();
    t.variants.push_back(std::move(v));
  }
  for (const auto& aj : j.at("assertions")) {
    TrendAssertion a;
    a.lhs = aj.at("lhs").get<std::string>();
    a.op = aj.at("op").get<std::string>();
    a.rhs = aj.at("rhs").get<std::string>();
    a.margin = aj.at("margin").get<double>();
    a.lhs_mean = aj.at("lhs_mean").get<double>();
    a.rhs_mean = aj.at("rhs_mean").get<double>();
    a.passed = aj.at("passed").get<bool>();
    t.assertions.push_back(std::move(a));
  }
  t.all_passed = j.at("all_passed").get<bool>();
  return t;
}

inline void save_trend_report(const std::string& path, const TrendReport& t) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open trend report for writing: " + path);
  out << trend_report_to_json(t).dump(2) << "\n";
  if (!out) throw ParseError("short write while saving trend report: " + path);
}

inline TrendReport load_trend_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open trend report: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed trend report " + path + ": " + e.what());
  }
  return trend_report_from_json(j);
}

// ---------------------------------------------------------------------------
// Ablation presets
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& ablation_preset_names() {
  static const std::vector<std::string> names = {
      "saf_ablation",   "update_strategies", "num_updates",
      "rpn_variants",   "rpn_fusion",        "alpha_delta_sweep"};
  return names;
}

namespace detail {

/// Novel-category AP on the points scale trend margins are quoted in.
inline double novel_ap_points(const EvalReport& r) {
  return 100.0 * r.ap50_novel.value_or(0.0);
}

/// Runs one training config per seed and evaluates it under one or more
/// branch/alpha settings, reporting each as its own variant. Per-seed files
/// are written under <out_root>/<anchor variant name>/.
struct EvalSpec {
  std::string variant_name;
  BranchMode branch_mode = BranchMode::Fused;
  std::optional<double> alpha;
};

inline void run_training_group(const ExperimentConfig& cfg,
                               const std::vector<EvalSpec>& eval_specs,
                               const std::string& out_root, DatasetCache& cache,
                               TrendReport& trend) {
  std::vector<VariantResult> results(eval_specs.size());
  for (size_t e = 0; e < eval_specs.size(); ++e) {
    results[e].name = eval_specs[e].variant_name;
    results[e].metric = "ap50_novel";
  }

  const std::string anchor_dir = out_root + "/" + eval_specs.front().variant_name;
  for (uint64_t repeat : cfg.repeat_seeds) {
    const ExperimentConfig run_cfg = with_repeat_seed(cfg, repeat);
    const Dataset& ds = cache.get(run_cfg.world, run_cfg.splits);
    log_progress("[" + trend.preset + "] " + eval_specs.front().variant_name +
                 " seed=" + std::to_string(repeat));
    RunOutputs run = execute_run(run_cfg, ds, repeat);
    write_run_files(anchor_dir, run);

    for (size_t e = 0; e < eval_specs.size(); ++e) {
      EvalOptions options = run_cfg.eval;
      options.branch_mode = eval_specs[e].branch_mode;
      options.alpha = eval_specs[e].alpha ? eval_specs[e].alpha
                                          : run_cfg.eval.alpha;
      EvalReport report = run.report;
      if (e != 0) {
        report = evaluate_detector(
            run.student, ds.test_records(), ds.space, options,
            run_cfg.trainer.alpha,
            config_fingerprint(run_cfg.world, run_cfg.trainer));
        report.pl_quality_series = run.history.pl_quality;
        namespace fs = std::filesystem;
        const std::string dir = out_root + "/" + eval_specs[e].variant_name;
        fs::create_directories(dir);
        save_eval_report(
            dir + "/report_seed" + std::to_string(repeat) + ".json", report);
      }
      results[e].values.push_back(novel_ap_points(report));
    }
  }
  for (VariantResult& v : results) {
    v.finalize();
    trend.variants.push_back(std::move(v));
  }
}

}  // namespace detail

/// Runs one ablation preset over the given seeds (empty = the reference
/// seeds), writes per-run files plus <out_root>/<preset>/trend_report.json,
/// and returns the trend report with its ordering assertions evaluated.
inline TrendReport run_ablation(const std::string& preset,
                                std::vector<uint64_t> seeds,
                                const std::string& out_root_base,
                                DatasetCache* shared_cache = nullptr) {
  ExperimentConfig base = reference_config();
  if (!seeds.empty()) base.repeat_seeds = seeds;

  DatasetCache local_cache;
  DatasetCache& cache = shared_cache ? *shared_cache : local_cache;
  const std::string out_root = out_root_base + "/" + preset;
  std::filesystem::create_directories(out_root);

  TrendReport trend;
  trend.preset = preset;
  trend.seeds = base.repeat_seeds;

  if (preset == "saf_ablation") {
    // One training serves the three branch-mode readouts; the no-PL and
    // pseudo-box rows retrain with their single flag flipped.
    detail::run_training_group(base,
                               {{"fused", BranchMode::Fused, std::nullopt},
                                {"open_only", BranchMode::OpenOnly, std::nullopt},
                                {"closed_only", BranchMode::ClosedOnly, std::nullopt}},
                               out_root, cache, trend);
    ExperimentConfig no_pls = base;
    no_pls.trainer.use_pls = false;
    detail::run_training_group(no_pls, {{"no_pls", BranchMode::Fused, std::nullopt}},
                               out_root, cache, trend);
    ExperimentConfig pbir = base;
    pbir.trainer.pseudo_boxes_to_regression = true;
    detail::run_training_group(
        pbir, {{"pseudo_boxes_in_regression", BranchMode::Fused, std::nullopt}},
        out_root, cache, trend);

    trend.add_assertion("fused", ">", "open_only", 1.0);
    trend.add_assertion("open_only", ">=", "closed_only", 1.0);
    trend.add_assertion("fused", ">=", "no_pls", 1.0);
    trend.add_assertion("fused", ">", "pseudo_boxes_in_regression", 1.0);
  } else if (preset == "update_strategies") {
    detail::run_training_group(base, {{"periodic", BranchMode::Fused, std::nullopt}},
                               out_root, cache, trend);
    ExperimentConfig none = base;
    none.trainer.strategy = UpdateStrategy::no_update();
    detail::run_training_group(none, {{"none", BranchMode::Fused, std::nullopt}},
                               out_root, cache, trend);
    ExperimentConfig ema = base;
    ema.trainer.strategy = UpdateStrategy::ema(0.999);
    detail::run_training_group(ema, {{"ema", BranchMode::Fused, std::nullopt}},
                               out_root, cache, trend);
    ExperimentConfig every = base;
    every.trainer.strategy = UpdateStrategy::every_iter();
    detail::run_training_group(every,
                               {{"every_iter", BranchMode::Fused, std::nullopt}},
                               out_root, cache, trend);

    trend.add_assertion("periodic", ">", "ema", 1.0);
    trend.add_assertion("periodic", ">", "every_iter", 1.0);
    trend.add_assertion("periodic", ">=", "none", 0.0);
  } else if (preset == "num_updates") {
    // Update schedules mirror the published ladder as fractions of the run.
    const std::vector<std::pair<std::string, std::vector<int>>> rows = {
        {"updates_0", {}},
        {"updates_1", {300}},
        {"updates_2", {240, 480}},
        {"updates_3", {240, 360, 480}},
        {"updates_4", {120, 240, 360, 480}},
        {"updates_8", {60, 120, 180, 240, 300, 360, 420, 480}},
    };
    for (const auto& [name, iters] : rows) {
      ExperimentConfig cfg = base;
      cfg.trainer.strategy = iters.empty() ? UpdateStrategy::no_update()
                                           : UpdateStrategy::periodic(iters);
      detail::run_training_group(cfg, {{name, BranchMode::Fused, std::nullopt}},
                                 out_root, cache, trend);
    }
    trend.add_assertion("updates_3", ">=", "updates_0", 0.0);
    trend.add_assertion("updates_3", ">=", "updates_8", 1.0);
  } else if (preset == "rpn_variants") {
    detail::run_training_group(
        base, {{"coverage_all", BranchMode::Fused, std::nullopt}}, out_root,
        cache, trend);
    ExperimentConfig base_only = base;
    base_only.world.rpn_coverage = WorldConfig::RpnCoverage::BaseOnly;
    detail::run_training_group(
        base_only, {{"coverage_base_only", BranchMode::Fused, std::nullopt}},
        out_root, cache, trend);
    trend.add_assertion("coverage_all", ">=", "coverage_base_only", 0.0);
  } else if (preset == "rpn_fusion") {
    // No training: measures initial-teacher PL quality with and without the
    // objectness average.
    VariantResult with_fusion;
    with_fusion.name = "initial_fusion";
    with_fusion.metric = "initial_pl_quality_novel";
    VariantResult without;
    without.name = "no_fusion";
    without.metric = "initial_pl_quality_novel";
    for (uint64_t repeat : base.repeat_seeds) {
      const ExperimentConfig run_cfg = with_repeat_seed(base, repeat);
      const Dataset& ds = cache.get(run_cfg.world, run_cfg.splits);
      const DetectorParams teacher = DetectorParams::identity_init(ds.space.dim());

      TrainerConfig fused_cfg = run_cfg.trainer;
      fused_cfg.rpn_score_fusion = RpnScoreFusion::InitialPhase;
      with_fusion.values.push_back(
          100.0 * evaluate_pl_quality(teacher, ds.pl_eval_records(), ds.space,
                                      fused_cfg, PlPhase::PreFirstUpdate));
      TrainerConfig raw_cfg = run_cfg.trainer;
      raw_cfg.rpn_score_fusion = RpnScoreFusion::Never;
      without.values.push_back(
          100.0 * evaluate_pl_quality(teacher, ds.pl_eval_records(), ds.space,
                                      raw_cfg, PlPhase::PreFirstUpdate));
    }
    with_fusion.finalize();
    without.finalize();
    trend.variants.push_back(std::move(with_fusion));
    trend.variants.push_back(std::move(without));
    trend.add_assertion("initial_fusion", ">=", "no_fusion", 1.0);
  } else if (preset == "alpha_delta_sweep") {
    // The shipped hyperparameter sweep: delta is a training knob, alpha an
    // evaluation knob, so each delta run is read out at every alpha.
    const std::vector<double> deltas = {0.45, 0.6, 0.75};
    const std::vector<double> alphas = {0.0, 0.25, 1.0 / 3.0, 0.5, 1.0};
    auto fmt = [](double v) {
      std::string s = std::to_string(v);
      s.erase(s.find_last_not_of('0') + 1);
      if (!s.empty() && s.back() == '.') s.pop_back();
      for (char& ch : s)
        if (ch == '.') ch = 'p';
      return s;
    };
    for (double delta : deltas) {
      ExperimentConfig cfg = base;
      cfg.trainer.delta = delta;
      std::vector<detail::EvalSpec> specs;
      for (double alpha : alphas)
        specs.push_back({"delta_" + fmt(delta) + "_alpha_" + fmt(alpha),
                         BranchMode::Fused, alpha});
      detail::run_training_group(cfg, specs, out_root, cache, trend);
    }
  } else {
    throw ConfigError("unknown ablation preset \"" + preset + "\"");
  }

  save_trend_report(out_root + "/trend_report.json", trend);
  return trend;
}

// ---------------------------------------------------------------------------
// PL export / retraining
// ---------------------------------------------------------------------------

/// Writes the PLs a checkpointed teacher generates for every training scene.
/// The dataset is rebuilt from the config with the given repeat seed (the
/// checkpoint and the PL file are only meaningful against that world).
inline void export_pls(const std::string& checkpoint_path,
                       const ExperimentConfig& cfg, uint64_t repeat_seed,
                       const std::string& out_path, PlPhase phase) {
  const DetectorParams teacher = load_checkpoint(checkpoint_path);
  const ExperimentConfig run_cfg = with_repeat_seed(cfg, repeat_seed);
  const Dataset ds = build_dataset(run_cfg.world, run_cfg.splits);
  if (teacher.dim() != ds.space.dim())
    throw ConfigError("checkpoint dimension does not match the config's world");

  std::map<int, std::vector<PseudoLabel>> by_scene;
  for (const SceneRecord& rec : ds.train_records()) {
    std::vector<PseudoLabel> pls =
        generate_pls(teacher, rec, ds.space, run_cfg.trainer, phase);
    if (!pls.empty()) by_scene[rec.scene.scene_id] = std::move(pls);
  }
  save_pls(out_path, by_scene);
}

/// Trains a fresh student whose pseudo labels come exclusively from the given
/// file for the entire run (scenes absent from the file get none). Uses the
/// config's first repeat seed — a PL file is tied to one world.
inline RunOutputs retrain_from_pls(const std::string& pl_path,
                                   const ExperimentConfig& cfg,
                                   const std::string& out_dir) {
  const uint64_t repeat = cfg.repeat_seeds.front();
  ExperimentConfig run_cfg = with_repeat_seed(cfg, repeat);
  run_cfg.external_pls = pl_path;
  run_cfg.external_pls_whole_run = true;
  const Dataset ds = build_dataset(run_cfg.world, run_cfg.splits);
  RunOutputs run = execute_run(run_cfg, ds, repeat);
  if (!out_dir.empty()) write_run_files(out_dir, run);
  return run;
}

}  // namespace ovdsim
