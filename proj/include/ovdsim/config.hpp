#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ovdsim/errors.hpp"
#include "ovdsim/eval.hpp"
#include "ovdsim/rng.hpp"
#include "ovdsim/selftrain.hpp"
#include "ovdsim/synthworld.hpp"

namespace ovdsim {

/// One experiment: a world, a trainer, evaluation options, scene splits, and
/// the seeds the run is repeated over.
struct ExperimentConfig {
  WorldConfig world;
  TrainerConfig trainer;
  EvalOptions eval;
  SplitSpec splits;
  std::string output_dir = "out";
  std::vector<uint64_t> repeat_seeds = {1, 2, 3, 4, 5};
  // Optional PL injection (see train()): replaces teacher PLs for listed
  // scenes before the first update, or for the whole run when the flag is set.
  std::optional<std::string> external_pls;
  bool external_pls_whole_run = false;

  void validate() const {
    world.validate();
    trainer.validate();
    splits.validate();
    if (repeat_seeds.empty())
      throw ConfigError("repeat_seeds must contain at least one seed");
    if (eval.alpha && !(*eval.alpha >= 0.0 && *eval.alpha <= 1.0))
      throw ConfigError("eval.alpha must lie in [0, 1]");
    if (eval.nms.kind == NmsOptions::Kind::Hard) {
      if (!(eval.nms.iou_thresh > 0.0 && eval.nms.iou_thresh < 1.0))
        throw ConfigError("eval.nms.iou_thresh must lie in (0, 1)");
    } else {
      if (!(eval.nms.sigma > 0.0)) throw ConfigError("eval.nms.sigma must be > 0");
      if (!(eval.nms.score_floor >= 0.0 && eval.nms.score_floor < 1.0))
        throw ConfigError("eval.nms.score_floor must lie in [0, 1)");
    }
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  }
};

namespace detail {

/// Strict object reader: every key must be consumed, so a typo'd or unknown
/// field fails loudly instead of silently running a different experiment.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string scope)
      : j_(j), scope_(std::move(scope)) {
    if (!j_.is_object())
      throw ConfigError(scope_ + " must be a JSON object");
  }

  const nlohmann::json* find(const char* key) {
    consumed_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const nlohmann::json& require(const char* key) {
    const nlohmann::json* v = find(key);
    if (!v) throw ConfigError(scope_ + "." + key + " is required");
    return *v;
  }

  template <typename T>
  T require_as(const char* key) {
    try {
      return require(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(scope_ + "." + key + " has the wrong type");
    }
  }

  template <typename T>
  T get_or(const char* key, T fallback) {
    const nlohmann::json* v = find(key);
    if (!v || v->is_null()) return fallback;
    try {
      return v->get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(scope_ + "." + key + " has the wrong type");
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!consumed_.count(key))
        throw ConfigError("unknown field " + scope_ + "." + key);
  }

 private:
  const nlohmann::json& j_;
  std::string scope_;
  std::set<std::string> consumed_;
};

template <typename T>
T enum_from_string(const std::string& s,
                   std::initializer_list<std::pair<const char*, T>> table,
                   const std::string& scope) {
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw ConfigError(scope + " has unknown value \"" + s + "\"");
}

}  // namespace detail

// --- WorldConfig ------------------------------------------------------------

inline nlohmann::ordered_json world_config_to_json(const WorldConfig& w) {
  nlohmann::ordered_json j;
  j["n_base"] = w.n_base;
  j["n_novel"] = w.n_novel;
  j["dim"] = w.dim;
  j["objects_per_scene"] = {w.objects_min, w.objects_max};
  j["feature_noise_sigma"] = w.feature_noise_sigma;
  nlohmann::ordered_json pairs = nlohmann::ordered_json::array();
  for (const auto& [a, b, cos] : w.confusion_pairs) pairs.push_back({a, b, cos});
  j["confusion_pairs"] = pairs;
  j["rpn_jitter_sigma"] = w.rpn_jitter_sigma;
  j["rpn_distractors"] = w.rpn_distractors;
  j["rpn_coverage"] =
      w.rpn_coverage == WorldConfig::RpnCoverage::All ? "all" : "base_only";
  j["rpn_objectness_noise"] = w.rpn_objectness_noise;
  j["min_box_side"] = w.min_box_side;
  j["max_box_side"] = w.max_box_side;
  j["seed"] = w.seed;
  return j;
}

inline WorldConfig world_config_from_json(const nlohmann::json& j,
                                          const std::string& scope = "world") {
  detail::FieldReader r(j, scope);
  WorldConfig w;
  w.n_base = r.get_or("n_base", w.n_base);
  w.n_novel = r.get_or("n_novel", w.n_novel);
  w.dim = r.get_or("dim", w.dim);
  if (const nlohmann::json* range = r.find("objects_per_scene")) {
    if (!range->is_array() || range->size() != 2)
      throw ConfigError(scope + ".objects_per_scene must be [min, max]");
    w.objects_min = (*range)[0].get<int>();
    w.objects_max = (*range)[1].get<int>();
  }
  w.feature_noise_sigma = r.get_or("feature_noise_sigma", w.feature_noise_sigma);
  if (const nlohmann::json* pairs = r.find("confusion_pairs")) {
    w.confusion_pairs.clear();
    for (const auto& p : *pairs) {
      if (!p.is_array() || p.size() != 3)
        throw ConfigError(scope + ".confusion_pairs entries must be [a, b, cos]");
      w.confusion_pairs.emplace_back(p[0].get<int>(), p[1].get<int>(),
                                     p[2].get<double>());
    }
  }
  w.rpn_jitter_sigma = r.get_or("rpn_jitter_sigma", w.rpn_jitter_sigma);
  w.rpn_distractors = r.get_or("rpn_distractors", w.rpn_distractors);
  if (const nlohmann::json* cov = r.find("rpn_coverage"))
    w.rpn_coverage = detail::enum_from_string<WorldConfig::RpnCoverage>(
        cov->get<std::string>(),
        {{"all", WorldConfig::RpnCoverage::All},
         {"base_only", WorldConfig::RpnCoverage::BaseOnly}},
        scope + ".rpn_coverage");
  w.rpn_objectness_noise =
      r.get_or("rpn_objectness_noise", w.rpn_objectness_noise);
  w.min_box_side = r.get_or("min_box_side", w.min_box_side);
  w.max_box_side = r.get_or("max_box_side", w.max_box_side);
  w.seed = r.get_or("seed", w.seed);
  r.finish();
  return w;
}

// --- TrainerConfig ----------------------------------------------------------

inline nlohmann::ordered_json update_strategy_to_json(const UpdateStrategy& s) {
  nlohmann::ordered_json j;
  switch (s.kind) {
    case UpdateStrategy::Kind::Periodic:
      j["kind"] = "periodic";
      j["update_iters"] = s.update_iters;
      break;
    case UpdateStrategy::Kind::Ema:
      j["kind"] = "ema";
      j["momentum"] = s.momentum;
      break;
    case UpdateStrategy::Kind::NoUpdate:
      j["kind"] = "no_update";
      break;
    case UpdateStrategy::Kind::EveryIter:
      j["kind"] = "every_iter";
      break;
  }
  return j;
}

inline UpdateStrategy update_strategy_from_json(const nlohmann::json& j,
                                                const std::string& scope) {
  detail::FieldReader r(j, scope);
  const std::string kind = r.require_as<std::string>("kind");
  UpdateStrategy s;
  if (kind == "periodic") {
    s = UpdateStrategy::periodic(
        r.get_or<std::vector<int>>("update_iters", {240, 360, 480}));
  } else if (kind == "ema") {
    s = UpdateStrategy::ema(r.get_or("momentum", 0.999));
  } else if (kind == "no_update") {
    s = UpdateStrategy::no_update();
  } else if (kind == "every_iter") {
    s = UpdateStrategy::every_iter();
  } else {
    throw ConfigError(scope + ".kind has unknown value \"" + kind + "\"");
  }
  r.finish();
  return s;
}

inline nlohmann::ordered_json trainer_config_to_json(const TrainerConfig& t) {
  nlohmann::ordered_json j;
  j["total_iters"] = t.total_iters;
  j["batch_scenes"] = t.batch_scenes;
  nlohmann::ordered_json sched = nlohmann::ordered_json::array();
  for (const auto& [start, lr] : t.lr_schedule) sched.push_back({start, lr});
  j["lr_schedule"] = sched;
  j["delta"] = t.delta;
  j["fg_iou"] = t.fg_iou;
  j["bg_iou"] = t.bg_iou;
  j["strategy"] = update_strategy_to_json(t.strategy);
  j["use_pls"] = t.use_pls;
  switch (t.rpn_score_fusion) {
    case RpnScoreFusion::InitialPhase:
      j["rpn_score_fusion"] = "initial_phase";
      break;
    case RpnScoreFusion::Always:
      j["rpn_score_fusion"] = "always";
      break;
    case RpnScoreFusion::Never:
      j["rpn_score_fusion"] = "never";
      break;
  }
  j["pl_nms_thresh"] = t.pl_nms_thresh;
  j["alpha"] = t.alpha;
  j["max_pls_per_scene"] = t.max_pls_per_scene;
  j["seed"] = t.seed;
  j["cache_pls"] = t.cache_pls;
  j["pseudo_boxes_to_regression"] = t.pseudo_boxes_to_regression;
  return j;
}

inline TrainerConfig trainer_config_from_json(const nlohmann::json& j,
                                              const std::string& scope = "trainer") {
  detail::FieldReader r(j, scope);
  TrainerConfig t;
  t.total_iters = r.get_or("total_iters", t.total_iters);
  t.batch_scenes = r.get_or("batch_scenes", t.batch_scenes);
  if (const nlohmann::json* sched = r.find("lr_schedule")) {
    t.lr_schedule.clear();
    for (const auto& e : *sched) {
      if (!e.is_array() || e.size() != 2)
        throw ConfigError(scope + ".lr_schedule entries must be [start_iter, lr]");
      t.lr_schedule.emplace_back(e[0].get<int>(), e[1].get<double>());
    }
  }
  t.delta = r.get_or("delta", t.delta);
  t.fg_iou = r.get_or("fg_iou", t.fg_iou);
  t.bg_iou = r.get_or("bg_iou", t.bg_iou);
  if (const nlohmann::json* strat = r.find("strategy"))
    t.strategy = update_strategy_from_json(*strat, scope + ".strategy");
  t.use_pls = r.get_or("use_pls", t.use_pls);
  if (const nlohmann::json* fusion = r.find("rpn_score_fusion"))
    t.rpn_score_fusion = detail::enum_from_string<RpnScoreFusion>(
        fusion->get<std::string>(),
        {{"initial_phase", RpnScoreFusion::InitialPhase},
         {"always", RpnScoreFusion::Always},
         {"never", RpnScoreFusion::Never}},
        scope + ".rpn_score_fusion");
  t.pl_nms_thresh = r.get_or("pl_nms_thresh", t.pl_nms_thresh);
  t.alpha = r.get_or("alpha", t.alpha);
  t.max_pls_per_scene = r.get_or("max_pls_per_scene", t.max_pls_per_scene);
  t.seed = r.get_or("seed", t.seed);
  t.cache_pls = r.get_or("cache_pls", t.cache_pls);
  t.pseudo_boxes_to_regression =
      r.get_or("pseudo_boxes_to_regression", t.pseudo_boxes_to_regression);
  r.finish();
  return t;
}

// --- EvalOptions / SplitSpec -------------------------------------------------

inline nlohmann::ordered_json eval_options_to_json(const EvalOptions& e) {
  nlohmann::ordered_json j;
  switch (e.branch_mode) {
    case BranchMode::Fused:
      j["branch_mode"] = "fused";
      break;
    case BranchMode::OpenOnly:
      j["branch_mode"] = "open_only";
      break;
    case BranchMode::ClosedOnly:
      j["branch_mode"] = "closed_only";
      break;
  }
  j["alpha"] = e.alpha ? nlohmann::ordered_json(*e.alpha)
                       : nlohmann::ordered_json(nullptr);
  nlohmann::ordered_json nms;
  if (e.nms.kind == NmsOptions::Kind::Hard) {
    nms["kind"] = "hard";
    nms["iou_thresh"] = e.nms.iou_thresh;
  } else {
    nms["kind"] = "soft";
    nms["sigma"] = e.nms.sigma;
    nms["score_floor"] = e.nms.score_floor;
  }
  j["nms"] = nms;
  return j;
}

inline EvalOptions eval_options_from_json(const nlohmann::json& j,
                                          const std::string& scope = "eval") {
  detail::FieldReader r(j, scope);
  EvalOptions e;
  if (const nlohmann::json* mode = r.find("branch_mode"))
    e.branch_mode = detail::enum_from_string<BranchMode>(
        mode->get<std::string>(),
        {{"fused", BranchMode::Fused},
         {"open_only", BranchMode::OpenOnly},
         {"closed_only", BranchMode::ClosedOnly}},
        scope + ".branch_mode");
  if (const nlohmann::json* alpha = r.find("alpha"))
    if (!alpha->is_null()) e.alpha = alpha->get<double>();
  if (const nlohmann::json* nms = r.find("nms")) {
    detail::FieldReader rn(*nms, scope + ".nms");
    const std::string kind = rn.require_as<std::string>("kind");
    if (kind == "hard") {
      e.nms.kind = NmsOptions::Kind::Hard;
      e.nms.iou_thresh = rn.get_or("iou_thresh", e.nms.iou_thresh);
    } else if (kind == "soft") {
      e.nms.kind = NmsOptions::Kind::Soft;
      e.nms.sigma = rn.get_or("sigma", e.nms.sigma);
      e.nms.score_floor = rn.get_or("score_floor", e.nms.score_floor);
    } else {
      throw ConfigError(scope + ".nms.kind has unknown value \"" + kind + "\"");
    }
    rn.finish();
  }
  r.finish();
  return e;
}

inline nlohmann::ordered_json split_spec_to_json(const SplitSpec& s) {
  nlohmann::ordered_json j;
  j["train"] = s.n_train;
  j["pl_eval"] = s.n_pl_eval;
  j["test"] = s.n_test;
  return j;
}

inline SplitSpec split_spec_from_json(const nlohmann::json& j,
                                      const std::string& scope = "splits") {
  detail::FieldReader r(j, scope);
  SplitSpec s;
  s.n_train = r.get_or("train", s.n_train);
  s.n_pl_eval = r.get_or("pl_eval", s.n_pl_eval);
  s.n_test = r.get_or("test", s.n_test);
  r.finish();
  return s;
}

// --- ExperimentConfig ---------------------------------------------------------

inline nlohmann::ordered_json experiment_config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["world"] = world_config_to_json(c.world);
  j["trainer"] = trainer_config_to_json(c.trainer);
  j["eval"] = eval_options_to_json(c.eval);
  j["splits"] = split_spec_to_json(c.splits);
  j["output_dir"] = c.output_dir;
  j["repeat_seeds"] = c.repeat_seeds;
  j["external_pls"] = c.external_pls ? nlohmann::ordered_json(*c.external_pls)
                                     : nlohmann::ordered_json(nullptr);
  j["external_pls_whole_run"] = c.external_pls_whole_run;
  return j;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  detail::FieldReader r(j, "config");
  ExperimentConfig c;
  if (const nlohmann::json* world = r.find("world"))
    c.world = world_config_from_json(*world);
  if (const nlohmann::json* trainer = r.find("trainer"))
    c.trainer = trainer_config_from_json(*trainer);
  if (const nlohmann::json* eval = r.find("eval"))
    c.eval = eval_options_from_json(*eval);
  if (const nlohmann::json* splits = r.find("splits"))
    c.splits = split_spec_from_json(*splits);
  c.output_dir = r.get_or("output_dir", c.output_dir);
  c.repeat_seeds = r.get_or("repeat_seeds", c.repeat_seeds);
  if (const nlohmann::json* ext = r.find("external_pls"))
    if (!ext->is_null()) c.external_pls = ext->get<std::string>();
  c.external_pls_whole_run =
      r.get_or("external_pls_whole_run", c.external_pls_whole_run);
  r.finish();
  return c;
}

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  ExperimentConfig c = experiment_config_from_json(j);
  c.validate();
  return c;
}

/// FNV-1a hash of the canonical world+trainer serialization; identifies
/// which configuration produced a report.
inline std::string config_fingerprint(const WorldConfig& world,
                                      const TrainerConfig& trainer) {
  nlohmann::ordered_json j;
  j["world"] = world_config_to_json(world);
  j["trainer"] = trainer_config_to_json(trainer);
  const std::string s = j.dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

/// Per-repeat run derivation: the repeat seed is mixed (with distinct salts)
/// into both the world seed and the trainer seed, so every repeat sees a
/// fresh world and a fresh batch/PL stream.
inline ExperimentConfig with_repeat_seed(ExperimentConfig base, uint64_t repeat) {
  base.world.seed = splitmix64(base.world.seed ^ splitmix64(repeat ^ 0xa5a5a5a5a5a5a5a5ULL));
  base.trainer.seed =
      splitmix64(base.trainer.seed ^ splitmix64(repeat ^ 0x3c3c3c3c3c3c3c3cULL));
  base.repeat_seeds = {repeat};
  return base;
}

}  // namespace ovdsim
