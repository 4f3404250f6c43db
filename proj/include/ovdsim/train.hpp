#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ovdsim/errors.hpp"
#include "ovdsim/eval.hpp"
#include "ovdsim/heads.hpp"
#include "ovdsim/rng.hpp"
#include "ovdsim/selftrain.hpp"
#include "ovdsim/synthworld.hpp"

namespace ovdsim {

/// Everything a run records besides the final parameters: per-iteration
/// losses, which iterations actually refreshed the teacher, and the
/// PL-quality curve (entry 0 is the initial teacher, entry k the state right
/// after the k-th applied update).
struct TrainHistory {
  std::vector<double> loss_total;
  std::vector<double> loss_open;
  std::vector<double> loss_closed;
  std::vector<int> applied_update_iters;
  std::vector<std::pair<int, double>> pl_quality;  // (update_index, ap50_novel)
};

inline nlohmann::ordered_json train_history_to_json(const TrainHistory& h) {
  nlohmann::ordered_json j;
  j["loss_total"] = h.loss_total;
  j["loss_open"] = h.loss_open;
  j["loss_closed"] = h.loss_closed;
  j["applied_update_iters"] = h.applied_update_iters;
  nlohmann::ordered_json series = nlohmann::ordered_json::array();
  for (const auto& [idx, q] : h.pl_quality) series.push_back({idx, q});
  j["pl_quality"] = series;
  return j;
}

inline void save_train_history(const std::string& path, const TrainHistory& h) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open history for writing: " + path);
  out << train_history_to_json(h).dump(2) << "\n";
  if (!out) throw ParseError("short write while saving history: " + path);
}

struct TrainResult {
  DetectorParams student;
  DetectorParams teacher;
  TrainHistory history;
};

/// Called after every optimizer step with the just-updated student.
using IterObserver = std::function<void(int iter, const DetectorParams& student)>;

/// The teacher–student loop. Teacher and student start from the same
/// identity-initialized parameters. Each iteration samples batch_scenes
/// training scenes (with replacement, from an iteration-keyed stream), lets
/// the current teacher produce pseudo labels, matches proposals with
/// asymmetric routing, takes one SGD step on both branch losses, then applies
/// the teacher-update strategy. External PLs (when given) replace the
/// teacher's own PLs for their scenes before the first applied update; with
/// external_whole_run the file is the sole PL source for the entire run and
/// scenes absent from it get none.
inline TrainResult train(const Dataset& ds, const TrainerConfig& cfg,
                         const ExternalPlTable* external = nullptr,
                         bool external_whole_run = false,
                         const IterObserver& observer = {}) {
  cfg.validate();
  const CategorySpace& space = ds.space;
  const int n_train = ds.splits.n_train;

  TrainResult result;
  result.student = DetectorParams::identity_init(space.dim());
  result.teacher = result.student;
  TrainHistory& history = result.history;

  history.pl_quality.emplace_back(
      0, evaluate_pl_quality(result.teacher, ds.pl_eval_records(), space, cfg,
                             PlPhase::PreFirstUpdate));

  bool first_update_applied = false;
  int update_count = 0;
  // Optional per-scene PL memo, valid only while the teacher is unchanged.
  std::map<int, std::vector<PseudoLabel>> pl_cache;

  for (int iter = 0; iter < cfg.total_iters; ++iter) {
    const PlPhase phase =
        first_update_applied ? PlPhase::PostUpdate : PlPhase::PreFirstUpdate;
    Rng batch_rng = stream_rng(cfg.seed, Stream::Batch, iter);

    MatchedBatch open_batch, closed_batch;
    for (int k = 0; k < cfg.batch_scenes; ++k) {
      const int scene_id = batch_rng.uniform_int(0, n_train - 1);
      const SceneRecord& rec = ds.records[scene_id];

      std::vector<PseudoLabel> pls;
      if (cfg.use_pls) {
        const bool inject =
            external && (external_whole_run || !first_update_applied);
        const std::vector<PseudoLabel>* injected =
            inject ? external->find(scene_id) : nullptr;
        if (injected) {
          pls = *injected;
        } else if (inject && external_whole_run) {
          // The file is the whole story: scenes it omits get no PLs.
        } else if (cfg.cache_pls) {
          auto it = pl_cache.find(scene_id);
          if (it == pl_cache.end())
            it = pl_cache
                     .emplace(scene_id, generate_pls(result.teacher, rec, space,
                                                     cfg, phase))
                     .first;
          pls = it->second;
        } else {
          pls = generate_pls(result.teacher, rec, space, cfg, phase);
        }
      }

      std::vector<SceneObject> base_gts;
      for (const SceneObject& obj : rec.scene.objects)
        if (space.is_base(obj.class_id)) base_gts.push_back(obj);

      MatchOutput matched = match_proposals(
          rec.proposals, rec.features, base_gts, pls, cfg.fg_iou, cfg.bg_iou,
          space.background_id, cfg.pseudo_boxes_to_regression);
      for (BatchEntry& e : matched.open_batch)
        open_batch.push_back(std::move(e));
      for (BatchEntry& e : matched.closed_batch)
        closed_batch.push_back(std::move(e));
    }

    ParamGrads grads = ParamGrads::zero(space.dim());
    const double l_closed =
        closed_branch_loss(closed_batch, result.student, space, grads);
    const double l_open =
        open_branch_loss(open_batch, result.student, space, grads);
    const double l_total = l_closed + l_open;
    if (!std::isfinite(l_total))
      throw DivergenceError("non-finite loss at iteration " +
                            std::to_string(iter));

    result.student = sgd_step(result.student, grads, cfg.lr_at(iter),
                              "iteration " + std::to_string(iter));
    if (observer) observer(iter, result.student);

    result.teacher =
        teacher_update(cfg.strategy, result.teacher, result.student, iter);
    if (cfg.strategy.applies_at(iter)) {
      first_update_applied = true;
      pl_cache.clear();
      ++update_count;
      history.applied_update_iters.push_back(iter);
      history.pl_quality.emplace_back(
          update_count,
          evaluate_pl_quality(result.teacher, ds.pl_eval_records(), space, cfg,
                              PlPhase::PostUpdate));
    }

    history.loss_total.push_back(l_total);
    history.loss_open.push_back(l_open);
    history.loss_closed.push_back(l_closed);
  }
  return result;
}

}  // namespace ovdsim
