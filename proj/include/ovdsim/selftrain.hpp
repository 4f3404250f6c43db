#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ovdsim/embedspace.hpp"
#include "ovdsim/errors.hpp"
#include "ovdsim/geometry.hpp"
#include "ovdsim/heads.hpp"
#include "ovdsim/synthworld.hpp"

namespace ovdsim {

/// Teacher-predicted box + class + confidence used as supervision for the
/// student's open branch.
struct PseudoLabel {
  BoundingBox box;
  int class_id = 0;
  double score = 0.0;
};

/// How (and when) the teacher absorbs the student's parameters.
struct UpdateStrategy {
  enum class Kind { Periodic, Ema, NoUpdate, EveryIter };
  Kind kind = Kind::Periodic;
  std::vector<int> update_iters;  // Periodic only, strictly increasing
  double momentum = 0.999;        // Ema only

  static UpdateStrategy periodic(std::vector<int> iters) {
    UpdateStrategy s;
    s.kind = Kind::Periodic;
    s.update_iters = std::move(iters);
    return s;
  }
  static UpdateStrategy ema(double m) {
    UpdateStrategy s;
    s.kind = Kind::Ema;
    s.momentum = m;
    return s;
  }
  static UpdateStrategy no_update() {
    UpdateStrategy s;
    s.kind = Kind::NoUpdate;
    return s;
  }
  static UpdateStrategy every_iter() {
    UpdateStrategy s;
    s.kind = Kind::EveryIter;
    return s;
  }

  void validate(int total_iters) const {
    if (kind == Kind::Periodic) {
      for (size_t i = 0; i < update_iters.size(); ++i) {
        if (update_iters[i] < 0 || update_iters[i] >= total_iters)
          throw ConfigError("periodic update iteration outside the schedule");
        if (i > 0 && update_iters[i] <= update_iters[i - 1])
          throw ConfigError("periodic update iterations must be strictly increasing");
      }
    }
    if (kind == Kind::Ema && !(momentum >= 0.0 && momentum <= 1.0))
      throw ConfigError("ema momentum must lie in [0, 1]");
  }

  /// Whether the teacher actually changes at the end of this iteration
  /// (drives both cache invalidation and PL-quality recording).
  bool applies_at(int iter) const {
    switch (kind) {
      case Kind::Periodic:
        return std::binary_search(update_iters.begin(), update_iters.end(), iter);
      case Kind::Ema:
        return momentum < 1.0;
      case Kind::NoUpdate:
        return false;
      case Kind::EveryIter:
        return true;
    }
    return false;
  }
};

/// When the averaged score p_hat = (s_rpn + p)/2 replaces the raw teacher
/// score for PL selection.
enum class RpnScoreFusion { InitialPhase, Always, Never };

/// Whether the current teacher predates the first applied update. Controls
/// RPN-score fusion (InitialPhase mode) and external-PL injection.
enum class PlPhase { PreFirstUpdate, PostUpdate };

inline bool rpn_fusion_active(RpnScoreFusion mode, PlPhase phase) {
  switch (mode) {
    case RpnScoreFusion::InitialPhase:
      return phase == PlPhase::PreFirstUpdate;
    case RpnScoreFusion::Always:
      return true;
    case RpnScoreFusion::Never:
      return false;
  }
  return false;
}

struct TrainerConfig {
  int total_iters = 600;
  int batch_scenes = 8;
  // (start_iter, lr) pairs; the first entry must start at iteration 0.
  std::vector<std::pair<int, double>> lr_schedule = {{0, 0.5}, {420, 0.05},
                                                     {540, 0.005}};
  // PL confidence threshold. Values above 1 are legal and act as an "emit
  // nothing" sentinel (no score can reach them).
  double delta = 0.6;
  double fg_iou = 0.5;
  double bg_iou = 0.5;
  UpdateStrategy strategy = UpdateStrategy::periodic({240, 360, 480});
  bool use_pls = true;
  RpnScoreFusion rpn_score_fusion = RpnScoreFusion::InitialPhase;
  double pl_nms_thresh = 0.5;
  double alpha = 1.0 / 3.0;  // fusion weight, consumed at evaluation time
  int max_pls_per_scene = 15;
  uint64_t seed = 7;
  bool cache_pls = false;
  // Ablation knob: feed pseudo labels into the closed branch as if they were
  // ground truth (classification and box regression towards the PL box).
  bool pseudo_boxes_to_regression = false;

  void validate() const {
    if (total_iters < 1) throw ConfigError("trainer.total_iters must be >= 1");
    if (batch_scenes < 1) throw ConfigError("trainer.batch_scenes must be >= 1");
    if (lr_schedule.empty() || lr_schedule.front().first != 0)
      throw ConfigError("trainer.lr_schedule must start at iteration 0");
    for (size_t i = 0; i < lr_schedule.size(); ++i) {
      if (!(lr_schedule[i].second > 0.0) || !std::isfinite(lr_schedule[i].second))
        throw ConfigError("trainer.lr_schedule rates must be positive");
      if (i > 0 && lr_schedule[i].first <= lr_schedule[i - 1].first)
        throw ConfigError("trainer.lr_schedule iterations must increase");
    }
    if (!(delta > 0.0) || !std::isfinite(delta) || delta > 2.0)
      throw ConfigError("trainer.delta must lie in (0, 2]");
    if (!(0.0 < bg_iou && bg_iou <= fg_iou && fg_iou < 1.0))
      throw ConfigError("trainer thresholds must satisfy 0 < bg_iou <= fg_iou < 1");
    if (!(pl_nms_thresh > 0.0 && pl_nms_thresh < 1.0))
      throw ConfigError("trainer.pl_nms_thresh must lie in (0, 1)");
    if (!(alpha >= 0.0 && alpha <= 1.0))
      throw ConfigError("trainer.alpha must lie in [0, 1]");
    if (max_pls_per_scene < 0)
      throw ConfigError("trainer.max_pls_per_scene must be >= 0");
    strategy.validate(total_iters);
  }

  double lr_at(int iter) const {
    double lr = lr_schedule.front().second;
    for (const auto& [start, rate] : lr_schedule)
      if (start <= iter) lr = rate;
    return lr;
  }
};

/// Runs the teacher over one scene's frozen proposals/features and keeps
/// confident non-background predictions: open-branch scores (optionally
/// averaged with RPN objectness), boxes refined by the closed branch,
/// class-wise NMS, truncation to the per-scene cap.
inline std::vector<PseudoLabel> generate_pls(const DetectorParams& teacher,
                                             const SceneRecord& rec,
                                             const CategorySpace& space,
                                             const TrainerConfig& cfg,
                                             PlPhase phase) {
  const bool fuse_rpn = rpn_fusion_active(cfg.rpn_score_fusion, phase);
  std::vector<Detection> candidates;
  for (size_t i = 0; i < rec.proposals.size(); ++i) {
    const Proposal& prop = rec.proposals[i];
    const Eigen::VectorXd& f = rec.features[i];
    const ProbVector p_open = forward_open(f, teacher, space);

    // A proposal the teacher calls background is never a PL candidate.
    int raw_argmax = 0;
    p_open.maxCoeff(&raw_argmax);
    if (raw_argmax == space.background_id) continue;

    int best_class = -1;
    double best_score = -1.0;
    for (int c = 0; c < space.num_real(); ++c) {
      const double s = fuse_rpn ? 0.5 * (prop.objectness + p_open[c]) : p_open[c];
      if (s > best_score) {
        best_score = s;
        best_class = c;
      }
    }
    if (best_score < cfg.delta) continue;

    const auto [p_closed, deltas] = forward_closed(f, teacher, space);
    (void)p_closed;  // PL classification comes from the open branch only
    candidates.push_back(
        Detection{apply_deltas(prop.box, deltas), best_class, best_score});
  }

  std::vector<Detection> kept = nms(candidates, cfg.pl_nms_thresh);
  if (static_cast<int>(kept.size()) > cfg.max_pls_per_scene)
    kept.resize(cfg.max_pls_per_scene);  // nms output is already score-sorted

  std::vector<PseudoLabel> pls;
  pls.reserve(kept.size());
  for (const Detection& d : kept)
    pls.push_back(PseudoLabel{d.box, d.class_id, d.score});
  return pls;
}

/// Matched training examples for the two branches.
struct MatchOutput {
  MatchedBatch open_batch;
  MatchedBatch closed_batch;
};

/// IoU tie margin under which ground truth beats a pseudo label.
inline constexpr double kGtTieMargin = 1e-9;

/// Matches proposals to targets with asymmetric routing: the open batch
/// draws foreground from ground truth and pseudo labels, the closed batch
/// from ground truth alone — so pseudo labels can never perturb closed/box
/// training. Proposals in the (bg_iou, fg_iou) ignore band are dropped.
/// With pls_as_gt (an ablation knob) pseudo labels are handled exactly like
/// ground truth everywhere, including box regression towards the PL box.
inline MatchOutput match_proposals(const std::vector<Proposal>& proposals,
                                   const std::vector<Eigen::VectorXd>& features,
                                   const std::vector<SceneObject>& gts,
                                   const std::vector<PseudoLabel>& pls,
                                   double fg_iou, double bg_iou, int background_label,
                                   bool pls_as_gt = false) {
  MatchOutput out;
  const int background = background_label;

  for (size_t i = 0; i < proposals.size(); ++i) {
    const BoundingBox& pbox = proposals[i].box;

    double best_gt_iou = 0.0;
    int best_gt = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(pbox, gts[g].box);
      if (v > best_gt_iou) {
        best_gt_iou = v;
        best_gt = static_cast<int>(g);
      }
    }
    double best_pl_iou = 0.0;
    int best_pl = -1;
    for (size_t p = 0; p < pls.size(); ++p) {
      const double v = iou(pbox, pls[p].box);
      if (v > best_pl_iou) {
        best_pl_iou = v;
        best_pl = static_cast<int>(p);
      }
    }

    // Ground truth wins ties (within the margin) against pseudo labels.
    const bool pl_wins = best_pl >= 0 && best_pl_iou > best_gt_iou + kGtTieMargin;
    const double union_best = std::max(best_gt_iou, best_pl_iou);

    auto entry = [&](int label, SourceTag source,
                     std::optional<BoxDeltas> target) {
      BatchEntry e;
      e.feature = features[i];
      e.label = label;
      e.source = source;
      e.regression_target = std::move(target);
      return e;
    };

    // Open batch: foreground against the union of targets.
    if (union_best >= fg_iou) {
      if (pl_wins) {
        const PseudoLabel& pl = pls[best_pl];
        if (pls_as_gt) {
          out.open_batch.push_back(entry(pl.class_id, SourceTag::GT,
                                         encode_deltas(pbox, pl.box)));
        } else {
          out.open_batch.push_back(entry(pl.class_id, SourceTag::PL, std::nullopt));
        }
      } else {
        out.open_batch.push_back(entry(gts[best_gt].class_id, SourceTag::GT,
                                       encode_deltas(pbox, gts[best_gt].box)));
      }
    } else if (union_best < bg_iou) {
      out.open_batch.push_back(entry(background, SourceTag::BG, std::nullopt));
    }

    // Closed batch: pseudo labels are invisible here unless pls_as_gt.
    const double closed_best = pls_as_gt ? union_best : best_gt_iou;
    if (closed_best >= fg_iou) {
      if (pls_as_gt && pl_wins) {
        const PseudoLabel& pl = pls[best_pl];
        out.closed_batch.push_back(entry(pl.class_id, SourceTag::GT,
                                         encode_deltas(pbox, pl.box)));
      } else {
        out.closed_batch.push_back(entry(gts[best_gt].class_id, SourceTag::GT,
                                         encode_deltas(pbox, gts[best_gt].box)));
      }
    } else if (closed_best < bg_iou) {
      out.closed_batch.push_back(entry(background, SourceTag::BG, std::nullopt));
    }
  }
  return out;
}

/// New teacher parameters at the end of iteration `iter`.
inline DetectorParams teacher_update(const UpdateStrategy& strategy,
                                     const DetectorParams& teacher,
                                     const DetectorParams& student, int iter) {
  switch (strategy.kind) {
    case UpdateStrategy::Kind::Periodic:
      return strategy.applies_at(iter) ? student : teacher;
    case UpdateStrategy::Kind::Ema: {
      const double m = strategy.momentum;
      DetectorParams out = teacher;
      out.open.W = m * teacher.open.W + (1.0 - m) * student.open.W;
      out.closed.W = m * teacher.closed.W + (1.0 - m) * student.closed.W;
      out.box.R = m * teacher.box.R + (1.0 - m) * student.box.R;
      out.box.b = m * teacher.box.b + (1.0 - m) * student.box.b;
      return out;
    }
    case UpdateStrategy::Kind::NoUpdate:
      return teacher;
    case UpdateStrategy::Kind::EveryIter:
      return student;
  }
  return teacher;
}

// ---------------------------------------------------------------------------
// Pseudo-label files: one JSON record per line,
//   {"scene_id": N, "box": [x_min, y_min, x_max, y_max], "class_id": C,
//    "score": S}
// ---------------------------------------------------------------------------

/// Externally supplied PLs, keyed by scene. Injected records bypass both the
/// confidence threshold and PL NMS (external PLs arrive pre-filtered).
struct ExternalPlTable {
  std::map<int, std::vector<PseudoLabel>> by_scene;

  bool empty() const { return by_scene.empty(); }
  const std::vector<PseudoLabel>* find(int scene_id) const {
    auto it = by_scene.find(scene_id);
    return it == by_scene.end() ? nullptr : &it->second;
  }
};

inline void save_pls(const std::string& path,
                     const std::map<int, std::vector<PseudoLabel>>& by_scene) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open PL file for writing: " + path);
  for (const auto& [scene_id, pls] : by_scene) {
    for (const PseudoLabel& pl : pls) {
      nlohmann::ordered_json j;
      j["scene_id"] = scene_id;
      j["box"] = {pl.box.x_min, pl.box.y_min, pl.box.x_max, pl.box.y_max};
      j["class_id"] = pl.class_id;
      j["score"] = pl.score;
      out << j.dump() << "\n";
    }
  }
  if (!out) throw ParseError("short write while saving PL file: " + path);
}

/// Parses a PL file. `num_scenes` and `num_real_classes` bound the legal ids;
/// a record naming a scene outside the dataset is a load error.
inline ExternalPlTable load_external_pls(const std::string& path, int num_scenes,
                                         int num_real_classes) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open PL file: " + path);
  ExternalPlTable table;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed PL record: ") + e.what(), line_no);
    }
    if (!j.is_object() || !j.contains("scene_id") || !j.contains("box") ||
        !j.contains("class_id") || !j.contains("score"))
      throw ParseError("PL record missing required fields", line_no);
    if (!j["scene_id"].is_number_integer() || !j["class_id"].is_number_integer() ||
        !j["score"].is_number() || !j["box"].is_array() || j["box"].size() != 4)
      throw ParseError("PL record field has wrong type", line_no);

    const int scene_id = j["scene_id"].get<int>();
    if (scene_id < 0 || scene_id >= num_scenes)
      throw ParseError("PL record references unknown scene_id " +
                           std::to_string(scene_id),
                       line_no);
    PseudoLabel pl;
    pl.box = BoundingBox{j["box"][0].get<double>(), j["box"][1].get<double>(),
                         j["box"][2].get<double>(), j["box"][3].get<double>()};
    if (!pl.box.valid()) throw ParseError("PL record box is invalid", line_no);
    pl.class_id = j["class_id"].get<int>();
    if (pl.class_id < 0 || pl.class_id >= num_real_classes)
      throw ParseError("PL record class_id out of range", line_no);
    pl.score = j["score"].get<double>();
    if (!(pl.score > 0.0 && pl.score <= 1.0))
      throw ParseError("PL record score outside (0, 1]", line_no);
    table.by_scene[scene_id].push_back(pl);
  }
  return table;
}

}  // namespace ovdsim
