#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ovdsim/embedspace.hpp"
#include "ovdsim/errors.hpp"
#include "ovdsim/geometry.hpp"
#include "ovdsim/heads.hpp"
#include "ovdsim/selftrain.hpp"
#include "ovdsim/synthworld.hpp"

namespace ovdsim {

/// A detection tagged with the scene it came from (AP matches detections to
/// ground truth within the same scene only).
struct SceneDetection {
  int scene_id = 0;
  Detection det;
};

/// All-point-interpolated average precision for ONE class.
///
/// Detections are ranked by score (ties: lower scene_id, then box coordinates
/// lexicographically) and matched greedily: each detection takes the highest-
/// IoU not-yet-matched ground-truth box of its scene (ties: lower GT index)
/// and is a true positive iff that IoU >= iou_thresh. AP is the area under
/// the precision envelope over recall, accumulated in rank order as
/// envelope[i]/n_gt per true positive — the convention the brute-force test
/// oracle mirrors exactly.
///
/// Zero GT: defined as 1 with no detections (callers skip such classes when
/// averaging) and 0 when spurious detections exist.
inline double average_precision(
    std::vector<SceneDetection> dets,
    const std::unordered_map<int, std::vector<BoundingBox>>& gts_by_scene,
    double iou_thresh) {
  size_t n_gt = 0;
  for (const auto& [scene_id, boxes] : gts_by_scene) n_gt += boxes.size();
  if (n_gt == 0) return dets.empty() ? 1.0 : 0.0;
  if (dets.empty()) return 0.0;

  std::sort(dets.begin(), dets.end(),
            [](const SceneDetection& a, const SceneDetection& b) {
              if (a.det.score != b.det.score) return a.det.score > b.det.score;
              if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
              const auto key = [](const SceneDetection& d) {
                return std::tuple(d.det.box.x_min, d.det.box.y_min,
                                  d.det.box.x_max, d.det.box.y_max);
              };
              return key(a) < key(b);
            });

  std::unordered_map<int, std::vector<char>> matched;
  for (const auto& [scene_id, boxes] : gts_by_scene)
    matched[scene_id].assign(boxes.size(), 0);

  const size_t n = dets.size();
  std::vector<char> tp(n, 0);
  for (size_t i = 0; i < n; ++i) {
    auto it = gts_by_scene.find(dets[i].scene_id);
    if (it == gts_by_scene.end()) continue;
    const std::vector<BoundingBox>& boxes = it->second;
    std::vector<char>& used = matched[dets[i].scene_id];
    double best_iou = 0.0;
    int best_g = -1;
    for (size_t g = 0; g < boxes.size(); ++g) {
      if (used[g]) continue;
      const double v = iou(dets[i].det.box, boxes[g]);
      if (v > best_iou) {
        best_iou = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0 && best_iou >= iou_thresh) {
      tp[i] = 1;
      used[best_g] = 1;
    }
  }

  std::vector<double> precision(n);
  size_t cum_tp = 0;
  for (size_t i = 0; i < n; ++i) {
    cum_tp += tp[i];
    precision[i] = static_cast<double>(cum_tp) / static_cast<double>(i + 1);
  }
  for (size_t i = n - 1; i-- > 0;)
    precision[i] = std::max(precision[i], precision[i + 1]);

  double ap = 0.0;
  for (size_t i = 0; i < n; ++i)
    if (tp[i]) ap += precision[i] / static_cast<double>(n_gt);
  return ap;
}

/// Which score vector ranks detections at inference.
enum class BranchMode { Fused, OpenOnly, ClosedOnly };

struct NmsOptions {
  enum class Kind { Hard, Soft } kind = Kind::Soft;
  double iou_thresh = 0.5;     // hard
  double sigma = 0.5;          // soft
  double score_floor = 0.001;  // soft
};

struct EvalOptions {
  BranchMode branch_mode = BranchMode::Fused;
  // Fusion weight; when unset the trainer's alpha is used.
  std::optional<double> alpha;
  NmsOptions nms;
};

/// Aggregated evaluation result. Group APs are absent ("skipped") when no
/// class of that group has ground truth in the evaluated scenes.
struct EvalReport {
  std::optional<double> ap50_novel;
  std::optional<double> ap50_base;
  std::optional<double> ap50_all;
  std::map<int, double> per_class_ap;  // classes with ground truth only
  int n_scenes = 0;
  std::string config_fingerprint;
  std::vector<std::pair<int, double>> pl_quality_series;  // (update_index, ap)
};

namespace detail {

inline nlohmann::ordered_json optional_to_json(const std::optional<double>& v) {
  if (v) return *v;
  return nullptr;
}

inline std::optional<double> optional_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace detail

inline nlohmann::ordered_json eval_report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["config_fingerprint"] = r.config_fingerprint;
  j["n_scenes"] = r.n_scenes;
  j["ap50_novel"] = detail::optional_to_json(r.ap50_novel);
  j["ap50_base"] = detail::optional_to_json(r.ap50_base);
  j["ap50_all"] = detail::optional_to_json(r.ap50_all);
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  for (const auto& [c, ap] : r.per_class_ap) per_class[std::to_string(c)] = ap;
  j["per_class_ap"] = per_class;
  nlohmann::ordered_json series = nlohmann::ordered_json::array();
  for (const auto& [idx, q] : r.pl_quality_series) series.push_back({idx, q});
  j["pl_quality_series"] = series;
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
  r.n_scenes = j.at("n_scenes").get<int>();
  r.ap50_novel = detail::optional_from_json(j.at("ap50_novel"));
  r.ap50_base = detail::optional_from_json(j.at("ap50_base"));
  r.ap50_all = detail::optional_from_json(j.at("ap50_all"));
  for (const auto& [key, val] : j.at("per_class_ap").items())
    r.per_class_ap[std::stoi(key)] = val.get<double>();
  for (const auto& entry : j.at("pl_quality_series"))
    r.pl_quality_series.emplace_back(entry[0].get<int>(), entry[1].get<double>());
  return r;
}

inline void save_eval_report(const std::string& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open report for writing: " + path);
  out << eval_report_to_json(r).dump(2) << "\n";
  if (!out) throw ParseError("short write while saving report: " + path);
}

inline EvalReport load_eval_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open report: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed report " + path + ": " + e.what());
  }
  return eval_report_from_json(j);
}

/// CSV of the PL-quality curve (columns: update_index, ap50_novel). Doubles
/// are rendered with shortest-roundtrip formatting so files are stable.
inline void save_pl_quality_csv(const std::string& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open CSV for writing: " + path);
  out << "update_index,ap50_novel\n";
  for (const auto& [idx, q] : r.pl_quality_series)
    out << idx << "," << nlohmann::json(q).dump() << "\n";
  if (!out) throw ParseError("short write while saving CSV: " + path);
}

/// Full detector inference + AP over a span of scenes. Per proposal, both
/// branches run on the frozen feature, the branch_mode score vector ranks the
/// proposal, background-argmax proposals are dropped, the box is refined by
/// the closed branch's deltas, a detection is emitted for every real class,
/// and per-scene (soft-)NMS precedes per-class AP.
inline EvalReport evaluate_detector(const DetectorParams& params,
                                    std::span<const SceneRecord> records,
                                    const CategorySpace& space,
                                    const EvalOptions& options,
                                    double default_alpha,
                                    const std::string& fingerprint = "") {
  const double alpha = options.alpha.value_or(default_alpha);
  const double iou_thresh = 0.5;

  std::map<int, std::vector<SceneDetection>> dets_by_class;
  std::map<int, std::unordered_map<int, std::vector<BoundingBox>>> gts_by_class;

  for (const SceneRecord& rec : records) {
    for (const SceneObject& obj : rec.scene.objects)
      gts_by_class[obj.class_id][rec.scene.scene_id].push_back(obj.box);

    std::vector<Detection> scene_dets;
    for (size_t i = 0; i < rec.proposals.size(); ++i) {
      const Eigen::VectorXd& f = rec.features[i];
      const ProbVector p_open = forward_open(f, params, space);
      const auto [p_closed, deltas] = forward_closed(f, params, space);

      Eigen::VectorXd scores;
      switch (options.branch_mode) {
        case BranchMode::Fused:
          scores = fuse_scores(p_open, p_closed, alpha, space);
          break;
        case BranchMode::OpenOnly:
          scores = p_open;
          break;
        case BranchMode::ClosedOnly:
          scores = p_closed;
          break;
      }
      int argmax = 0;
      scores.maxCoeff(&argmax);
      if (argmax == space.background_id) continue;

      const BoundingBox refined = apply_deltas(rec.proposals[i].box, deltas);
      for (int c = 0; c < space.num_real(); ++c)
        scene_dets.push_back(Detection{refined, c, scores[c]});
    }

    const std::vector<Detection> kept =
        options.nms.kind == NmsOptions::Kind::Hard
            ? nms(scene_dets, options.nms.iou_thresh)
            : soft_nms(scene_dets, options.nms.sigma, options.nms.score_floor);
    for (const Detection& d : kept)
      dets_by_class[d.class_id].push_back(SceneDetection{rec.scene.scene_id, d});
  }

  EvalReport report;
  report.n_scenes = static_cast<int>(records.size());
  report.config_fingerprint = fingerprint;

  double sum_novel = 0.0, sum_base = 0.0, sum_all = 0.0;
  int n_novel = 0, n_base = 0, n_all = 0;
  for (const auto& [c, gts] : gts_by_class) {
    auto it = dets_by_class.find(c);
    const double ap = average_precision(
        it == dets_by_class.end() ? std::vector<SceneDetection>{} : it->second,
        gts, iou_thresh);
    report.per_class_ap[c] = ap;
    sum_all += ap;
    ++n_all;
    if (space.is_base(c)) {
      sum_base += ap;
      ++n_base;
    } else {
      sum_novel += ap;
      ++n_novel;
    }
  }
  if (n_novel > 0) report.ap50_novel = sum_novel / n_novel;
  if (n_base > 0) report.ap50_base = sum_base / n_base;
  if (n_all > 0) report.ap50_all = sum_all / n_all;
  return report;
}

/// AP50 of the teacher's pseudo labels over the novel categories of the given
/// scenes (macro-averaged over novel classes with ground truth). This is the
/// PL-quality metric recorded along the training run.
inline double evaluate_pl_quality(const DetectorParams& teacher,
                                  std::span<const SceneRecord> records,
                                  const CategorySpace& space,
                                  const TrainerConfig& cfg, PlPhase phase) {
  std::map<int, std::vector<SceneDetection>> dets_by_class;
  std::map<int, std::unordered_map<int, std::vector<BoundingBox>>> gts_by_class;

  for (const SceneRecord& rec : records) {
    for (const SceneObject& obj : rec.scene.objects)
      if (space.is_novel(obj.class_id))
        gts_by_class[obj.class_id][rec.scene.scene_id].push_back(obj.box);

    for (const PseudoLabel& pl : generate_pls(teacher, rec, space, cfg, phase))
      if (space.is_novel(pl.class_id))
        dets_by_class[pl.class_id].push_back(
            SceneDetection{rec.scene.scene_id,
                           Detection{pl.box, pl.class_id, pl.score}});
  }

  double sum = 0.0;
  int count = 0;
  for (const auto& [c, gts] : gts_by_class) {
    auto it = dets_by_class.find(c);
    sum += average_precision(
        it == dets_by_class.end() ? std::vector<SceneDetection>{} : it->second,
        gts, 0.5);
    ++count;
  }
  return count > 0 ? sum / count : 0.0;
}

}  // namespace ovdsim
