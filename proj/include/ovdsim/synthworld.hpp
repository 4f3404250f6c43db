#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ovdsim/embedspace.hpp"
#include "ovdsim/errors.hpp"
#include "ovdsim/geometry.hpp"
#include "ovdsim/rng.hpp"

namespace ovdsim {

/// Everything that defines the synthetic universe: category structure, scene
/// layout statistics, the frozen feature oracle's noise, and the simulated
/// external proposal source.
struct WorldConfig {
  int n_base = 10;
  int n_novel = 5;
  int dim = 64;
  int objects_min = 2;  // objects_per_scene range, inclusive
  int objects_max = 5;
  double feature_noise_sigma = 0.05;
  // (first category, second category, target cosine): the second prototype is
  // rotated to sit at the given cosine from the first.
  std::vector<std::tuple<int, int, double>> confusion_pairs;
  double rpn_jitter_sigma = 0.02;
  int rpn_distractors = 6;
  enum class RpnCoverage { All, BaseOnly } rpn_coverage = RpnCoverage::All;
  double rpn_objectness_noise = 0.1;
  double min_box_side = 0.08;
  double max_box_side = 0.35;
  uint64_t seed = 1;

  void validate() const {
    if (n_base < 1) throw ConfigError("world.n_base must be >= 1");
    if (n_novel < 1) throw ConfigError("world.n_novel must be >= 1");
    if (dim < std::max(8, n_base + n_novel))
      throw ConfigError("world.dim must be >= max(8, n_base + n_novel)");
    if (objects_min < 1 || objects_max < objects_min)
      throw ConfigError("world.objects_per_scene range invalid");
    if (feature_noise_sigma < 0.0)
      throw ConfigError("world.feature_noise_sigma must be >= 0");
    if (rpn_jitter_sigma < 0.0)
      throw ConfigError("world.rpn_jitter_sigma must be >= 0");
    if (rpn_objectness_noise < 0.0)
      throw ConfigError("world.rpn_objectness_noise must be >= 0");
    if (rpn_distractors < 0)
      throw ConfigError("world.rpn_distractors must be >= 0");
    if (!(0.0 < min_box_side && min_box_side < max_box_side && max_box_side <= 1.0))
      throw ConfigError("world box side bounds must satisfy 0 < min < max <= 1");
    const int n_real = n_base + n_novel;
    for (const auto& [a, b, cos] : confusion_pairs) {
      if (a < 0 || a >= n_real || b < 0 || b >= n_real || a == b)
        throw ConfigError("world.confusion_pairs indices invalid");
      if (!(cos > -1.0 && cos < 1.0))
        throw ConfigError("world.confusion_pairs cosine must lie in (-1, 1)");
    }
  }
};

/// One ground-truth object. class_id is never background.
struct SceneObject {
  BoundingBox box;
  int class_id = 0;
};

/// A generated scene plus the scene-specific background feature direction
/// (per-scene clutter keeps the background class from being trivially
/// learnable).
struct Scene {
  int scene_id = 0;
  std::vector<SceneObject> objects;
  Eigen::VectorXd clutter_direction;
};

/// A class-agnostic region proposal from the simulated external RPN.
struct Proposal {
  BoundingBox box;
  double objectness = 0.0;
};

/// Samples unit prototypes on the sphere, then enforces each confusion pair
/// by rotating the pair's second prototype to the requested cosine with the
/// first. Base ids come first, novel ids follow.
inline CategorySpace gen_category_space(const WorldConfig& cfg) {
  cfg.validate();
  Rng rng = stream_rng(cfg.seed, Stream::Prototypes);
  const int n_real = cfg.n_base + cfg.n_novel;

  CategorySpace space;
  space.prototypes.resize(n_real, cfg.dim);
  for (int c = 0; c < n_real; ++c) space.prototypes.row(c) = rng.unit_vec(cfg.dim);

  for (const auto& [a, b, target_cos] : cfg.confusion_pairs) {
    const Eigen::VectorXd ta = space.prototypes.row(a);
    Eigen::VectorXd tb = space.prototypes.row(b);
    Eigen::VectorXd perp = tb - tb.dot(ta) * ta;
    while (perp.norm() < 1e-9) {  // near-parallel draw: re-pick a direction
      tb = rng.unit_vec(cfg.dim);
      perp = tb - tb.dot(ta) * ta;
    }
    perp /= perp.norm();
    space.prototypes.row(b) =
        target_cos * ta + std::sqrt(1.0 - target_cos * target_cos) * perp;
  }

  for (int c = 0; c < cfg.n_base; ++c) space.base_ids.push_back(c);
  for (int c = cfg.n_base; c < n_real; ++c) space.novel_ids.push_back(c);
  space.background_id = n_real;
  space.validate();
  return space;
}

namespace detail {

/// Uniform box with sides in [min_box_side, max_box_side], fully inside the
/// canvas. Consumes exactly four draws.
inline BoundingBox random_box(const WorldConfig& cfg, Rng& rng) {
  const double w = rng.uniform(cfg.min_box_side, cfg.max_box_side);
  const double h = rng.uniform(cfg.min_box_side, cfg.max_box_side);
  const double x = rng.uniform(0.0, 1.0 - w);
  const double y = rng.uniform(0.0, 1.0 - h);
  return BoundingBox{x, y, x + w, y + h};
}

/// Clips a (possibly jitter-corrupted) box to the canvas and restores a
/// minimum side length if the clip left it degenerate.
inline BoundingBox sanitize_box(BoundingBox b) {
  if (b.x_min > b.x_max) std::swap(b.x_min, b.x_max);
  if (b.y_min > b.y_max) std::swap(b.y_min, b.y_max);
  b.x_min = std::clamp(b.x_min, 0.0, 1.0);
  b.y_min = std::clamp(b.y_min, 0.0, 1.0);
  b.x_max = std::clamp(b.x_max, 0.0, 1.0);
  b.y_max = std::clamp(b.y_max, 0.0, 1.0);
  const double half = 0.5 * kMinBoxSide;
  if (b.width() < kMinBoxSide) {
    const double cx = std::clamp(b.center_x(), half, 1.0 - half);
    b.x_min = cx - half;
    b.x_max = cx + half;
  }
  if (b.height() < kMinBoxSide) {
    const double cy = std::clamp(b.center_y(), half, 1.0 - half);
    b.y_min = cy - half;
    b.y_max = cy + half;
  }
  return b;
}

}  // namespace detail

/// Object layouts are rejection-sampled so that no two objects overlap at
/// IoU >= 0.3; after 100 failed placements a slot is skipped (the scene ends
/// up with fewer objects rather than generation failing).
inline constexpr double kSceneMaxObjectIou = 0.3;
inline constexpr int kScenePlacementRetries = 100;

inline Scene gen_scene(const CategorySpace& space, const WorldConfig& cfg,
                       Rng& rng, int scene_id) {
  Scene scene;
  scene.scene_id = scene_id;
  const int count = rng.uniform_int(cfg.objects_min, cfg.objects_max);
  scene.clutter_direction = rng.unit_vec(cfg.dim);

  for (int slot = 0; slot < count; ++slot) {
    const int class_id = rng.uniform_int(0, space.num_real() - 1);
    for (int attempt = 0; attempt < kScenePlacementRetries; ++attempt) {
      const BoundingBox candidate = detail::random_box(cfg, rng);
      bool ok = true;
      for (const SceneObject& obj : scene.objects) {
        if (iou(candidate, obj.box) >= kSceneMaxObjectIou) {
          ok = false;
          break;
        }
      }
      if (ok) {
        scene.objects.push_back(SceneObject{candidate, class_id});
        break;
      }
    }
  }
  return scene;
}

/// Frozen region-feature oracle standing in for a pretrained backbone. The
/// feature is the overlap-weighted mixture of the prototypes of every object
/// the box covers, plus clutter for the uncovered remainder, plus isotropic
/// noise, normalized to unit length. The overlap weight is intersection over
/// *proposal* area so a small box inside a big object reads as that object.
inline Eigen::VectorXd region_feature(const Scene& scene, const BoundingBox& box,
                                      const CategorySpace& space,
                                      const WorldConfig& cfg, Rng& rng) {
  Eigen::VectorXd f = Eigen::VectorXd::Zero(space.dim());
  const double box_area = box.area();
  double covered = 0.0;
  for (const SceneObject& obj : scene.objects) {
    const double w = intersection_area(box, obj.box) / box_area;
    if (w > 0.0) f += w * space.prototypes.row(obj.class_id).transpose();
    covered += w;
  }
  const double w_bg = std::max(0.0, 1.0 - covered);
  f += w_bg * scene.clutter_direction;
  // The noise draw always happens so the stream layout does not depend on
  // the sigma value.
  f += cfg.feature_noise_sigma * rng.normal_vec(space.dim());

  const double norm = f.norm();
  if (norm < 1e-12) return scene.clutter_direction;  // pathological cancellation
  return f / norm;
}

/// Simulated external RPN: one jittered copy of each covered object box plus
/// uniform distractor boxes. Proposals are class-agnostic; the coverage knob
/// controls whether novel-object boxes are proposed at all. Objectness is the
/// noisy max-IoU against any scene object (novel included), clamped to [0,1].
inline std::vector<Proposal> rpn_propose(const Scene& scene,
                                         const CategorySpace& space,
                                         const WorldConfig& cfg, Rng& rng) {
  std::vector<Proposal> proposals;
  proposals.reserve(scene.objects.size() + cfg.rpn_distractors);

  for (const SceneObject& obj : scene.objects) {
    const bool covered = cfg.rpn_coverage == WorldConfig::RpnCoverage::All ||
                         space.is_base(obj.class_id);
    if (!covered) continue;
    BoundingBox b = obj.box;
    b.x_min += cfg.rpn_jitter_sigma * rng.normal();
    b.y_min += cfg.rpn_jitter_sigma * rng.normal();
    b.x_max += cfg.rpn_jitter_sigma * rng.normal();
    b.y_max += cfg.rpn_jitter_sigma * rng.normal();
    proposals.push_back(Proposal{detail::sanitize_box(b), 0.0});
  }
  for (int i = 0; i < cfg.rpn_distractors; ++i)
    proposals.push_back(Proposal{detail::random_box(cfg, rng), 0.0});

  for (Proposal& p : proposals) {
    double best = 0.0;
    for (const SceneObject& obj : scene.objects)
      best = std::max(best, iou(p.box, obj.box));
    const double noise = cfg.rpn_objectness_noise * rng.normal();
    p.objectness = std::clamp(best + noise, 0.0, 1.0);
  }
  return proposals;
}

/// Scene counts of the three disjoint splits: training scenes, the held-out
/// split used to measure pseudo-label quality, and the test split.
struct SplitSpec {
  int n_train = 400;
  int n_pl_eval = 100;
  int n_test = 100;

  int total() const { return n_train + n_pl_eval + n_test; }
  void validate() const {
    if (n_train < 1 || n_pl_eval < 1 || n_test < 1)
      throw ConfigError("splits must each contain at least one scene");
  }
};

/// A scene with its frozen proposals and region features. Proposals and
/// features are generated once per scene from scene-keyed streams and never
/// resampled, so every consumer across the whole run sees identical values.
struct SceneRecord {
  Scene scene;
  std::vector<Proposal> proposals;
  std::vector<Eigen::VectorXd> features;  // one unit vector per proposal
};

struct Dataset {
  CategorySpace space;
  WorldConfig world;
  SplitSpec splits;
  std::vector<SceneRecord> records;  // scene_id == index

  std::span<const SceneRecord> train_records() const {
    return {records.data(), static_cast<size_t>(splits.n_train)};
  }
  std::span<const SceneRecord> pl_eval_records() const {
    return {records.data() + splits.n_train, static_cast<size_t>(splits.n_pl_eval)};
  }
  std::span<const SceneRecord> test_records() const {
    return {records.data() + splits.n_train + splits.n_pl_eval,
            static_cast<size_t>(splits.n_test)};
  }
};

/// Writes one scene per line as {"scene_id", "objects":[{"box", "class_id"}]}
/// — the ground-truth export used for cross-run reproducibility checks.
inline void save_scenes(const std::string& path,
                        const std::vector<SceneRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open scene file for writing: " + path);
  for (const SceneRecord& rec : records) {
    nlohmann::ordered_json line;
    line["scene_id"] = rec.scene.scene_id;
    nlohmann::ordered_json objects = nlohmann::ordered_json::array();
    for (const SceneObject& obj : rec.scene.objects) {
      nlohmann::ordered_json oj;
      oj["box"] = {obj.box.x_min, obj.box.y_min, obj.box.x_max, obj.box.y_max};
      oj["class_id"] = obj.class_id;
      objects.push_back(oj);
    }
    line["objects"] = objects;
    out << line.dump() << "\n";
  }
  if (!out) throw ParseError("short write while saving scenes: " + path);
}

inline Dataset build_dataset(const WorldConfig& world, const SplitSpec& splits) {
  world.validate();
  splits.validate();
  Dataset ds;
  ds.space = gen_category_space(world);
  ds.world = world;
  ds.splits = splits;
  ds.records.reserve(splits.total());
  for (int scene_id = 0; scene_id < splits.total(); ++scene_id) {
    SceneRecord rec;
    Rng scene_rng = stream_rng(world.seed, Stream::Scene, scene_id);
    rec.scene = gen_scene(ds.space, world, scene_rng, scene_id);
    Rng rpn_rng = stream_rng(world.seed, Stream::Rpn, scene_id);
    rec.proposals = rpn_propose(rec.scene, ds.space, world, rpn_rng);
    Rng feat_rng = stream_rng(world.seed, Stream::Features, scene_id);
    rec.features.reserve(rec.proposals.size());
    for (const Proposal& p : rec.proposals)
      rec.features.push_back(
          region_feature(rec.scene, p.box, ds.space, world, feat_rng));
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace ovdsim
