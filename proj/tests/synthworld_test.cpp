#include "ovdsim/synthworld.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "ovdsim/embedspace.hpp"
#include "ovdsim/errors.hpp"
#include "ovdsim/rng.hpp"

namespace ovdsim {
namespace {

WorldConfig small_world() {
  WorldConfig w;
  w.n_base = 2;
  w.n_novel = 1;
  w.dim = 8;
  w.seed = 11;
  return w;
}

TEST(GenCategorySpace, PartitionAndUnitNorms) {
  const CategorySpace space = gen_category_space(small_world());
  EXPECT_EQ(space.num_real(), 3);
  EXPECT_EQ(space.vocab_size(), 4);
  EXPECT_EQ(space.base_ids, (std::vector<int>{0, 1}));
  EXPECT_EQ(space.novel_ids, (std::vector<int>{2}));
  EXPECT_EQ(space.background_id, 3);
  for (int c = 0; c < 3; ++c)
    EXPECT_NEAR(space.prototypes.row(c).norm(), 1.0, 1e-12);
}

TEST(GenCategorySpace, ConfusionPairEnforcesCosine) {
  WorldConfig w = small_world();
  w.confusion_pairs = {{0, 2, 0.9}, {1, 0, -0.25}};
  const CategorySpace space = gen_category_space(w);
  // Pairs are applied in order, so the later pair may move earlier members;
  // each pair's constraint holds at the moment it is applied. The second pair
  // rewrites t0, so only the second constraint is exact afterwards here.
  EXPECT_NEAR(space.prototypes.row(1).dot(space.prototypes.row(0)), -0.25, 1e-9);
  for (int c = 0; c < 3; ++c)
    EXPECT_NEAR(space.prototypes.row(c).norm(), 1.0, 1e-9);

  WorldConfig single = small_world();
  single.confusion_pairs = {{0, 2, 0.9}};
  const CategorySpace s2 = gen_category_space(single);
  EXPECT_NEAR(s2.prototypes.row(2).dot(s2.prototypes.row(0)), 0.9, 1e-9);
}

TEST(GenCategorySpace, HighDimPrototypesNearlyOrthogonal) {
  WorldConfig w;
  w.dim = 64;
  for (uint64_t seed = 1; seed <= 100; ++seed) {
    w.seed = seed;
    const CategorySpace space = gen_category_space(w);
    double max_abs_cos = 0.0;
    for (int i = 0; i < space.num_real(); ++i)
      for (int j = i + 1; j < space.num_real(); ++j)
        max_abs_cos = std::max(
            max_abs_cos, std::abs(space.prototypes.row(i).dot(space.prototypes.row(j))));
    EXPECT_LT(max_abs_cos, 0.5) << "seed " << seed;
  }
}

TEST(WorldConfig, ValidateRejectsBadValues) {
  WorldConfig w = small_world();
  w.n_base = 0;
  EXPECT_THROW(w.validate(), ConfigError);

  w = small_world();
  w.dim = 7;
  EXPECT_THROW(w.validate(), ConfigError);

  w = small_world();
  w.confusion_pairs = {{0, 2, 1.0}};
  EXPECT_THROW(w.validate(), ConfigError);

  w = small_world();
  w.confusion_pairs = {{0, 0, 0.5}};
  EXPECT_THROW(w.validate(), ConfigError);

  w = small_world();
  w.min_box_side = 0.5;
  w.max_box_side = 0.4;
  EXPECT_THROW(w.validate(), ConfigError);

  w = small_world();
  w.objects_min = 3;
  w.objects_max = 2;
  EXPECT_THROW(w.validate(), ConfigError);
}

TEST(GenScene, LayoutInvariants) {
  WorldConfig w;
  w.seed = 5;
  const CategorySpace space = gen_category_space(w);
  for (int scene_id = 0; scene_id < 50; ++scene_id) {
    Rng rng = stream_rng(w.seed, Stream::Scene, scene_id);
    const Scene scene = gen_scene(space, w, rng, scene_id);
    EXPECT_LE(static_cast<int>(scene.objects.size()), w.objects_max);
    EXPECT_NEAR(scene.clutter_direction.norm(), 1.0, 1e-12);
    for (const SceneObject& obj : scene.objects) {
      EXPECT_GE(obj.class_id, 0);
      EXPECT_LT(obj.class_id, space.num_real());
      EXPECT_GE(obj.box.x_min, 0.0);
      EXPECT_GE(obj.box.y_min, 0.0);
      EXPECT_LE(obj.box.x_max, 1.0);
      EXPECT_LE(obj.box.y_max, 1.0);
      EXPECT_GE(obj.box.width(), w.min_box_side - 1e-12);
      EXPECT_LE(obj.box.width(), w.max_box_side + 1e-12);
      EXPECT_GE(obj.box.height(), w.min_box_side - 1e-12);
      EXPECT_LE(obj.box.height(), w.max_box_side + 1e-12);
    }
    for (size_t i = 0; i < scene.objects.size(); ++i)
      for (size_t j = i + 1; j < scene.objects.size(); ++j)
        EXPECT_LT(iou(scene.objects[i].box, scene.objects[j].box),
                  kSceneMaxObjectIou);
  }
}

TEST(GenScene, SingleObjectRangeProducesExactlyOne) {
  WorldConfig w;
  w.objects_min = 1;
  w.objects_max = 1;
  const CategorySpace space = gen_category_space(w);
  Rng rng = stream_rng(w.seed, Stream::Scene, 0);
  EXPECT_EQ(gen_scene(space, w, rng, 0).objects.size(), 1u);
}

TEST(GenScene, DeterministicGivenStream) {
  WorldConfig w;
  const CategorySpace space = gen_category_space(w);
  Rng rng_a = stream_rng(w.seed, Stream::Scene, 17);
  Rng rng_b = stream_rng(w.seed, Stream::Scene, 17);
  const Scene a = gen_scene(space, w, rng_a, 17);
  const Scene b = gen_scene(space, w, rng_b, 17);
  ASSERT_EQ(a.objects.size(), b.objects.size());
  for (size_t i = 0; i < a.objects.size(); ++i) {
    EXPECT_TRUE(a.objects[i].box == b.objects[i].box);
    EXPECT_EQ(a.objects[i].class_id, b.objects[i].class_id);
  }
  EXPECT_EQ(a.clutter_direction, b.clutter_direction);
}

TEST(RegionFeature, AlwaysUnitNorm) {
  WorldConfig w;
  const CategorySpace space = gen_category_space(w);
  Rng scene_rng = stream_rng(w.seed, Stream::Scene, 0);
  const Scene scene = gen_scene(space, w, scene_rng, 0);
  Rng rng = stream_rng(w.seed, Stream::Features, 0);
  Rng box_rng(321);
  for (int trial = 0; trial < 100; ++trial) {
    const BoundingBox box = detail::random_box(w, box_rng);
    EXPECT_NEAR(region_feature(scene, box, space, w, rng).norm(), 1.0, 1e-9);
  }
}

TEST(RegionFeature, MixtureOracleAtZeroNoise) {
  WorldConfig w = small_world();
  w.feature_noise_sigma = 0.0;
  const CategorySpace space = gen_category_space(w);

  Scene scene;
  scene.scene_id = 0;
  Rng dir_rng(77);
  scene.clutter_direction = dir_rng.unit_vec(w.dim);
  const BoundingBox obj_box{0.25, 0.25, 0.75, 0.75};
  scene.objects.push_back(SceneObject{obj_box, 2});

  Rng rng(1);
  // Full cover: the feature is exactly the object's prototype.
  const Eigen::VectorXd full = region_feature(scene, obj_box, space, w, rng);
  EXPECT_NEAR((full - space.prototypes.row(2).transpose()).norm(), 0.0, 1e-12);

  // No cover: the feature is exactly the clutter direction.
  const Eigen::VectorXd off =
      region_feature(scene, BoundingBox{0.0, 0.0, 0.2, 0.2}, space, w, rng);
  EXPECT_NEAR((off - scene.clutter_direction).norm(), 0.0, 1e-12);

  // Half cover: normalized 0.5 * prototype + 0.5 * clutter.
  const BoundingBox half_box{0.25, 0.25, 0.75, 1.25};  // half inside the object
  ASSERT_DOUBLE_EQ(intersection_area(half_box, obj_box) / half_box.area(), 0.5);
  const Eigen::VectorXd half = region_feature(scene, half_box, space, w, rng);
  Eigen::VectorXd expected =
      0.5 * space.prototypes.row(2).transpose() + 0.5 * scene.clutter_direction;
  expected /= expected.norm();
  EXPECT_NEAR((half - expected).norm(), 0.0, 1e-12);
}

TEST(RegionFeature, FullCoverClassifiesAsObjectClass) {
  WorldConfig w;
  w.feature_noise_sigma = 0.0;
  const CategorySpace space = gen_category_space(w);
  Rng dir_rng(78);
  for (int class_id = 0; class_id < space.num_real(); ++class_id) {
    Scene scene;
    scene.clutter_direction = dir_rng.unit_vec(w.dim);
    const BoundingBox box{0.3, 0.3, 0.6, 0.6};
    scene.objects.push_back(SceneObject{box, class_id});
    Rng rng(1);
    const ProbVector p = classify(region_feature(scene, box, space, w, rng), space);
    int argmax = 0;
    for (int c = 1; c < p.size(); ++c)
      if (p[c] > p[argmax]) argmax = c;
    EXPECT_EQ(argmax, class_id);
  }
}

TEST(RpnPropose, NoiselessConfigReproducesGroundTruth) {
  WorldConfig w;
  w.rpn_jitter_sigma = 0.0;
  w.rpn_distractors = 0;
  w.rpn_objectness_noise = 0.0;
  const CategorySpace space = gen_category_space(w);
  Rng scene_rng = stream_rng(w.seed, Stream::Scene, 3);
  const Scene scene = gen_scene(space, w, scene_rng, 3);
  Rng rng = stream_rng(w.seed, Stream::Rpn, 3);
  const std::vector<Proposal> proposals = rpn_propose(scene, space, w, rng);
  ASSERT_EQ(proposals.size(), scene.objects.size());
  for (size_t i = 0; i < proposals.size(); ++i) {
    EXPECT_TRUE(proposals[i].box == scene.objects[i].box);
    EXPECT_DOUBLE_EQ(proposals[i].objectness, 1.0);
  }
}

TEST(RpnPropose, ObjectnessEqualsMaxIouAtZeroNoise) {
  WorldConfig w;
  w.rpn_objectness_noise = 0.0;
  const CategorySpace space = gen_category_space(w);
  for (int scene_id = 0; scene_id < 20; ++scene_id) {
    Rng scene_rng = stream_rng(w.seed, Stream::Scene, scene_id);
    const Scene scene = gen_scene(space, w, scene_rng, scene_id);
    Rng rng = stream_rng(w.seed, Stream::Rpn, scene_id);
    for (const Proposal& p : rpn_propose(scene, space, w, rng)) {
      double best = 0.0;
      for (const SceneObject& obj : scene.objects)
        best = std::max(best, iou(p.box, obj.box));
      EXPECT_DOUBLE_EQ(p.objectness, best);
    }
  }
}

TEST(RpnPropose, BaseOnlyCoverageSkipsNovelObjects) {
  WorldConfig w = small_world();
  w.rpn_coverage = WorldConfig::RpnCoverage::BaseOnly;
  w.rpn_distractors = 0;
  const CategorySpace space = gen_category_space(w);

  Scene scene;
  Rng dir_rng(9);
  scene.clutter_direction = dir_rng.unit_vec(w.dim);
  scene.objects.push_back(SceneObject{{0.1, 0.1, 0.3, 0.3}, 2});  // novel only
  Rng rng(4);
  EXPECT_TRUE(rpn_propose(scene, space, w, rng).empty());
}

TEST(RpnPropose, BaseOnlyCoverageLowersNovelRecallStatistically) {
  WorldConfig all_cfg;
  all_cfg.seed = 21;
  WorldConfig base_cfg = all_cfg;
  base_cfg.rpn_coverage = WorldConfig::RpnCoverage::BaseOnly;
  const CategorySpace space = gen_category_space(all_cfg);

  double sum_all = 0.0, sum_base = 0.0;
  int counted = 0;
  for (int scene_id = 0; scene_id < 150; ++scene_id) {
    Rng scene_rng = stream_rng(all_cfg.seed, Stream::Scene, scene_id);
    const Scene scene = gen_scene(space, all_cfg, scene_rng, scene_id);
    bool has_novel = false;
    for (const SceneObject& obj : scene.objects)
      has_novel = has_novel || space.is_novel(obj.class_id);
    if (!has_novel) continue;
    ++counted;

    Rng rng_all = stream_rng(all_cfg.seed, Stream::Rpn, scene_id);
    Rng rng_base = stream_rng(base_cfg.seed, Stream::Rpn, scene_id);
    const std::vector<Proposal> props_all = rpn_propose(scene, space, all_cfg, rng_all);
    const std::vector<Proposal> props_base =
        rpn_propose(scene, space, base_cfg, rng_base);

    auto novel_recall = [&](const std::vector<Proposal>& props) {
      double total = 0.0;
      int n = 0;
      for (const SceneObject& obj : scene.objects) {
        if (!space.is_novel(obj.class_id)) continue;
        double best = 0.0;
        for (const Proposal& p : props) best = std::max(best, iou(p.box, obj.box));
        total += best;
        ++n;
      }
      return total / n;
    };
    sum_all += novel_recall(props_all);
    sum_base += novel_recall(props_base);
  }
  ASSERT_GE(counted, 100);
  EXPECT_GT(sum_all / counted, sum_base / counted + 0.3);
}

TEST(BuildDataset, SplitsAreContiguousAndSized) {
  WorldConfig w = small_world();
  SplitSpec splits;
  splits.n_train = 12;
  splits.n_pl_eval = 5;
  splits.n_test = 7;
  const Dataset ds = build_dataset(w, splits);
  EXPECT_EQ(static_cast<int>(ds.records.size()), splits.total());
  EXPECT_EQ(ds.train_records().size(), 12u);
  EXPECT_EQ(ds.pl_eval_records().size(), 5u);
  EXPECT_EQ(ds.test_records().size(), 7u);
  EXPECT_EQ(ds.train_records().back().scene.scene_id, 11);
  EXPECT_EQ(ds.pl_eval_records().front().scene.scene_id, 12);
  EXPECT_EQ(ds.test_records().front().scene.scene_id, 17);
  for (int i = 0; i < splits.total(); ++i)
    EXPECT_EQ(ds.records[i].scene.scene_id, i);
  for (const SceneRecord& rec : ds.records)
    EXPECT_EQ(rec.features.size(), rec.proposals.size());
}

TEST(BuildDataset, BitwiseDeterministic) {
  WorldConfig w = small_world();
  SplitSpec splits;
  splits.n_train = 8;
  splits.n_pl_eval = 3;
  splits.n_test = 3;
  const Dataset a = build_dataset(w, splits);
  const Dataset b = build_dataset(w, splits);
  ASSERT_EQ(a.records.size(), b.records.size());
  EXPECT_EQ(a.space.prototypes, b.space.prototypes);
  for (size_t s = 0; s < a.records.size(); ++s) {
    const SceneRecord& ra = a.records[s];
    const SceneRecord& rb = b.records[s];
    ASSERT_EQ(ra.proposals.size(), rb.proposals.size());
    for (size_t i = 0; i < ra.proposals.size(); ++i) {
      EXPECT_TRUE(ra.proposals[i].box == rb.proposals[i].box);
      EXPECT_EQ(ra.proposals[i].objectness, rb.proposals[i].objectness);
      EXPECT_EQ(ra.features[i], rb.features[i]);
    }
  }
}

TEST(SaveScenes, ByteStableAndParseable) {
  WorldConfig w = small_world();
  SplitSpec splits;
  splits.n_train = 4;
  splits.n_pl_eval = 1;
  splits.n_test = 1;
  const Dataset ds = build_dataset(w, splits);

  const std::string path_a = "scenes_a.jsonl";
  const std::string path_b = "scenes_b.jsonl";
  save_scenes(path_a, ds.records);
  save_scenes(path_b, ds.records);

  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string bytes = slurp(path_a);
  EXPECT_EQ(bytes, slurp(path_b));

  std::istringstream lines(bytes);
  std::string line;
  int n_lines = 0;
  while (std::getline(lines, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("scene_id").get<int>(), n_lines);
    EXPECT_EQ(j.at("objects").size(),
              ds.records[n_lines].scene.objects.size());
    ++n_lines;
  }
  EXPECT_EQ(n_lines, splits.total());
  std::remove(path_a.c_str());
  std::remove(path_b.c_str());
}

}  // namespace
}  // namespace ovdsim
