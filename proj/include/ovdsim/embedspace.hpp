#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ovdsim/errors.hpp"

namespace ovdsim {

/// Probability vector over all categories including background.
using ProbVector = Eigen::VectorXd;

/// Fixed category embeddings shared by every classifier head. Real categories
/// carry unit-norm prototype directions; the background category has an
/// implicit all-zero embedding (its cosine logit is therefore constant 0).
struct CategorySpace {
  Eigen::MatrixXd prototypes;  // num_real x dim, one unit row per category
  std::vector<int> base_ids;   // sorted ascending
  std::vector<int> novel_ids;  // sorted ascending
  int background_id = 0;       // == num_real(); last index of the vocabulary
  double temperature = 0.05;

  int num_real() const { return static_cast<int>(prototypes.rows()); }
  int vocab_size() const { return num_real() + 1; }
  int dim() const { return static_cast<int>(prototypes.cols()); }

  bool is_base(int class_id) const {
    return std::binary_search(base_ids.begin(), base_ids.end(), class_id);
  }
  bool is_novel(int class_id) const {
    return std::binary_search(novel_ids.begin(), novel_ids.end(), class_id);
  }

  void validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature))
      throw ConfigError("temperature must be positive and finite");
    if (background_id != num_real())
      throw ConfigError("background_id must be the last vocabulary index");
    for (int c = 0; c < num_real(); ++c) {
      if (std::abs(prototypes.row(c).norm() - 1.0) > 1e-9)
        throw ConfigError("prototype " + std::to_string(c) + " is not unit norm");
    }
    if (!std::is_sorted(base_ids.begin(), base_ids.end()) ||
        !std::is_sorted(novel_ids.begin(), novel_ids.end()))
      throw ConfigError("category id lists must be sorted");
    for (int c : base_ids)
      if (is_novel(c)) throw ConfigError("base and novel ids must be disjoint");
    for (int c = 0; c < num_real(); ++c)
      if (!is_base(c) && !is_novel(c))
        throw ConfigError("category " + std::to_string(c) +
                          " is neither base nor novel");
  }
};

/// Cosine-similarity softmax classifier. Logit for a real category c is
/// cos(r, t_c)/tau; the background logit is the constant 0 (cosine with the
/// all-zero background embedding is defined as 0). Returns a probability
/// vector over vocab_size() entries, background last.
inline ProbVector classify(const Eigen::VectorXd& r, const CategorySpace& space) {
  const double norm = r.norm();
  if (norm < 1e-12)
    throw DegenerateFeatureError("classify: feature vector has zero norm");

  const int c_all = space.vocab_size();
  Eigen::VectorXd logits(c_all);
  logits.head(space.num_real()) = (space.prototypes * r) / (norm * space.temperature);
  logits[space.background_id] = 0.0;

  const double m = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - m).exp();
  p /= p.sum();
  return p;
}

namespace detail {

/// Weighted geometric mean a^w * b^(1-w), exact at the w = 0 / w = 1
/// degeneracies.
inline double weighted_geomean(double a, double b, double w) {
  if (w == 0.0) return b;
  if (w == 1.0) return a;
  return std::pow(a, w) * std::pow(b, 1.0 - w);
}

}  // namespace detail

/// Geometric-mean fusion of the two branch predictions. Base categories trust
/// the closed branch (exponent 1-alpha on p_closed), every other real
/// category trusts the open branch (exponent 1-alpha on p_open), and the
/// background entry is the symmetric geometric mean. The result ranks
/// detections and is deliberately not renormalized.
inline Eigen::VectorXd fuse_scores(const ProbVector& p_open,
                                   const ProbVector& p_closed, double alpha,
                                   const CategorySpace& space) {
  Eigen::VectorXd fused(space.vocab_size());
  for (int c = 0; c < space.num_real(); ++c) {
    const double w_closed = space.is_base(c) ? 1.0 - alpha : alpha;
    fused[c] = detail::weighted_geomean(p_closed[c], p_open[c], w_closed);
  }
  const int bg = space.background_id;
  fused[bg] = detail::weighted_geomean(p_closed[bg], p_open[bg], 0.5);
  return fused;
}

}  // namespace ovdsim
