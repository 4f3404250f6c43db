#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ovdsim/errors.hpp"

namespace ovdsim {

/// Axis-aligned box in normalized canvas coordinates ([0,1] on both axes).
struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  bool valid() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
           std::isfinite(y_max) && x_min < x_max && y_min < y_max;
  }

  bool operator==(const BoundingBox& o) const {
    return x_min == o.x_min && y_min == o.y_min && x_max == o.x_max &&
           y_max == o.y_max;
  }
};

/// One scored, classified region. class_id always names a real (non-background)
/// category.
struct Detection {
  BoundingBox box;
  int class_id = 0;
  double score = 0.0;
};

/// Box refinement parametrized as center shifts (relative to source size) and
/// log-scale size ratios.
struct BoxDeltas {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;
};

/// Log-size deltas are clamped to this symmetric range before exponentiation
/// so an untrained box head cannot produce overflowing boxes.
inline constexpr double kDeltaClamp = 4.0;
/// Boxes whose clipped area falls at or below this are considered degenerate.
inline constexpr double kDegenerateArea = 1e-8;
/// Degenerate boxes are re-expanded to this minimum side length.
inline constexpr double kMinBoxSide = 1e-4;

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

namespace detail {

/// Deterministic processing order: score descending, then lower class_id,
/// then original input position.
inline std::vector<int> score_order(const std::vector<Detection>& dets) {
  std::vector<int> order(dets.size());
  for (int i = 0; i < static_cast<int>(order.size()); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
    if (dets[i].score != dets[j].score) return dets[i].score > dets[j].score;
    if (dets[i].class_id != dets[j].class_id)
      return dets[i].class_id < dets[j].class_id;
    return i < j;
  });
  return order;
}

}  // namespace detail

/// Greedy class-wise non-maximum suppression. A detection is dropped when it
/// overlaps an already-kept detection of the same class at IoU >= iou_thresh.
/// Output is sorted by score (ties: lower class_id, then input order).
inline std::vector<Detection> nms(const std::vector<Detection>& dets,
                                  double iou_thresh) {
  std::vector<Detection> kept;
  kept.reserve(dets.size());
  for (int i : detail::score_order(dets)) {
    const Detection& d = dets[i];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) >= iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

/// Soft suppression: walking detections in score order, each candidate's score
/// is decayed by exp(-IoU^2/sigma) against every already-kept same-class
/// detection, and the candidate is dropped once its decayed score falls below
/// score_floor. Output is sorted by final (decayed) score.
inline std::vector<Detection> soft_nms(const std::vector<Detection>& dets,
                                       double sigma, double score_floor) {
  std::vector<Detection> kept;
  kept.reserve(dets.size());
  for (int i : detail::score_order(dets)) {
    Detection d = dets[i];
    for (const Detection& k : kept) {
      if (k.class_id == d.class_id) {
        const double v = iou(k.box, d.box);
        d.score *= std::exp(-(v * v) / sigma);
      }
    }
    if (d.score >= score_floor) kept.push_back(d);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const Detection& a,
                                                const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.class_id < b.class_id;
  });
  return kept;
}

/// Regression target taking `src` onto `target`.
inline BoxDeltas encode_deltas(const BoundingBox& src, const BoundingBox& target) {
  const double sw = src.width();
  const double sh = src.height();
  BoxDeltas d;
  d.dx = (target.center_x() - src.center_x()) / sw;
  d.dy = (target.center_y() - src.center_y()) / sh;
  d.dw = std::log(target.width() / sw);
  d.dh = std::log(target.height() / sh);
  return d;
}

/// Inverse of encode_deltas. Log-size deltas are clamped to [-4,4], the result
/// is clipped to the unit canvas, and a degenerate clipped box (area <= 1e-8)
/// is replaced by a minimum-size box at the predicted center (center nudged
/// inward so the box stays on the canvas).
inline BoundingBox apply_deltas(const BoundingBox& src, const BoxDeltas& d) {
  const double sw = src.width();
  const double sh = src.height();
  const double cx = src.center_x() + d.dx * sw;
  const double cy = src.center_y() + d.dy * sh;
  const double w = sw * std::exp(std::clamp(d.dw, -kDeltaClamp, kDeltaClamp));
  const double h = sh * std::exp(std::clamp(d.dh, -kDeltaClamp, kDeltaClamp));

  BoundingBox out;
  out.x_min = std::clamp(cx - 0.5 * w, 0.0, 1.0);
  out.y_min = std::clamp(cy - 0.5 * h, 0.0, 1.0);
  out.x_max = std::clamp(cx + 0.5 * w, 0.0, 1.0);
  out.y_max = std::clamp(cy + 0.5 * h, 0.0, 1.0);

  if (out.area() <= kDegenerateArea) {
    const double half = 0.5 * kMinBoxSide;
    const double fx = std::clamp(cx, half, 1.0 - half);
    const double fy = std::clamp(cy, half, 1.0 - half);
    out = BoundingBox{fx - half, fy - half, fx + half, fy + half};
  }
  return out;
}

}  // namespace ovdsim
