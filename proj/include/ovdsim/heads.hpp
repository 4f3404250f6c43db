#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ovdsim/embedspace.hpp"
#include "ovdsim/errors.hpp"
#include "ovdsim/geometry.hpp"

namespace ovdsim {

/// Learnable part of one classification branch: a square matrix applied to
/// the frozen region feature before the cosine classifier. Identity at init,
/// so both branches start as the same pretrained classifier.
struct BranchParams {
  Eigen::MatrixXd W;  // dim x dim
};

/// Class-agnostic box refinement: deltas = clamp(R*f + b).
struct BoxHeadParams {
  Eigen::MatrixXd R;  // 4 x dim
  Eigen::Vector4d b;
};

/// The full two-branch detector head. The open branch classifies with help
/// from pseudo labels; the closed branch classifies and regresses boxes from
/// ground truth only. The branches share no storage.
struct DetectorParams {
  BranchParams open;
  BranchParams closed;
  BoxHeadParams box;

  static DetectorParams identity_init(int dim) {
    DetectorParams p;
    p.open.W = Eigen::MatrixXd::Identity(dim, dim);
    p.closed.W = Eigen::MatrixXd::Identity(dim, dim);
    p.box.R = Eigen::MatrixXd::Zero(4, dim);
    p.box.b = Eigen::Vector4d::Zero();
    return p;
  }

  int dim() const { return static_cast<int>(open.W.rows()); }

  bool all_finite() const {
    return open.W.allFinite() && closed.W.allFinite() && box.R.allFinite() &&
           box.b.allFinite();
  }

  bool operator==(const DetectorParams& o) const {
    return open.W == o.open.W && closed.W == o.closed.W && box.R == o.box.R &&
           box.b == o.box.b;
  }
};

/// Where a matched training target came from.
enum class SourceTag { GT, PL, BG };

/// One matched training example. The regression target is present exactly for
/// GT-sourced entries (box supervision never comes from pseudo labels).
struct BatchEntry {
  Eigen::VectorXd feature;  // unit norm, dim D
  int label = 0;            // category index, background allowed
  SourceTag source = SourceTag::BG;
  std::optional<BoxDeltas> regression_target;
};

using MatchedBatch = std::vector<BatchEntry>;

/// Gradient accumulator matching DetectorParams' layout. Loss functions add
/// into the fields they own; the optimizer applies all of them.
struct ParamGrads {
  Eigen::MatrixXd open_W;
  Eigen::MatrixXd closed_W;
  Eigen::MatrixXd box_R;
  Eigen::Vector4d box_b;

  static ParamGrads zero(int dim) {
    ParamGrads g;
    g.open_W = Eigen::MatrixXd::Zero(dim, dim);
    g.closed_W = Eigen::MatrixXd::Zero(dim, dim);
    g.box_R = Eigen::MatrixXd::Zero(4, dim);
    g.box_b = Eigen::Vector4d::Zero();
    return g;
  }

  bool all_finite() const {
    return open_W.allFinite() && closed_W.allFinite() && box_R.allFinite() &&
           box_b.allFinite();
  }
};

/// Open-branch forward: cosine classification of W_open*f.
inline ProbVector forward_open(const Eigen::VectorXd& f,
                               const DetectorParams& params,
                               const CategorySpace& space) {
  return classify(params.open.W * f, space);
}

/// Raw (unclamped) box deltas; clamping happens in BoxDeltas consumers and in
/// the loss, which needs the raw value to gate gradient flow.
inline Eigen::Vector4d box_head_raw(const Eigen::VectorXd& f,
                                    const DetectorParams& params) {
  return params.box.R * f + params.box.b;
}

/// Closed-branch forward: cosine classification of W_closed*f plus clamped
/// class-agnostic box deltas.
inline std::pair<ProbVector, BoxDeltas> forward_closed(
    const Eigen::VectorXd& f, const DetectorParams& params,
    const CategorySpace& space) {
  const Eigen::Vector4d raw = box_head_raw(f, params);
  BoxDeltas d{std::clamp(raw[0], -kDeltaClamp, kDeltaClamp),
              std::clamp(raw[1], -kDeltaClamp, kDeltaClamp),
              std::clamp(raw[2], -kDeltaClamp, kDeltaClamp),
              std::clamp(raw[3], -kDeltaClamp, kDeltaClamp)};
  return {classify(params.closed.W * f, space), d};
}

namespace detail {

/// Cross-entropy of one entry through z = W*f, u = z/|z|, cosine logits
/// (prototypes * u)/tau with background logit 0. Returns the loss and adds
/// scale * dLoss/dW into grad_W.
inline double ce_backprop(const Eigen::VectorXd& f, int label,
                          const Eigen::MatrixXd& W, const CategorySpace& space,
                          double scale, Eigen::MatrixXd& grad_W) {
  const Eigen::VectorXd z = W * f;
  const double norm_z = z.norm();
  if (norm_z < 1e-12)
    throw DegenerateFeatureError("branch produced a zero-norm embedding");
  const Eigen::VectorXd u = z / norm_z;

  const int c_all = space.vocab_size();
  Eigen::VectorXd logits(c_all);
  logits.head(space.num_real()) = (space.prototypes * u) / space.temperature;
  logits[space.background_id] = 0.0;

  const double m = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - m).exp();
  p /= p.sum();
  const double loss = -std::log(p[label]);

  // dLoss/dlogits = p - onehot(label); the background logit is constant so
  // only real-category rows push gradient into u.
  Eigen::VectorXd g_logits = p;
  g_logits[label] -= 1.0;
  const Eigen::VectorXd g_u =
      (space.prototypes.transpose() * g_logits.head(space.num_real())) /
      space.temperature;
  // Through the normalization u = z/|z|: project out the radial component.
  const Eigen::VectorXd g_z = (g_u - g_u.dot(u) * u) / norm_z;
  grad_W.noalias() += scale * g_z * f.transpose();
  return loss;
}

inline double smooth_l1(double e) {
  const double a = std::abs(e);
  return a < 1.0 ? 0.5 * e * e : a - 0.5;
}

inline double smooth_l1_grad(double e) {
  return std::abs(e) < 1.0 ? e : (e > 0.0 ? 1.0 : -1.0);
}

}  // namespace detail

/// Closed-branch loss: mean cross-entropy over every entry plus the mean
/// smooth-L1 (beta = 1) over the 4 delta components of GT entries, equally
/// weighted. Pseudo-label entries are a caller bug, not data, and raise.
/// Accumulates analytic gradients for W_closed, R, and b into `grads`.
inline double closed_branch_loss(const MatchedBatch& batch,
                                 const DetectorParams& params,
                                 const CategorySpace& space, ParamGrads& grads) {
  for (const BatchEntry& e : batch)
    if (e.source == SourceTag::PL)
      throw ContractViolation(
          "closed_branch_loss received a pseudo-label entry; the closed "
          "branch trains on ground truth and background only");

  if (batch.empty()) return 0.0;

  const double ce_scale = 1.0 / static_cast<double>(batch.size());
  double ce = 0.0;
  int n_gt = 0;
  for (const BatchEntry& e : batch) {
    ce += detail::ce_backprop(e.feature, e.label, params.closed.W, space,
                              ce_scale, grads.closed_W);
    if (e.source == SourceTag::GT) ++n_gt;
  }
  ce *= ce_scale;

  double reg = 0.0;
  if (n_gt > 0) {
    const double reg_scale = 1.0 / (4.0 * n_gt);
    for (const BatchEntry& e : batch) {
      if (e.source != SourceTag::GT) continue;
      const Eigen::Vector4d raw = box_head_raw(e.feature, params);
      const BoxDeltas& t = *e.regression_target;
      const double targets[4] = {t.dx, t.dy, t.dw, t.dh};
      Eigen::Vector4d g_raw = Eigen::Vector4d::Zero();
      for (int k = 0; k < 4; ++k) {
        const double clamped = std::clamp(raw[k], -kDeltaClamp, kDeltaClamp);
        const double err = clamped - targets[k];
        reg += detail::smooth_l1(err);
        // Gradient passes through the clamp only strictly inside its range.
        if (raw[k] > -kDeltaClamp && raw[k] < kDeltaClamp)
          g_raw[k] = detail::smooth_l1_grad(err) * reg_scale;
      }
      grads.box_R.noalias() += g_raw * e.feature.transpose();
      grads.box_b += g_raw;
    }
    reg *= reg_scale;
  }
  return ce + reg;
}

/// Open-branch loss: mean cross-entropy over every entry (ground truth,
/// pseudo labels, and background alike). Regression targets are ignored.
/// Accumulates analytic gradients for W_open into `grads`.
inline double open_branch_loss(const MatchedBatch& batch,
                               const DetectorParams& params,
                               const CategorySpace& space, ParamGrads& grads) {
  if (batch.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  double ce = 0.0;
  for (const BatchEntry& e : batch)
    ce += detail::ce_backprop(e.feature, e.label, params.open.W, space, scale,
                              grads.open_W);
  return ce * scale;
}

/// Plain SGD: params - lr * grads. `context` (e.g. the iteration) is folded
/// into the divergence error message.
inline DetectorParams sgd_step(const DetectorParams& params,
                               const ParamGrads& grads, double lr,
                               const std::string& context = "") {
  if (!grads.all_finite())
    throw DivergenceError("non-finite gradient" +
                          (context.empty() ? "" : " at " + context));
  DetectorParams out = params;
  out.open.W -= lr * grads.open_W;
  out.closed.W -= lr * grads.closed_W;
  out.box.R -= lr * grads.box_R;
  out.box.b -= lr * grads.box_b;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint files: little-endian binary, bit-exact roundtrip.
// Layout: magic "OVDSIMCK", u32 version, u32 dim, then the raw doubles of
// open.W, closed.W, box.R (Eigen default column-major order) and box.b.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'O', 'V', 'D', 'S',
                                             'I', 'M', 'C', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path,
                            const DetectorParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 8);
  const uint32_t version = kCheckpointVersion;
  const uint32_t dim = static_cast<uint32_t>(params.dim());
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  auto write_block = [&out](const double* data, size_t count) {
    out.write(reinterpret_cast<const char*>(data), count * sizeof(double));
  };
  write_block(params.open.W.data(), params.open.W.size());
  write_block(params.closed.W.data(), params.closed.W.size());
  write_block(params.box.R.data(), params.box.R.size());
  write_block(params.box.b.data(), params.box.b.size());
  if (!out) throw ParseError("short write while saving checkpoint: " + path);
}

inline DetectorParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ParseError("not a checkpoint file: " + path);
  uint32_t version = 0, dim = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  if (!in || version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version in " + path);
  if (dim == 0 || dim > 1 << 16)
    throw ParseError("implausible dimension in checkpoint " + path);

  DetectorParams p;
  p.open.W.resize(dim, dim);
  p.closed.W.resize(dim, dim);
  p.box.R.resize(4, dim);
  auto read_block = [&in, &path](double* data, size_t count) {
    in.read(reinterpret_cast<char*>(data), count * sizeof(double));
    if (!in) throw ParseError("truncated checkpoint: " + path);
  };
  read_block(p.open.W.data(), p.open.W.size());
  read_block(p.closed.W.data(), p.closed.W.size());
  read_block(p.box.R.data(), p.box.R.size());
  read_block(p.box.b.data(), p.box.b.size());
  return p;
}

}  // namespace ovdsim
