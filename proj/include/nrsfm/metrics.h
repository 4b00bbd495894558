#pragma once

// Pose-error metrics in millimeters and the report that bundles them.

#include "nrsfm/geometry.h"

#include <json.hpp>

#include <vector>

namespace nrsfm {

double mpjpe(const PoseSequence& pred, const PoseSequence& gt);

// Centralizes both sides and scales pred by s* = <pred, gt> / <pred, pred>,
// per frame by default or once for the whole sequence.
double n_mpjpe(const PoseSequence& pred, const PoseSequence& gt, bool per_frame_scale = true);

// Similarity Procrustes per frame (rotation, scale, translation).
double pa_mpjpe(const PoseSequence& pred, const PoseSequence& gt);

// Negates the third coordinate of every frame. Under orthographic projection
// a sequence and its depth flip (with mirrored rotations) explain the same 2D
// tracks.
PoseSequence flip_depth(const PoseSequence& seq);

// pred or flip_depth(pred), whichever has the lower PA-MPJPE against gt. One
// decision for the whole sequence.
PoseSequence resolve_depth_flip(const PoseSequence& pred, const PoseSequence& gt, bool* flipped = nullptr);

enum class PckAlignment { kRaw, kProcrustes };

struct PckAuc {
  double pck = 0.0;  // percent
  double auc = 0.0;  // percent
};

// 0, 5, ..., 150 mm.
std::vector<double> default_auc_thresholds();

// A joint counts as correct when its error is strictly below the threshold,
// or exactly zero (so a perfect pose scores 100 at the 0 mm grid point too).
PckAuc pck_auc(const PoseSequence& pred, const PoseSequence& gt, double threshold = 150.0,
               const std::vector<double>& auc_thresholds = default_auc_thresholds(),
               PckAlignment alignment = PckAlignment::kRaw);

// Per-joint errors after each alignment, frame-major.
std::vector<std::vector<double>> joint_errors(const PoseSequence& pred, const PoseSequence& gt);
std::vector<std::vector<double>> joint_errors_scaled(const PoseSequence& pred, const PoseSequence& gt,
                                                     bool per_frame_scale = true);
std::vector<std::vector<double>> joint_errors_procrustes(const PoseSequence& pred, const PoseSequence& gt);

struct EvalOptions {
  double pck_threshold = 150.0;
  std::vector<double> auc_thresholds = default_auc_thresholds();
  PckAlignment pck_alignment = PckAlignment::kRaw;
  bool per_frame_scale = true;
  bool resolve_flip = false;
};

struct FrameMetrics {
  double mpjpe = 0.0;
  double n_mpjpe = 0.0;
  double pa_mpjpe = 0.0;
};

struct EvalReport {
  double mpjpe = 0.0;
  double n_mpjpe = 0.0;
  double pa_mpjpe = 0.0;
  double pck = 0.0;
  double auc = 0.0;
  bool depth_flipped = false;
  std::vector<FrameMetrics> per_frame;

  nlohmann::json to_json() const;
};

EvalReport evaluate(const PoseSequence& pred, const PoseSequence& gt, const EvalOptions& opts = {});

}  // namespace nrsfm
