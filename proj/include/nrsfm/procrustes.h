#pragma once

// Sequence-level Procrustean alignment: rotating every frame onto a common
// reference shape, and estimating that reference by alternating minimization.

#include "nrsfm/geometry.h"

#include <vector>

namespace nrsfm {

struct AlignmentResult {
  PoseSequence aligned;                 // R_i * centralize(S_i)
  std::vector<Rotation> rotations;
  std::vector<double> per_frame_residual;  // ||aligned_i - centralize(reference)||_F
};

// Centralizes every frame and the reference, then rotates each frame onto the
// reference (no scaling). Frames are independent; `threads` > 1 solves them
// concurrently. A degenerate frame raises DegenerateError naming its index.
AlignmentResult align_to_reference(const PoseSequence& seq, const Joints3D& reference, int threads = 1);

struct GpaOptions {
  double tol = 1e-10;  // absolute decrease of the objective
  int max_iters = 100;
  int threads = 1;
};

struct GpaResult {
  Joints3D reference;  // centralized
  AlignmentResult alignment;
  // sum_i ||R_i S_i - reference||_F^2 after each alternation.
  std::vector<double> objective;
};

// Alternates per-frame rotation solves with a mean-shape update, starting
// from the centralized first frame.
GpaResult generalized_procrustes(const PoseSequence& seq, const GpaOptions& opts = {});

}  // namespace nrsfm
