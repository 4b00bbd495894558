#pragma once

// Reference-plus-deformation reconstruction: the direct per-sequence solver,
// rigid and low-rank factorizations of the measurement matrix, and the
// decomposition of a known sequence about its Procrustean mean.

#include "nrsfm/decomposition.h"
#include "nrsfm/diffusion.h"
#include "nrsfm/losses.h"
#include "nrsfm/procrustes.h"

#include <cstdint>
#include <vector>

namespace nrsfm {

// S_i = sum_k coefficients(i, k) * bases[k].
struct ShapeBasisModel {
  std::vector<Joints3D> bases;
  Eigen::MatrixXd coefficients;  // F x K
  std::vector<Rotation> motion;

  Joints3D shape(std::size_t frame) const;
  void validate() const;
};

// The 2F x P matrix with rows (x_i, y_i) per frame.
Eigen::MatrixXd measurement_matrix(const MeasurementSequence& w);

struct LowRankFactorization {
  Eigen::MatrixXd motion;  // 2F x 3K
  Eigen::MatrixXd basis;   // 3K x P
  Eigen::VectorXd singular_values;  // full spectrum of W
  double residual = 0.0;   // ||W - motion * basis||_F
};

// Truncated SVD at rank 3K. Throws ValidationError when 3K > min(2F, P).
LowRankFactorization low_rank_factorize(const MeasurementSequence& w, int k);

// Rank-3 factorization with the metric upgrade that turns the motion rows
// into orthonormal pairs, giving one shape and per-frame rotations. Up to the
// usual depth reflection.
struct RigidFactorization {
  Joints3D shape;  // centralized
  std::vector<Rotation> rotations;
  double residual = 0.0;  // sqrt(sum_i ||Pi R_i S - W_i||^2)
};
RigidFactorization rigid_factorize(const MeasurementSequence& w);

struct SolverConfig {
  double learning_rate = 1e-2;
  // Cosine decay of the step size down to learning_rate * final_lr_ratio.
  double final_lr_ratio = 1e-2;
  int iterations = 2000;
  LossConfig loss;
  std::uint64_t seed = 0;
  // Gaussian noise on the 6-value rotation parameters at initialization.
  double init_noise = 0.01;
  // Keeps Adam's step from growing again once the gradients have died down.
  bool amsgrad = true;

  void validate() const;
};

struct FitResult {
  RmnrdDecomposition decomposition;
  // Breakdown evaluated before each update, one entry per iteration.
  std::vector<LossBreakdown> trace;
};

// Adam on {reference, deformations, 6-value rotations} against the total
// loss. The reference is re-centralized and rescaled to its initial norm after
// every step. Shapes are optimized in units of the RMS measurement. With an
// active prior the factorization start or its depth reflection is used,
// whichever has the lower total loss. `init`,
// when given, replaces the factorization start (its rotations are used
// without noise).
FitResult fit_sequence(const MeasurementSequence& w, const DiffusionPrior* prior, const SolverConfig& cfg,
                       const RmnrdDecomposition* init = nullptr);

// Reference = Procrustean mean of `seq`, deformations = aligned frames minus
// the reference, rotations carry the aligned frames back onto the centralized
// input frames.
RmnrdDecomposition decompose(const PoseSequence& seq, const GpaOptions& opts = {});

}  // namespace nrsfm
