#pragma once

// Reprojection, Procrustes, prior and smoothness losses with their weighted
// sum. Each loss has a plain value route over Eigen types and a graph route
// for differentiation; both compute the same quantity.

#include "nrsfm/decomposition.h"
#include "nrsfm/diffusion.h"
#include "nrsfm/geometry.h"
#include "nrsfm/tensor.h"

#include <array>
#include <cstdint>
#include <vector>

namespace nrsfm {

struct LossConfig {
  // reproj, proc, prior, smooth
  std::array<double, 4> beta{1.0, 0.5, 0.1, 0.1};
  double lambda_R = 1.0;
  double lambda_S = 1.0;
  int prior_mc_samples = 1;
  // ||S_i - S*_i||_F^2 instead of ||S_i - S*_i||_F.
  bool squared_procrustes = false;
  // Stop prior gradients through the noised pose.
  bool detach_prior_noise = false;

  void validate() const;
};

// Terms with a zero weight are not evaluated and reported as 0, except the
// reprojection term which is always reported.
struct LossBreakdown {
  double reproj = 0.0;
  double proc = 0.0;
  double prior = 0.0;
  double smooth = 0.0;
  double total = 0.0;
};

// ((b1 r + b2 p) + b3 q) + b4 s, the order used by every total in the library.
double weighted_total(const LossConfig& cfg, double reproj, double proc, double prior, double smooth);

// (1/F) sum_i ||Pi R_i S_i - W_i||_F^2
double reprojection_loss(const std::vector<Rotation>& rotations, const PoseSequence& shapes,
                         const MeasurementSequence& w);
// (1/F) sum_i ||S_i - S*_i||_F with S*_i = align_to_reference(shapes, reference).
double procrustes_loss(const PoseSequence& shapes, const Joints3D& reference, bool squared = false);
// sum_{i>=1} lambda_R ||R_i - R_{i-1}||_F^2 + lambda_S ||S_i - S_{i-1}||_F^2
double smoothness_loss(const std::vector<Rotation>& rotations, const PoseSequence& shapes, double lambda_R,
                       double lambda_S);
// Prior term averaged over frames, evaluated on the camera-frame poses R_i S_i
// conditioned on W_i. Draws come from `seed`.
double prior_term(const DiffusionPrior& prior, const std::vector<Rotation>& rotations, const PoseSequence& shapes,
                  const MeasurementSequence& w, int mc_samples, std::uint64_t seed, bool detach = false);

// `prior` may be null, in which case the prior term is 0.
LossBreakdown total_loss(const RmnrdDecomposition& decomp, const MeasurementSequence& w, const DiffusionPrior* prior,
                         const LossConfig& cfg, std::uint64_t prior_seed = 0);

// Flattening helpers shared with the solvers: a sequence as [F*P, D] rows.
Eigen::MatrixXd stack_rows(const PoseSequence& seq);
Eigen::MatrixXd stack_rows(const MeasurementSequence& seq);
Eigen::MatrixXd stack_rotations(const std::vector<Rotation>& rotations);  // [F, 9]

namespace graph {

// rotations [F, 9] (row-major), shapes [F*P, 3].
ad::Var reprojection(ad::Graph& g, ad::Var rotations, ad::Var shapes, const MeasurementSequence& w);
// Alignment rotations are computed from the current values and enter the
// graph as constants.
ad::Var procrustes(ad::Graph& g, ad::Var shapes, std::size_t frames, const Joints3D& reference, bool squared);
ad::Var smoothness(ad::Var rotations, ad::Var shapes, std::size_t frames, double lambda_R, double lambda_S);
ad::Var prior(ad::Graph& g, ad::Var rotations, ad::Var shapes, const MeasurementSequence& w,
              const DiffusionPrior& prior, const PriorDraws& draws, bool detach);

struct LossTerms {
  ad::Var reproj, proc, prior, smooth, total;  // unused terms stay invalid
  LossBreakdown values() const;
};

// Full weighted objective. `reference` feeds the Procrustes term.
LossTerms total(ad::Graph& g, ad::Var rotations, ad::Var shapes, const Joints3D& reference,
                const MeasurementSequence& w, const DiffusionPrior* prior, const LossConfig& cfg,
                std::uint64_t prior_seed = 0);

}  // namespace graph

}  // namespace nrsfm
