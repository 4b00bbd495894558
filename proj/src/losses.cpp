#include "nrsfm/losses.h"

#include "nrsfm/errors.h"
#include "nrsfm/procrustes.h"

#include <cmath>
#include <random>

namespace nrsfm {

namespace {

void check_frames(const std::vector<Rotation>& rotations, const PoseSequence& shapes) {
  if (rotations.size() != shapes.size()) {
    throw ValidationError("got " + std::to_string(rotations.size()) + " rotations for " +
                          std::to_string(shapes.size()) + " frames");
  }
  if (shapes.empty()) throw ValidationError("empty sequence");
  for (std::size_t i = 1; i < shapes.size(); ++i) {
    if (shapes[i].rows() != shapes[0].rows()) {
      throw ValidationError("frame " + std::to_string(i) + " has a different joint count");
    }
  }
}

void check_measurements(const PoseSequence& shapes, const MeasurementSequence& w) {
  if (w.size() != shapes.size()) {
    throw ValidationError("measurement has " + std::to_string(w.size()) + " frames, shapes have " +
                          std::to_string(shapes.size()));
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i].rows() != shapes[i].rows()) {
      throw ValidationError("measurement frame " + std::to_string(i) + " has " + std::to_string(w[i].rows()) +
                            " joints, shape has " + std::to_string(shapes[i].rows()));
    }
  }
}

std::size_t joints_of(const ad::Var& shapes, std::size_t frames) {
  const std::size_t rows = shapes.value().rows();
  if (frames == 0 || rows % frames != 0) throw ValidationError("shape rows are not a multiple of the frame count");
  return rows / frames;
}

// Per-frame joint mean removed from [F*P, 3] rows.
ad::Var centralize_frames(ad::Graph& g, ad::Var shapes, std::size_t frames) {
  const std::size_t p = joints_of(shapes, frames);
  ad::Tensor avg({3 * p, 3});
  ad::Tensor expand({3, 3 * p});
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t c = 0; c < 3; ++c) {
      avg.at(3 * j + c, c) = 1.0 / static_cast<double>(p);
      expand.at(c, 3 * j + c) = 1.0;
    }
  }
  ad::Var flat = ad::reshape(shapes, {frames, 3 * p});
  ad::Var means = ad::matmul(ad::matmul(flat, g.constant(std::move(avg))), g.constant(std::move(expand)));
  return ad::reshape(flat - means, {frames * p, 3});
}

PoseSequence unstack(const ad::Tensor& t, std::size_t frames) {
  const std::size_t p = t.rows() / frames;
  PoseSequence out(frames, Joints3D(static_cast<Eigen::Index>(p), 3));
  for (std::size_t i = 0; i < frames; ++i)
    for (std::size_t j = 0; j < p; ++j)
      for (std::size_t c = 0; c < 3; ++c) out[i](static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) = t.at(i * p + j, c);
  return out;
}

}  // namespace

void LossConfig::validate() const {
  for (double b : beta) {
    if (!(b >= 0.0) || !std::isfinite(b)) throw ValidationError("loss weights must be finite and >= 0");
  }
  if (!(lambda_R >= 0.0) || !(lambda_S >= 0.0) || !std::isfinite(lambda_R) || !std::isfinite(lambda_S)) {
    throw ValidationError("smoothness weights must be finite and >= 0");
  }
  if (prior_mc_samples < 1) throw ValidationError("prior_mc_samples must be >= 1");
}

double weighted_total(const LossConfig& cfg, double reproj, double proc, double prior, double smooth) {
  return ((cfg.beta[0] * reproj + cfg.beta[1] * proc) + cfg.beta[2] * prior) + cfg.beta[3] * smooth;
}

Eigen::MatrixXd stack_rows(const PoseSequence& seq) {
  const Eigen::Index p = seq.empty() ? 0 : seq[0].rows();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(seq.size()) * p, 3);
  for (std::size_t i = 0; i < seq.size(); ++i) out.middleRows(static_cast<Eigen::Index>(i) * p, p) = seq[i];
  return out;
}

Eigen::MatrixXd stack_rows(const MeasurementSequence& seq) {
  const Eigen::Index p = seq.empty() ? 0 : seq[0].rows();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(seq.size()) * p, 2);
  for (std::size_t i = 0; i < seq.size(); ++i) out.middleRows(static_cast<Eigen::Index>(i) * p, p) = seq[i];
  return out;
}

Eigen::MatrixXd stack_rotations(const std::vector<Rotation>& rotations) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rotations.size()), 9);
  for (std::size_t i = 0; i < rotations.size(); ++i) {
    const Eigen::Matrix3d& m = rotations[i].matrix();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out(static_cast<Eigen::Index>(i), 3 * r + c) = m(r, c);
  }
  return out;
}

double reprojection_loss(const std::vector<Rotation>& rotations, const PoseSequence& shapes,
                         const MeasurementSequence& w) {
  check_frames(rotations, shapes);
  check_measurements(shapes, w);
  double acc = 0.0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    acc += (project_orthographic(rotations[i], shapes[i]) - w[i]).squaredNorm();
  }
  return acc / static_cast<double>(shapes.size());
}

double procrustes_loss(const PoseSequence& shapes, const Joints3D& reference, bool squared) {
  if (shapes.empty()) throw ValidationError("empty sequence");
  const AlignmentResult a = align_to_reference(shapes, reference);
  double acc = 0.0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const double d = (shapes[i] - a.aligned[i]).squaredNorm();
    acc += squared ? d : std::sqrt(d);
  }
  return acc / static_cast<double>(shapes.size());
}

double smoothness_loss(const std::vector<Rotation>& rotations, const PoseSequence& shapes, double lambda_R,
                       double lambda_S) {
  check_frames(rotations, shapes);
  if (shapes.size() < 2) throw ValidationError("smoothness needs at least 2 frames");
  double rot = 0.0, shape = 0.0;
  for (std::size_t i = 1; i < shapes.size(); ++i) {
    rot += (rotations[i].matrix() - rotations[i - 1].matrix()).squaredNorm();
    shape += (shapes[i] - shapes[i - 1]).squaredNorm();
  }
  return lambda_R * rot + lambda_S * shape;
}

double prior_term(const DiffusionPrior& prior, const std::vector<Rotation>& rotations, const PoseSequence& shapes,
                  const MeasurementSequence& w, int mc_samples, std::uint64_t seed, bool detach) {
  check_frames(rotations, shapes);
  check_measurements(shapes, w);
  std::mt19937_64 rng(seed);
  const PriorDraws draws =
      draw_prior_noise(prior.schedule(), shapes.size(), 3 * static_cast<std::size_t>(shapes[0].rows()), mc_samples, rng);
  ad::Graph g;
  ad::Var r = g.constant(ad::Tensor::from_matrix(stack_rotations(rotations)));
  ad::Var s = g.constant(ad::Tensor::from_matrix(stack_rows(shapes)));
  return graph::prior(g, r, s, w, prior, draws, detach).value().item();
}

LossBreakdown total_loss(const RmnrdDecomposition& decomp, const MeasurementSequence& w, const DiffusionPrior* prior,
                         const LossConfig& cfg, std::uint64_t prior_seed) {
  cfg.validate();
  decomp.validate();
  const PoseSequence shapes = decomp.shapes();
  LossBreakdown b;
  b.reproj = reprojection_loss(decomp.rotations, shapes, w);
  if (cfg.beta[1] > 0.0) b.proc = procrustes_loss(shapes, decomp.reference, cfg.squared_procrustes);
  if (cfg.beta[2] > 0.0 && prior) {
    b.prior = prior_term(*prior, decomp.rotations, shapes, w, cfg.prior_mc_samples, prior_seed, cfg.detach_prior_noise);
  }
  if (cfg.beta[3] > 0.0) b.smooth = smoothness_loss(decomp.rotations, shapes, cfg.lambda_R, cfg.lambda_S);
  b.total = weighted_total(cfg, b.reproj, b.proc, prior ? b.prior : 0.0, b.smooth);
  return b;
}

namespace graph {

ad::Var reprojection(ad::Graph& g, ad::Var rotations, ad::Var shapes, const MeasurementSequence& w) {
  const std::size_t frames = rotations.value().rows();
  const std::size_t p = joints_of(shapes, frames);
  if (w.size() != frames) throw ValidationError("measurement frame count does not match the rotations");
  for (const auto& wi : w) {
    if (static_cast<std::size_t>(wi.rows()) != p) throw ValidationError("measurement joint count does not match the shapes");
  }
  ad::Var cam = ad::rotate_frames(rotations, shapes);
  ad::Var diff = ad::slice_cols(cam, 0, 2) - g.constant(ad::Tensor::from_matrix(stack_rows(w)));
  return ad::scale(ad::frobenius_sq(diff), 1.0 / static_cast<double>(frames));
}

ad::Var procrustes(ad::Graph& g, ad::Var shapes, std::size_t frames, const Joints3D& reference, bool squared) {
  const std::size_t p = joints_of(shapes, frames);
  const AlignmentResult a = align_to_reference(unstack(shapes.value(), frames), reference);
  ad::Var fixed = g.constant(ad::Tensor::from_matrix(stack_rotations(a.rotations)));
  ad::Var target = ad::rotate_frames(fixed, centralize_frames(g, shapes, frames));
  ad::Var diff = shapes - target;
  const double inv_f = 1.0 / static_cast<double>(frames);
  if (squared) return ad::scale(ad::frobenius_sq(diff), inv_f);
  ad::Var acc = ad::norm(ad::slice_rows(diff, 0, p));
  for (std::size_t i = 1; i < frames; ++i) acc = acc + ad::norm(ad::slice_rows(diff, i * p, p));
  return ad::scale(acc, inv_f);
}

ad::Var smoothness(ad::Var rotations, ad::Var shapes, std::size_t frames, double lambda_R, double lambda_S) {
  if (frames < 2) throw ValidationError("smoothness needs at least 2 frames");
  const std::size_t p = joints_of(shapes, frames);
  ad::Var dr = ad::slice_rows(rotations, 1, frames - 1) - ad::slice_rows(rotations, 0, frames - 1);
  ad::Var ds = ad::slice_rows(shapes, p, (frames - 1) * p) - ad::slice_rows(shapes, 0, (frames - 1) * p);
  return ad::scale(ad::frobenius_sq(dr), lambda_R) + ad::scale(ad::frobenius_sq(ds), lambda_S);
}

ad::Var prior(ad::Graph& g, ad::Var rotations, ad::Var shapes, const MeasurementSequence& w,
              const DiffusionPrior& prior, const PriorDraws& draws, bool detach) {
  const std::size_t frames = rotations.value().rows();
  const std::size_t p = joints_of(shapes, frames);
  if (w.size() != frames) throw ValidationError("measurement frame count does not match the rotations");
  Eigen::MatrixXd cond(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(2 * p));
  for (std::size_t i = 0; i < frames; ++i) {
    if (static_cast<std::size_t>(w[i].rows()) != p) throw ValidationError("measurement joint count does not match the shapes");
    for (std::size_t j = 0; j < p; ++j) {
      cond(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(2 * j)) = w[i](static_cast<Eigen::Index>(j), 0);
      cond(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(2 * j + 1)) = w[i](static_cast<Eigen::Index>(j), 1);
    }
  }
  ad::Var poses = ad::reshape(ad::rotate_frames(rotations, shapes), {frames, 3 * p});
  return prior.prior_loss(g, poses, cond, draws, detach);
}

LossBreakdown LossTerms::values() const {
  LossBreakdown b;
  if (reproj.valid()) b.reproj = reproj.value().item();
  if (proc.valid()) b.proc = proc.value().item();
  if (prior.valid()) b.prior = prior.value().item();
  if (smooth.valid()) b.smooth = smooth.value().item();
  if (total.valid()) b.total = total.value().item();
  return b;
}

LossTerms total(ad::Graph& g, ad::Var rotations, ad::Var shapes, const Joints3D& reference,
                const MeasurementSequence& w, const DiffusionPrior* prior, const LossConfig& cfg,
                std::uint64_t prior_seed) {
  cfg.validate();
  const std::size_t frames = rotations.value().rows();
  LossTerms t;
  t.reproj = reprojection(g, rotations, shapes, w);
  ad::Var acc = ad::scale(t.reproj, cfg.beta[0]);
  if (cfg.beta[1] > 0.0) {
    t.proc = procrustes(g, shapes, frames, reference, cfg.squared_procrustes);
    acc = acc + ad::scale(t.proc, cfg.beta[1]);
  }
  if (cfg.beta[2] > 0.0 && prior) {
    std::mt19937_64 rng(prior_seed);
    const PriorDraws draws =
        draw_prior_noise(prior->schedule(), frames, 3 * joints_of(shapes, frames), cfg.prior_mc_samples, rng);
    t.prior = graph::prior(g, rotations, shapes, w, *prior, draws, cfg.detach_prior_noise);
    acc = acc + ad::scale(t.prior, cfg.beta[2]);
  }
  if (cfg.beta[3] > 0.0) {
    t.smooth = smoothness(rotations, shapes, frames, cfg.lambda_R, cfg.lambda_S);
    acc = acc + ad::scale(t.smooth, cfg.beta[3]);
  }
  t.total = acc;
  return t;
}

}  // namespace graph

}  // namespace nrsfm
