#include "nrsfm/rmnrd.h"

#include "nrsfm/optim.h"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <random>

namespace nrsfm {

// --- decomposition ---------------------------------------------------------

Joints3D RmnrdDecomposition::reconstruct(std::size_t frame) const {
  if (frame >= deformations.size()) {
    throw ValidationError("frame " + std::to_string(frame) + " out of range [0, " +
                          std::to_string(deformations.size()) + ")");
  }
  return reference + deformations[frame];
}

PoseSequence RmnrdDecomposition::shapes() const {
  PoseSequence out;
  out.reserve(frames());
  for (std::size_t i = 0; i < frames(); ++i) out.push_back(reconstruct(i));
  return out;
}

PoseSequence RmnrdDecomposition::camera_frame_shapes() const {
  PoseSequence out;
  out.reserve(frames());
  for (std::size_t i = 0; i < frames(); ++i) out.push_back(rotations.at(i).apply(reconstruct(i)));
  return out;
}

void RmnrdDecomposition::validate() const {
  if (deformations.empty()) throw ValidationError("decomposition has no frames");
  if (rotations.size() != deformations.size()) {
    throw ValidationError("decomposition has " + std::to_string(rotations.size()) + " rotations for " +
                          std::to_string(deformations.size()) + " frames");
  }
  for (std::size_t i = 0; i < deformations.size(); ++i) {
    if (deformations[i].rows() != reference.rows()) {
      throw ValidationError("deformation " + std::to_string(i) + " has " + std::to_string(deformations[i].rows()) +
                            " joints, reference has " + std::to_string(reference.rows()));
    }
  }
}

Joints3D ShapeBasisModel::shape(std::size_t frame) const {
  validate();
  if (frame >= static_cast<std::size_t>(coefficients.rows())) throw ValidationError("frame out of range");
  Joints3D s = Joints3D::Zero(bases[0].rows(), 3);
  for (std::size_t k = 0; k < bases.size(); ++k) {
    s += coefficients(static_cast<Eigen::Index>(frame), static_cast<Eigen::Index>(k)) * bases[k];
  }
  return s;
}

void ShapeBasisModel::validate() const {
  if (bases.empty()) throw ValidationError("shape basis is empty");
  if (coefficients.cols() != static_cast<Eigen::Index>(bases.size())) {
    throw ValidationError("coefficient columns do not match the basis count");
  }
  if (!motion.empty() && motion.size() != static_cast<std::size_t>(coefficients.rows())) {
    throw ValidationError("motion and coefficients disagree on the frame count");
  }
  for (const auto& b : bases) {
    if (b.rows() != bases[0].rows()) throw ValidationError("basis shapes differ in joint count");
  }
}

// --- factorizations --------------------------------------------------------

Eigen::MatrixXd measurement_matrix(const MeasurementSequence& w) {
  if (w.empty()) throw ValidationError("empty measurement sequence");
  const Eigen::Index p = w[0].rows();
  Eigen::MatrixXd m(2 * static_cast<Eigen::Index>(w.size()), p);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i].rows() != p) throw ValidationError("measurement frame " + std::to_string(i) + " has a different joint count");
    m.row(2 * static_cast<Eigen::Index>(i)) = w[i].col(0).transpose();
    m.row(2 * static_cast<Eigen::Index>(i) + 1) = w[i].col(1).transpose();
  }
  return m;
}

LowRankFactorization low_rank_factorize(const MeasurementSequence& w, int k) {
  const Eigen::MatrixXd m = measurement_matrix(w);
  const Eigen::Index r = 3 * static_cast<Eigen::Index>(k);
  if (k < 1 || r > std::min(m.rows(), m.cols())) {
    throw ValidationError("rank 3K = " + std::to_string(r) + " exceeds min(2F, P) = " +
                          std::to_string(std::min(m.rows(), m.cols())));
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd s = svd.singularValues();
  LowRankFactorization out;
  out.singular_values = s;
  const Eigen::VectorXd root = s.head(r).cwiseSqrt();
  out.motion = svd.matrixU().leftCols(r) * root.asDiagonal();
  out.basis = root.asDiagonal() * svd.matrixV().leftCols(r).transpose();
  out.residual = (m - out.motion * out.basis).norm();
  return out;
}

namespace {

// Coefficients of a^T L b in the 6 unknowns of a symmetric L.
Eigen::Matrix<double, 1, 6> sym_row(const Eigen::RowVector3d& a, const Eigen::RowVector3d& b) {
  Eigen::Matrix<double, 1, 6> g;
  g << a[0] * b[0], a[0] * b[1] + a[1] * b[0], a[0] * b[2] + a[2] * b[0], a[1] * b[1], a[1] * b[2] + a[2] * b[1],
      a[2] * b[2];
  return g;
}

}  // namespace

RigidFactorization rigid_factorize(const MeasurementSequence& w) {
  const Eigen::MatrixXd m = measurement_matrix(w);
  const auto frames = static_cast<Eigen::Index>(w.size());
  if (m.rows() < 3 || m.cols() < 3) throw ValidationError("rigid factorization needs 2F >= 3 and P >= 3");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::Vector3d root = svd.singularValues().head<3>().cwiseSqrt();
  if (!(root[2] > 0.0)) throw DegenerateError("measurement matrix has rank < 3");
  const Eigen::MatrixXd mhat = svd.matrixU().leftCols<3>() * root.asDiagonal();
  const Eigen::MatrixXd bhat = root.asDiagonal() * svd.matrixV().leftCols<3>().transpose();

  // Metric constraints: unit, orthogonal row pairs of mhat * Q.
  Eigen::MatrixXd a(3 * frames, 6);
  Eigen::VectorXd rhs(3 * frames);
  for (Eigen::Index i = 0; i < frames; ++i) {
    const Eigen::RowVector3d x = mhat.row(2 * i), y = mhat.row(2 * i + 1);
    a.row(3 * i) = sym_row(x, x);
    a.row(3 * i + 1) = sym_row(y, y);
    a.row(3 * i + 2) = sym_row(x, y);
    rhs.segment<3>(3 * i) << 1.0, 1.0, 0.0;
  }
  const Eigen::VectorXd l = a.colPivHouseholderQr().solve(rhs);
  Eigen::Matrix3d lm;
  lm << l[0], l[1], l[2], l[1], l[3], l[4], l[2], l[4], l[5];
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(lm);
  Eigen::Vector3d ev = eig.eigenvalues();
  const double floor = std::max(ev.maxCoeff(), 1e-300) * 1e-8;
  for (int k = 0; k < 3; ++k) ev[k] = std::max(ev[k], floor);
  const Eigen::Matrix3d q = eig.eigenvectors() * ev.cwiseSqrt().asDiagonal();

  const Eigen::MatrixXd motion = mhat * q;
  RigidFactorization out;
  out.shape = centralize(Joints3D((q.inverse() * bhat).transpose()));
  out.rotations.reserve(static_cast<std::size_t>(frames));
  double res = 0.0;
  for (Eigen::Index i = 0; i < frames; ++i) {
    Eigen::Matrix<double, 2, 3> pair;
    pair.row(0) = motion.row(2 * i);
    pair.row(1) = motion.row(2 * i + 1);
    Eigen::JacobiSVD<Eigen::Matrix<double, 2, 3>> ps(pair, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Matrix<double, 2, 3> orth = ps.matrixU() * ps.matrixV().leftCols<2>().transpose();
    Eigen::Matrix3d r;
    r.row(0) = orth.row(0);
    r.row(1) = orth.row(1);
    r.row(2) = orth.row(0).cross(orth.row(1));
    out.rotations.push_back(Rotation::from_matrix(r, 1e-8));
    res += (project_orthographic(out.rotations.back(), out.shape) - w[static_cast<std::size_t>(i)]).squaredNorm();
  }
  out.residual = std::sqrt(res);
  return out;
}

// --- direct solver ---------------------------------------------------------

void SolverConfig::validate() const {
  if (iterations < 1) throw ValidationError("iterations must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate must be > 0");
  if (!(init_noise >= 0.0)) throw ValidationError("init_noise must be >= 0");
  if (!(final_lr_ratio > 0.0 && final_lr_ratio <= 1.0)) throw ValidationError("final_lr_ratio must lie in (0, 1]");
  loss.validate();
}

namespace {

ad::Tensor six_from(const std::vector<Rotation>& rotations) {
  ad::Tensor t({rotations.size(), 6});
  for (std::size_t i = 0; i < rotations.size(); ++i) {
    const Eigen::Matrix3d& m = rotations[i].matrix();
    for (int r = 0; r < 3; ++r) {
      t.at(i, static_cast<std::size_t>(r)) = m(r, 0);
      t.at(i, static_cast<std::size_t>(3 + r)) = m(r, 1);
    }
  }
  return t;
}

std::vector<Rotation> rotations_from(const ad::Tensor& nine) {
  std::vector<Rotation> out;
  for (std::size_t i = 0; i < nine.rows(); ++i) {
    Eigen::Matrix3d m;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m(r, c) = nine.at(i, static_cast<std::size_t>(3 * r + c));
    out.push_back(Rotation::from_matrix(m, 1e-8));
  }
  return out;
}

}  // namespace

FitResult fit_sequence(const MeasurementSequence& w, const DiffusionPrior* prior, const SolverConfig& cfg,
                       const RmnrdDecomposition* init) {
  cfg.validate();
  if (w.empty()) throw ValidationError("fit_sequence: empty measurement sequence");
  const std::size_t frames = w.size();
  const Eigen::Index p = w[0].rows();
  if (p < 3) throw ValidationError("fit_sequence: at least 3 joints required");
  for (const auto& wi : w) {
    if (wi.rows() != p) throw ValidationError("fit_sequence: frames differ in joint count");
    if (!wi.allFinite()) throw ValidationError("fit_sequence: non-finite measurement");
  }
  if (frames < 2 && cfg.loss.beta[3] > 0.0) {
    throw ValidationError("fit_sequence: smoothness needs at least 2 frames");
  }
  if (cfg.loss.beta[2] > 0.0 && prior && prior->denoiser().pose_dim() != 3 * static_cast<std::size_t>(p)) {
    throw ValidationError("fit_sequence: prior was trained for a different joint count");
  }

  std::mt19937_64 rng(cfg.seed);
  Joints3D reference;
  ad::Tensor deform({frames * static_cast<std::size_t>(p), 3}, 0.0);
  ad::Tensor six;
  if (init) {
    init->validate();
    if (init->frames() != frames || init->joints() != p) throw ValidationError("fit_sequence: init does not match W");
    reference = init->reference;
    deform = ad::Tensor::from_matrix(stack_rows(init->deformations));
    six = six_from(init->rotations);
  } else {
    std::vector<Rotation> rots(frames);
    if (2 * frames >= 3) {
      const RigidFactorization rf = rigid_factorize(w);
      reference = rf.shape;
      rots = rf.rotations;
      // The depth reflection explains W equally well; only the prior can
      // prefer one of the two.
      if (prior && cfg.loss.beta[2] > 0.0) {
        const Eigen::Matrix3d d = Eigen::Vector3d(1.0, 1.0, -1.0).asDiagonal();
        RmnrdDecomposition a{reference, PoseSequence(frames, Joints3D::Zero(p, 3)), rots};
        RmnrdDecomposition b{reference * d, a.deformations, {}};
        for (const auto& r : rots) b.rotations.push_back(Rotation::from_matrix(d * r.matrix() * d, 1e-8));
        const double la = total_loss(a, w, prior, cfg.loss, cfg.seed).total;
        const double lb = total_loss(b, w, prior, cfg.loss, cfg.seed).total;
        if (lb < la) {
          reference = b.reference;
          rots = b.rotations;
        }
      }
    } else {
      reference = Joints3D::Zero(p, 3);
      reference.leftCols<2>() = w[0];
      reference = centralize(reference);
    }
    six = six_from(rots);
    std::normal_distribution<double> n(0.0, cfg.init_noise);
    if (cfg.init_noise > 0.0) {
      for (double& v : six.data()) v += n(rng);
    }
  }
  // Shapes are optimized in units of the measurement RMS so that one Adam
  // step moves them by a fixed fraction of the scene size.
  double unit = std::sqrt(stack_rows(w).squaredNorm() / static_cast<double>(2 * frames * static_cast<std::size_t>(p)));
  if (!(unit > 0.0)) unit = 1.0;
  reference /= unit;
  for (double& v : deform.data()) v /= unit;
  const double ref_norm = reference.norm();
  if (!(ref_norm > 0.0)) throw DegenerateError("initial reference shape is zero");

  ad::ParameterSet params;
  params.add("reference", ad::Tensor::from_matrix(reference));
  params.add("deformations", std::move(deform));
  params.add("rotations", std::move(six));
  ad::Adam adam(ad::AdamConfig{.amsgrad = cfg.amsgrad});

  FitResult out;
  out.trace.reserve(static_cast<std::size_t>(cfg.iterations));
  for (int it = 0; it < cfg.iterations; ++it) {
    ad::Graph g;
    const auto v = params.bind(g);
    ad::Var shapes = ad::scale(ad::tile_rows(v.at("reference"), frames) + v.at("deformations"), unit);
    ad::Var rots = ad::gram_schmidt(v.at("rotations"));
    const Joints3D ref = unit * params.get("reference").to_matrix();
    const graph::LossTerms terms =
        graph::total(g, rots, shapes, ref, w, prior, cfg.loss, cfg.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(it + 1));
    const LossBreakdown b = terms.values();
    if (!std::isfinite(b.total)) throw NumericalError("fit_sequence: non-finite loss at iteration " + std::to_string(it));
    out.trace.push_back(b);

    const double progress = cfg.iterations > 1 ? static_cast<double>(it) / (cfg.iterations - 1) : 0.0;
    const double decay = cfg.final_lr_ratio + (1.0 - cfg.final_lr_ratio) * 0.5 * (1.0 + std::cos(M_PI * progress));
    adam.step(params, g.backward(terms.total), cfg.learning_rate * decay);

    Eigen::MatrixXd r = params.get("reference").to_matrix();
    r = centralize(r);
    const double nrm = r.norm();
    if (!(nrm > 0.0) || !std::isfinite(nrm)) throw NumericalError("fit_sequence: reference collapsed at iteration " + std::to_string(it));
    params.get("reference") = ad::Tensor::from_matrix(r * (ref_norm / nrm));
  }

  RmnrdDecomposition& d = out.decomposition;
  d.reference = unit * params.get("reference").to_matrix();
  const Eigen::MatrixXd def = unit * params.get("deformations").to_matrix();
  for (std::size_t i = 0; i < frames; ++i) d.deformations.push_back(def.middleRows(static_cast<Eigen::Index>(i) * p, p));
  ad::Graph g;
  d.rotations = rotations_from(ad::gram_schmidt(g.constant(params.get("rotations"))).value());
  return out;
}

RmnrdDecomposition decompose(const PoseSequence& seq, const GpaOptions& opts) {
  const GpaResult gpa = generalized_procrustes(seq, opts);
  RmnrdDecomposition d;
  d.reference = gpa.reference;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    d.deformations.push_back(gpa.alignment.aligned[i] - gpa.reference);
    d.rotations.push_back(gpa.alignment.rotations[i].inverse());
  }
  return d;
}

}  // namespace nrsfm
