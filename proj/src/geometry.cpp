#include "nrsfm/geometry.h"

#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace nrsfm {

namespace {

constexpr int kMaxSweeps = 60;
constexpr double kJacobiTol = 1e-15;
constexpr double kRankRatio = 1e-9;

// Any unit vector orthogonal to `a` (|a| = 1).
Eigen::Vector3d any_orthogonal(const Eigen::Vector3d& a) {
  Eigen::Vector3d trial = std::abs(a.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
  Eigen::Vector3d o = trial - a.dot(trial) * a;
  return o.normalized();
}

}  // namespace

bool is_rotation(const Eigen::Matrix3d& m, double tol) {
  if (!m.allFinite()) return false;
  const Eigen::Matrix3d e = m.transpose() * m - Eigen::Matrix3d::Identity();
  return e.cwiseAbs().maxCoeff() <= tol && std::abs(m.determinant() - 1.0) <= tol;
}

Rotation Rotation::from_matrix(const Eigen::Matrix3d& m, double tol) {
  if (!is_rotation(m, tol)) throw ValidationError("matrix is not a proper rotation");
  return Rotation(m);
}

Rotation Rotation::about_axis(const Eigen::Vector3d& axis, double angle) {
  if (axis.norm() == 0.0) throw ValidationError("rotation axis must be non-zero");
  return Rotation(Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix());
}

Rotation Rotation::random(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return Rotation(q.toRotationMatrix());
}

Joints2D project_orthographic(const Rotation& rot, const Joints3D& shape) {
  // rows of Pi * R are the first two rows of R
  return shape * rot.matrix().topRows<2>().transpose();
}

Svd3 jacobi_svd3(const Eigen::Matrix<double, Eigen::Dynamic, 3>& a) {
  if (a.rows() < 3) throw ValidationError("jacobi_svd3 needs at least 3 rows");
  Eigen::MatrixXd w = a;
  Eigen::Matrix3d v = Eigen::Matrix3d::Identity();
  Svd3 out;

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const double alpha = w.col(p).squaredNorm();
        const double beta = w.col(q).squaredNorm();
        const double gamma = w.col(p).dot(w.col(q));
        if (gamma == 0.0 || std::abs(gamma) <= kJacobiTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
          const double wp = w(r, p), wq = w(r, q);
          w(r, p) = c * wp - s * wq;
          w(r, q) = s * wp + c * wq;
        }
        for (int r = 0; r < 3; ++r) {
          const double vp = v(r, p), vq = v(r, q);
          v(r, p) = c * vp - s * vq;
          v(r, q) = s * vp + c * vq;
        }
      }
    }
    out.sweeps = sweep + 1;
    if (!rotated) break;
  }

  std::array<int, 3> order{0, 1, 2};
  Eigen::Vector3d norms(w.col(0).norm(), w.col(1).norm(), w.col(2).norm());
  std::sort(order.begin(), order.end(), [&](int i, int j) { return norms[i] > norms[j]; });

  out.u = Eigen::MatrixXd::Zero(a.rows(), 3);
  const double tiny = std::max(norms.maxCoeff(), 1e-300) * 1e-14;
  for (int k = 0; k < 3; ++k) {
    const int src = order[k];
    out.s[k] = norms[src];
    out.v.col(k) = v.col(src);
    if (norms[src] > tiny) out.u.col(k) = w.col(src) / norms[src];
  }
  // Complete U where singular values vanish.
  if (a.rows() == 3) {
    if (out.s[0] <= tiny) out.u.col(0) = Eigen::Vector3d::UnitX();
    if (out.s[1] <= tiny) out.u.col(1) = any_orthogonal(out.u.col(0));
    if (out.s[2] <= tiny) {
      const Eigen::Vector3d u0 = out.u.col(0), u1 = out.u.col(1);
      out.u.col(2) = u0.cross(u1);
    }
  } else {
    for (int k = 0; k < 3; ++k) {
      if (out.s[k] > tiny) continue;
      // Gram-Schmidt a canonical basis vector against the existing columns.
      for (Eigen::Index e = 0; e < a.rows(); ++e) {
        Eigen::VectorXd cand = Eigen::VectorXd::Unit(a.rows(), e);
        for (int j = 0; j < 3; ++j) {
          if (j != k) cand -= out.u.col(j).dot(cand) * out.u.col(j);
        }
        if (cand.norm() > 0.5) {
          out.u.col(k) = cand.normalized();
          break;
        }
      }
    }
  }
  return out;
}

KabschResult kabsch(const Joints3D& source, const Joints3D& target, bool with_scale) {
  if (source.rows() != target.rows()) {
    throw ValidationError("kabsch: source has " + std::to_string(source.rows()) + " joints, target has " +
                          std::to_string(target.rows()));
  }
  if (source.rows() < 3) throw ValidationError("kabsch: at least 3 joints required");
  if (!source.allFinite() || !target.allFinite()) throw ValidationError("kabsch: non-finite coordinates");

  const Svd3 shape_svd = jacobi_svd3(source);
  if (!(shape_svd.s[1] >= kRankRatio * shape_svd.s[0]) || shape_svd.s[0] == 0.0) throw DegenerateError();

  const Eigen::Matrix3d h = source.transpose() * target;
  const Svd3 svd = jacobi_svd3(h);
  const Eigen::Matrix3d u = svd.u;
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  if ((svd.v * u.transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  Eigen::Matrix3d r = svd.v * d * u.transpose();

  // Re-orthonormalize against accumulated rounding.
  Eigen::Quaterniond q(r);
  q.normalize();
  r = q.toRotationMatrix();

  KabschResult out;
  out.rotation = Rotation::from_matrix(r, 1e-9);
  if (with_scale) {
    const double trace = svd.s[0] + svd.s[1] + d(2, 2) * svd.s[2];
    out.scale = trace / source.squaredNorm();
  }
  out.residual = (out.scale * out.rotation.apply(source) - target).norm();
  return out;
}

}  // namespace nrsfm
