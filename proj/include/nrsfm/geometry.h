#pragma once

// Joint sets, orthographic projection and the single-pair Procrustes solve.
// Shapes are stored one joint per row (P x 3 / P x 2), in millimeters.

#include "nrsfm/errors.h"

#include <Eigen/Core>

#include <random>
#include <vector>

namespace nrsfm {

using Joints3D = Eigen::Matrix<double, Eigen::Dynamic, 3>;
using Joints2D = Eigen::Matrix<double, Eigen::Dynamic, 2>;
using PoseSequence = std::vector<Joints3D>;
using MeasurementSequence = std::vector<Joints2D>;

// Element of SO(3). Construction from a raw matrix is validated.
class Rotation {
 public:
  Rotation() : m_(Eigen::Matrix3d::Identity()) {}

  static Rotation identity() { return Rotation(); }
  // Throws ValidationError unless R^T R = I and det R = +1 within `tol`.
  static Rotation from_matrix(const Eigen::Matrix3d& m, double tol = 1e-9);
  static Rotation about_axis(const Eigen::Vector3d& axis, double angle);
  // Haar-uniform sample.
  static Rotation random(std::mt19937_64& rng);

  const Eigen::Matrix3d& matrix() const { return m_; }
  Rotation inverse() const { return Rotation(m_.transpose()); }
  Rotation operator*(const Rotation& o) const { return Rotation(m_ * o.m_); }

  // Applies the rotation to every joint.
  Joints3D apply(const Joints3D& shape) const { return shape * m_.transpose(); }

 private:
  explicit Rotation(const Eigen::Matrix3d& m) : m_(m) {}
  Eigen::Matrix3d m_;
};

bool is_rotation(const Eigen::Matrix3d& m, double tol = 1e-9);

// Subtracts the joint mean.
template <typename Derived>
typename Derived::PlainObject centralize(const Eigen::MatrixBase<Derived>& shape) {
  typename Derived::PlainObject out = shape;
  if (out.rows() > 0) out.rowwise() -= shape.colwise().mean();
  return out;
}

// Pi * R * S^T in P x 2 layout.
Joints2D project_orthographic(const Rotation& rot, const Joints3D& shape);

// Thin SVD of an n x 3 matrix (n >= 3) by one-sided Jacobi rotations.
// Singular values are sorted descending. U is n x 3 with orthonormal columns;
// columns belonging to vanishing singular values are completed to an
// orthonormal set (for n == 3, U is a full orthogonal matrix).
struct Svd3 {
  Eigen::MatrixXd u;
  Eigen::Vector3d s;
  Eigen::Matrix3d v;
  int sweeps = 0;
};
Svd3 jacobi_svd3(const Eigen::Matrix<double, Eigen::Dynamic, 3>& a);

struct KabschResult {
  Rotation rotation;
  double scale = 1.0;
  double residual = 0.0;
};

// argmin over R in SO(3) (and s > 0 when with_scale) of ||s R source - target||_F,
// applied per joint. Both inputs must already be centralized. Throws
// DegenerateError when the source has rank < 2.
KabschResult kabsch(const Joints3D& source, const Joints3D& target, bool with_scale = false);

}  // namespace nrsfm
