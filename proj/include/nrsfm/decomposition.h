#pragma once

#include "nrsfm/geometry.h"

#include <vector>

namespace nrsfm {

// Reference shape plus per-frame residual deformation, with the per-frame
// rotation that carries the reconstructed shape into the camera frame:
//   S_i = reference + deformations[i],  W_i ~ Pi R_i S_i.
struct RmnrdDecomposition {
  Joints3D reference;
  PoseSequence deformations;
  std::vector<Rotation> rotations;

  std::size_t frames() const { return deformations.size(); }
  Eigen::Index joints() const { return reference.rows(); }

  // reference + deformations[frame]; throws ValidationError when out of range.
  Joints3D reconstruct(std::size_t frame) const;
  PoseSequence shapes() const;
  // R_i S_i for every frame.
  PoseSequence camera_frame_shapes() const;

  // Throws ValidationError on inconsistent sizes.
  void validate() const;
};

}  // namespace nrsfm
