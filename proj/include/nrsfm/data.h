#pragma once

// Skeletons, the synthetic scene generator and the JSON interchange files.

#include "nrsfm/decomposition.h"
#include "nrsfm/diffusion.h"
#include "nrsfm/geometry.h"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace nrsfm {

// Kinematic tree in its rest pose. offsets.row(j) is the vector from the
// parent joint to joint j (zero for the root).
struct Skeleton {
  std::string name;
  std::vector<int> parents;
  Joints3D offsets;

  std::size_t joints() const { return parents.size(); }
  std::vector<double> bone_lengths() const;  // per non-root joint, in joint order
  double mean_bone_length() const;
  int depth() const;  // longest root-to-leaf bone count
  Joints3D rest_pose() const;
  // Throws ValidationError unless parents form a tree rooted at the unique -1
  // entry with every parent preceding its child and all bones longer than 0.
  void validate() const;

  static Skeleton human17();
  static Skeleton human14();
  // Chain of `joints` segments on a helix, so the rest pose is not planar.
  static Skeleton rod(std::size_t joints, double bone = 100.0);
  // "human17", "human14", or "rod" with the given joint count.
  static Skeleton by_name(const std::string& name, std::size_t joints = 0);
};

struct GeneratorParams {
  std::size_t frames = 16;
  double deformation_amplitude = 0.2;  // rad
  double angular_step = 0.05;          // rad per frame
  double camera_sweep = 3.141592653589793;  // rad over the sequence
  double noise_sigma = 0.0;            // mm
  std::uint64_t seed = 0;
};

struct SyntheticScene {
  Skeleton skeleton;
  GeneratorParams params;
  PoseSequence gt_shapes;  // centralized, canonical frame
  std::vector<Rotation> gt_rotations;
  MeasurementSequence w;

  // 2 * amplitude * angular_step * depth * sum of bone lengths.
  double displacement_bound() const;
};

// Joint angles follow A sin(omega t + phi_j) about a seeded axis per joint;
// the camera turns by `camera_sweep` about a seeded axis from a seeded start.
SyntheticScene generate(const Skeleton& skeleton, const GeneratorParams& params);

// Camera-frame poses R_i S_i paired with their measurements W_i, one row per
// frame of every scene.
PoseDataset camera_frame_dataset(const std::vector<SyntheticScene>& scenes);

// --- files -----------------------------------------------------------------

constexpr int kFileVersion = 1;

// One sequence file: 3D poses or 2D measurements, optionally with per-frame
// rotations and a skeleton.
struct SequenceFile {
  int dims = 3;
  PoseSequence poses;                 // dims == 3
  MeasurementSequence measurements;   // dims == 2
  std::vector<Rotation> rotations;    // empty when absent
  std::optional<Skeleton> skeleton;
  nlohmann::json extra = nlohmann::json::object();  // keys outside the core schema

  std::size_t frames() const { return dims == 3 ? poses.size() : measurements.size(); }
};

nlohmann::json to_json(const SequenceFile& f);
// `origin` prefixes error messages.
SequenceFile sequence_from_json(const nlohmann::json& j, const std::string& origin);

SequenceFile pose_file(const PoseSequence& poses, const std::vector<Rotation>& rotations = {},
                       const Skeleton* skeleton = nullptr);
SequenceFile measurement_file(const MeasurementSequence& w);

void save_sequence(const std::string& path, const SequenceFile& f);
SequenceFile load_sequence(const std::string& path);

// Scene file: the measurement sequence at top level plus "ground_truth",
// "noise_sigma" and "generator".
void save_scene(const std::string& path, const SyntheticScene& scene);
SyntheticScene load_scene(const std::string& path);

// Decomposition file: shapes and rotations at top level plus "reference" and
// "deformations".
void save_decomposition(const std::string& path, const RmnrdDecomposition& d);
RmnrdDecomposition load_decomposition(const std::string& path);

Skeleton skeleton_from_json(const nlohmann::json& j, const std::string& origin);
nlohmann::json skeleton_to_json(const Skeleton& s);

}  // namespace nrsfm
