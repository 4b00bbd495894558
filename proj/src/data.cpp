#include "nrsfm/data.h"

#include "nrsfm/io.h"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace nrsfm {

using nlohmann::json;

// --- skeletons -------------------------------------------------------------

std::vector<double> Skeleton::bone_lengths() const {
  std::vector<double> out;
  for (std::size_t j = 0; j < parents.size(); ++j) {
    if (parents[j] >= 0) out.push_back(offsets.row(static_cast<Eigen::Index>(j)).norm());
  }
  return out;
}

double Skeleton::mean_bone_length() const {
  const auto b = bone_lengths();
  if (b.empty()) return 0.0;
  return std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(b.size());
}

int Skeleton::depth() const {
  std::vector<int> d(parents.size(), 0);
  int best = 0;
  for (std::size_t j = 0; j < parents.size(); ++j) {
    if (parents[j] >= 0) d[j] = d[static_cast<std::size_t>(parents[j])] + 1;
    best = std::max(best, d[j]);
  }
  return best;
}

Joints3D Skeleton::rest_pose() const {
  Joints3D pos = Joints3D::Zero(static_cast<Eigen::Index>(joints()), 3);
  for (std::size_t j = 0; j < joints(); ++j) {
    if (parents[j] >= 0) {
      pos.row(static_cast<Eigen::Index>(j)) = pos.row(parents[j]) + offsets.row(static_cast<Eigen::Index>(j));
    }
  }
  return pos;
}

void Skeleton::validate() const {
  if (parents.empty()) throw ValidationError("skeleton '" + name + "' has no joints");
  if (offsets.rows() != static_cast<Eigen::Index>(parents.size())) {
    throw ValidationError("skeleton '" + name + "': offsets and parents differ in length");
  }
  if (!offsets.allFinite()) throw ValidationError("skeleton '" + name + "': non-finite offsets");
  int roots = 0;
  for (std::size_t j = 0; j < parents.size(); ++j) {
    const int p = parents[j];
    if (p == -1) {
      ++roots;
    } else if (p < 0 || static_cast<std::size_t>(p) >= j) {
      throw ValidationError("skeleton '" + name + "': joint " + std::to_string(j) + " has invalid parent " +
                            std::to_string(p));
    } else if (!(offsets.row(static_cast<Eigen::Index>(j)).norm() > 0.0)) {
      throw ValidationError("skeleton '" + name + "': bone to joint " + std::to_string(j) + " has zero length");
    }
  }
  if (roots != 1 || parents[0] != -1) throw ValidationError("skeleton '" + name + "' must have joint 0 as its only root");
}

namespace {

Skeleton make(std::string name, std::vector<int> parents, std::vector<Eigen::RowVector3d> offs) {
  Skeleton s;
  s.name = std::move(name);
  s.parents = std::move(parents);
  s.offsets.resize(static_cast<Eigen::Index>(offs.size()), 3);
  for (std::size_t j = 0; j < offs.size(); ++j) s.offsets.row(static_cast<Eigen::Index>(j)) = offs[j];
  s.validate();
  return s;
}

}  // namespace

// x to the subject's left, y up, z forward.
Skeleton Skeleton::human17() {
  return make("human17", {-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15},
              {{0, 0, 0},
               {-130, 0, 0},     {0, -440, 30},   {0, -430, -40},   // right leg
               {130, 0, 0},      {0, -440, 30},   {0, -430, -40},   // left leg
               {0, 230, 0},      {0, 250, 20},    {0, 110, 60},  {0, 120, -10},  // spine, thorax, nose, head
               {150, 10, -10},   {20, -280, -30}, {0, -250, 80},    // left arm
               {-150, 10, -10},  {-20, -280, -30}, {0, -250, 80}});  // right arm
}

Skeleton Skeleton::human14() {
  return make("human14", {-1, 0, 0, 2, 3, 0, 5, 6, 0, 8, 9, 0, 11, 12},
              {{0, 0, 0},
               {0, 200, 40},
               {-160, -10, -10}, {-20, -280, -30}, {0, -250, 80},
               {160, -10, -10},  {20, -280, -30},  {0, -250, 80},
               {-120, -500, 0},  {0, -440, 30},    {0, -430, -40},
               {120, -500, 0},   {0, -440, 30},    {0, -430, -40}});
}

Skeleton Skeleton::rod(std::size_t joints, double bone) {
  if (joints < 2) throw ValidationError("rod skeleton needs at least 2 joints");
  if (!(bone > 0.0)) throw ValidationError("rod bone length must be positive");
  std::vector<int> parents;
  std::vector<Eigen::RowVector3d> offs;
  for (std::size_t j = 0; j < joints; ++j) {
    parents.push_back(static_cast<int>(j) - 1);
    if (j == 0) {
      offs.emplace_back(0.0, 0.0, 0.0);
      continue;
    }
    const double a = 0.9 * static_cast<double>(j);
    Eigen::RowVector3d d(0.6 * std::cos(a), 1.0, 0.6 * std::sin(a));
    offs.push_back(bone * d.normalized());
  }
  return make("rod", std::move(parents), std::move(offs));
}

Skeleton Skeleton::by_name(const std::string& name, std::size_t joints) {
  if (name == "human17") {
    if (joints != 0 && joints != 17) throw ValidationError("skeleton human17 has 17 joints, requested " + std::to_string(joints));
    return human17();
  }
  if (name == "human14") {
    if (joints != 0 && joints != 14) throw ValidationError("skeleton human14 has 14 joints, requested " + std::to_string(joints));
    return human14();
  }
  if (name == "rod") return rod(joints == 0 ? 10 : joints);
  throw ValidationError("unknown skeleton '" + name + "' (expected human17, human14 or rod)");
}

// --- generator -------------------------------------------------------------

double SyntheticScene::displacement_bound() const {
  const auto b = skeleton.bone_lengths();
  const double total = std::accumulate(b.begin(), b.end(), 0.0);
  return 2.0 * params.deformation_amplitude * params.angular_step * skeleton.depth() * total;
}

SyntheticScene generate(const Skeleton& skeleton, const GeneratorParams& params) {
  skeleton.validate();
  if (params.frames < 1) throw ValidationError("generate: frames must be >= 1");
  if (!(params.deformation_amplitude >= 0.0) || !(params.noise_sigma >= 0.0) || !(params.angular_step >= 0.0) ||
      !std::isfinite(params.camera_sweep)) {
    throw ValidationError("generate: amplitudes must be finite and >= 0");
  }
  std::mt19937_64 rng(params.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
  auto unit = [&] {
    Eigen::Vector3d v;
    do {
      v = Eigen::Vector3d(normal(rng), normal(rng), normal(rng));
    } while (v.norm() < 1e-6);
    return Eigen::Vector3d(v.normalized());
  };

  const std::size_t p = skeleton.joints();
  std::vector<Eigen::Vector3d> axes(p);
  std::vector<double> phases(p);
  for (std::size_t j = 0; j < p; ++j) {
    axes[j] = unit();
    phases[j] = phase(rng);
  }
  const Rotation start = Rotation::random(rng);
  const Eigen::Vector3d cam_axis = unit();

  SyntheticScene s;
  s.skeleton = skeleton;
  s.params = params;
  for (std::size_t i = 0; i < params.frames; ++i) {
    const double t = static_cast<double>(i);
    std::vector<Eigen::Matrix3d> global(p);
    Joints3D pos = Joints3D::Zero(static_cast<Eigen::Index>(p), 3);
    for (std::size_t j = 0; j < p; ++j) {
      const int par = skeleton.parents[j];
      if (par < 0) {
        global[j] = Eigen::Matrix3d::Identity();
        continue;
      }
      const double angle = params.deformation_amplitude * std::sin(params.angular_step * t + phases[j]);
      const Eigen::Matrix3d& gp = global[static_cast<std::size_t>(par)];
      pos.row(static_cast<Eigen::Index>(j)) =
          pos.row(par) + (gp * skeleton.offsets.row(static_cast<Eigen::Index>(j)).transpose()).transpose();
      global[j] = gp * Eigen::AngleAxisd(angle, axes[j]).toRotationMatrix();
    }
    s.gt_shapes.push_back(centralize(pos));
    const double f = params.frames == 1 ? 0.0 : t / static_cast<double>(params.frames - 1);
    s.gt_rotations.push_back(start * Rotation::about_axis(cam_axis, f * params.camera_sweep));
  }
  std::normal_distribution<double> noise(0.0, params.noise_sigma > 0.0 ? params.noise_sigma : 1.0);
  for (std::size_t i = 0; i < params.frames; ++i) {
    Joints2D wi = project_orthographic(s.gt_rotations[i], s.gt_shapes[i]);
    if (params.noise_sigma > 0.0) {
      for (Eigen::Index k = 0; k < wi.size(); ++k) wi.data()[k] += noise(rng);
    }
    s.w.push_back(wi);
  }
  return s;
}

PoseDataset camera_frame_dataset(const std::vector<SyntheticScene>& scenes) {
  std::size_t rows = 0;
  for (const auto& s : scenes) rows += s.gt_shapes.size();
  if (rows == 0) throw ValidationError("no frames to build a pose dataset from");
  const Eigen::Index p = scenes.front().gt_shapes.front().rows();
  PoseDataset d;
  d.poses.resize(static_cast<Eigen::Index>(rows), 3 * p);
  d.conditions.resize(static_cast<Eigen::Index>(rows), 2 * p);
  Eigen::Index r = 0;
  for (const auto& s : scenes) {
    for (std::size_t i = 0; i < s.gt_shapes.size(); ++i, ++r) {
      if (s.gt_shapes[i].rows() != p) throw ValidationError("scenes differ in joint count");
      const Joints3D cam = s.gt_rotations[i].apply(s.gt_shapes[i]);
      for (Eigen::Index j = 0; j < p; ++j) {
        for (int c = 0; c < 3; ++c) d.poses(r, 3 * j + c) = cam(j, c);
        for (int c = 0; c < 2; ++c) d.conditions(r, 2 * j + c) = s.w[i](j, c);
      }
    }
  }
  return d;
}

// --- json ------------------------------------------------------------------

namespace {

[[noreturn]] void fail(const std::string& origin, const std::string& msg) {
  throw ValidationError(origin + ": " + msg);
}

double number(const json& v, const std::string& origin, const std::string& where) {
  if (!v.is_number()) fail(origin, where + " is not a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) fail(origin, where + " is not finite");
  return d;
}

const json& field(const json& j, const std::string& key, const std::string& origin) {
  if (!j.is_object()) fail(origin, "expected a JSON object");
  auto it = j.find(key);
  if (it == j.end()) fail(origin, "missing field '" + key + "'");
  return *it;
}

long long integer(const json& j, const std::string& key, const std::string& origin) {
  const json& v = field(j, key, origin);
  if (!v.is_number_integer()) fail(origin, "field '" + key + "' must be an integer");
  return v.get<long long>();
}

json matrix_rows(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd read_rows(const json& v, Eigen::Index cols, const std::string& origin, const std::string& where) {
  if (!v.is_array()) fail(origin, where + " must be an array");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), cols);
  for (std::size_t r = 0; r < v.size(); ++r) {
    const json& row = v[r];
    const std::string at = where + "[" + std::to_string(r) + "]";
    if (!row.is_array() || row.size() != static_cast<std::size_t>(cols)) {
      fail(origin, at + " must have " + std::to_string(cols) + " coordinates");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(static_cast<Eigen::Index>(r), c) = number(row[static_cast<std::size_t>(c)], origin, at);
    }
  }
  return m;
}

const std::vector<std::string> kCoreKeys = {"version", "num_frames", "num_joints", "dims",
                                            "points",  "rotations",  "skeleton"};

}  // namespace

json skeleton_to_json(const Skeleton& s) {
  return {{"name", s.name}, {"parents", s.parents}, {"offsets", matrix_rows(s.offsets)}};
}

Skeleton skeleton_from_json(const json& j, const std::string& origin) {
  Skeleton s;
  const json& name = field(j, "name", origin);
  if (!name.is_string()) fail(origin, "skeleton field 'name' must be a string");
  s.name = name.get<std::string>();
  const json& parents = field(j, "parents", origin);
  if (!parents.is_array()) fail(origin, "skeleton field 'parents' must be an array");
  for (const auto& p : parents) {
    if (!p.is_number_integer()) fail(origin, "skeleton field 'parents' must hold integers");
    s.parents.push_back(p.get<int>());
  }
  s.offsets = read_rows(field(j, "offsets", origin), 3, origin, "skeleton.offsets");
  try {
    s.validate();
  } catch (const ValidationError& e) {
    fail(origin, e.what());
  }
  return s;
}

json to_json(const SequenceFile& f) {
  json j = json::object();
  j["version"] = kFileVersion;
  j["num_frames"] = f.frames();
  j["dims"] = f.dims;
  json points = json::array();
  std::size_t p = 0;
  if (f.dims == 3) {
    for (const auto& s : f.poses) points.push_back(matrix_rows(s));
    p = f.poses.empty() ? 0 : static_cast<std::size_t>(f.poses[0].rows());
  } else {
    for (const auto& s : f.measurements) points.push_back(matrix_rows(s));
    p = f.measurements.empty() ? 0 : static_cast<std::size_t>(f.measurements[0].rows());
  }
  j["num_joints"] = p;
  j["points"] = std::move(points);
  if (!f.rotations.empty()) {
    json rots = json::array();
    for (const auto& r : f.rotations) rots.push_back(matrix_rows(r.matrix()));
    j["rotations"] = std::move(rots);
  }
  if (f.skeleton) j["skeleton"] = skeleton_to_json(*f.skeleton);
  for (auto it = f.extra.begin(); it != f.extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

SequenceFile sequence_from_json(const json& j, const std::string& origin) {
  if (!j.is_object()) fail(origin, "expected a JSON object");
  const long long version = integer(j, "version", origin);
  if (version != kFileVersion) {
    fail(origin, "unsupported version " + std::to_string(version) + " (expected " + std::to_string(kFileVersion) + ")");
  }
  SequenceFile f;
  const long long dims = integer(j, "dims", origin);
  if (dims != 2 && dims != 3) fail(origin, "field 'dims' must be 2 or 3");
  f.dims = static_cast<int>(dims);
  const long long frames = integer(j, "num_frames", origin);
  const long long joints = integer(j, "num_joints", origin);
  if (frames < 1) fail(origin, "field 'num_frames' must be >= 1");
  if (joints < 1) fail(origin, "field 'num_joints' must be >= 1");
  const json& points = field(j, "points", origin);
  if (!points.is_array()) fail(origin, "field 'points' must be an array");
  if (static_cast<long long>(points.size()) != frames) {
    fail(origin, "field 'num_frames' is " + std::to_string(frames) + " but 'points' has " +
                     std::to_string(points.size()) + " frames");
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    const std::string where = "points[" + std::to_string(i) + "]";
    if (!points[i].is_array() || static_cast<long long>(points[i].size()) != joints) {
      fail(origin, "field 'num_joints' is " + std::to_string(joints) + " but " + where + " has " +
                       std::to_string(points[i].is_array() ? points[i].size() : 0) + " joints");
    }
    const Eigen::MatrixXd m = read_rows(points[i], dims, origin, where);
    if (dims == 3) {
      f.poses.emplace_back(m);
    } else {
      f.measurements.emplace_back(m);
    }
  }
  if (auto it = j.find("rotations"); it != j.end()) {
    if (!it->is_array() || static_cast<long long>(it->size()) != frames) {
      fail(origin, "field 'rotations' must hold one 3x3 matrix per frame");
    }
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string where = "rotations[" + std::to_string(i) + "]";
      const Eigen::Matrix3d m = read_rows((*it)[i], 3, origin, where);
      if (m.rows() != 3) fail(origin, where + " must be 3x3");
      if (!is_rotation(m, 1e-6)) fail(origin, where + " is not a proper rotation");
      // Re-orthonormalize so the stored matrix meets the strict invariant.
      Eigen::Quaterniond q(m);
      q.normalize();
      f.rotations.push_back(is_rotation(m, 1e-9) ? Rotation::from_matrix(m) : Rotation::from_matrix(q.toRotationMatrix()));
    }
  }
  if (auto it = j.find("skeleton"); it != j.end()) {
    f.skeleton = skeleton_from_json(*it, origin);
    if (static_cast<long long>(f.skeleton->joints()) != joints) {
      fail(origin, "field 'num_joints' is " + std::to_string(joints) + " but the skeleton has " +
                       std::to_string(f.skeleton->joints()) + " joints");
    }
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(kCoreKeys.begin(), kCoreKeys.end(), it.key()) == kCoreKeys.end()) f.extra[it.key()] = it.value();
  }
  return f;
}

SequenceFile pose_file(const PoseSequence& poses, const std::vector<Rotation>& rotations, const Skeleton* skeleton) {
  SequenceFile f;
  f.dims = 3;
  f.poses = poses;
  f.rotations = rotations;
  if (skeleton) f.skeleton = *skeleton;
  return f;
}

SequenceFile measurement_file(const MeasurementSequence& w) {
  SequenceFile f;
  f.dims = 2;
  f.measurements = w;
  return f;
}

void save_sequence(const std::string& path, const SequenceFile& f) {
  io::write_file_atomic(path, to_json(f).dump(1) + "\n");
}

SequenceFile load_sequence(const std::string& path) { return sequence_from_json(io::read_json(path), path); }

void save_scene(const std::string& path, const SyntheticScene& scene) {
  SequenceFile f = measurement_file(scene.w);
  f.extra["ground_truth"] = to_json(pose_file(scene.gt_shapes, scene.gt_rotations, &scene.skeleton));
  f.extra["noise_sigma"] = scene.params.noise_sigma;
  const GeneratorParams& p = scene.params;
  f.extra["generator"] = {{"frames", p.frames},
                          {"deformation_amplitude", p.deformation_amplitude},
                          {"angular_step", p.angular_step},
                          {"camera_sweep", p.camera_sweep},
                          {"noise_sigma", p.noise_sigma},
                          {"seed", p.seed}};
  save_sequence(path, f);
}

SyntheticScene load_scene(const std::string& path) {
  const SequenceFile f = load_sequence(path);
  if (f.dims != 2) fail(path, "a scene file stores 2D measurements ('dims' must be 2)");
  auto gt_it = f.extra.find("ground_truth");
  if (gt_it == f.extra.end()) fail(path, "missing field 'ground_truth'");
  const SequenceFile gt = sequence_from_json(*gt_it, path + " (ground_truth)");
  if (gt.dims != 3 || gt.frames() != f.frames() || gt.rotations.empty()) {
    fail(path, "field 'ground_truth' must hold 3D poses and rotations for every frame");
  }
  if (gt.poses[0].rows() != f.measurements[0].rows()) {
    fail(path, "field 'num_joints' differs between the measurements and 'ground_truth'");
  }
  SyntheticScene s;
  s.w = f.measurements;
  s.gt_shapes = gt.poses;
  s.gt_rotations = gt.rotations;
  if (gt.skeleton) s.skeleton = *gt.skeleton;
  if (auto g = f.extra.find("generator"); g != f.extra.end()) {
    try {
      s.params.frames = g->at("frames").get<std::size_t>();
      s.params.deformation_amplitude = g->at("deformation_amplitude").get<double>();
      s.params.angular_step = g->at("angular_step").get<double>();
      s.params.camera_sweep = g->at("camera_sweep").get<double>();
      s.params.noise_sigma = g->at("noise_sigma").get<double>();
      s.params.seed = g->at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
      fail(path, std::string("malformed field 'generator': ") + e.what());
    }
  }
  return s;
}

void save_decomposition(const std::string& path, const RmnrdDecomposition& d) {
  d.validate();
  SequenceFile f = pose_file(d.shapes(), d.rotations);
  f.extra["reference"] = matrix_rows(d.reference);
  json defs = json::array();
  for (const auto& x : d.deformations) defs.push_back(matrix_rows(x));
  f.extra["deformations"] = std::move(defs);
  save_sequence(path, f);
}

RmnrdDecomposition load_decomposition(const std::string& path) {
  const SequenceFile f = load_sequence(path);
  if (f.dims != 3 || f.rotations.empty()) fail(path, "a decomposition file needs 3D points and rotations");
  RmnrdDecomposition d;
  auto ref = f.extra.find("reference");
  auto defs = f.extra.find("deformations");
  if (ref == f.extra.end()) fail(path, "missing field 'reference'");
  if (defs == f.extra.end() || !defs->is_array()) fail(path, "missing field 'deformations'");
  const Eigen::Index p = f.poses[0].rows();
  d.reference = read_rows(*ref, 3, path, "reference");
  if (d.reference.rows() != p) fail(path, "field 'reference' does not match 'num_joints'");
  if (defs->size() != f.frames()) fail(path, "field 'deformations' does not match 'num_frames'");
  for (std::size_t i = 0; i < defs->size(); ++i) {
    Joints3D x = read_rows((*defs)[i], 3, path, "deformations[" + std::to_string(i) + "]");
    if (x.rows() != p) fail(path, "field 'deformations' does not match 'num_joints'");
    d.deformations.push_back(std::move(x));
  }
  d.rotations = f.rotations;
  return d;
}

}  // namespace nrsfm
