#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nrsfm/data.h"
#include "nrsfm/metrics.h"
#include "nrsfm/rmnrd.h"
#include "test_support.h"

#include <Eigen/Dense>

#include <algorithm>

using namespace nrsfm;
using nrsfm::testing::random_shape;

namespace {

MeasurementSequence project_all(const std::vector<Rotation>& rots, const PoseSequence& shapes) {
  MeasurementSequence w;
  for (std::size_t i = 0; i < shapes.size(); ++i) w.push_back(project_orthographic(rots[i], shapes[i]));
  return w;
}

// Squared singular values of m from the eigenvalues of m m^T, descending.
std::vector<double> squared_spectrum(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m * m.transpose());
  std::vector<double> v(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
  for (double& x : v) x = std::max(x, 0.0);
  std::sort(v.rbegin(), v.rend());
  return v;
}

}  // namespace

TEST_CASE("reconstruct") {
  std::mt19937_64 rng(1);
  RmnrdDecomposition d;
  d.reference = random_shape(rng, 5);
  d.deformations = {Joints3D::Zero(5, 3), -d.reference, Joints3D(testing::random_matrix(rng, 5, 3))};
  d.rotations.assign(3, Rotation::identity());
  CHECK(d.reconstruct(0) == d.reference);
  CHECK(d.reconstruct(1) == Joints3D::Zero(5, 3));
  CHECK(d.reconstruct(2) == d.reference + d.deformations[2]);
  CHECK_THROWS_AS(d.reconstruct(3), ValidationError);
  d.rotations.pop_back();
  CHECK_THROWS_AS(d.validate(), ValidationError);
}

TEST_CASE("decompose round-trips through the Procrustean mean") {
  std::mt19937_64 rng(2);
  PoseSequence seq;
  for (int i = 0; i < 8; ++i) seq.push_back(random_shape(rng, 9));
  const RmnrdDecomposition d = decompose(seq);
  const GpaResult gpa = generalized_procrustes(seq);
  CHECK((d.reference - gpa.reference).norm() < 1e-12);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    CHECK(d.reconstruct(i) == d.reference + d.deformations[i]);
    CHECK((d.reconstruct(i) - gpa.alignment.aligned[i]).norm() < 1e-9);
    CHECK((d.camera_frame_shapes()[i] - centralize(seq[i])).norm() < 1e-9);
  }
}

TEST_CASE("shape basis model") {
  std::mt19937_64 rng(3);
  ShapeBasisModel m;
  m.bases = {random_shape(rng, 6), random_shape(rng, 6)};
  m.coefficients = testing::random_matrix(rng, 4, 2);
  m.motion.assign(4, Rotation::identity());
  for (std::size_t i = 0; i < 4; ++i) {
    const Joints3D want = m.coefficients(i, 0) * m.bases[0] + m.coefficients(i, 1) * m.bases[1];
    CHECK((m.shape(i) - want).norm() < 1e-12);
  }
  m.coefficients.resize(4, 3);
  CHECK_THROWS_AS(m.validate(), ValidationError);
}

TEST_CASE("measurement matrix layout") {
  std::mt19937_64 rng(4);
  MeasurementSequence w = {testing::random_matrix(rng, 5, 2), testing::random_matrix(rng, 5, 2)};
  const Eigen::MatrixXd m = measurement_matrix(w);
  REQUIRE(m.rows() == 4);
  REQUIRE(m.cols() == 5);
  CHECK(m.row(0) == w[0].col(0).transpose());
  CHECK(m.row(1) == w[0].col(1).transpose());
  CHECK(m.row(3) == w[1].col(1).transpose());
}

TEST_CASE("low-rank factorization") {
  std::mt19937_64 rng(5);
  SUBCASE("exact rank 3K") {
    const Eigen::MatrixXd mm = testing::random_matrix(rng, 20, 6), bb = testing::random_matrix(rng, 6, 17);
    const Eigen::MatrixXd wm = mm * bb;
    MeasurementSequence w;
    for (int i = 0; i < 10; ++i) {
      Joints2D f(17, 2);
      f.col(0) = wm.row(2 * i).transpose();
      f.col(1) = wm.row(2 * i + 1).transpose();
      w.push_back(f);
    }
    const LowRankFactorization r = low_rank_factorize(w, 2);
    CHECK(r.residual < 1e-9);
    CHECK(r.motion.rows() == 20);
    CHECK(r.basis.cols() == 17);
  }
  SUBCASE("rigid sequence at K = 1") {
    const Joints3D s = random_shape(rng, 17);
    std::vector<Rotation> rots;
    for (int i = 0; i < 12; ++i) rots.push_back(Rotation::random(rng));
    CHECK(low_rank_factorize(project_all(rots, PoseSequence(12, s)), 1).residual < 1e-9);
  }
  SUBCASE("Eckart-Young against the eigen spectrum of W W^T") {
    MeasurementSequence w;
    for (int i = 0; i < 20; ++i) w.push_back(testing::random_matrix(rng, 17, 2));
    const auto sq = squared_spectrum(measurement_matrix(w));
    double prev = 1e300;
    for (int k = 1; k <= 4; ++k) {
      const LowRankFactorization r = low_rank_factorize(w, k);
      double tail = 0.0;
      for (std::size_t j = 3 * k; j < sq.size(); ++j) tail += sq[j];
      CHECK(r.residual * r.residual == doctest::Approx(tail).epsilon(1e-8));
      CHECK(r.residual <= prev);
      prev = r.residual;
    }
  }
  SUBCASE("rank bound") {
    MeasurementSequence w(2, Joints2D::Ones(17, 2));
    CHECK_THROWS_AS(low_rank_factorize(w, 2), ValidationError);
    CHECK_THROWS_AS(low_rank_factorize(w, 0), ValidationError);
  }
}

TEST_CASE("rigid factorization recovers shape and motion") {
  std::mt19937_64 rng(6);
  const Joints3D s = random_shape(rng, 12);
  std::vector<Rotation> rots;
  for (int i = 0; i < 10; ++i) rots.push_back(Rotation::random(rng));
  const MeasurementSequence w = project_all(rots, PoseSequence(10, s));
  const RigidFactorization rf = rigid_factorize(w);
  CHECK(rf.residual < 1e-6);
  for (const auto& r : rf.rotations) CHECK(is_rotation(r.matrix(), 1e-9));
  Joints3D flipped = rf.shape;
  flipped.col(2) *= -1.0;
  const double res = std::min(kabsch(rf.shape, s).residual, kabsch(flipped, s).residual);
  CHECK(res < 1e-6 * s.norm());
}

TEST_CASE("fit_sequence from a ground-truth start reports that configuration's loss") {
  GeneratorParams g;
  g.frames = 6;
  g.noise_sigma = 2.0;
  g.seed = 7;
  const SyntheticScene sc = generate(Skeleton::human14(), g);
  RmnrdDecomposition init = decompose(sc.gt_shapes);
  init.rotations.clear();
  for (std::size_t i = 0; i < sc.gt_shapes.size(); ++i) {
    const Rotation to_ref = kabsch(sc.gt_shapes[i], init.reconstruct(i)).rotation;
    init.rotations.push_back(sc.gt_rotations[i] * to_ref.inverse());
  }
  SolverConfig cfg;
  cfg.iterations = 1;
  const FitResult r = fit_sequence(sc.w, nullptr, cfg, &init);
  const LossBreakdown want = total_loss(init, sc.w, nullptr, cfg.loss);
  CHECK(r.trace.front().total == doctest::Approx(want.total).epsilon(1e-9));
  CHECK(r.trace.front().reproj == doctest::Approx(want.reproj).epsilon(1e-9));
  CHECK(r.trace.front().reproj == doctest::Approx(reprojection_loss(sc.gt_rotations, sc.gt_shapes, sc.w)).epsilon(1e-9));
}

TEST_CASE("fit_sequence on a rigid sequence") {
  GeneratorParams g;
  g.deformation_amplitude = 0.0;
  g.seed = 11;
  const SyntheticScene sc = generate(Skeleton::human17(), g);
  SolverConfig cfg;
  cfg.iterations = 3000;
  cfg.seed = 11;
  const FitResult r = fit_sequence(sc.w, nullptr, cfg);
  const RmnrdDecomposition& d = r.decomposition;
  double mean_def = 0.0;
  for (const auto& x : d.deformations) mean_def += x.norm();
  mean_def /= static_cast<double>(d.frames());
  CHECK(mean_def / d.reference.norm() < 0.02);
  const PoseSequence pred = resolve_depth_flip(d.shapes(), sc.gt_shapes);
  CHECK(pa_mpjpe(pred, sc.gt_shapes) < 0.01 * sc.skeleton.mean_bone_length());
  CHECK(d.reference.colwise().mean().cwiseAbs().maxCoeff() < 1e-9);
  CHECK(d.reference.norm() == doctest::Approx(rigid_factorize(sc.w).shape.norm()).epsilon(1e-9));
  for (const auto& rot : d.rotations) CHECK(is_rotation(rot.matrix(), 1e-9));

  // Windowed monotonicity: the best loss of each 50-iteration window does not
  // exceed the best of the previous one. The Procrustes rotations are held
  // constant inside each step, so a slow creep of the proc term is allowed.
  double prev = 1e300;
  for (std::size_t b = 0; b + 50 <= r.trace.size(); b += 50) {
    double best = 1e300;
    for (std::size_t k = b; k < b + 50; ++k) best = std::min(best, r.trace[k].total);
    CHECK(best <= prev * (1.0 + 1e-4));
    prev = best;
  }
}

TEST_CASE("fit_sequence fits a bending rod") {
  GeneratorParams g;
  g.deformation_amplitude = 0.05;
  g.frames = 12;
  g.seed = 3;
  const SyntheticScene sc = generate(Skeleton::rod(10), g);
  SolverConfig cfg;
  cfg.iterations = 3000;
  const FitResult r = fit_sequence(sc.w, nullptr, cfg);
  double wn = 0.0;
  for (const auto& w : sc.w) wn += w.squaredNorm();
  CHECK(r.trace.back().reproj < 1e-3 * wn / static_cast<double>(sc.w.size()));
}

TEST_CASE("fit_sequence is deterministic and validates input") {
  GeneratorParams g;
  g.frames = 5;
  g.seed = 4;
  const SyntheticScene sc = generate(Skeleton::human14(), g);
  SolverConfig cfg;
  cfg.iterations = 30;
  cfg.seed = 9;
  const FitResult a = fit_sequence(sc.w, nullptr, cfg), b = fit_sequence(sc.w, nullptr, cfg);
  CHECK(a.trace.size() == 30);
  for (std::size_t i = 0; i < a.trace.size(); ++i) CHECK(a.trace[i].total == b.trace[i].total);
  CHECK(a.decomposition.reference == b.decomposition.reference);

  MeasurementSequence one(sc.w.begin(), sc.w.begin() + 1);
  CHECK_THROWS_AS(fit_sequence(one, nullptr, cfg), ValidationError);
  cfg.loss.beta[3] = 0.0;
  CHECK_NOTHROW(fit_sequence(one, nullptr, cfg));
  cfg.iterations = 0;
  CHECK_THROWS_AS(fit_sequence(sc.w, nullptr, cfg), ValidationError);
  cfg.iterations = 5;
  cfg.learning_rate = 1e300;
  CHECK_THROWS_AS(fit_sequence(sc.w, nullptr, cfg), NumericalError);
}
